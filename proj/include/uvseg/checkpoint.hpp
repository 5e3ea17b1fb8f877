#pragma once

// Binary weight container:
//
//   bytes 0..7    magic "UVSGCKPT"
//   bytes 8..11   format version (uint32, little endian), currently 1
//   bytes 12..19  header length N (uint64, little endian)
//   next N bytes  UTF-8 JSON header:
//                   {"tensors": [{"name", "shape", "offset"}...], "meta": {...}}
//                 offsets count doubles from the start of the data section
//   remainder     IEEE-754 float64 little-endian tensor data
//
// The "tensors" array is the parameter manifest (names and shapes).

#include "uvseg/nn.hpp"
#include "uvseg/tensor.hpp"

#include "json.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace uvs::ckpt {

struct TensorRecord {
    std::string name;
    Tensor value;
};

struct Checkpoint {
    nlohmann::json meta = nlohmann::json::object();
    std::vector<TensorRecord> tensors;

    const Tensor* find(const std::string& name) const;
    void add(std::string name, Tensor value);
};

void save(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load(const std::filesystem::path& path);

/// {"tensors": [{"name", "shape"}...], "meta": ...}
nlohmann::json manifest(const Checkpoint& ckpt);

/// Appends every entry of `store` as "<prefix><name>".
void add_store(Checkpoint& ckpt, const std::string& prefix, const nn::ParamStore& store);

/// Copies "<prefix><name>" tensors into `store`; ArtifactMismatch on a missing
/// tensor or a shape disagreement.
void load_store(const Checkpoint& ckpt, const std::string& prefix, nn::ParamStore& store);

} // namespace uvs::ckpt
