#include "uvseg/checkpoint.hpp"

#include "uvseg/error.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace uvs::ckpt {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char magic[8] = {'U', 'V', 'S', 'G', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t version = 1;

} // namespace

const Tensor* Checkpoint::find(const std::string& name) const
{
    for (const auto& t : tensors)
        if (t.name == name) return &t.value;
    return nullptr;
}

void Checkpoint::add(std::string name, Tensor value)
{
    if (find(name)) throw ConfigError("duplicate checkpoint tensor: " + name);
    tensors.push_back({std::move(name), std::move(value)});
}

nlohmann::json manifest(const Checkpoint& ckpt)
{
    nlohmann::json list = nlohmann::json::array();
    for (const auto& t : ckpt.tensors) list.push_back({{"name", t.name}, {"shape", t.value.shape()}});
    return {{"tensors", list}, {"meta", ckpt.meta}};
}

void save(const std::filesystem::path& path, const Checkpoint& ckpt)
{
    nlohmann::json header;
    nlohmann::json list = nlohmann::json::array();
    std::size_t offset = 0;
    for (const auto& t : ckpt.tensors) {
        list.push_back({{"name", t.name}, {"shape", t.value.shape()}, {"offset", offset}});
        offset += t.value.size();
    }
    header["tensors"] = list;
    header["meta"] = ckpt.meta;
    const std::string text = header.dump();

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InvalidInput("cannot write checkpoint " + path.string());
    const std::uint64_t len = text.size();
    out.write(magic, sizeof magic);
    out.write(reinterpret_cast<const char*>(&version), sizeof version);
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& t : ckpt.tensors)
        out.write(reinterpret_cast<const char*>(t.value.data()), static_cast<std::streamsize>(t.value.size() * sizeof(double)));
    if (!out) throw InvalidInput("failed writing checkpoint " + path.string());
}

Checkpoint load(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ArtifactMismatch("cannot open checkpoint " + path.string());
    char m[8];
    std::uint32_t ver = 0;
    std::uint64_t len = 0;
    in.read(m, sizeof m);
    in.read(reinterpret_cast<char*>(&ver), sizeof ver);
    in.read(reinterpret_cast<char*>(&len), sizeof len);
    if (!in || std::memcmp(m, magic, sizeof magic) != 0) throw ArtifactMismatch(path.string() + " is not a checkpoint");
    if (ver != version) throw ArtifactMismatch("unsupported checkpoint version " + std::to_string(ver));
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ArtifactMismatch("corrupt checkpoint header in " + path.string() + ": " + e.what());
    }
    Checkpoint ckpt;
    ckpt.meta = header.value("meta", nlohmann::json::object());
    const auto data_start = in.tellg();
    for (const auto& rec : header.at("tensors")) {
        Shape shape = rec.at("shape").get<Shape>();
        Tensor t(shape);
        const auto offset = rec.at("offset").get<std::uint64_t>();
        in.seekg(data_start + static_cast<std::streamoff>(offset * sizeof(double)));
        in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
        if (!in) throw ArtifactMismatch("truncated checkpoint " + path.string());
        ckpt.tensors.push_back({rec.at("name").get<std::string>(), std::move(t)});
    }
    return ckpt;
}

void add_store(Checkpoint& ckpt, const std::string& prefix, const nn::ParamStore& store)
{
    for (const auto& [name, v] : store.entries()) ckpt.add(prefix + name, v.value());
}

void load_store(const Checkpoint& ckpt, const std::string& prefix, nn::ParamStore& store)
{
    for (const auto& [name, v] : store.entries()) {
        const Tensor* t = ckpt.find(prefix + name);
        if (!t) throw ArtifactMismatch("checkpoint is missing tensor " + prefix + name);
        if (t->shape() != v.shape())
            throw ArtifactMismatch("tensor " + prefix + name + " has shape " + shape_str(t->shape()) + ", model expects " +
                                   shape_str(v.shape()));
    }
    for (auto& [name, v] : store.entries()) {
        ag::Var var = v;
        var.mutable_value() = *ckpt.find(prefix + name);
    }
}

} // namespace uvs::ckpt
