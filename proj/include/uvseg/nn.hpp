#pragma once

#include "uvseg/autograd.hpp"
#include "uvseg/rng.hpp"

#include <string>
#include <utility>
#include <vector>

namespace uvs::nn {

using ag::Var;

/// Ordered, named collection of parameters. Registration order is the
/// serialisation and hashing order.
class ParamStore {
public:
    Var add(const std::string& name, Tensor init, bool trainable = true);
    Var get(const std::string& name) const;
    bool contains(const std::string& name) const;

    const std::vector<std::pair<std::string, Var>>& entries() const noexcept { return entries_; }
    std::size_t size() const noexcept { return entries_.size(); }
    std::size_t numel() const;

    void set_trainable(bool on);
    void zero_grad();

    /// Merges another store's entries under `prefix` (entries are shared, not copied).
    void adopt(const std::string& prefix, const ParamStore& other);

    /// Copies values from `other` by name; shapes must agree.
    void load_values(const ParamStore& other);

    /// Hex SHA-256 over (name, shape, raw little-endian doubles) of every entry.
    std::string sha256() const;

private:
    std::vector<std::pair<std::string, Var>> entries_;
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), the usual default for dense and conv layers.
Tensor uniform_init(Shape shape, std::size_t fan_in, Rng& rng);
Tensor normal_init(Shape shape, double stddev, Rng& rng);

struct Linear {
    Var weight; // in x out
    Var bias;   // out
    Var operator()(const Var& tokens) const;
};

struct Conv2d {
    Var weight; // out x in x k x k
    Var bias;
    std::size_t stride = 1;
    std::size_t pad = 0;
    Var operator()(const Var& x) const;
};

struct ConvTranspose2d {
    Var weight; // in x out x s x s
    Var bias;
    std::size_t stride = 2;
    Var operator()(const Var& x) const;
};

/// Layer norm over the last axis of a token matrix, with affine parameters.
struct LayerNorm {
    Var gamma;
    Var beta;
    Var operator()(const Var& tokens) const;
};

/// Layer norm over channels of a C x H x W map, with affine parameters.
struct LayerNorm2d {
    Var gamma;
    Var beta;
    Var operator()(const Var& x) const;
};

Linear make_linear(ParamStore& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                   bool bias = true);
Conv2d make_conv(ParamStore& ps, const std::string& name, std::size_t in, std::size_t out, std::size_t k,
                 std::size_t stride, std::size_t pad, Rng& rng);
ConvTranspose2d make_conv_transpose(ParamStore& ps, const std::string& name, std::size_t in,
                                    std::size_t out, std::size_t stride, Rng& rng);
LayerNorm make_layer_norm(ParamStore& ps, const std::string& name, std::size_t dim);
LayerNorm2d make_layer_norm2d(ParamStore& ps, const std::string& name, std::size_t channels);

/// Single-head scaled dot-product attention with input and output projections.
struct Attention {
    Linear q, k, v, out;
    Var operator()(const Var& queries, const Var& keys, const Var& values) const;
};

Attention make_attention(ParamStore& ps, const std::string& name, std::size_t dim, std::size_t inner,
                         Rng& rng);

/// Stack of Linear layers with ReLU between them (none after the last).
struct Mlp {
    std::vector<Linear> layers;
    Var operator()(const Var& x) const;
};

Mlp make_mlp(ParamStore& ps, const std::string& name, std::size_t in, std::size_t hidden, std::size_t out,
             std::size_t depth, Rng& rng);

} // namespace uvs::nn
