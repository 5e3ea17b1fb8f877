#include "uvseg/nn.hpp"

#include "uvseg/error.hpp"

#include <openssl/evp.h>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <memory>

namespace uvs::nn {

Var ParamStore::add(const std::string& name, Tensor init, bool trainable)
{
    if (contains(name)) throw ConfigError("duplicate parameter name: " + name);
    Var v = Var::parameter(std::move(init), trainable);
    entries_.emplace_back(name, v);
    return v;
}

Var ParamStore::get(const std::string& name) const
{
    for (const auto& [n, v] : entries_)
        if (n == name) return v;
    throw ConfigError("unknown parameter: " + name);
}

bool ParamStore::contains(const std::string& name) const
{
    for (const auto& e : entries_)
        if (e.first == name) return true;
    return false;
}

std::size_t ParamStore::numel() const
{
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.second.value().size();
    return n;
}

void ParamStore::set_trainable(bool on)
{
    for (auto& e : entries_) e.second.set_requires_grad(on);
}

void ParamStore::zero_grad()
{
    for (auto& e : entries_) e.second.zero_grad();
}

void ParamStore::adopt(const std::string& prefix, const ParamStore& other)
{
    for (const auto& [n, v] : other.entries_) {
        const std::string full = prefix + n;
        if (contains(full)) throw ConfigError("duplicate parameter name: " + full);
        entries_.emplace_back(full, v);
    }
}

void ParamStore::load_values(const ParamStore& other)
{
    for (auto& [n, v] : entries_) {
        const Var src = other.get(n);
        if (src.shape() != v.shape())
            throw ArtifactMismatch("parameter " + n + " has shape " + shape_str(src.shape()) + ", expected " +
                                   shape_str(v.shape()));
        v.mutable_value() = src.value();
    }
}

std::string ParamStore::sha256() const
{
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), &EVP_MD_CTX_free);
    EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr);
    for (const auto& [name, v] : entries_) {
        EVP_DigestUpdate(ctx.get(), name.data(), name.size() + 1);
        for (std::size_t d : v.shape()) {
            const auto d64 = static_cast<std::uint64_t>(d);
            EVP_DigestUpdate(ctx.get(), &d64, sizeof d64);
        }
        EVP_DigestUpdate(ctx.get(), v.value().data(), v.value().size() * sizeof(double));
    }
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx.get(), digest, &len);
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 0xf]);
    }
    return out;
}

Tensor uniform_init(Shape shape, std::size_t fan_in, Rng& rng)
{
    Tensor t(std::move(shape));
    const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(fan_in, 1)));
    for (double& v : t.values()) v = rng.uniform(-bound, bound);
    return t;
}

Tensor normal_init(Shape shape, double stddev, Rng& rng)
{
    Tensor t(std::move(shape));
    for (double& v : t.values()) v = stddev * rng.normal();
    return t;
}

Var Linear::operator()(const Var& tokens) const
{
    Var y = ag::matmul(tokens, weight);
    return bias.defined() ? ag::add_rowvec(y, bias) : y;
}

Var Conv2d::operator()(const Var& x) const
{
    return ag::conv2d(x, weight, bias, stride, pad);
}

Var ConvTranspose2d::operator()(const Var& x) const
{
    return ag::conv_transpose2d(x, weight, bias, stride);
}

Var LayerNorm::operator()(const Var& tokens) const
{
    return ag::add_rowvec(ag::mul_rowvec(ag::layer_norm_rows(tokens), gamma), beta);
}

Var LayerNorm2d::operator()(const Var& x) const
{
    const std::size_t h = x.dim(1), w = x.dim(2);
    Var t = ag::chw_to_tokens(ag::layer_norm_channels(x));
    return ag::tokens_to_chw(ag::add_rowvec(ag::mul_rowvec(t, gamma), beta), h, w);
}

Linear make_linear(ParamStore& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng, bool bias)
{
    Linear l;
    l.weight = ps.add(name + ".weight", uniform_init({in, out}, in, rng));
    if (bias) l.bias = ps.add(name + ".bias", uniform_init({out}, in, rng));
    return l;
}

Conv2d make_conv(ParamStore& ps, const std::string& name, std::size_t in, std::size_t out, std::size_t k,
                 std::size_t stride, std::size_t pad, Rng& rng)
{
    Conv2d c;
    const std::size_t fan_in = in * k * k;
    c.weight = ps.add(name + ".weight", uniform_init({out, in, k, k}, fan_in, rng));
    c.bias = ps.add(name + ".bias", uniform_init({out}, fan_in, rng));
    c.stride = stride;
    c.pad = pad;
    return c;
}

ConvTranspose2d make_conv_transpose(ParamStore& ps, const std::string& name, std::size_t in, std::size_t out,
                                    std::size_t stride, Rng& rng)
{
    ConvTranspose2d c;
    c.weight = ps.add(name + ".weight", uniform_init({in, out, stride, stride}, in, rng));
    c.bias = ps.add(name + ".bias", uniform_init({out}, in, rng));
    c.stride = stride;
    return c;
}

LayerNorm make_layer_norm(ParamStore& ps, const std::string& name, std::size_t dim)
{
    return {ps.add(name + ".weight", Tensor({dim}, 1.0)), ps.add(name + ".bias", Tensor({dim}, 0.0))};
}

LayerNorm2d make_layer_norm2d(ParamStore& ps, const std::string& name, std::size_t channels)
{
    return {ps.add(name + ".weight", Tensor({channels}, 1.0)), ps.add(name + ".bias", Tensor({channels}, 0.0))};
}

Var Attention::operator()(const Var& queries, const Var& keys, const Var& values) const
{
    Var qp = q(queries);
    Var kp = k(keys);
    Var vp = v(values);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(qp.dim(1)));
    Var logits = ag::scale(ag::matmul(qp, ag::transpose(kp)), inv_sqrt);
    return out(ag::matmul(ag::softmax_rows(logits), vp));
}

Attention make_attention(ParamStore& ps, const std::string& name, std::size_t dim, std::size_t inner, Rng& rng)
{
    return {make_linear(ps, name + ".q_proj", dim, inner, rng), make_linear(ps, name + ".k_proj", dim, inner, rng),
            make_linear(ps, name + ".v_proj", dim, inner, rng), make_linear(ps, name + ".out_proj", inner, dim, rng)};
}

Var Mlp::operator()(const Var& x) const
{
    Var h = x;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        h = layers[i](h);
        if (i + 1 < layers.size()) h = ag::relu(h);
    }
    return h;
}

Mlp make_mlp(ParamStore& ps, const std::string& name, std::size_t in, std::size_t hidden, std::size_t out,
             std::size_t depth, Rng& rng)
{
    Mlp m;
    for (std::size_t i = 0; i < depth; ++i) {
        const std::size_t a = i == 0 ? in : hidden;
        const std::size_t b = i + 1 == depth ? out : hidden;
        m.layers.push_back(make_linear(ps, name + ".layers." + std::to_string(i), a, b, rng));
    }
    return m;
}

} // namespace uvs::nn
