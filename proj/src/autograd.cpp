#include "uvseg/autograd.hpp"

#include "uvseg/error.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <unordered_set>

namespace uvs::ag {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

ConstMatMap as_mat(const Tensor& t, std::size_t rows, std::size_t cols)
{
    return ConstMatMap(t.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

MatMap as_mat(Tensor& t, std::size_t rows, std::size_t cols)
{
    return MatMap(t.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

void require(bool cond, const std::string& what)
{
    if (!cond) throw InvalidInput(what);
}

void require_same_shape(const Var& a, const Var& b, const char* op)
{
    if (a.shape() != b.shape())
        throw InvalidInput(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                           shape_str(b.shape()));
}

bool wants(const std::shared_ptr<Node>& n) { return n->requires_grad; }

} // namespace

Tensor& Node::grad_buffer()
{
    if (grad.empty()) grad = Tensor(value.shape(), 0.0);
    return grad;
}

void Node::accumulate(const Tensor& g)
{
    Tensor& buf = grad_buffer();
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
}

Var Var::constant(Tensor value)
{
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->op = "const";
    return Var(std::move(n));
}

Var Var::parameter(Tensor value, bool trainable)
{
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = trainable;
    n->op = "param";
    return Var(std::move(n));
}

Var make_op(Tensor value, std::vector<Var> inputs, const char* op, BackwardFn backward)
{
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->op = op;
    n->inputs.reserve(inputs.size());
    for (auto& v : inputs) {
        if (!v.defined()) continue;
        n->requires_grad = n->requires_grad || v.requires_grad();
        n->inputs.push_back(v.ptr());
    }
    if (n->requires_grad) n->backward = std::move(backward);
    return Var(std::move(n));
}

namespace {

std::vector<Node*> topo_order(Node* root, bool grad_only)
{
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{root, 0}};
    seen.insert(root);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node* child = node->inputs[next++].get();
            if ((!grad_only || child->requires_grad) && seen.insert(child).second)
                stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    return order;
}

} // namespace

void backward(const Var& root)
{
    if (root.value().size() != 1) throw InvalidInput("backward: root must be a scalar");
    backward(root, Tensor(root.shape(), 1.0));
}

void backward(const Var& root, const Tensor& seed)
{
    if (!root.requires_grad()) return;
    if (seed.shape() != root.shape()) throw InvalidInput("backward: seed shape mismatch");
    root.node()->accumulate(seed);
    auto order = topo_order(root.node(), true);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward && !n->grad.empty()) n->backward(*n);
    }
}

std::vector<std::string> trace_ops(const Var& root)
{
    std::vector<std::string> ops;
    for (Node* n : topo_order(root.node(), false)) ops.emplace_back(n->op);
    return ops;
}

// ---------------------------------------------------------------------------
// Elementwise

Var add(const Var& a, const Var& b)
{
    require_same_shape(a, b, "add");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
    return make_op(std::move(out), {a, b}, "add", [](Node& n) {
        for (auto& in : n.inputs)
            if (wants(in)) in->accumulate(n.grad);
    });
}

Var sub(const Var& a, const Var& b)
{
    require_same_shape(a, b, "sub");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
    return make_op(std::move(out), {a, b}, "sub", [](Node& n) {
        if (wants(n.inputs[0])) n.inputs[0]->accumulate(n.grad);
        if (wants(n.inputs[1])) {
            Tensor& g = n.inputs[1]->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i];
        }
    });
}

Var mul(const Var& a, const Var& b)
{
    require_same_shape(a, b, "mul");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
    return make_op(std::move(out), {a, b}, "mul", [](Node& n) {
        auto& x = n.inputs[0];
        auto& y = n.inputs[1];
        if (wants(x)) {
            Tensor& g = x->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * y->value[i];
        }
        if (wants(y)) {
            Tensor& g = y->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * x->value[i];
        }
    });
}

Var scale(const Var& a, double s)
{
    Tensor out = a.value();
    for (double& v : out.values()) v *= s;
    return make_op(std::move(out), {a}, "scale", [s](Node& n) {
        Tensor& g = n.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * n.grad[i];
    });
}

Var relu(const Var& a)
{
    Tensor out = a.value();
    for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
    return make_op(std::move(out), {a}, "relu", [](Node& n) {
        Tensor& g = n.inputs[0]->grad_buffer();
        const Tensor& x = n.inputs[0]->value;
        for (std::size_t i = 0; i < g.size(); ++i)
            if (x[i] > 0.0) g[i] += n.grad[i];
    });
}

Var gelu(const Var& a)
{
    Tensor out = a.value();
    for (double& v : out.values()) v = 0.5 * v * (1.0 + std::erf(v / std::numbers::sqrt2));
    return make_op(std::move(out), {a}, "gelu", [](Node& n) {
        Tensor& g = n.inputs[0]->grad_buffer();
        const Tensor& x = n.inputs[0]->value;
        const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double cdf = 0.5 * (1.0 + std::erf(x[i] / std::numbers::sqrt2));
            const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x[i] * x[i]);
            g[i] += n.grad[i] * (cdf + x[i] * pdf);
        }
    });
}

Var sigmoid(const Var& a)
{
    Tensor out = a.value();
    for (double& v : out.values()) v = 1.0 / (1.0 + std::exp(-v));
    return make_op(out, {a}, "sigmoid", [](Node& n) {
        Tensor& g = n.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double s = n.value[i];
            g[i] += n.grad[i] * s * (1.0 - s);
        }
    });
}

Var tag(const Var& a, const char* label)
{
    return make_op(a.value(), {a}, label, [](Node& n) {
        if (wants(n.inputs[0])) n.inputs[0]->accumulate(n.grad);
    });
}

Var detach(const Var& a)
{
    return Var::constant(a.value());
}

// ---------------------------------------------------------------------------
// Broadcasting

Var add_rowvec(const Var& x, const Var& v)
{
    require(x.value().rank() == 2, "add_rowvec: x must be rank 2");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    require(v.value().size() == cols, "add_rowvec: vector length mismatch");
    Tensor out = x.value();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out.at(r, c) += v.value()[c];
    return make_op(std::move(out), {x, v}, "add_rowvec", [rows, cols](Node& n) {
        if (wants(n.inputs[0])) n.inputs[0]->accumulate(n.grad);
        if (wants(n.inputs[1])) {
            Tensor& g = n.inputs[1]->grad_buffer();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) g[c] += n.grad.at(r, c);
        }
    });
}

Var mul_rowvec(const Var& x, const Var& v)
{
    require(x.value().rank() == 2, "mul_rowvec: x must be rank 2");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    require(v.value().size() == cols, "mul_rowvec: vector length mismatch");
    Tensor out = x.value();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out.at(r, c) *= v.value()[c];
    return make_op(std::move(out), {x, v}, "mul_rowvec", [rows, cols](Node& n) {
        const Tensor& xv = n.inputs[0]->value;
        const Tensor& vv = n.inputs[1]->value;
        if (wants(n.inputs[0])) {
            Tensor& g = n.inputs[0]->grad_buffer();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) g.at(r, c) += n.grad.at(r, c) * vv[c];
        }
        if (wants(n.inputs[1])) {
            Tensor& g = n.inputs[1]->grad_buffer();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) g[c] += n.grad.at(r, c) * xv.at(r, c);
        }
    });
}

Var add_channel_bias(const Var& x, const Var& b)
{
    require(x.value().rank() == 3, "add_channel_bias: x must be C x H x W");
    const std::size_t channels = x.dim(0), plane = x.dim(1) * x.dim(2);
    require(b.value().size() == channels, "add_channel_bias: bias length mismatch");
    Tensor out = x.value();
    for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t i = 0; i < plane; ++i) out[c * plane + i] += b.value()[c];
    return make_op(std::move(out), {x, b}, "add_channel_bias", [channels, plane](Node& n) {
        if (wants(n.inputs[0])) n.inputs[0]->accumulate(n.grad);
        if (wants(n.inputs[1])) {
            Tensor& g = n.inputs[1]->grad_buffer();
            for (std::size_t c = 0; c < channels; ++c)
                for (std::size_t i = 0; i < plane; ++i) g[c] += n.grad[c * plane + i];
        }
    });
}

Var broadcast_rows(const Var& v, std::size_t rows)
{
    const std::size_t cols = v.value().size();
    Tensor out({rows, cols});
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out.at(r, c) = v.value()[c];
    return make_op(std::move(out), {v}, "broadcast_rows", [rows, cols](Node& n) {
        Tensor& g = n.inputs[0]->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) g[c] += n.grad.at(r, c);
    });
}

// ---------------------------------------------------------------------------
// Linear algebra and layout

Var matmul(const Var& a, const Var& b)
{
    require(a.value().rank() == 2 && b.value().rank() == 2, "matmul: operands must be rank 2");
    const std::size_t m = a.dim(0), k = a.dim(1), nn = b.dim(1);
    if (b.dim(0) != k)
        throw InvalidInput("matmul: inner dimension mismatch " + shape_str(a.shape()) + " x " +
                           shape_str(b.shape()));
    Tensor out({m, nn});
    as_mat(out, m, nn).noalias() = as_mat(a.value(), m, k) * as_mat(b.value(), k, nn);
    return make_op(std::move(out), {a, b}, "matmul", [m, k, nn](Node& n) {
        auto& x = n.inputs[0];
        auto& y = n.inputs[1];
        const auto g = as_mat(n.grad, m, nn);
        if (wants(x)) as_mat(x->grad_buffer(), m, k).noalias() += g * as_mat(y->value, k, nn).transpose();
        if (wants(y)) as_mat(y->grad_buffer(), k, nn).noalias() += as_mat(x->value, m, k).transpose() * g;
    });
}

Var transpose(const Var& a)
{
    require(a.value().rank() == 2, "transpose: operand must be rank 2");
    const std::size_t r = a.dim(0), c = a.dim(1);
    Tensor out({c, r});
    as_mat(out, c, r) = as_mat(a.value(), r, c).transpose();
    return make_op(std::move(out), {a}, "transpose", [r, c](Node& n) {
        as_mat(n.inputs[0]->grad_buffer(), r, c) += as_mat(n.grad, c, r).transpose();
    });
}

Var reshape(const Var& a, Shape shape)
{
    Tensor out = a.value().reshaped(std::move(shape));
    return make_op(std::move(out), {a}, "reshape", [](Node& n) {
        Tensor& g = n.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    });
}

Var chw_to_tokens(const Var& x)
{
    require(x.value().rank() == 3, "chw_to_tokens: expected C x H x W");
    const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
    Tensor out({hw, c});
    as_mat(out, hw, c) = as_mat(x.value(), c, hw).transpose();
    return make_op(std::move(out), {x}, "chw_to_tokens", [c, hw](Node& n) {
        as_mat(n.inputs[0]->grad_buffer(), c, hw) += as_mat(n.grad, hw, c).transpose();
    });
}

Var tokens_to_chw(const Var& t, std::size_t height, std::size_t width)
{
    require(t.value().rank() == 2 && t.dim(0) == height * width, "tokens_to_chw: token count mismatch");
    const std::size_t c = t.dim(1), hw = height * width;
    Tensor out({c, height, width});
    as_mat(out, c, hw) = as_mat(t.value(), hw, c).transpose();
    return make_op(std::move(out), {t}, "tokens_to_chw", [c, hw](Node& n) {
        as_mat(n.inputs[0]->grad_buffer(), hw, c) += as_mat(n.grad, c, hw).transpose();
    });
}

Var concat0(const std::vector<Var>& parts)
{
    require(!parts.empty(), "concat0: no inputs");
    Shape shape = parts.front().shape();
    std::size_t lead = 0;
    for (const auto& p : parts) {
        require(p.value().rank() == shape.size(), "concat0: rank mismatch");
        for (std::size_t ax = 1; ax < shape.size(); ++ax)
            require(p.dim(ax) == shape[ax], "concat0: trailing shape mismatch");
        lead += p.dim(0);
    }
    shape[0] = lead;
    Tensor out(shape);
    std::size_t offset = 0;
    std::vector<std::size_t> offsets;
    for (const auto& p : parts) {
        offsets.push_back(offset);
        std::copy(p.value().data(), p.value().data() + p.value().size(), out.data() + offset);
        offset += p.value().size();
    }
    return make_op(std::move(out), parts, "concat0", [offsets](Node& n) {
        // make_op skips undefined inputs; concat0 never receives those.
        for (std::size_t i = 0; i < n.inputs.size(); ++i) {
            if (!wants(n.inputs[i])) continue;
            Tensor& g = n.inputs[i]->grad_buffer();
            for (std::size_t j = 0; j < g.size(); ++j) g[j] += n.grad[offsets[i] + j];
        }
    });
}

Var concat_cols(const std::vector<Var>& parts)
{
    require(!parts.empty(), "concat_cols: no inputs");
    const std::size_t rows = parts.front().dim(0);
    std::size_t cols = 0;
    std::vector<std::size_t> offsets, widths;
    for (const auto& p : parts) {
        require(p.value().rank() == 2 && p.dim(0) == rows, "concat_cols: row count mismatch");
        offsets.push_back(cols);
        widths.push_back(p.dim(1));
        cols += p.dim(1);
    }
    Tensor out({rows, cols});
    for (std::size_t i = 0; i < parts.size(); ++i)
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < widths[i]; ++c) out.at(r, offsets[i] + c) = parts[i].value().at(r, c);
    return make_op(std::move(out), parts, "concat_cols", [offsets, widths, rows](Node& n) {
        for (std::size_t i = 0; i < n.inputs.size(); ++i) {
            if (!wants(n.inputs[i])) continue;
            Tensor& g = n.inputs[i]->grad_buffer();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < widths[i]; ++c) g.at(r, c) += n.grad.at(r, offsets[i] + c);
        }
    });
}

Var slice_rows(const Var& x, std::size_t begin, std::size_t end)
{
    require(x.value().rank() >= 1 && begin <= end && end <= x.dim(0), "slice_rows: range out of bounds");
    Shape shape = x.shape();
    const std::size_t stride = x.value().size() / shape[0];
    shape[0] = end - begin;
    Tensor out(shape);
    std::copy(x.value().data() + begin * stride, x.value().data() + end * stride, out.data());
    return make_op(std::move(out), {x}, "slice_rows", [begin, stride](Node& n) {
        Tensor& g = n.inputs[0]->grad_buffer();
        for (std::size_t j = 0; j < n.grad.size(); ++j) g[begin * stride + j] += n.grad[j];
    });
}

// ---------------------------------------------------------------------------
// Normalisation

Var layer_norm_rows(const Var& x, double eps)
{
    require(x.value().rank() == 2, "layer_norm_rows: expected rank 2");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    Tensor out({rows, cols});
    std::vector<double> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        double mu = 0.0;
        for (std::size_t c = 0; c < cols; ++c) mu += x.value().at(r, c);
        mu /= static_cast<double>(cols);
        double var = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            const double d = x.value().at(r, c) - mu;
            var += d * d;
        }
        var /= static_cast<double>(cols);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t c = 0; c < cols; ++c) out.at(r, c) = (x.value().at(r, c) - mu) * inv_std[r];
    }
    return make_op(std::move(out), {x}, "layer_norm", [rows, cols, inv_std](Node& n) {
        Tensor& g = n.inputs[0]->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
            double mean_g = 0.0, mean_gy = 0.0;
            for (std::size_t c = 0; c < cols; ++c) {
                mean_g += n.grad.at(r, c);
                mean_gy += n.grad.at(r, c) * n.value.at(r, c);
            }
            mean_g /= static_cast<double>(cols);
            mean_gy /= static_cast<double>(cols);
            for (std::size_t c = 0; c < cols; ++c)
                g.at(r, c) += inv_std[r] * (n.grad.at(r, c) - mean_g - n.value.at(r, c) * mean_gy);
        }
    });
}

Var layer_norm_channels(const Var& x, double eps)
{
    require(x.value().rank() == 3, "layer_norm_channels: expected C x H x W");
    const std::size_t channels = x.dim(0), plane = x.dim(1) * x.dim(2);
    Tensor out(x.shape());
    std::vector<double> inv_std(plane);
    const Tensor& xv = x.value();
    for (std::size_t p = 0; p < plane; ++p) {
        double mu = 0.0;
        for (std::size_t c = 0; c < channels; ++c) mu += xv[c * plane + p];
        mu /= static_cast<double>(channels);
        double var = 0.0;
        for (std::size_t c = 0; c < channels; ++c) {
            const double d = xv[c * plane + p] - mu;
            var += d * d;
        }
        var /= static_cast<double>(channels);
        inv_std[p] = 1.0 / std::sqrt(var + eps);
        for (std::size_t c = 0; c < channels; ++c) out[c * plane + p] = (xv[c * plane + p] - mu) * inv_std[p];
    }
    return make_op(std::move(out), {x}, "layer_norm2d", [channels, plane, inv_std](Node& n) {
        Tensor& g = n.inputs[0]->grad_buffer();
        for (std::size_t p = 0; p < plane; ++p) {
            double mean_g = 0.0, mean_gy = 0.0;
            for (std::size_t c = 0; c < channels; ++c) {
                mean_g += n.grad[c * plane + p];
                mean_gy += n.grad[c * plane + p] * n.value[c * plane + p];
            }
            mean_g /= static_cast<double>(channels);
            mean_gy /= static_cast<double>(channels);
            for (std::size_t c = 0; c < channels; ++c) {
                const std::size_t i = c * plane + p;
                g[i] += inv_std[p] * (n.grad[i] - mean_g - n.value[i] * mean_gy);
            }
        }
    });
}

Var softmax_rows(const Var& x)
{
    require(x.value().rank() == 2, "softmax_rows: expected rank 2");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    Tensor out({rows, cols});
    for (std::size_t r = 0; r < rows; ++r) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < cols; ++c) mx = std::max(mx, x.value().at(r, c));
        double z = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            out.at(r, c) = std::exp(x.value().at(r, c) - mx);
            z += out.at(r, c);
        }
        for (std::size_t c = 0; c < cols; ++c) out.at(r, c) /= z;
    }
    return make_op(std::move(out), {x}, "softmax", [rows, cols](Node& n) {
        Tensor& g = n.inputs[0]->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (std::size_t c = 0; c < cols; ++c) dot += n.grad.at(r, c) * n.value.at(r, c);
            for (std::size_t c = 0; c < cols; ++c) g.at(r, c) += n.value.at(r, c) * (n.grad.at(r, c) - dot);
        }
    });
}

// ---------------------------------------------------------------------------
// Spatial

namespace {

struct ConvGeom {
    std::size_t cin, h, w, k, stride, pad, ho, wo;
};

void im2col(const double* x, const ConvGeom& g, double* cols)
{
    const std::size_t out_plane = g.ho * g.wo;
    for (std::size_t c = 0; c < g.cin; ++c)
        for (std::size_t ky = 0; ky < g.k; ++ky)
            for (std::size_t kx = 0; kx < g.k; ++kx) {
                double* row = cols + ((c * g.k + ky) * g.k + kx) * out_plane;
                for (std::size_t oy = 0; oy < g.ho; ++oy) {
                    const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
                    for (std::size_t ox = 0; ox < g.wo; ++ox) {
                        const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
                        const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(g.h) &&
                                            ix < static_cast<long>(g.w);
                        row[oy * g.wo + ox] = inside ? x[(c * g.h + iy) * g.w + ix] : 0.0;
                    }
                }
            }
}

void col2im(const double* cols, const ConvGeom& g, double* x)
{
    const std::size_t out_plane = g.ho * g.wo;
    for (std::size_t c = 0; c < g.cin; ++c)
        for (std::size_t ky = 0; ky < g.k; ++ky)
            for (std::size_t kx = 0; kx < g.k; ++kx) {
                const double* row = cols + ((c * g.k + ky) * g.k + kx) * out_plane;
                for (std::size_t oy = 0; oy < g.ho; ++oy) {
                    const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
                    if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
                    for (std::size_t ox = 0; ox < g.wo; ++ox) {
                        const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
                        if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
                        x[(c * g.h + iy) * g.w + ix] += row[oy * g.wo + ox];
                    }
                }
            }
}

} // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, std::size_t stride, std::size_t pad)
{
    require(x.value().rank() == 3, "conv2d: input must be C x H x W");
    require(w.value().rank() == 4, "conv2d: weight must be O x C x k x k");
    require(stride >= 1, "conv2d: stride must be positive");
    const std::size_t cout = w.dim(0), k = w.dim(2);
    if (w.dim(1) != x.dim(0) || w.dim(3) != k)
        throw InvalidInput("conv2d: weight " + shape_str(w.shape()) + " incompatible with input " +
                           shape_str(x.shape()));
    if (x.dim(1) + 2 * pad < k || x.dim(2) + 2 * pad < k)
        throw InvalidInput("conv2d: kernel larger than padded input");
    ConvGeom g{x.dim(0), x.dim(1), x.dim(2), k, stride, pad, 0, 0};
    g.ho = (g.h + 2 * pad - k) / stride + 1;
    g.wo = (g.w + 2 * pad - k) / stride + 1;
    const std::size_t patch = g.cin * k * k, out_plane = g.ho * g.wo;
    if (b.defined()) require(b.value().size() == cout, "conv2d: bias length mismatch");

    Tensor cols({patch, out_plane});
    im2col(x.value().data(), g, cols.data());
    Tensor out({cout, g.ho, g.wo});
    auto y = as_mat(out, cout, out_plane);
    y.noalias() = as_mat(w.value(), cout, patch) * as_mat(cols, patch, out_plane);
    if (b.defined())
        for (std::size_t o = 0; o < cout; ++o) y.row(static_cast<Eigen::Index>(o)).array() += b.value()[o];

    const bool need_grad = x.requires_grad() || w.requires_grad() || (b.defined() && b.requires_grad());
    if (!need_grad) cols = Tensor();
    const bool has_bias = b.defined();
    return make_op(std::move(out), {x, w, b}, "conv2d",
                   [g, cout, patch, out_plane, has_bias, cols = std::move(cols)](Node& n) {
                       auto& xn = n.inputs[0];
                       auto& wn = n.inputs[1];
                       const auto gy = as_mat(n.grad, cout, out_plane);
                       if (wants(wn))
                           as_mat(wn->grad_buffer(), cout, patch).noalias() +=
                               gy * as_mat(cols, patch, out_plane).transpose();
                       if (has_bias && wants(n.inputs[2])) {
                           Tensor& gb = n.inputs[2]->grad_buffer();
                           for (std::size_t o = 0; o < cout; ++o) gb[o] += gy.row(static_cast<Eigen::Index>(o)).sum();
                       }
                       if (wants(xn)) {
                           Tensor dcols({patch, out_plane});
                           as_mat(dcols, patch, out_plane).noalias() =
                               as_mat(wn->value, cout, patch).transpose() * gy;
                           col2im(dcols.data(), g, xn->grad_buffer().data());
                       }
                   });
}

Var conv_transpose2d(const Var& x, const Var& w, const Var& b, std::size_t stride)
{
    require(x.value().rank() == 3 && w.value().rank() == 4, "conv_transpose2d: bad ranks");
    const std::size_t cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
    const std::size_t cout = w.dim(1), k = w.dim(2);
    require(w.dim(0) == cin && k == stride && w.dim(3) == k,
            "conv_transpose2d: weight must be Cin x Cout x s x s");
    if (b.defined()) require(b.value().size() == cout, "conv_transpose2d: bias length mismatch");
    const std::size_t plane = h * wd, taps = cout * k * k;
    // cols[(co, i, j), p] = sum_ci w[ci, (co, i, j)] * x[ci, p]
    Tensor cols({taps, plane});
    as_mat(cols, taps, plane).noalias() = as_mat(w.value(), cin, taps).transpose() * as_mat(x.value(), cin, plane);
    const std::size_t ho = h * k, wo = wd * k;
    Tensor out({cout, ho, wo});
    for (std::size_t co = 0; co < cout; ++co)
        for (std::size_t i = 0; i < k; ++i)
            for (std::size_t j = 0; j < k; ++j) {
                const double* row = cols.data() + ((co * k + i) * k + j) * plane;
                const double bias = b.defined() ? b.value()[co] : 0.0;
                for (std::size_t y = 0; y < h; ++y)
                    for (std::size_t xx = 0; xx < wd; ++xx)
                        out.at(co, y * k + i, xx * k + j) = row[y * wd + xx] + bias;
            }
    const bool has_bias = b.defined();
    return make_op(std::move(out), {x, w, b}, "conv_transpose2d",
                   [cin, cout, k, h, wd, plane, taps, has_bias](Node& n) {
                       Tensor gcols({taps, plane});
                       for (std::size_t co = 0; co < cout; ++co)
                           for (std::size_t i = 0; i < k; ++i)
                               for (std::size_t j = 0; j < k; ++j) {
                                   double* row = gcols.data() + ((co * k + i) * k + j) * plane;
                                   for (std::size_t y = 0; y < h; ++y)
                                       for (std::size_t xx = 0; xx < wd; ++xx)
                                           row[y * wd + xx] = n.grad.at(co, y * k + i, xx * k + j);
                               }
                       auto& xn = n.inputs[0];
                       auto& wn = n.inputs[1];
                       if (wants(xn))
                           as_mat(xn->grad_buffer(), cin, plane).noalias() +=
                               as_mat(wn->value, cin, taps) * as_mat(gcols, taps, plane);
                       if (wants(wn))
                           as_mat(wn->grad_buffer(), cin, taps).noalias() +=
                               as_mat(xn->value, cin, plane) * as_mat(gcols, taps, plane).transpose();
                       if (has_bias && wants(n.inputs[2])) {
                           Tensor& gb = n.inputs[2]->grad_buffer();
                           for (std::size_t co = 0; co < cout; ++co)
                               for (std::size_t t = 0; t < k * k * plane; ++t) gb[co] += gcols[co * k * k * plane + t];
                       }
                   });
}

namespace {

// Source taps for half-pixel-centre bilinear sampling along one axis.
struct Taps {
    std::vector<std::size_t> i0, i1;
    std::vector<double> w1;
};

Taps bilinear_taps(std::size_t in, std::size_t out)
{
    Taps t;
    t.i0.resize(out);
    t.i1.resize(out);
    t.w1.resize(out);
    const double ratio = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
        double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
        if (src < 0.0) src = 0.0;
        std::size_t lo = static_cast<std::size_t>(std::floor(src));
        if (lo > in - 1) lo = in - 1;
        t.i0[o] = lo;
        t.i1[o] = std::min(lo + 1, in - 1);
        t.w1[o] = src - static_cast<double>(lo);
    }
    return t;
}

} // namespace

Var resize_bilinear(const Var& x, std::size_t height, std::size_t width)
{
    require(x.value().rank() == 3, "resize_bilinear: expected C x H x W");
    require(height > 0 && width > 0, "resize_bilinear: empty target");
    const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (h == height && w == width) return x;
    const Taps ty = bilinear_taps(h, height), tx = bilinear_taps(w, width);
    Tensor out({c, height, width});
    const Tensor& xv = x.value();
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < height; ++y) {
            const double wy = ty.w1[y];
            for (std::size_t xx = 0; xx < width; ++xx) {
                const double wx = tx.w1[xx];
                const double top = (1 - wx) * xv.at(ch, ty.i0[y], tx.i0[xx]) + wx * xv.at(ch, ty.i0[y], tx.i1[xx]);
                const double bot = (1 - wx) * xv.at(ch, ty.i1[y], tx.i0[xx]) + wx * xv.at(ch, ty.i1[y], tx.i1[xx]);
                out.at(ch, y, xx) = (1 - wy) * top + wy * bot;
            }
        }
    return make_op(std::move(out), {x}, "resize_bilinear", [c, height, width, ty, tx](Node& n) {
        Tensor& g = n.inputs[0]->grad_buffer();
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t y = 0; y < height; ++y) {
                const double wy = ty.w1[y];
                for (std::size_t xx = 0; xx < width; ++xx) {
                    const double wx = tx.w1[xx];
                    const double go = n.grad.at(ch, y, xx);
                    g.at(ch, ty.i0[y], tx.i0[xx]) += go * (1 - wy) * (1 - wx);
                    g.at(ch, ty.i0[y], tx.i1[xx]) += go * (1 - wy) * wx;
                    g.at(ch, ty.i1[y], tx.i0[xx]) += go * wy * (1 - wx);
                    g.at(ch, ty.i1[y], tx.i1[xx]) += go * wy * wx;
                }
            }
    });
}

Var avg_pool(const Var& x, std::size_t k)
{
    require(x.value().rank() == 3, "avg_pool: expected C x H x W");
    if (k <= 1) return x;
    const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    require(h % k == 0 && w % k == 0, "avg_pool: spatial dims must be divisible by the window");
    const std::size_t ho = h / k, wo = w / k;
    const double inv = 1.0 / static_cast<double>(k * k);
    Tensor out({c, ho, wo});
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t xx = 0; xx < w; ++xx) out.at(ch, y / k, xx / k) += inv * x.value().at(ch, y, xx);
    return make_op(std::move(out), {x}, "avg_pool", [c, h, w, k, inv](Node& n) {
        Tensor& g = n.inputs[0]->grad_buffer();
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t xx = 0; xx < w; ++xx) g.at(ch, y, xx) += inv * n.grad.at(ch, y / k, xx / k);
    });
}

Var mean_spatial(const Var& x)
{
    require(x.value().rank() == 3, "mean_spatial: expected C x H x W");
    const std::size_t c = x.dim(0), plane = x.dim(1) * x.dim(2);
    Tensor out({1, c});
    for (std::size_t ch = 0; ch < c; ++ch) {
        double s = 0.0;
        for (std::size_t i = 0; i < plane; ++i) s += x.value()[ch * plane + i];
        out[ch] = s / static_cast<double>(plane);
    }
    return make_op(std::move(out), {x}, "mean_spatial", [c, plane](Node& n) {
        Tensor& g = n.inputs[0]->grad_buffer();
        const double inv = 1.0 / static_cast<double>(plane);
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < plane; ++i) g[ch * plane + i] += inv * n.grad[ch];
    });
}

Var mean_rows(const Var& x)
{
    require(x.value().rank() == 2 && x.dim(0) > 0, "mean_rows: expected non-empty rank 2");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    Tensor out({1, cols});
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out[c] += x.value().at(r, c) / static_cast<double>(rows);
    return make_op(std::move(out), {x}, "mean_rows", [rows, cols](Node& n) {
        Tensor& g = n.inputs[0]->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) g.at(r, c) += n.grad[c] / static_cast<double>(rows);
    });
}

Var sum(const Var& x)
{
    Tensor out = Tensor::scalar(x.value().sum());
    return make_op(std::move(out), {x}, "sum", [](Node& n) {
        Tensor& g = n.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[0];
    });
}

Var mean(const Var& x)
{
    const double count = static_cast<double>(x.value().size());
    Tensor out = Tensor::scalar(x.value().sum() / count);
    return make_op(std::move(out), {x}, "mean", [count](Node& n) {
        Tensor& g = n.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[0] / count;
    });
}

} // namespace uvs::ag
