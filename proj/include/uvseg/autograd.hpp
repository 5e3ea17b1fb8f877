#pragma once

// Tape-free reverse-mode automatic differentiation over Tensor values.
//
// Every operation returns a Var that owns a graph node. Nodes keep their
// inputs alive, so the graph lives exactly as long as the Vars that reference
// it. A node requires a gradient iff at least one of its inputs does; frozen
// parameters are leaves with requires_grad == false, which lets gradients
// flow *through* frozen layers to trainable inputs without ever touching the
// frozen weights themselves.

#include "uvseg/tensor.hpp"

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace uvs::ag {

struct Node;
using BackwardFn = std::function<void(Node&)>;

struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    BackwardFn backward;

    /// Gradient buffer, zero-initialised on first use.
    Tensor& grad_buffer();
    void accumulate(const Tensor& g);
};

class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    static Var constant(Tensor value);
    static Var parameter(Tensor value, bool trainable = true);

    bool defined() const noexcept { return static_cast<bool>(node_); }
    const Tensor& value() const { return node_->value; }
    Tensor& mutable_value() { return node_->value; }
    const Tensor& grad() const { return node_->grad; }
    bool has_grad() const { return node_ && !node_->grad.empty(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }
    const Shape& shape() const { return node_->value.shape(); }
    std::size_t dim(std::size_t axis) const { return node_->value.dim(axis); }
    const char* op() const { return node_->op; }
    void zero_grad() { node_->grad = Tensor(); }

    Node* node() const noexcept { return node_.get(); }
    const std::shared_ptr<Node>& ptr() const noexcept { return node_; }

private:
    std::shared_ptr<Node> node_;
};

/// Builds an op node. `backward` is dropped when no input requires a gradient.
Var make_op(Tensor value, std::vector<Var> inputs, const char* op, BackwardFn backward);

/// Runs reverse accumulation from a scalar root (seed 1) or with an explicit seed.
void backward(const Var& root);
void backward(const Var& root, const Tensor& seed);

/// Operation names of the graph reachable from root, in topological order.
std::vector<std::string> trace_ops(const Var& root);

// Elementwise
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var relu(const Var& a);
Var gelu(const Var& a);
Var sigmoid(const Var& a);
Var detach(const Var& a);
/// Identity carrying `label` as its op name, so graph traces show where values came from.
Var tag(const Var& a, const char* label);

// Row/channel broadcasting. `v` holds D (or C) values in any shape.
Var add_rowvec(const Var& x, const Var& v);
Var mul_rowvec(const Var& x, const Var& v);
Var add_channel_bias(const Var& x, const Var& b);
Var broadcast_rows(const Var& v, std::size_t rows);

// Linear algebra and layout
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var reshape(const Var& a, Shape shape);
Var chw_to_tokens(const Var& x);
Var tokens_to_chw(const Var& t, std::size_t height, std::size_t width);
Var concat0(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
Var slice_rows(const Var& x, std::size_t begin, std::size_t end);

// Normalisation
Var layer_norm_rows(const Var& x, double eps = 1e-6);
Var layer_norm_channels(const Var& x, double eps = 1e-6);
Var softmax_rows(const Var& x);

// Spatial
Var conv2d(const Var& x, const Var& w, const Var& b, std::size_t stride, std::size_t pad);
Var conv_transpose2d(const Var& x, const Var& w, const Var& b, std::size_t stride);
Var resize_bilinear(const Var& x, std::size_t height, std::size_t width);
Var avg_pool(const Var& x, std::size_t k);
Var mean_spatial(const Var& x);
Var mean_rows(const Var& x);

// Reductions
Var sum(const Var& x);
Var mean(const Var& x);

} // namespace uvs::ag
