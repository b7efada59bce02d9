#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace caranet {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

/// Raised when a forward or backward pass produces NaN/Inf.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Raised on extent/rank/argument mismatches.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

Index shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Thread-local switch for recording the autodiff graph.
class GradMode {
public:
    static bool enabled();
    static void set_enabled(bool on);
};

/// RAII guard that disables graph recording (evaluation, optimizer updates).
class NoGradGuard {
public:
    NoGradGuard() : previous_(GradMode::enabled()) { GradMode::set_enabled(false); }
    ~NoGradGuard() { GradMode::set_enabled(previous_); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

namespace detail {

// One recorded operation. The node owning an operation's output also owns the
// backward rule; parents are the operation's inputs.
template <typename Scalar>
struct Node {
    using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

    Shape shape;
    Array value;
    Array grad;  // empty until something flows into it
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    Array& grad_buffer()
    {
        if (grad.size() != value.size()) grad = Array::Zero(value.size());
        return grad;
    }
};

}  // namespace detail

/// Dense row-major N-dimensional array with optional reverse-mode gradient
/// tracking. Copies share the underlying node (handle semantics); values are
/// immutable once produced by an operation, only parameters are mutated in
/// place by optimizers.
template <typename Scalar>
class Tensor {
public:
    using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
    using NodePtr = std::shared_ptr<detail::Node<Scalar>>;

    Tensor() = default;
    Tensor(Shape shape, Array values, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, Scalar value, bool requires_grad = false);
    static Tensor from(Shape shape, std::initializer_list<Scalar> values, bool requires_grad = false);
    static Tensor scalar(Scalar value, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node().shape; }
    Index dim(int axis) const;
    int rank() const { return static_cast<int>(shape().size()); }
    Index numel() const { return node().value.size(); }

    const Array& values() const { return node().value; }
    /// Mutable access for parameter updates and test fixtures; never call on
    /// a tensor that is part of a live graph.
    Array& mutable_values() { return node().value; }
    const Scalar* data() const { return node().value.data(); }
    Scalar item() const;

    bool requires_grad() const { return node().requires_grad; }
    bool has_grad() const { return node().grad.size() == node().value.size(); }
    /// Gradient buffer; zeros if nothing has flowed into this tensor yet.
    Array grad() const;
    Array& mutable_grad() { return node().grad_buffer(); }
    void zero_grad() { node().grad.resize(0); }

    /// Reverse-mode sweep from this scalar root. Gradients accumulate into
    /// every reachable grad-tracked tensor; the recorded graph is released.
    void backward() const;

    /// Same values, no history.
    Tensor detach() const;

    const NodePtr& node_ptr() const { return node_; }
    static Tensor wrap(NodePtr node) { Tensor t; t.node_ = std::move(node); return t; }

private:
    detail::Node<Scalar>& node() const;
    NodePtr node_;
};

template <typename Scalar>
using TensorList = std::vector<Tensor<Scalar>>;

namespace detail {

// Builds an output node; when recording, attaches parents and the backward rule.
template <typename Scalar>
Tensor<Scalar> make_result(const char* op, Shape shape, typename Tensor<Scalar>::Array values,
                           std::vector<std::shared_ptr<Node<Scalar>>> parents,
                           std::function<void(Node<Scalar>&)> backward_fn);

}  // namespace detail

}  // namespace caranet
