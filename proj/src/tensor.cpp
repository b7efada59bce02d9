#include "caranet/tensor.hpp"

#include <sstream>
#include <unordered_set>

namespace caranet {

Index shape_numel(const Shape& shape)
{
    Index n = 1;
    for (Index e : shape) {
        if (e < 0) throw ShapeError("negative extent in shape " + shape_str(shape));
        n *= e;
    }
    return n;
}

std::string shape_str(const Shape& shape)
{
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ')';
    return os.str();
}

namespace {
thread_local bool grad_mode_enabled = true;
}

bool GradMode::enabled() { return grad_mode_enabled; }
void GradMode::set_enabled(bool on) { grad_mode_enabled = on; }

namespace detail {

template <typename Scalar>
Tensor<Scalar> make_result(const char* op, Shape shape, typename Tensor<Scalar>::Array values,
                           std::vector<std::shared_ptr<Node<Scalar>>> parents,
                           std::function<void(Node<Scalar>&)> backward_fn)
{
    if (!values.allFinite()) throw NumericError(std::string("non-finite value produced by ") + op);
    auto node = std::make_shared<Node<Scalar>>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->op = op;
    bool record = false;
    if (GradMode::enabled()) {
        for (const auto& p : parents)
            if (p && p->requires_grad) record = true;
    }
    if (record) {
        node->requires_grad = true;
        node->parents = std::move(parents);
        node->backward_fn = std::move(backward_fn);
    }
    return Tensor<Scalar>::wrap(std::move(node));
}

}  // namespace detail

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, Array values, bool requires_grad)
{
    if (shape_numel(shape) != values.size())
        throw ShapeError("shape " + shape_str(shape) + " does not match " + std::to_string(values.size()) +
                         " values");
    if (!values.allFinite()) throw NumericError("non-finite value in tensor construction");
    node_ = std::make_shared<detail::Node<Scalar>>();
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::zeros(Shape shape, bool requires_grad)
{
    const Index n = shape_numel(shape);
    return Tensor(std::move(shape), Array::Zero(n), requires_grad);
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::full(Shape shape, Scalar value, bool requires_grad)
{
    const Index n = shape_numel(shape);
    return Tensor(std::move(shape), Array::Constant(n, value), requires_grad);
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::from(Shape shape, std::initializer_list<Scalar> values, bool requires_grad)
{
    Array a(static_cast<Index>(values.size()));
    Index i = 0;
    for (Scalar v : values) a[i++] = v;
    return Tensor(std::move(shape), std::move(a), requires_grad);
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::scalar(Scalar value, bool requires_grad)
{
    return Tensor(Shape{}, Array::Constant(1, value), requires_grad);
}

template <typename Scalar>
detail::Node<Scalar>& Tensor<Scalar>::node() const
{
    if (!node_) throw std::logic_error("use of undefined tensor");
    return *node_;
}

template <typename Scalar>
Index Tensor<Scalar>::dim(int axis) const
{
    const int r = rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw ShapeError("axis out of range for shape " + shape_str(shape()));
    return shape()[static_cast<std::size_t>(axis)];
}

template <typename Scalar>
Scalar Tensor<Scalar>::item() const
{
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node().value[0];
}

template <typename Scalar>
typename Tensor<Scalar>::Array Tensor<Scalar>::grad() const
{
    if (has_grad()) return node().grad;
    return Array::Zero(numel());
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::detach() const
{
    return Tensor(shape(), values(), false);
}

template <typename Scalar>
void Tensor<Scalar>::backward() const
{
    auto& root = node();
    if (root.value.size() != 1) throw ShapeError("backward() requires a scalar root, got " + shape_str(root.shape));
    if (!root.requires_grad) throw std::logic_error("backward() on a tensor that does not require grad");

    using NodeT = detail::Node<Scalar>;
    // Iterative post-order DFS gives a topological order (inputs before
    // outputs). Holding shared pointers keeps every node alive while the
    // history is released below.
    std::vector<std::shared_ptr<NodeT>> order;
    std::unordered_set<NodeT*> visited;
    std::vector<std::pair<std::shared_ptr<NodeT>, std::size_t>> stack;
    stack.emplace_back(node_, 0);
    visited.insert(node_.get());
    while (!stack.empty()) {
        NodeT* n = stack.back().first.get();
        std::size_t& next = stack.back().second;
        if (next < n->parents.size()) {
            std::shared_ptr<NodeT> p = n->parents[next++];
            if (p->requires_grad && !visited.count(p.get())) {
                visited.insert(p.get());
                stack.emplace_back(std::move(p), 0);
            }
        } else {
            order.push_back(std::move(stack.back().first));
            stack.pop_back();
        }
    }

    root.grad_buffer()[0] += Scalar(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        NodeT* n = it->get();
        if (!n->backward_fn) continue;
        if (n->grad.size() == n->value.size()) {
            if (!n->grad.allFinite()) throw NumericError(std::string("non-finite gradient at ") + n->op);
            n->backward_fn(*n);
        }
        // Release the recorded history; intermediate gradients are not kept.
        n->backward_fn = nullptr;
        n->parents.clear();
        if (n != node_.get()) n->grad.resize(0);
    }
    for (const auto& n : order)
        if (n->grad.size() && !n->grad.allFinite()) throw NumericError(std::string("non-finite gradient at ") + n->op);
}

template class Tensor<float>;
template class Tensor<double>;
template Tensor<float> detail::make_result<float>(const char*, Shape, Tensor<float>::Array,
                                                  std::vector<std::shared_ptr<detail::Node<float>>>,
                                                  std::function<void(detail::Node<float>&)>);
template Tensor<double> detail::make_result<double>(const char*, Shape, Tensor<double>::Array,
                                                    std::vector<std::shared_ptr<detail::Node<double>>>,
                                                    std::function<void(detail::Node<double>&)>);

}  // namespace caranet
