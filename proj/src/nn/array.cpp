#include "px3d/nn/array.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

#include "px3d/error.hpp"

namespace px3d::nn {

std::int64_t numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream ss;
    ss << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) ss << (i ? "," : "") << shape[i];
    ss << ')';
    return ss.str();
}

std::vector<double>& detail::Node::ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
}

namespace {

thread_local bool g_grad_enabled = true;

std::shared_ptr<detail::Node> make_leaf(Shape shape, std::vector<double> values, bool requires_grad) {
    for (auto d : shape)
        if (d < 0) throw ShapeError("Array: negative dimension in " + shape_str(shape));
    if (static_cast<std::int64_t>(values.size()) != numel(shape))
        throw ShapeError("Array: " + std::to_string(values.size()) + " values for shape " + shape_str(shape));
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return n;
}

const detail::Node& checked(const std::shared_ptr<detail::Node>& n) {
    if (!n) throw ShapeError("Array: use of an undefined array");
    return *n;
}

}  // namespace

Array::Array(Shape shape, double fill, bool requires_grad) {
    const auto n = nn::numel(shape);
    node_ = make_leaf(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), fill), requires_grad);
}

Array::Array(Shape shape, std::vector<double> values, bool requires_grad)
    : node_(make_leaf(std::move(shape), std::move(values), requires_grad)) {}

Array Array::scalar(double v) { return Array(Shape{}, std::vector<double>{v}); }

const Shape& Array::shape() const { return checked(node_).shape; }

std::int64_t Array::dim(int axis) const {
    const auto& s = shape();
    if (axis < 0) axis += static_cast<int>(s.size());
    if (axis < 0 || axis >= static_cast<int>(s.size()))
        throw ShapeError("Array::dim: axis out of range for " + shape_str(s));
    return s[static_cast<std::size_t>(axis)];
}

std::int64_t Array::numel() const { return nn::numel(shape()); }

std::span<const double> Array::values() const { return checked(node_).value; }

std::span<double> Array::mutable_values() {
    checked(node_);
    return node_->value;
}

double Array::item() const {
    const auto& n = checked(node_);
    if (n.value.size() != 1) throw ShapeError("Array::item on shape " + shape_str(n.shape));
    return n.value[0];
}

bool Array::requires_grad() const { return checked(node_).requires_grad; }

void Array::set_requires_grad(bool on) {
    checked(node_);
    node_->requires_grad = on;
}

bool Array::has_grad() const { return !checked(node_).grad.empty(); }

std::span<const double> Array::grad() const { return checked(node_).grad; }

std::span<double> Array::mutable_grad() {
    checked(node_);
    return node_->ensure_grad();
}

void Array::zero_grad() {
    checked(node_);
    node_->grad.clear();
}

const char* Array::op_name() const { return checked(node_).op; }

Array Array::detach() const {
    const auto& n = checked(node_);
    return Array(n.shape, n.value, false);
}

void Array::backward() const {
    const auto& root = checked(node_);
    if (root.value.size() != 1) throw ShapeError("backward: expected a scalar, got " + shape_str(root.shape));
    if (!root.requires_grad) return;

    // Iterative post-order DFS gives a topological order.
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->inputs.size()) {
            detail::Node* child = n->inputs[next++].get();
            if (child && child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    for (detail::Node* n : order)
        if (!n->is_leaf) n->grad.clear();
    node_->ensure_grad()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* n = *it;
        if (n->is_leaf || !n->backward || n->grad.empty()) continue;
        n->backward(*n);
        n->grad.clear();
        n->grad.shrink_to_fit();
    }
    for (detail::Node* n : order)
        if (n->is_leaf && !n->grad.empty()) check_finite(n->grad, "gradient");
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void check_finite(std::span<const double> values, const char* what) {
    for (double v : values)
        if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + what);
}

namespace {

template <typename Range>
Array make_result_impl(const char* op, Shape shape, std::vector<double> values, const Range& inputs,
                       std::function<void(detail::Node&)> backward) {
    check_finite(values, op);
    auto node = make_leaf(std::move(shape), std::move(values), false);
    node->op = op;
    node->is_leaf = false;
    bool needs = false;
    if (g_grad_enabled)
        for (const Array& a : inputs)
            if (a.defined() && a.requires_grad()) needs = true;
    if (needs) {
        node->requires_grad = true;
        for (const Array& a : inputs) node->inputs.push_back(a.node());
        node->backward = std::move(backward);
    }
    return Array(std::move(node));
}

}  // namespace

Array make_result(const char* op, Shape shape, std::vector<double> values, std::initializer_list<Array> inputs,
                  std::function<void(detail::Node&)> backward) {
    return make_result_impl(op, std::move(shape), std::move(values), inputs, std::move(backward));
}

Array make_result(const char* op, Shape shape, std::vector<double> values, const std::vector<Array>& inputs,
                  std::function<void(detail::Node&)> backward) {
    return make_result_impl(op, std::move(shape), std::move(values), inputs, std::move(backward));
}

}  // namespace px3d::nn
