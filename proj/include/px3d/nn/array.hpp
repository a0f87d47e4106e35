#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace px3d::nn {

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  ///< empty until first touched by backward
    bool requires_grad = false;
    bool is_leaf = true;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    /// Propagates this node's grad into its inputs' grads.
    std::function<void(Node& self)> backward;

    std::vector<double>& ensure_grad();
    bool input_needs_grad(std::size_t i) const { return inputs[i] && inputs[i]->requires_grad; }
};

}  // namespace detail

/// N-dimensional float64 array with reverse-mode autodiff. Copies share the
/// underlying storage; use clone() or detach() for an independent copy.
class Array {
public:
    Array() = default;
    explicit Array(Shape shape, double fill = 0.0, bool requires_grad = false);
    Array(Shape shape, std::vector<double> values, bool requires_grad = false);

    static Array scalar(double v);

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const;
    std::int64_t dim(int axis) const;
    int rank() const { return static_cast<int>(shape().size()); }
    std::int64_t numel() const;

    std::span<const double> values() const;
    /// Mutable access bypasses the graph; only use on leaves.
    std::span<double> mutable_values();
    double item() const;

    bool requires_grad() const;
    void set_requires_grad(bool on);
    bool has_grad() const;
    std::span<const double> grad() const;
    std::span<double> mutable_grad();
    void zero_grad();

    /// Reverse-mode sweep from this scalar. Leaf grads accumulate.
    void backward() const;

    /// Same values, no graph history, no grad requirement.
    Array detach() const;
    Array clone() const { return detach(); }
    const char* op_name() const;

    const std::shared_ptr<detail::Node>& node() const { return node_; }
    explicit Array(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<detail::Node> node_;
};

bool grad_enabled();

/// Disables graph recording for its lifetime (evaluation, optimizer steps).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

/// Builds an op result. Values are checked for NaN/Inf (NumericError naming
/// the op). The graph edge is recorded only when grad mode is on and some
/// input requires grad.
Array make_result(const char* op, Shape shape, std::vector<double> values, std::initializer_list<Array> inputs,
                  std::function<void(detail::Node&)> backward);
Array make_result(const char* op, Shape shape, std::vector<double> values, const std::vector<Array>& inputs,
                  std::function<void(detail::Node&)> backward);

void check_finite(std::span<const double> values, const char* what);

}  // namespace px3d::nn
