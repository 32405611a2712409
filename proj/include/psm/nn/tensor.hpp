#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace psm::nn {

using Shape = std::vector<int>;

std::size_t numel(const Shape& s);
std::string shape_str(const Shape& s);

struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // sized like data once gradients flow
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this node's grad and accumulates into the parents' grads.
    std::function<void(Node&)> backward_fn;

    bool is_leaf() const { return !backward_fn; }
    std::vector<double>& ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
        return grad;
    }
};

/// Shared handle to a node of the reverse-mode graph. Copies alias the same
/// storage; use clone() for a deep copy.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    int dim(int i) const;
    int rank() const { return static_cast<int>(node_->shape.size()); }
    std::size_t numel() const { return node_->data.size(); }

    std::span<double> data() { return node_->data; }
    std::span<const double> data() const { return node_->data; }
    std::span<double> grad() { return node_->ensure_grad(); }
    std::span<const double> grad() const { return node_->ensure_grad(); }
    bool has_grad() const { return node_->grad.size() == node_->data.size(); }
    bool requires_grad() const { return node_->requires_grad; }
    double item() const;

    void zero_grad();
    /// Reverse-mode accumulation from this scalar. Leaf gradients accumulate
    /// across calls; interior gradients are recomputed each call.
    void backward();

    /// Deep copy of shape and data as a new leaf.
    Tensor clone(bool requires_grad) const;
    /// Same data, cut from the graph.
    Tensor detach() const { return clone(false); }

    Node* node() const { return node_.get(); }
    const std::shared_ptr<Node>& ptr() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

/// Graph recording is thread-local; inference and finite-difference probes run
/// under NoGradGuard.
bool grad_enabled();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

/// Creates an op output. When recording and any parent requires grad, the
/// output joins the graph with `backward` as its local rule.
Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
                   std::function<void(Node&)> backward);

}  // namespace psm::nn
