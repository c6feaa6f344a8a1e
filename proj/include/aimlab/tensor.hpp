#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "aimlab/errors.hpp"
#include "aimlab/rng.hpp"

namespace aimlab {

class Tensor;

namespace detail {

struct Node {
    std::vector<std::size_t> shape;
    std::vector<double> data;
    std::vector<double> grad; // allocated zero-filled iff requires_grad
    bool requires_grad = false;

    // graph info, empty for leaves
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    std::size_t size() const { return data.size(); }
    bool is_leaf() const { return parents.empty(); }
};

} // namespace detail

// Records primitive applications in creation order, which is by construction
// a topological order. backward() replays it once, in reverse.
class Tape {
public:
    static Tape* current();

    void record(std::shared_ptr<detail::Node> node) { nodes_.push_back(std::move(node)); }
    std::size_t node_count() const { return nodes_.size(); }

private:
    friend class TapeScope;
    friend void backward(const Tensor& loss);
    std::vector<std::shared_ptr<detail::Node>> nodes_;
};

// RAII: makes a fresh tape the thread's recording target.
class TapeScope {
public:
    TapeScope();
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;
    Tape& tape() { return tape_; }

private:
    Tape tape_;
    Tape* previous_;
};

// RAII: suspends recording; ops inside compute values only.
class NoGradScope {
public:
    NoGradScope();
    ~NoGradScope();
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

private:
    Tape* previous_;
};

// Dense 64-bit float tensor, row-major, participating in reverse-mode
// differentiation when created under a TapeScope. Copying a Tensor copies
// the handle, not the buffer.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false);
    static Tensor full(std::vector<std::size_t> shape, double value, bool requires_grad = false);
    static Tensor from(std::vector<double> values, std::vector<std::size_t> shape,
                       bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    // Entries uniform in (-bound, bound).
    static Tensor uniform(std::vector<std::size_t> shape, double bound, Rng& rng,
                          bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const std::vector<std::size_t>& shape() const { return node_->shape; }
    std::size_t size() const { return node_->data.size(); }

    std::vector<double>& data() { return node_->data; }
    const std::vector<double>& data() const { return node_->data; }
    double& at(std::size_t i) { return node_->data[i]; }
    double at(std::size_t i) const { return node_->data[i]; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg); // leaf freeze/unfreeze
    std::vector<double>& grad();
    const std::vector<double>& grad() const;
    void zero_grad();

    double item() const;

    // Fresh leaf with the same values, detached from any graph.
    Tensor detached() const;
    void copy_data_from(const Tensor& other);

    std::shared_ptr<detail::Node> node() const { return node_; }
    explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

private:
    std::shared_ptr<detail::Node> node_;
};

std::string shape_str(const std::vector<std::size_t>& shape);

// thread-local counters for flagged-but-tolerated numeric events
struct NumericFlags {
    long zero_norm_events = 0;
};
NumericFlags& numeric_flags();

// ---- primitives ------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b); // Hadamard, identical shapes
Tensor scale(const Tensor& t, double c);
Tensor scale(const Tensor& t, const Tensor& s); // s is a size-1 tensor
Tensor relu(const Tensor& t);
Tensor l2_normalize(const Tensor& t); // zero vector -> zero vector, flagged
Tensor mean(const Tensor& t);         // over all elements
Tensor sum(const Tensor& t);          // over all elements
Tensor concat(const Tensor& a, const Tensor& b);        // rank-1
Tensor concat(std::span<const Tensor> parts);           // rank-1
Tensor flatten(const Tensor& t);
Tensor reshape(const Tensor& t, std::vector<std::size_t> shape);
Tensor take(const Tensor& t, std::size_t flat_index); // size-1 result
Tensor row(const Tensor& t, std::size_t r);            // rank-2 -> rank-1 row view copy
Tensor matmul(const Tensor& a, const Tensor& b);       // [m,k]x[k,n]
Tensor vecmat(const Tensor& x, const Tensor& w);       // [k]x[k,n] -> [n]
Tensor dot(const Tensor& a, const Tensor& b);          // rank-1, size-1 result
Tensor softmax(const Tensor& t, std::size_t axis);
Tensor conv2d(const Tensor& x, const Tensor& kernels, std::size_t stride, std::size_t padding);
Tensor cross_entropy(const Tensor& logits, std::size_t label);

// Sum of per-element gradients of `loss` into every requires_grad tensor
// reachable from it; unreachable grads stay exactly zero.
void backward(const Tensor& loss);

// ---- optimizer -------------------------------------------------------------

// Plain SGD: p <- p - step_size * grad(p). Nothing else.
struct SgdOptimizer {
    double step_size = 0.0;
    void step(std::span<const Tensor> params) const;
    void step(const Tensor& param) const;
};

void zero_grads(std::span<const Tensor> params);

// ---- verification oracle ---------------------------------------------------

// Central-difference check of tape gradients for a scalar-valued builder.
// Returns max over all parameter coordinates of |g_ad - g_fd| / max(1, |g_fd|).
double finite_diff_check(const std::function<Tensor()>& build_loss,
                         std::span<const Tensor> params, double h = 1e-5);

} // namespace aimlab
