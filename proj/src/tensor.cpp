#include "aimlab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace aimlab {

namespace {

thread_local Tape* g_current_tape = nullptr;

std::size_t shape_product(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

void check_finite(const std::vector<double>& data, const char* op) {
    for (double v : data) {
        if (!std::isfinite(v)) {
            throw NumericError(std::string(op) + ": produced a non-finite value");
        }
    }
}

using NodePtr = std::shared_ptr<detail::Node>;

NodePtr make_node(std::vector<std::size_t> shape, std::vector<double> data, bool requires_grad) {
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    if (requires_grad) n->grad.assign(n->data.size(), 0.0);
    return n;
}

// Wraps a computed result: decides requires_grad from the active tape and the
// parents, attaches the backward rule, records the node.
Tensor make_result(const char* op, std::vector<std::size_t> shape, std::vector<double> data,
                   std::vector<NodePtr> parents, std::function<void(detail::Node&)> backward_fn) {
    check_finite(data, op);
    Tape* tape = Tape::current();
    bool rg = false;
    if (tape != nullptr) {
        for (const auto& p : parents) rg = rg || p->requires_grad;
    }
    auto n = make_node(std::move(shape), std::move(data), rg);
    if (rg) {
        n->parents = std::move(parents);
        n->backward_fn = std::move(backward_fn);
        tape->record(n);
    }
    return Tensor(n);
}

void add_into(std::vector<double>& dst, const std::vector<double>& src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()) + " differ");
    }
}

} // namespace

std::string shape_str(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

NumericFlags& numeric_flags() {
    thread_local NumericFlags flags;
    return flags;
}

// ---- Tape / scopes ----------------------------------------------------------

Tape* Tape::current() { return g_current_tape; }

TapeScope::TapeScope() : previous_(g_current_tape) { g_current_tape = &tape_; }
TapeScope::~TapeScope() { g_current_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_current_tape) { g_current_tape = nullptr; }
NoGradScope::~NoGradScope() { g_current_tape = previous_; }

// ---- Tensor -----------------------------------------------------------------

Tensor Tensor::zeros(std::vector<std::size_t> shape, bool requires_grad) {
    std::size_t n = shape_product(shape);
    return Tensor(make_node(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value, bool requires_grad) {
    std::size_t n = shape_product(shape);
    return Tensor(make_node(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from(std::vector<double> values, std::vector<std::size_t> shape,
                    bool requires_grad) {
    if (values.size() != shape_product(shape)) {
        throw DimensionError("tensor: " + std::to_string(values.size()) +
                             " values do not fill shape " + shape_str(shape));
    }
    check_finite(values, "tensor");
    return Tensor(make_node(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from({value}, {1}, requires_grad);
}

Tensor Tensor::uniform(std::vector<std::size_t> shape, double bound, Rng& rng,
                       bool requires_grad) {
    std::size_t n = shape_product(shape);
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(-bound, bound);
    return Tensor(make_node(std::move(shape), std::move(v), requires_grad));
}

void Tensor::set_requires_grad(bool rg) {
    if (!node_->is_leaf()) throw ContractError("set_requires_grad: only leaves can be toggled");
    node_->requires_grad = rg;
    if (rg) {
        node_->grad.assign(node_->data.size(), 0.0);
    } else {
        node_->grad.clear();
    }
}

std::vector<double>& Tensor::grad() {
    if (!node_->requires_grad) throw ContractError("grad: tensor does not require gradients");
    return node_->grad;
}

const std::vector<double>& Tensor::grad() const {
    if (!node_->requires_grad) throw ContractError("grad: tensor does not require gradients");
    return node_->grad;
}

void Tensor::zero_grad() {
    if (node_->requires_grad) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

double Tensor::item() const {
    if (size() != 1) throw ContractError("item: tensor has " + std::to_string(size()) + " elements");
    return node_->data[0];
}

Tensor Tensor::detached() const {
    return Tensor(make_node(node_->shape, node_->data, node_->requires_grad));
}

void Tensor::copy_data_from(const Tensor& other) {
    if (shape() != other.shape()) {
        throw DimensionError("copy_data_from: shapes " + shape_str(shape()) + " and " +
                             shape_str(other.shape()) + " differ");
    }
    node_->data = other.node_->data;
}

// ---- elementwise ------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i);
    auto pa = a.node(), pb = b.node();
    return make_result("add", a.shape(), std::move(out), {pa, pb}, [pa, pb](detail::Node& n) {
        if (pa->requires_grad) add_into(pa->grad, n.grad);
        if (pb->requires_grad) add_into(pb->grad, n.grad);
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) - b.at(i);
    auto pa = a.node(), pb = b.node();
    return make_result("sub", a.shape(), std::move(out), {pa, pb}, [pa, pb](detail::Node& n) {
        if (pa->requires_grad) add_into(pa->grad, n.grad);
        if (pb->requires_grad) {
            for (std::size_t i = 0; i < n.grad.size(); ++i) pb->grad[i] -= n.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.at(i);
    auto pa = a.node(), pb = b.node();
    return make_result("mul", a.shape(), std::move(out), {pa, pb}, [pa, pb](detail::Node& n) {
        if (pa->requires_grad) {
            for (std::size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i] * pb->data[i];
        }
        if (pb->requires_grad) {
            for (std::size_t i = 0; i < n.grad.size(); ++i) pb->grad[i] += n.grad[i] * pa->data[i];
        }
    });
}

Tensor scale(const Tensor& t, double c) {
    std::vector<double> out(t.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = t.at(i) * c;
    auto pt = t.node();
    return make_result("scale", t.shape(), std::move(out), {pt}, [pt, c](detail::Node& n) {
        if (pt->requires_grad) {
            for (std::size_t i = 0; i < n.grad.size(); ++i) pt->grad[i] += n.grad[i] * c;
        }
    });
}

Tensor scale(const Tensor& t, const Tensor& s) {
    if (s.size() != 1) {
        throw DimensionError("scale: scalar operand has shape " + shape_str(s.shape()));
    }
    const double c = s.at(0);
    std::vector<double> out(t.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = t.at(i) * c;
    auto pt = t.node(), ps = s.node();
    return make_result("scale", t.shape(), std::move(out), {pt, ps}, [pt, ps](detail::Node& n) {
        const double c = ps->data[0];
        if (pt->requires_grad) {
            for (std::size_t i = 0; i < n.grad.size(); ++i) pt->grad[i] += n.grad[i] * c;
        }
        if (ps->requires_grad) {
            double acc = 0.0;
            for (std::size_t i = 0; i < n.grad.size(); ++i) acc += n.grad[i] * pt->data[i];
            ps->grad[0] += acc;
        }
    });
}

Tensor relu(const Tensor& t) {
    std::vector<double> out(t.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = t.at(i) > 0.0 ? t.at(i) : 0.0;
    auto pt = t.node();
    return make_result("relu", t.shape(), std::move(out), {pt}, [pt](detail::Node& n) {
        if (pt->requires_grad) {
            for (std::size_t i = 0; i < n.grad.size(); ++i) {
                if (pt->data[i] > 0.0) pt->grad[i] += n.grad[i];
            }
        }
    });
}

Tensor l2_normalize(const Tensor& t) {
    double sq = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) sq += t.at(i) * t.at(i);
    const double norm = std::sqrt(sq);
    std::vector<double> out(t.size(), 0.0);
    if (norm == 0.0) {
        numeric_flags().zero_norm_events += 1;
    } else {
        for (std::size_t i = 0; i < t.size(); ++i) out[i] = t.at(i) / norm;
    }
    auto pt = t.node();
    return make_result("l2_normalize", t.shape(), std::move(out), {pt},
                       [pt, norm](detail::Node& n) {
                           if (!pt->requires_grad || norm == 0.0) return;
                           // dx = (g - y * <g, y>) / norm
                           double gy = 0.0;
                           for (std::size_t i = 0; i < n.grad.size(); ++i) gy += n.grad[i] * n.data[i];
                           for (std::size_t i = 0; i < n.grad.size(); ++i) {
                               pt->grad[i] += (n.grad[i] - n.data[i] * gy) / norm;
                           }
                       });
}

Tensor mean(const Tensor& t) {
    const double inv = 1.0 / static_cast<double>(t.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) acc += t.at(i);
    auto pt = t.node();
    return make_result("mean", {1}, {acc * inv}, {pt}, [pt, inv](detail::Node& n) {
        if (pt->requires_grad) {
            const double g = n.grad[0] * inv;
            for (double& gi : pt->grad) gi += g;
        }
    });
}

Tensor sum(const Tensor& t) {
    double acc = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) acc += t.at(i);
    auto pt = t.node();
    return make_result("sum", {1}, {acc}, {pt}, [pt](detail::Node& n) {
        if (pt->requires_grad) {
            for (double& gi : pt->grad) gi += n.grad[0];
        }
    });
}

Tensor concat(std::span<const Tensor> parts) {
    if (parts.empty()) throw ContractError("concat: no operands");
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.shape().size() != 1) {
            throw DimensionError("concat: expected rank-1 operand, got " + shape_str(p.shape()));
        }
        total += p.size();
    }
    std::vector<double> out;
    out.reserve(total);
    std::vector<NodePtr> parents;
    parents.reserve(parts.size());
    for (const auto& p : parts) {
        out.insert(out.end(), p.data().begin(), p.data().end());
        parents.push_back(p.node());
    }
    auto parent_copy = parents;
    return make_result("concat", {total}, std::move(out), std::move(parents),
                       [parent_copy](detail::Node& n) {
                           std::size_t off = 0;
                           for (const auto& p : parent_copy) {
                               if (p->requires_grad) {
                                   for (std::size_t i = 0; i < p->data.size(); ++i) {
                                       p->grad[i] += n.grad[off + i];
                                   }
                               }
                               off += p->data.size();
                           }
                       });
}

Tensor concat(const Tensor& a, const Tensor& b) {
    const Tensor parts[2] = {a, b};
    return concat(std::span<const Tensor>(parts, 2));
}

Tensor reshape(const Tensor& t, std::vector<std::size_t> shape) {
    if (shape_product(shape) != t.size()) {
        throw DimensionError("reshape: " + shape_str(t.shape()) + " does not reshape to " +
                             shape_str(shape));
    }
    auto pt = t.node();
    return make_result("reshape", std::move(shape), t.data(), {pt}, [pt](detail::Node& n) {
        if (pt->requires_grad) add_into(pt->grad, n.grad);
    });
}

Tensor flatten(const Tensor& t) { return reshape(t, {t.size()}); }

Tensor take(const Tensor& t, std::size_t flat_index) {
    if (flat_index >= t.size()) {
        throw ContractError("take: index " + std::to_string(flat_index) + " out of range for " +
                            shape_str(t.shape()));
    }
    auto pt = t.node();
    return make_result("take", {1}, {t.at(flat_index)}, {pt}, [pt, flat_index](detail::Node& n) {
        if (pt->requires_grad) pt->grad[flat_index] += n.grad[0];
    });
}

Tensor row(const Tensor& t, std::size_t r) {
    if (t.shape().size() != 2) {
        throw DimensionError("row: expected rank-2 tensor, got " + shape_str(t.shape()));
    }
    if (r >= t.shape()[0]) {
        throw ContractError("row: index " + std::to_string(r) + " out of range for " +
                            shape_str(t.shape()));
    }
    const std::size_t n = t.shape()[1];
    std::vector<double> out(t.data().begin() + r * n, t.data().begin() + (r + 1) * n);
    auto pt = t.node();
    return make_result("row", {n}, std::move(out), {pt}, [pt, r, n](detail::Node& node) {
        if (pt->requires_grad) {
            for (std::size_t j = 0; j < n; ++j) pt->grad[r * n + j] += node.grad[j];
        }
    });
}

// ---- linear algebra ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0]) {
        throw DimensionError("matmul: shapes " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()) + " do not compose");
    }
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    std::vector<double> out(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a.at(i * k + p);
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] += av * b.at(p * n + j);
        }
    }
    auto pa = a.node(), pb = b.node();
    return make_result("matmul", {m, n}, std::move(out), {pa, pb},
                       [pa, pb, m, k, n](detail::Node& node) {
                           // dA = dC * B^T
                           if (pa->requires_grad) {
                               for (std::size_t i = 0; i < m; ++i) {
                                   for (std::size_t p = 0; p < k; ++p) {
                                       double acc = 0.0;
                                       for (std::size_t j = 0; j < n; ++j) {
                                           acc += node.grad[i * n + j] * pb->data[p * n + j];
                                       }
                                       pa->grad[i * k + p] += acc;
                                   }
                               }
                           }
                           // dB = A^T * dC
                           if (pb->requires_grad) {
                               for (std::size_t p = 0; p < k; ++p) {
                                   for (std::size_t i = 0; i < m; ++i) {
                                       const double av = pa->data[i * k + p];
                                       for (std::size_t j = 0; j < n; ++j) {
                                           pb->grad[p * n + j] += av * node.grad[i * n + j];
                                       }
                                   }
                               }
                           }
                       });
}

Tensor vecmat(const Tensor& x, const Tensor& w) {
    if (x.shape().size() != 1 || w.shape().size() != 2 || x.shape()[0] != w.shape()[0]) {
        throw DimensionError("vecmat: shapes " + shape_str(x.shape()) + " and " +
                             shape_str(w.shape()) + " do not compose");
    }
    const std::size_t k = w.shape()[0], n = w.shape()[1];
    std::vector<double> out(n, 0.0);
    for (std::size_t p = 0; p < k; ++p) {
        const double xv = x.at(p);
        if (xv == 0.0) continue;
        for (std::size_t j = 0; j < n; ++j) out[j] += xv * w.at(p * n + j);
    }
    auto px = x.node(), pw = w.node();
    return make_result("vecmat", {n}, std::move(out), {px, pw},
                       [px, pw, k, n](detail::Node& node) {
                           if (px->requires_grad) {
                               for (std::size_t p = 0; p < k; ++p) {
                                   double acc = 0.0;
                                   for (std::size_t j = 0; j < n; ++j) {
                                       acc += node.grad[j] * pw->data[p * n + j];
                                   }
                                   px->grad[p] += acc;
                               }
                           }
                           if (pw->requires_grad) {
                               for (std::size_t p = 0; p < k; ++p) {
                                   const double xv = px->data[p];
                                   if (xv == 0.0) continue;
                                   for (std::size_t j = 0; j < n; ++j) {
                                       pw->grad[p * n + j] += xv * node.grad[j];
                                   }
                               }
                           }
                       });
}

Tensor dot(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 1 || b.shape().size() != 1 || a.size() != b.size()) {
        throw DimensionError("dot: shapes " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()) + " do not compose");
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a.at(i) * b.at(i);
    auto pa = a.node(), pb = b.node();
    return make_result("dot", {1}, {acc}, {pa, pb}, [pa, pb](detail::Node& n) {
        const double g = n.grad[0];
        if (pa->requires_grad) {
            for (std::size_t i = 0; i < pa->data.size(); ++i) pa->grad[i] += g * pb->data[i];
        }
        if (pb->requires_grad) {
            for (std::size_t i = 0; i < pb->data.size(); ++i) pb->grad[i] += g * pa->data[i];
        }
    });
}

// ---- softmax / losses --------------------------------------------------------

Tensor softmax(const Tensor& t, std::size_t axis) {
    const auto& shape = t.shape();
    if (axis >= shape.size()) {
        throw ContractError("softmax: axis " + std::to_string(axis) + " out of range for " +
                            shape_str(shape));
    }
    const std::size_t n = shape[axis];
    if (n < 1) throw ContractError("softmax: empty axis");
    std::size_t inner = 1, outer = 1;
    for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
    for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];

    std::vector<double> out(t.size());
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * n * inner + in;
            double mx = t.at(base);
            for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, t.at(base + i * inner));
            double denom = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                const double e = std::exp(t.at(base + i * inner) - mx);
                out[base + i * inner] = e;
                denom += e;
            }
            for (std::size_t i = 0; i < n; ++i) out[base + i * inner] /= denom;
        }
    }
    auto pt = t.node();
    return make_result("softmax", shape, std::move(out), {pt},
                       [pt, n, inner, outer](detail::Node& node) {
                           if (!pt->requires_grad) return;
                           for (std::size_t o = 0; o < outer; ++o) {
                               for (std::size_t in = 0; in < inner; ++in) {
                                   const std::size_t base = o * n * inner + in;
                                   double gy = 0.0;
                                   for (std::size_t i = 0; i < n; ++i) {
                                       const std::size_t idx = base + i * inner;
                                       gy += node.grad[idx] * node.data[idx];
                                   }
                                   for (std::size_t i = 0; i < n; ++i) {
                                       const std::size_t idx = base + i * inner;
                                       pt->grad[idx] += node.data[idx] * (node.grad[idx] - gy);
                                   }
                               }
                           }
                       });
}

Tensor cross_entropy(const Tensor& logits, std::size_t label) {
    if (logits.shape().size() != 1) {
        throw DimensionError("cross_entropy: logits must be rank-1, got " +
                             shape_str(logits.shape()));
    }
    if (label >= logits.size()) {
        throw ContractError("cross_entropy: label " + std::to_string(label) +
                            " out of range for " + std::to_string(logits.size()) + " classes");
    }
    double mx = logits.at(0);
    for (std::size_t i = 1; i < logits.size(); ++i) mx = std::max(mx, logits.at(i));
    double denom = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) denom += std::exp(logits.at(i) - mx);
    const double loss = mx + std::log(denom) - logits.at(label);
    auto pl = logits.node();
    return make_result("cross_entropy", {1}, {loss}, {pl}, [pl, label, mx, denom](detail::Node& n) {
        if (!pl->requires_grad) return;
        const double g = n.grad[0];
        for (std::size_t i = 0; i < pl->data.size(); ++i) {
            const double p = std::exp(pl->data[i] - mx) / denom;
            pl->grad[i] += g * (p - (i == label ? 1.0 : 0.0));
        }
    });
}

// ---- convolution ---------------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& kernels, std::size_t stride, std::size_t padding) {
    if (x.shape().size() != 3 || kernels.shape().size() != 4) {
        throw DimensionError("conv2d: expected [C,H,W] input and [Co,Ci,kh,kw] kernels, got " +
                             shape_str(x.shape()) + " and " + shape_str(kernels.shape()));
    }
    if (stride == 0) throw ContractError("conv2d: stride must be positive");
    const std::size_t ci = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
    const std::size_t co = kernels.shape()[0], kci = kernels.shape()[1];
    const std::size_t kh = kernels.shape()[2], kw = kernels.shape()[3];
    if (kci != ci) {
        throw DimensionError("conv2d: input channels " + shape_str(x.shape()) +
                             " do not match kernels " + shape_str(kernels.shape()));
    }
    if (kh > h + 2 * padding || kw > w + 2 * padding) {
        throw DimensionError("conv2d: kernel " + shape_str(kernels.shape()) +
                             " larger than padded input " + shape_str(x.shape()));
    }
    const std::size_t oh = (h + 2 * padding - kh) / stride + 1;
    const std::size_t ow = (w + 2 * padding - kw) / stride + 1;

    std::vector<double> out(co * oh * ow, 0.0);
    for (std::size_t o = 0; o < co; ++o) {
        for (std::size_t y = 0; y < oh; ++y) {
            for (std::size_t z = 0; z < ow; ++z) {
                double acc = 0.0;
                for (std::size_t c = 0; c < ci; ++c) {
                    for (std::size_t u = 0; u < kh; ++u) {
                        const std::ptrdiff_t iy =
                            static_cast<std::ptrdiff_t>(y * stride + u) -
                            static_cast<std::ptrdiff_t>(padding);
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                        for (std::size_t v = 0; v < kw; ++v) {
                            const std::ptrdiff_t ix =
                                static_cast<std::ptrdiff_t>(z * stride + v) -
                                static_cast<std::ptrdiff_t>(padding);
                            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                            acc += x.at((c * h + iy) * w + ix) *
                                   kernels.at(((o * ci + c) * kh + u) * kw + v);
                        }
                    }
                }
                out[(o * oh + y) * ow + z] = acc;
            }
        }
    }
    auto px = x.node(), pk = kernels.node();
    return make_result(
        "conv2d", {co, oh, ow}, std::move(out), {px, pk},
        [px, pk, ci, h, w, co, kh, kw, oh, ow, stride, padding](detail::Node& node) {
            const bool gx = px->requires_grad, gk = pk->requires_grad;
            if (!gx && !gk) return;
            for (std::size_t o = 0; o < co; ++o) {
                for (std::size_t y = 0; y < oh; ++y) {
                    for (std::size_t z = 0; z < ow; ++z) {
                        const double g = node.grad[(o * oh + y) * ow + z];
                        if (g == 0.0) continue;
                        for (std::size_t c = 0; c < ci; ++c) {
                            for (std::size_t u = 0; u < kh; ++u) {
                                const std::ptrdiff_t iy =
                                    static_cast<std::ptrdiff_t>(y * stride + u) -
                                    static_cast<std::ptrdiff_t>(padding);
                                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                                for (std::size_t v = 0; v < kw; ++v) {
                                    const std::ptrdiff_t ix =
                                        static_cast<std::ptrdiff_t>(z * stride + v) -
                                        static_cast<std::ptrdiff_t>(padding);
                                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                                    const std::size_t xi = (c * h + iy) * w + ix;
                                    const std::size_t ki = ((o * ci + c) * kh + u) * kw + v;
                                    if (gx) px->grad[xi] += g * pk->data[ki];
                                    if (gk) pk->grad[ki] += g * px->data[xi];
                                }
                            }
                        }
                    }
                }
            }
        });
}

// ---- backward ------------------------------------------------------------------

void backward(const Tensor& loss) {
    if (loss.size() != 1) {
        throw ContractError("backward: loss has shape " + shape_str(loss.shape()) +
                            ", expected a scalar");
    }
    Tape* tape = Tape::current();
    if (tape == nullptr) throw ContractError("backward: no active tape");
    if (!loss.requires_grad()) return; // nothing reachable requires gradients

    // mark nodes reachable from the loss
    std::unordered_set<const detail::Node*> reachable;
    std::vector<const detail::Node*> stack{loss.node().get()};
    while (!stack.empty()) {
        const detail::Node* n = stack.back();
        stack.pop_back();
        if (!reachable.insert(n).second) continue;
        for (const auto& p : n->parents) {
            if (p->requires_grad) stack.push_back(p.get());
        }
    }

    loss.node()->grad[0] += 1.0;
    for (auto it = tape->nodes_.rbegin(); it != tape->nodes_.rend(); ++it) {
        detail::Node& n = **it;
        if (!n.backward_fn) continue;
        if (reachable.count(&n) == 0) continue;
        n.backward_fn(n);
    }
}

// ---- SGD -------------------------------------------------------------------------

void SgdOptimizer::step(const Tensor& param) const {
    auto& d = param.node()->data;
    const auto& g = param.node()->grad;
    for (std::size_t i = 0; i < d.size(); ++i) d[i] -= step_size * g[i];
}

void SgdOptimizer::step(std::span<const Tensor> params) const {
    for (const auto& p : params) step(p);
}

void zero_grads(std::span<const Tensor> params) {
    for (const auto& p : params) const_cast<Tensor&>(p).zero_grad();
}

// ---- finite differences ------------------------------------------------------------

double finite_diff_check(const std::function<Tensor()>& build_loss,
                         std::span<const Tensor> params, double h) {
    if (h <= 0.0) throw ContractError("finite_diff_check: h must be positive");

    std::vector<std::vector<double>> analytic;
    {
        for (const auto& p : params) const_cast<Tensor&>(p).zero_grad();
        TapeScope scope;
        Tensor loss = build_loss();
        backward(loss);
        for (const auto& p : params) analytic.push_back(p.grad());
    }

    double worst = 0.0;
    NoGradScope no_grad;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor p = params[pi];
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double saved = p.at(i);
            p.at(i) = saved + h;
            const double fp = build_loss().item();
            p.at(i) = saved - h;
            const double fm = build_loss().item();
            p.at(i) = saved;
            const double fd = (fp - fm) / (2.0 * h);
            const double err = std::abs(analytic[pi][i] - fd) / std::max(1.0, std::abs(fd));
            worst = std::max(worst, err);
        }
    }
    for (const auto& p : params) const_cast<Tensor&>(p).zero_grad();
    return worst;
}

} // namespace aimlab
