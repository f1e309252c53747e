#pragma once

// Dense 64-bit tensors with reverse-mode differentiation, the layer
// primitives used by the model (matmul, 1x1/3x3 convolution, pooling, batch
// normalization, elementwise ops, reductions), L1 loss and Adam.
//
// Tensors are immutable value handles: every operation allocates a new node
// and records how to push gradients back to its parents. Leaf values may be
// rewritten through set_values (the optimizer is the single writer).

#define EIGEN_DONT_PARALLELIZE
#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "bonegraph/rng.hpp"

namespace bonegraph {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ",";
        os << s[i];
    }
    os << "]";
    return os.str();
}

[[noreturn]] inline void op_error(const std::string& op, const std::string& msg) {
    throw std::invalid_argument(op + ": " + msg);
}

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> values;
    bool requires_grad = false;
    std::vector<double> grad;  // allocated on first accumulation
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(const Node&)> backward_fn;
    std::string name;

    std::int64_t numel() const { return static_cast<std::int64_t>(values.size()); }

    void ensure_grad() {
        if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
    }
};

using NodePtr = std::shared_ptr<Node>;

inline NodePtr make_node(Shape shape, std::vector<double> values, bool requires_grad) {
    auto n = std::make_shared<Node>();
    if (static_cast<std::int64_t>(values.size()) != shape_numel(shape))
        op_error("tensor", "element count " + std::to_string(values.size()) +
                               " does not match shape " + shape_str(shape));
    n->shape = std::move(shape);
    n->values = std::move(values);
    n->requires_grad = requires_grad;
    return n;
}

// Walks an output shape while tracking the corresponding flat offsets of two
// operands broadcast against it (stride 0 on broadcast dimensions).
template <typename Fn>
void for_each_broadcast(const Shape& out, const Shape& a, const Shape& b, Fn&& fn) {
    const std::size_t rank = out.size();
    const std::int64_t n = shape_numel(out);
    std::vector<std::int64_t> sa(rank, 0), sb(rank, 0), idx(rank, 0);
    // Right-aligned strides; broadcast dims keep stride 0.
    std::int64_t stride = 1;
    for (std::size_t k = 0; k < a.size(); ++k) {
        std::size_t d = rank - 1 - k;
        std::size_t ad = a.size() - 1 - k;
        sa[d] = (a[ad] == 1 && out[d] != 1) ? 0 : stride;
        stride *= a[ad];
    }
    stride = 1;
    for (std::size_t k = 0; k < b.size(); ++k) {
        std::size_t d = rank - 1 - k;
        std::size_t bd = b.size() - 1 - k;
        sb[d] = (b[bd] == 1 && out[d] != 1) ? 0 : stride;
        stride *= b[bd];
    }
    std::int64_t offa = 0, offb = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        fn(i, offa, offb);
        for (std::size_t k = 0; k < rank; ++k) {
            std::size_t d = rank - 1 - k;
            ++idx[d];
            offa += sa[d];
            offb += sb[d];
            if (idx[d] < out[d]) break;
            offa -= sa[d] * out[d];
            offb -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
    const std::size_t rank = std::max(a.size(), b.size());
    Shape out(rank, 1);
    for (std::size_t k = 0; k < rank; ++k) {
        std::int64_t da = k < a.size() ? a[a.size() - 1 - k] : 1;
        std::int64_t db = k < b.size() ? b[b.size() - 1 - k] : 1;
        if (da != db && da != 1 && db != 1)
            op_error(op, "shapes " + shape_str(a) + " and " + shape_str(b) + " are not broadcastable");
        out[rank - 1 - k] = std::max(da, db);
    }
    return out;
}

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

}  // namespace detail

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        auto n = shape_numel(shape);
        return Tensor(detail::make_node(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
    }
    static Tensor full(Shape shape, double v, bool requires_grad = false) {
        auto n = shape_numel(shape);
        return Tensor(detail::make_node(std::move(shape), std::vector<double>(n, v), requires_grad));
    }
    static Tensor from_values(Shape shape, std::vector<double> values, bool requires_grad = false) {
        return Tensor(detail::make_node(std::move(shape), std::move(values), requires_grad));
    }
    static Tensor scalar(double v, bool requires_grad = false) {
        return Tensor(detail::make_node(Shape{}, std::vector<double>{v}, requires_grad));
    }

    bool defined() const { return static_cast<bool>(n_); }
    const Shape& shape() const { return node().shape; }
    std::int64_t numel() const { return node().numel(); }
    std::int64_t dim(std::size_t i) const { return node().shape.at(i); }
    std::size_t rank() const { return node().shape.size(); }
    bool requires_grad() const { return node().requires_grad; }

    const std::vector<double>& values() const { return node().values; }
    const std::vector<double>& grad() const { return node().grad; }
    bool has_grad() const { return !node().grad.empty(); }

    double scalar_value() const {
        if (numel() != 1) op_error("scalar_value", "tensor has " + std::to_string(numel()) + " elements");
        return node().values[0];
    }
    double at(std::initializer_list<std::int64_t> idx) const {
        const auto& s = node().shape;
        if (idx.size() != s.size()) op_error("at", "index rank mismatch");
        std::int64_t off = 0, stride = 1;
        std::vector<std::int64_t> v(idx);
        for (std::size_t k = 0; k < s.size(); ++k) {
            std::size_t d = s.size() - 1 - k;
            if (v[d] < 0 || v[d] >= s[d]) op_error("at", "index out of range");
            off += v[d] * stride;
            stride *= s[d];
        }
        return node().values[off];
    }

    const std::string& name() const { return node().name; }
    Tensor& set_name(std::string name) {
        node().name = std::move(name);
        return *this;
    }

    // Leaf mutation, used by the optimizer and by parameter loading.
    void set_values(const std::vector<double>& v) {
        if (v.size() != node().values.size()) op_error("set_values", "size mismatch for '" + node().name + "'");
        node().values = v;
    }
    void zero_grad() { node().grad.clear(); }

    void backward() const {
        if (numel() != 1)
            throw std::runtime_error("backward: output is not scalar; provide an explicit seed");
        run_backward(std::vector<double>{1.0});
    }
    void backward(const Tensor& seed) const {
        if (seed.shape() != shape())
            op_error("backward", "seed shape " + shape_str(seed.shape()) + " does not match output shape " +
                                     shape_str(shape()));
        run_backward(seed.values());
    }

    detail::Node& node() const {
        if (!n_) throw std::runtime_error("tensor: use of undefined tensor");
        return *n_;
    }
    const detail::NodePtr& ptr() const { return n_; }

    explicit Tensor(detail::NodePtr n) : n_(std::move(n)) {}

private:
    void run_backward(const std::vector<double>& seed) const {
        auto& root = node();
        if (!root.requires_grad)
            throw std::runtime_error("backward: output does not require gradients");
        // Post-order over the graph, each node exactly once.
        std::vector<detail::Node*> order;
        std::unordered_set<detail::Node*> visited;
        std::vector<std::pair<detail::Node*, std::size_t>> stack;
        stack.emplace_back(&root, 0);
        visited.insert(&root);
        while (!stack.empty()) {
            auto& [nd, next] = stack.back();
            if (next < nd->parents.size()) {
                detail::Node* p = nd->parents[next++].get();
                if (p->requires_grad && !visited.count(p)) {
                    visited.insert(p);
                    stack.emplace_back(p, 0);
                }
            } else {
                order.push_back(nd);
                stack.pop_back();
            }
        }
        root.ensure_grad();
        for (std::size_t i = 0; i < seed.size(); ++i) root.grad[i] += seed[i];
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            detail::Node* nd = *it;
            if (nd->backward_fn) nd->backward_fn(*nd);
        }
    }

    detail::NodePtr n_;
};

namespace detail {

inline NodePtr result_node(Shape shape, std::vector<double> values, std::vector<NodePtr> parents) {
    bool rg = false;
    for (const auto& p : parents) rg = rg || p->requires_grad;
    auto n = make_node(std::move(shape), std::move(values), rg);
    if (rg) n->parents = std::move(parents);
    return n;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary operations (NumPy-style broadcasting).

namespace detail {

enum class BinOp { Add, Sub, Mul, Div };

inline Tensor binary_op(const Tensor& a, const Tensor& b, BinOp op, const char* op_name) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    Shape so = broadcast_shape(sa, sb, op_name);
    const auto n = shape_numel(so);
    std::vector<double> out(static_cast<std::size_t>(n));
    const auto& va = a.values();
    const auto& vb = b.values();
    if (sa == sb) {
        switch (op) {
            case BinOp::Add: for (std::int64_t i = 0; i < n; ++i) out[i] = va[i] + vb[i]; break;
            case BinOp::Sub: for (std::int64_t i = 0; i < n; ++i) out[i] = va[i] - vb[i]; break;
            case BinOp::Mul: for (std::int64_t i = 0; i < n; ++i) out[i] = va[i] * vb[i]; break;
            case BinOp::Div: for (std::int64_t i = 0; i < n; ++i) out[i] = va[i] / vb[i]; break;
        }
    } else {
        for_each_broadcast(so, sa, sb, [&](std::int64_t i, std::int64_t ia, std::int64_t ib) {
            switch (op) {
                case BinOp::Add: out[i] = va[ia] + vb[ib]; break;
                case BinOp::Sub: out[i] = va[ia] - vb[ib]; break;
                case BinOp::Mul: out[i] = va[ia] * vb[ib]; break;
                case BinOp::Div: out[i] = va[ia] / vb[ib]; break;
            }
        });
    }
    auto node = result_node(so, std::move(out), {a.ptr(), b.ptr()});
    if (node->requires_grad) {
        auto pa = a.ptr();
        auto pb = b.ptr();
        node->backward_fn = [pa, pb, op, so](const Node& self) {
            const bool ga = pa->requires_grad;
            const bool gb = pb->requires_grad;
            if (ga) pa->ensure_grad();
            if (gb) pb->ensure_grad();
            for_each_broadcast(so, pa->shape, pb->shape,
                               [&](std::int64_t i, std::int64_t ia, std::int64_t ib) {
                const double g = self.grad[i];
                switch (op) {
                    case BinOp::Add:
                        if (ga) pa->grad[ia] += g;
                        if (gb) pb->grad[ib] += g;
                        break;
                    case BinOp::Sub:
                        if (ga) pa->grad[ia] += g;
                        if (gb) pb->grad[ib] -= g;
                        break;
                    case BinOp::Mul:
                        if (ga) pa->grad[ia] += g * pb->values[ib];
                        if (gb) pb->grad[ib] += g * pa->values[ia];
                        break;
                    case BinOp::Div: {
                        const double bv = pb->values[ib];
                        if (ga) pa->grad[ia] += g / bv;
                        if (gb) pb->grad[ib] -= g * pa->values[ia] / (bv * bv);
                        break;
                    }
                }
            });
        };
    }
    return Tensor(node);
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) { return detail::binary_op(a, b, detail::BinOp::Add, "add"); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::binary_op(a, b, detail::BinOp::Sub, "sub"); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::binary_op(a, b, detail::BinOp::Mul, "mul"); }
inline Tensor div(const Tensor& a, const Tensor& b) { return detail::binary_op(a, b, detail::BinOp::Div, "div"); }

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double c) { return add(a, Tensor::scalar(c)); }
inline Tensor operator-(const Tensor& a, double c) { return sub(a, Tensor::scalar(c)); }
inline Tensor operator*(const Tensor& a, double c) { return mul(a, Tensor::scalar(c)); }
inline Tensor operator/(const Tensor& a, double c) { return div(a, Tensor::scalar(c)); }
inline Tensor operator*(double c, const Tensor& a) { return mul(a, Tensor::scalar(c)); }

// ---------------------------------------------------------------------------
// Elementwise unary operations.

namespace detail {

// fwd(x) -> y ; bwd(x, y, gy) -> gx
inline Tensor unary_op(const Tensor& a, const char*, std::function<double(double)> fwd,
                       std::function<double(double, double, double)> bwd) {
    const auto n = a.numel();
    std::vector<double> out(static_cast<std::size_t>(n));
    const auto& va = a.values();
    for (std::int64_t i = 0; i < n; ++i) out[i] = fwd(va[i]);
    auto node = result_node(a.shape(), std::move(out), {a.ptr()});
    if (node->requires_grad) {
        auto pa = a.ptr();
        node->backward_fn = [pa, bwd](const Node& self) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < self.values.size(); ++i)
                pa->grad[i] += bwd(pa->values[i], self.values[i], self.grad[i]);
        };
    }
    return Tensor(node);
}

}  // namespace detail

inline Tensor neg(const Tensor& a) {
    return detail::unary_op(a, "neg", [](double x) { return -x; },
                            [](double, double, double g) { return -g; });
}
inline Tensor operator-(const Tensor& a) { return neg(a); }

inline Tensor relu(const Tensor& a) {
    return detail::unary_op(a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
                            [](double x, double, double g) { return x > 0.0 ? g : 0.0; });
}

inline Tensor sigmoid(const Tensor& a) {
    return detail::unary_op(
        a, "sigmoid",
        [](double x) {
            if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
            const double e = std::exp(x);
            return e / (1.0 + e);
        },
        [](double, double y, double g) { return g * y * (1.0 - y); });
}

// Subgradient of |x| at 0 is 0.
inline Tensor abs_t(const Tensor& a) {
    return detail::unary_op(a, "abs", [](double x) { return std::fabs(x); },
                            [](double x, double, double g) { return x > 0.0 ? g : (x < 0.0 ? -g : 0.0); });
}

inline Tensor sqrt_t(const Tensor& a) {
    return detail::unary_op(a, "sqrt", [](double x) { return std::sqrt(x); },
                            [](double, double y, double g) { return g * 0.5 / y; });
}

// Detached copy: same values, no graph history.
inline Tensor detach(const Tensor& a) { return Tensor::from_values(a.shape(), a.values(), false); }

// ---------------------------------------------------------------------------
// Matrix operations (2-D).

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) op_error("matmul", "expects 2-D operands");
    const std::int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2)
        op_error("matmul", "inner dimensions differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    std::vector<double> out(static_cast<std::size_t>(m * n));
    {
        detail::ECMap ma(a.values().data(), m, k);
        detail::ECMap mb(b.values().data(), k, n);
        detail::EMap mo(out.data(), m, n);
        mo.noalias() = ma * mb;
    }
    auto node = detail::result_node({m, n}, std::move(out), {a.ptr(), b.ptr()});
    if (node->requires_grad) {
        auto pa = a.ptr();
        auto pb = b.ptr();
        node->backward_fn = [pa, pb, m, k, n](const detail::Node& self) {
            detail::ECMap go(self.grad.data(), m, n);
            if (pa->requires_grad) {
                pa->ensure_grad();
                detail::ECMap mb(pb->values.data(), k, n);
                detail::EMap ga(pa->grad.data(), m, k);
                ga.noalias() += go * mb.transpose();
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                detail::ECMap ma(pa->values.data(), m, k);
                detail::EMap gb(pb->grad.data(), k, n);
                gb.noalias() += ma.transpose() * go;
            }
        };
    }
    return Tensor(node);
}

inline Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) op_error("transpose", "expects a 2-D operand");
    const std::int64_t m = a.dim(0), n = a.dim(1);
    std::vector<double> out(static_cast<std::size_t>(m * n));
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) out[j * m + i] = a.values()[i * n + j];
    auto node = detail::result_node({n, m}, std::move(out), {a.ptr()});
    if (node->requires_grad) {
        auto pa = a.ptr();
        node->backward_fn = [pa, m, n](const detail::Node& self) {
            pa->ensure_grad();
            for (std::int64_t i = 0; i < m; ++i)
                for (std::int64_t j = 0; j < n; ++j) pa->grad[i * n + j] += self.grad[j * m + i];
        };
    }
    return Tensor(node);
}

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        op_error("reshape", "cannot reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
    auto node = detail::result_node(std::move(shape), a.values(), {a.ptr()});
    if (node->requires_grad) {
        auto pa = a.ptr();
        node->backward_fn = [pa](const detail::Node& self) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
        };
    }
    return Tensor(node);
}

// ---------------------------------------------------------------------------
// Reductions.

namespace detail {

inline Tensor reduce_op(const Tensor& a, std::vector<std::size_t> axes, bool keepdims, bool mean,
                        const char* op_name) {
    const Shape& sa = a.shape();
    std::vector<bool> reduced(sa.size(), false);
    for (auto ax : axes) {
        if (ax >= sa.size()) op_error(op_name, "axis out of range");
        reduced[ax] = true;
    }
    Shape kept(sa.size());
    for (std::size_t d = 0; d < sa.size(); ++d) kept[d] = reduced[d] ? 1 : sa[d];
    std::int64_t count = 1;
    for (std::size_t d = 0; d < sa.size(); ++d)
        if (reduced[d]) count *= sa[d];
    const double scale = mean ? 1.0 / static_cast<double>(count) : 1.0;

    std::vector<double> out(static_cast<std::size_t>(shape_numel(kept)), 0.0);
    const auto& va = a.values();
    for_each_broadcast(sa, kept, kept, [&](std::int64_t i, std::int64_t io, std::int64_t) {
        out[io] += va[i];
    });
    if (mean)
        for (auto& v : out) v *= scale;

    Shape final_shape;
    if (keepdims) {
        final_shape = kept;
    } else {
        for (std::size_t d = 0; d < sa.size(); ++d)
            if (!reduced[d]) final_shape.push_back(sa[d]);
    }
    auto node = result_node(std::move(final_shape), std::move(out), {a.ptr()});
    if (node->requires_grad) {
        auto pa = a.ptr();
        node->backward_fn = [pa, kept, scale](const Node& self) {
            pa->ensure_grad();
            for_each_broadcast(pa->shape, kept, kept, [&](std::int64_t i, std::int64_t io, std::int64_t) {
                pa->grad[i] += self.grad[io] * scale;
            });
        };
    }
    return Tensor(node);
}

}  // namespace detail

inline Tensor reduce_sum(const Tensor& a, std::vector<std::size_t> axes, bool keepdims = true) {
    return detail::reduce_op(a, std::move(axes), keepdims, false, "reduce_sum");
}
inline Tensor reduce_mean(const Tensor& a, std::vector<std::size_t> axes, bool keepdims = true) {
    return detail::reduce_op(a, std::move(axes), keepdims, true, "reduce_mean");
}
inline Tensor sum(const Tensor& a) {
    std::vector<std::size_t> axes(a.rank());
    std::iota(axes.begin(), axes.end(), 0);
    return detail::reduce_op(a, std::move(axes), false, false, "sum");
}
inline Tensor mean(const Tensor& a) {
    std::vector<std::size_t> axes(a.rank());
    std::iota(axes.begin(), axes.end(), 0);
    return detail::reduce_op(a, std::move(axes), false, true, "mean");
}

// ---------------------------------------------------------------------------
// Row/column assembly (2-D).

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) op_error("concat_rows", "no operands");
    const std::int64_t cols = parts[0].rank() == 2 ? parts[0].dim(1) : -1;
    std::int64_t rows = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.dim(1) != cols) op_error("concat_rows", "operands must be 2-D with equal column count");
        rows += p.dim(0);
    }
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(rows * cols));
    std::vector<detail::NodePtr> parents;
    for (const auto& p : parts) {
        out.insert(out.end(), p.values().begin(), p.values().end());
        parents.push_back(p.ptr());
    }
    auto node = detail::result_node({rows, cols}, std::move(out), std::move(parents));
    if (node->requires_grad) {
        std::vector<detail::NodePtr> ps;
        for (const auto& p : parts) ps.push_back(p.ptr());
        node->backward_fn = [ps](const detail::Node& self) {
            std::size_t off = 0;
            for (const auto& p : ps) {
                if (p->requires_grad) {
                    p->ensure_grad();
                    for (std::size_t i = 0; i < p->values.size(); ++i) p->grad[i] += self.grad[off + i];
                }
                off += p->values.size();
            }
        };
    }
    return Tensor(node);
}

inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0))
        op_error("concat_cols", "operands must be 2-D with equal row count");
    const std::int64_t rows = a.dim(0), ca = a.dim(1), cb = b.dim(1);
    std::vector<double> out(static_cast<std::size_t>(rows * (ca + cb)));
    for (std::int64_t r = 0; r < rows; ++r) {
        std::copy_n(a.values().data() + r * ca, ca, out.data() + r * (ca + cb));
        std::copy_n(b.values().data() + r * cb, cb, out.data() + r * (ca + cb) + ca);
    }
    auto node = detail::result_node({rows, ca + cb}, std::move(out), {a.ptr(), b.ptr()});
    if (node->requires_grad) {
        auto pa = a.ptr();
        auto pb = b.ptr();
        node->backward_fn = [pa, pb, rows, ca, cb](const detail::Node& self) {
            if (pa->requires_grad) {
                pa->ensure_grad();
                for (std::int64_t r = 0; r < rows; ++r)
                    for (std::int64_t c = 0; c < ca; ++c) pa->grad[r * ca + c] += self.grad[r * (ca + cb) + c];
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (std::int64_t r = 0; r < rows; ++r)
                    for (std::int64_t c = 0; c < cb; ++c)
                        pb->grad[r * cb + c] += self.grad[r * (ca + cb) + ca + c];
            }
        };
    }
    return Tensor(node);
}

inline Tensor gather_rows(const Tensor& a, const std::vector<std::int64_t>& indices) {
    if (a.rank() != 2) op_error("gather_rows", "expects a 2-D operand");
    const std::int64_t rows = a.dim(0), cols = a.dim(1);
    for (auto idx : indices)
        if (idx < 0 || idx >= rows) op_error("gather_rows", "row index " + std::to_string(idx) + " out of range");
    std::vector<double> out(indices.size() * static_cast<std::size_t>(cols));
    for (std::size_t k = 0; k < indices.size(); ++k)
        std::copy_n(a.values().data() + indices[k] * cols, cols, out.data() + k * cols);
    auto node = detail::result_node({static_cast<std::int64_t>(indices.size()), cols}, std::move(out), {a.ptr()});
    if (node->requires_grad) {
        auto pa = a.ptr();
        node->backward_fn = [pa, indices, cols](const detail::Node& self) {
            pa->ensure_grad();
            for (std::size_t k = 0; k < indices.size(); ++k)
                for (std::int64_t c = 0; c < cols; ++c)
                    pa->grad[indices[k] * cols + c] += self.grad[k * cols + c];
        };
    }
    return Tensor(node);
}

// Places row k of `a` at output row indices[k]; duplicate targets accumulate.
inline Tensor scatter_rows(const Tensor& a, const std::vector<std::int64_t>& indices, std::int64_t out_rows) {
    if (a.rank() != 2) op_error("scatter_rows", "expects a 2-D operand");
    if (static_cast<std::int64_t>(indices.size()) != a.dim(0))
        op_error("scatter_rows", "index count does not match row count");
    const std::int64_t cols = a.dim(1);
    for (auto idx : indices)
        if (idx < 0 || idx >= out_rows) op_error("scatter_rows", "target row out of range");
    std::vector<double> out(static_cast<std::size_t>(out_rows * cols), 0.0);
    for (std::size_t k = 0; k < indices.size(); ++k)
        for (std::int64_t c = 0; c < cols; ++c) out[indices[k] * cols + c] += a.values()[k * cols + c];
    auto node = detail::result_node({out_rows, cols}, std::move(out), {a.ptr()});
    if (node->requires_grad) {
        auto pa = a.ptr();
        node->backward_fn = [pa, indices, cols](const detail::Node& self) {
            pa->ensure_grad();
            for (std::size_t k = 0; k < indices.size(); ++k)
                for (std::int64_t c = 0; c < cols; ++c)
                    pa->grad[k * cols + c] += self.grad[indices[k] * cols + c];
        };
    }
    return Tensor(node);
}

// ---------------------------------------------------------------------------
// Feature-map cell gather: x is B x C x H x W, each (b, i, j) triple selects
// the channel vector at one spatial cell. Output is K x C. Gradients flow
// only into the selected cells.

struct CellIndex {
    std::int64_t b, i, j;
};

inline Tensor gather_cells(const Tensor& x, const std::vector<CellIndex>& cells) {
    if (x.rank() != 4) op_error("gather_cells", "expects a 4-D operand");
    const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    for (const auto& c : cells)
        if (c.b < 0 || c.b >= B || c.i < 0 || c.i >= H || c.j < 0 || c.j >= W)
            op_error("gather_cells", "cell (" + std::to_string(c.b) + "," + std::to_string(c.i) + "," +
                                         std::to_string(c.j) + ") out of range for " + shape_str(x.shape()));
    const std::int64_t K = static_cast<std::int64_t>(cells.size());
    std::vector<double> out(static_cast<std::size_t>(K * C));
    const auto& vx = x.values();
    for (std::int64_t k = 0; k < K; ++k) {
        const auto& c = cells[k];
        for (std::int64_t ch = 0; ch < C; ++ch)
            out[k * C + ch] = vx[((c.b * C + ch) * H + c.i) * W + c.j];
    }
    auto node = detail::result_node({K, C}, std::move(out), {x.ptr()});
    if (node->requires_grad) {
        auto px = x.ptr();
        node->backward_fn = [px, cells, C, H, W](const detail::Node& self) {
            px->ensure_grad();
            for (std::size_t k = 0; k < cells.size(); ++k) {
                const auto& c = cells[k];
                for (std::int64_t ch = 0; ch < C; ++ch)
                    px->grad[((c.b * C + ch) * H + c.i) * W + c.j] += self.grad[k * C + ch];
            }
        };
    }
    return Tensor(node);
}

// ---------------------------------------------------------------------------
// Convolution and pooling. x: B x Cin x H x W, w: Cout x Cin x kh x kw.
// Implemented as im2col plus a dense product.

namespace detail {

inline void im2col(const std::vector<double>& x, std::int64_t B, std::int64_t Ci, std::int64_t H, std::int64_t W,
                   std::int64_t kh, std::int64_t kw, std::int64_t stride, std::int64_t pad, std::int64_t OH,
                   std::int64_t OW, std::vector<double>& cols) {
    const std::int64_t patch = Ci * kh * kw;
    cols.assign(static_cast<std::size_t>(B * OH * OW * patch), 0.0);
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t oy = 0; oy < OH; ++oy)
            for (std::int64_t ox = 0; ox < OW; ++ox) {
                double* row = cols.data() + ((b * OH + oy) * OW + ox) * patch;
                for (std::int64_t ci = 0; ci < Ci; ++ci)
                    for (std::int64_t ky = 0; ky < kh; ++ky) {
                        const std::int64_t y = oy * stride - pad + ky;
                        if (y < 0 || y >= H) continue;
                        for (std::int64_t kx = 0; kx < kw; ++kx) {
                            const std::int64_t xx = ox * stride - pad + kx;
                            if (xx < 0 || xx >= W) continue;
                            row[(ci * kh + ky) * kw + kx] = x[((b * Ci + ci) * H + y) * W + xx];
                        }
                    }
            }
}

}  // namespace detail

inline Tensor conv2d(const Tensor& x, const Tensor& w, const std::optional<Tensor>& bias, std::int64_t stride,
                     std::int64_t pad) {
    if (x.rank() != 4) op_error("conv2d", "input must be 4-D, got " + shape_str(x.shape()));
    if (w.rank() != 4) op_error("conv2d", "weight must be 4-D, got " + shape_str(w.shape()));
    const std::int64_t B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::int64_t Co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (w.dim(1) != Ci) op_error("conv2d", "weight input channels do not match input");
    if (bias && (bias->rank() != 1 || bias->dim(0) != Co)) op_error("conv2d", "bias must have shape [Cout]");
    const std::int64_t OH = (H + 2 * pad - kh) / stride + 1;
    const std::int64_t OW = (W + 2 * pad - kw) / stride + 1;
    if (OH <= 0 || OW <= 0) op_error("conv2d", "kernel larger than padded input");

    const std::int64_t patch = Ci * kh * kw;
    auto cols = std::make_shared<std::vector<double>>();
    detail::im2col(x.values(), B, Ci, H, W, kh, kw, stride, pad, OH, OW, *cols);

    std::vector<double> out2d(static_cast<std::size_t>(B * OH * OW * Co));
    {
        detail::ECMap mc(cols->data(), B * OH * OW, patch);
        detail::ECMap mw(w.values().data(), Co, patch);
        detail::EMap mo(out2d.data(), B * OH * OW, Co);
        mo.noalias() = mc * mw.transpose();
    }
    std::vector<double> out(static_cast<std::size_t>(B * Co * OH * OW));
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t oy = 0; oy < OH; ++oy)
            for (std::int64_t ox = 0; ox < OW; ++ox) {
                const double* row = out2d.data() + ((b * OH + oy) * OW + ox) * Co;
                for (std::int64_t co = 0; co < Co; ++co) {
                    double v = row[co];
                    if (bias) v += bias->values()[co];
                    out[((b * Co + co) * OH + oy) * OW + ox] = v;
                }
            }

    std::vector<detail::NodePtr> parents{x.ptr(), w.ptr()};
    if (bias) parents.push_back(bias->ptr());
    auto node = detail::result_node({B, Co, OH, OW}, std::move(out), std::move(parents));
    if (node->requires_grad) {
        auto px = x.ptr();
        auto pw = w.ptr();
        detail::NodePtr pb = bias ? bias->ptr() : nullptr;
        node->backward_fn = [px, pw, pb, cols, B, Ci, H, W, Co, kh, kw, stride, pad, OH, OW,
                             patch](const detail::Node& self) {
            // Re-pack the output gradient as (B*OH*OW) x Co.
            std::vector<double> go2d(static_cast<std::size_t>(B * OH * OW * Co));
            for (std::int64_t b = 0; b < B; ++b)
                for (std::int64_t co = 0; co < Co; ++co)
                    for (std::int64_t oy = 0; oy < OH; ++oy)
                        for (std::int64_t ox = 0; ox < OW; ++ox)
                            go2d[((b * OH + oy) * OW + ox) * Co + co] =
                                self.grad[((b * Co + co) * OH + oy) * OW + ox];
            detail::ECMap mgo(go2d.data(), B * OH * OW, Co);
            if (pw->requires_grad) {
                pw->ensure_grad();
                detail::ECMap mc(cols->data(), B * OH * OW, patch);
                detail::EMap mgw(pw->grad.data(), Co, patch);
                mgw.noalias() += mgo.transpose() * mc;
            }
            if (pb && pb->requires_grad) {
                pb->ensure_grad();
                for (std::int64_t r = 0; r < B * OH * OW; ++r)
                    for (std::int64_t co = 0; co < Co; ++co) pb->grad[co] += go2d[r * Co + co];
            }
            if (px->requires_grad) {
                px->ensure_grad();
                std::vector<double> dcols(static_cast<std::size_t>(B * OH * OW * patch));
                {
                    detail::ECMap mw(pw->values.data(), Co, patch);
                    detail::EMap mdc(dcols.data(), B * OH * OW, patch);
                    mdc.noalias() = mgo * mw;
                }
                for (std::int64_t b = 0; b < B; ++b)
                    for (std::int64_t oy = 0; oy < OH; ++oy)
                        for (std::int64_t ox = 0; ox < OW; ++ox) {
                            const double* row = dcols.data() + ((b * OH + oy) * OW + ox) * patch;
                            for (std::int64_t ci = 0; ci < Ci; ++ci)
                                for (std::int64_t ky = 0; ky < kh; ++ky) {
                                    const std::int64_t y = oy * stride - pad + ky;
                                    if (y < 0 || y >= H) continue;
                                    for (std::int64_t kx = 0; kx < kw; ++kx) {
                                        const std::int64_t xx = ox * stride - pad + kx;
                                        if (xx < 0 || xx >= W) continue;
                                        px->grad[((b * Ci + ci) * H + y) * W + xx] +=
                                            row[(ci * kh + ky) * kw + kx];
                                    }
                                }
                        }
            }
        };
    }
    return Tensor(node);
}

// Average pooling; border windows divide by the number of in-bounds cells so
// constant inputs stay constant.
inline Tensor avg_pool2d(const Tensor& x, std::int64_t k, std::int64_t stride, std::int64_t pad) {
    if (x.rank() != 4) op_error("avg_pool2d", "input must be 4-D");
    const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::int64_t OH = (H + 2 * pad - k) / stride + 1;
    const std::int64_t OW = (W + 2 * pad - k) / stride + 1;
    if (OH <= 0 || OW <= 0) op_error("avg_pool2d", "window larger than padded input");
    std::vector<double> out(static_cast<std::size_t>(B * C * OH * OW), 0.0);
    const auto& vx = x.values();
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t oy = 0; oy < OH; ++oy)
                for (std::int64_t ox = 0; ox < OW; ++ox) {
                    double acc = 0.0;
                    std::int64_t cnt = 0;
                    for (std::int64_t ky = 0; ky < k; ++ky) {
                        const std::int64_t y = oy * stride - pad + ky;
                        if (y < 0 || y >= H) continue;
                        for (std::int64_t kx = 0; kx < k; ++kx) {
                            const std::int64_t xx = ox * stride - pad + kx;
                            if (xx < 0 || xx >= W) continue;
                            acc += vx[((b * C + c) * H + y) * W + xx];
                            ++cnt;
                        }
                    }
                    out[((b * C + c) * OH + oy) * OW + ox] = acc / static_cast<double>(cnt);
                }
    auto node = detail::result_node({B, C, OH, OW}, std::move(out), {x.ptr()});
    if (node->requires_grad) {
        auto px = x.ptr();
        node->backward_fn = [px, B, C, H, W, k, stride, pad, OH, OW](const detail::Node& self) {
            px->ensure_grad();
            for (std::int64_t b = 0; b < B; ++b)
                for (std::int64_t c = 0; c < C; ++c)
                    for (std::int64_t oy = 0; oy < OH; ++oy)
                        for (std::int64_t ox = 0; ox < OW; ++ox) {
                            std::int64_t cnt = 0;
                            for (std::int64_t ky = 0; ky < k; ++ky) {
                                const std::int64_t y = oy * stride - pad + ky;
                                if (y < 0 || y >= H) continue;
                                for (std::int64_t kx = 0; kx < k; ++kx) {
                                    const std::int64_t xx = ox * stride - pad + kx;
                                    if (xx >= 0 && xx < W) ++cnt;
                                }
                            }
                            const double g = self.grad[((b * C + c) * OH + oy) * OW + ox] / static_cast<double>(cnt);
                            for (std::int64_t ky = 0; ky < k; ++ky) {
                                const std::int64_t y = oy * stride - pad + ky;
                                if (y < 0 || y >= H) continue;
                                for (std::int64_t kx = 0; kx < k; ++kx) {
                                    const std::int64_t xx = ox * stride - pad + kx;
                                    if (xx < 0 || xx >= W) continue;
                                    px->grad[((b * C + c) * H + y) * W + xx] += g;
                                }
                            }
                        }
        };
    }
    return Tensor(node);
}

// Channel concatenation for 4-D maps (used by the concat fusion mode).
inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
    if (a.rank() != 4 || b.rank() != 4) op_error("concat_channels", "expects 4-D operands");
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
        op_error("concat_channels", "batch/spatial dimensions differ");
    const std::int64_t B = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), H = a.dim(2), W = a.dim(3);
    const std::int64_t hw = H * W;
    std::vector<double> out(static_cast<std::size_t>(B * (Ca + Cb) * hw));
    for (std::int64_t bb = 0; bb < B; ++bb) {
        std::copy_n(a.values().data() + bb * Ca * hw, Ca * hw, out.data() + bb * (Ca + Cb) * hw);
        std::copy_n(b.values().data() + bb * Cb * hw, Cb * hw, out.data() + bb * (Ca + Cb) * hw + Ca * hw);
    }
    auto node = detail::result_node({B, Ca + Cb, H, W}, std::move(out), {a.ptr(), b.ptr()});
    if (node->requires_grad) {
        auto pa = a.ptr();
        auto pb = b.ptr();
        node->backward_fn = [pa, pb, B, Ca, Cb, hw](const detail::Node& self) {
            for (std::int64_t bb = 0; bb < B; ++bb) {
                if (pa->requires_grad) {
                    pa->ensure_grad();
                    for (std::int64_t i = 0; i < Ca * hw; ++i)
                        pa->grad[bb * Ca * hw + i] += self.grad[bb * (Ca + Cb) * hw + i];
                }
                if (pb->requires_grad) {
                    pb->ensure_grad();
                    for (std::int64_t i = 0; i < Cb * hw; ++i)
                        pb->grad[bb * Cb * hw + i] += self.grad[bb * (Ca + Cb) * hw + Ca * hw + i];
                }
            }
        };
    }
    return Tensor(node);
}

// ---------------------------------------------------------------------------
// Losses.

inline Tensor l1_loss(const Tensor& pred, const Tensor& target) {
    if (pred.shape() != target.shape())
        op_error("l1_loss", "shape mismatch: " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
    return mean(abs_t(sub(pred, target)));
}

// ---------------------------------------------------------------------------
// Batch normalization. State carries the learnable affine pair plus running
// statistics; inference depends only on the running statistics.

struct BatchNormState {
    Tensor gamma, beta;
    std::vector<double> running_mean, running_var;
    double momentum = 0.1;
    double eps = 1e-5;
    std::string name;

    BatchNormState() = default;
    explicit BatchNormState(std::int64_t channels, std::string name_prefix = "bn") : name(name_prefix) {
        gamma = Tensor::full({channels}, 1.0, true);
        gamma.set_name(name_prefix + "/gamma");
        beta = Tensor::zeros({channels}, true);
        beta.set_name(name_prefix + "/beta");
        running_mean.assign(static_cast<std::size_t>(channels), 0.0);
        running_var.assign(static_cast<std::size_t>(channels), 1.0);
    }
    std::int64_t channels() const { return gamma.defined() ? gamma.dim(0) : 0; }
};

inline Tensor batch_norm(const Tensor& x, BatchNormState& st, bool training) {
    if (x.rank() != 2 && x.rank() != 4) op_error("batch_norm", "input must be 2-D or 4-D");
    const std::int64_t C = x.dim(1);
    if (C != st.channels())
        op_error("batch_norm", "channel count " + std::to_string(C) + " does not match state (" +
                                   std::to_string(st.channels()) + ")");
    Shape bshape = x.rank() == 2 ? Shape{1, C} : Shape{1, C, 1, 1};
    std::vector<std::size_t> axes = x.rank() == 2 ? std::vector<std::size_t>{0} : std::vector<std::size_t>{0, 2, 3};
    Tensor g = reshape(st.gamma, bshape);
    Tensor b = reshape(st.beta, bshape);

    if (training) {
        if (x.dim(0) < 2)
            throw std::runtime_error("batch_norm: training mode requires batch size >= 2");
        Tensor mu = reduce_mean(x, axes, true);
        Tensor xc = sub(x, mu);
        Tensor var = reduce_mean(mul(xc, xc), axes, true);
        Tensor xhat = div(xc, sqrt_t(var + st.eps));
        Tensor out = add(mul(xhat, g), b);
        // Running statistics track the batch statistics; no gradient flows here.
        for (std::int64_t c = 0; c < C; ++c) {
            st.running_mean[c] = (1.0 - st.momentum) * st.running_mean[c] + st.momentum * mu.values()[c];
            st.running_var[c] = (1.0 - st.momentum) * st.running_var[c] + st.momentum * var.values()[c];
        }
        return out;
    }
    Tensor rm = Tensor::from_values(bshape, st.running_mean);
    std::vector<double> inv(static_cast<std::size_t>(C));
    for (std::int64_t c = 0; c < C; ++c) inv[c] = 1.0 / std::sqrt(st.running_var[c] + st.eps);
    Tensor ri = Tensor::from_values(bshape, std::move(inv));
    return add(mul(mul(sub(x, rm), ri), g), b);
}

// ---------------------------------------------------------------------------
// Adam optimizer (bias-corrected).

struct AdamState {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::int64_t t = 0;
    std::vector<std::vector<double>> m, v;
};

inline void adam_step(std::vector<Tensor>& params, AdamState& st) {
    if (st.m.empty()) {
        st.m.resize(params.size());
        st.v.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            st.m[i].assign(params[i].values().size(), 0.0);
            st.v[i].assign(params[i].values().size(), 0.0);
        }
    }
    if (st.m.size() != params.size()) throw std::runtime_error("adam_step: state does not match parameter list");
    // Validate before mutating anything, so a rejected step leaves both the
    // parameters and the moments untouched.
    for (const auto& p : params) {
        const auto& node = p.node();
        for (double g : node.grad)
            if (!std::isfinite(g))
                throw std::runtime_error("adam_step: non-finite gradient for parameter '" +
                                         (node.name.empty() ? std::string("<unnamed>") : node.name) + "'");
    }
    st.t += 1;
    const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.t));
    const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& node = params[i].node();
        if (node.values.size() != st.m[i].size()) throw std::runtime_error("adam_step: parameter shape changed");
        const bool has_g = !node.grad.empty();
        std::vector<double> next = node.values;
        for (std::size_t k = 0; k < next.size(); ++k) {
            const double g = has_g ? node.grad[k] : 0.0;
            st.m[i][k] = st.beta1 * st.m[i][k] + (1.0 - st.beta1) * g;
            st.v[i][k] = st.beta2 * st.v[i][k] + (1.0 - st.beta2) * g * g;
            const double mhat = st.m[i][k] / bc1;
            const double vhat = st.v[i][k] / bc2;
            next[k] -= st.lr * mhat / (std::sqrt(vhat) + st.eps);
        }
        params[i].set_values(next);
    }
}

// ---------------------------------------------------------------------------
// Gradient evaluation helper: returns d(output)/d(leaf) for each listed leaf.
// Output must be scalar unless an explicit seed is given.

inline std::vector<Tensor> gradients(const Tensor& output, const std::vector<Tensor>& leaves,
                                     const Tensor* seed = nullptr) {
    for (const auto& l : leaves) l.node().grad.clear();
    if (seed)
        output.backward(*seed);
    else
        output.backward();
    std::vector<Tensor> out;
    out.reserve(leaves.size());
    for (const auto& l : leaves) {
        if (l.has_grad())
            out.push_back(Tensor::from_values(l.shape(), l.grad()));
        else
            out.push_back(Tensor::zeros(l.shape()));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Parameter initialization: uniform Kaiming-style fan-in scaling.

inline Tensor kaiming_uniform(Shape shape, std::int64_t fan_in, Rng& rng, std::string name) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : v) x = rng.uniform(-bound, bound);
    Tensor t = Tensor::from_values(std::move(shape), std::move(v), true);
    t.set_name(std::move(name));
    return t;
}

}  // namespace bonegraph
