#include "anchorseg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_set>

namespace anchorseg {

namespace {

thread_local std::uint64_t g_seq = 0;

NodePtr make_node(Shape shape, std::vector<double> data, bool requires_grad) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    n->seq = ++g_seq;
    if (shape_numel(n->shape) != n->numel())
        throw TensorError("tensor: shape/data size mismatch");
    return n;
}

NodePtr make_result(Shape shape, std::vector<double> data, std::vector<NodePtr> parents,
                    std::function<void(TensorNode&)> bwd, const char* op) {
    bool rg = false;
    for (const auto& p : parents) rg = rg || p->requires_grad;
    auto n = make_node(std::move(shape), std::move(data), rg);
    n->op = op;
    if (rg) {
        n->parents = std::move(parents);
        n->backward_fn = std::move(bwd);
    }
    return n;
}

std::vector<std::int64_t> row_major_strides(const Shape& s) {
    std::vector<std::int64_t> st(s.size(), 1);
    for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
    return st;
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
    std::size_t nd = std::max(a.size(), b.size());
    Shape out(nd, 1);
    for (std::size_t i = 0; i < nd; ++i) {
        std::int64_t da = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
        std::int64_t db = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
        if (da != db && da != 1 && db != 1)
            throw TensorError("broadcast: incompatible shapes " + shape_str(a) + " vs " + shape_str(b));
        out[i] = std::max(da, db);
    }
    return out;
}

// Strides of `in` aligned right against `out`, 0 where the input dim is broadcast.
std::vector<std::int64_t> broadcast_strides(const Shape& in, const Shape& out) {
    auto ist = row_major_strides(in);
    std::vector<std::int64_t> st(out.size(), 0);
    std::size_t off = out.size() - in.size();
    for (std::size_t i = 0; i < in.size(); ++i)
        st[off + i] = (in[i] == 1 && out[off + i] != 1) ? 0 : ist[i];
    return st;
}

// Iterates all indices of `shape`, calling fn(out_flat, a_off, b_off).
template <typename Fn>
void for_each_bcast(const Shape& shape, const std::vector<std::int64_t>& sa,
                    const std::vector<std::int64_t>& sb, Fn&& fn) {
    std::int64_t n = shape_numel(shape);
    std::size_t nd = shape.size();
    std::vector<std::int64_t> idx(nd, 0);
    std::int64_t oa = 0, ob = 0;
    for (std::int64_t flat = 0; flat < n; ++flat) {
        fn(flat, oa, ob);
        for (int d = static_cast<int>(nd) - 1; d >= 0; --d) {
            idx[d]++;
            oa += sa[d];
            ob += sb[d];
            if (idx[d] < shape[d]) break;
            oa -= sa[d] * shape[d];
            ob -= sb[d] * shape[d];
            idx[d] = 0;
        }
    }
}

using BinFwd = double (*)(double, double);
using BinBwd = void (*)(double, double, double, double&, double&);  // (a,b,gout, ga,gb)

Tensor binary_op(const Tensor& ta, const Tensor& tb, BinFwd fwd, BinBwd bwd, const char* name) {
    auto a = ta.node();
    auto b = tb.node();
    Shape oshape = broadcast_shape(a->shape, b->shape);
    std::int64_t n = shape_numel(oshape);
    std::vector<double> out(static_cast<std::size_t>(n));
    if (a->shape == b->shape) {
        for (std::int64_t i = 0; i < n; ++i) out[i] = fwd(a->data[i], b->data[i]);
    } else {
        auto sa = broadcast_strides(a->shape, oshape);
        auto sb = broadcast_strides(b->shape, oshape);
        for_each_bcast(oshape, sa, sb, [&](std::int64_t f, std::int64_t oa, std::int64_t ob) {
            out[f] = fwd(a->data[oa], b->data[ob]);
        });
    }
    auto backward = [a, b, fwd, bwd, oshape](TensorNode& self) {
        bool ga = a->requires_grad, gb = b->requires_grad;
        if (ga) a->ensure_grad();
        if (gb) b->ensure_grad();
        if (a->shape == b->shape) {
            for (std::int64_t i = 0; i < self.numel(); ++i) {
                double da = 0, db = 0;
                bwd(a->data[i], b->data[i], self.grad[i], da, db);
                if (ga) a->grad[i] += da;
                if (gb) b->grad[i] += db;
            }
        } else {
            auto sa = broadcast_strides(a->shape, oshape);
            auto sb = broadcast_strides(b->shape, oshape);
            for_each_bcast(oshape, sa, sb, [&](std::int64_t f, std::int64_t oa, std::int64_t ob) {
                double da = 0, db = 0;
                bwd(a->data[oa], b->data[ob], self.grad[f], da, db);
                if (ga) a->grad[oa] += da;
                if (gb) b->grad[ob] += db;
            });
        }
    };
    return Tensor(make_result(std::move(oshape), std::move(out), {a, b}, backward, name));
}

using UnFwd = double (*)(double);
using UnBwd = double (*)(double x, double y, double gout);  // returns gin

Tensor unary_op(const Tensor& ta, UnFwd fwd, UnBwd bwd, const char* name) {
    auto a = ta.node();
    std::vector<double> out(a->data.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(a->data[i]);
    auto outcopy = out;  // captured for backward where needed
    auto backward = [a, bwd, outcopy](TensorNode& self) {
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (std::size_t i = 0; i < self.data.size(); ++i)
            a->grad[i] += bwd(a->data[i], outcopy[i], self.grad[i]);
    };
    return Tensor(make_result(a->shape, std::move(out), {a}, backward, name));
}

int norm_axis(int axis, std::size_t ndim) {
    int ax = axis < 0 ? axis + static_cast<int>(ndim) : axis;
    if (ax < 0 || ax >= static_cast<int>(ndim)) throw TensorError("axis out of range");
    return ax;
}

}  // namespace

std::int64_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::int64_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& s) {
    std::string r = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) r += ",";
        r += std::to_string(s[i]);
    }
    return r + "]";
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    std::int64_t n = shape_numel(shape);
    return Tensor(make_node(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    std::int64_t n = shape_numel(shape);
    return Tensor(make_node(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), value), requires_grad));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    return Tensor(make_node(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return Tensor(make_node(Shape{}, {value}, requires_grad));
}

const std::vector<double>& Tensor::grad() const {
    if (!node_->requires_grad) throw TensorError("grad queried on a tensor without requires_grad");
    const_cast<TensorNode*>(node_.get())->ensure_grad();
    return node_->grad;
}

double Tensor::item() const {
    if (numel() != 1) throw TensorError("item() on non-scalar tensor of shape " + shape_str(shape()));
    return node_->data[0];
}

double Tensor::at(std::initializer_list<std::int64_t> idx) const {
    if (idx.size() != ndim()) throw TensorError("at(): rank mismatch");
    auto st = row_major_strides(node_->shape);
    std::int64_t off = 0;
    std::size_t d = 0;
    for (auto i : idx) off += i * st[d++];
    return node_->data[off];
}

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(a, b,
        [](double x, double y) { return x + y; },
        [](double, double, double g, double& da, double& db) { da = g; db = g; }, "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(a, b,
        [](double x, double y) { return x - y; },
        [](double, double, double g, double& da, double& db) { da = g; db = -g; }, "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(a, b,
        [](double x, double y) { return x * y; },
        [](double x, double y, double g, double& da, double& db) { da = g * y; db = g * x; }, "mul");
}

Tensor div(const Tensor& a, const Tensor& b) {
    return binary_op(a, b,
        [](double x, double y) { return x / y; },
        [](double x, double y, double g, double& da, double& db) {
            da = g / y;
            db = -g * x / (y * y);
        }, "div");
}

Tensor neg(const Tensor& a) {
    return unary_op(a, [](double x) { return -x; },
                    [](double, double, double g) { return -g; }, "neg");
}

Tensor exp(const Tensor& a) {
    return unary_op(a, [](double x) { return std::exp(x); },
                    [](double, double y, double g) { return g * y; }, "exp");
}

Tensor log(const Tensor& a) {
    return unary_op(a, [](double x) { return std::log(x); },
                    [](double x, double, double g) { return g / x; }, "log");
}

Tensor sin(const Tensor& a) {
    return unary_op(a, [](double x) { return std::sin(x); },
                    [](double x, double, double g) { return g * std::cos(x); }, "sin");
}

Tensor cos(const Tensor& a) {
    return unary_op(a, [](double x) { return std::cos(x); },
                    [](double x, double, double g) { return -g * std::sin(x); }, "cos");
}

Tensor relu(const Tensor& a) {
    return unary_op(a, [](double x) { return x > 0 ? x : 0.0; },
                    [](double x, double, double g) { return x > 0 ? g : 0.0; }, "relu");
}

Tensor sigmoid(const Tensor& a) {
    return unary_op(a,
        [](double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
        [](double, double y, double g) { return g * y * (1.0 - y); }, "sigmoid");
}

Tensor sum(const Tensor& ta) {
    auto a = ta.node();
    double s = 0;
    for (double v : a->data) s += v;
    auto backward = [a](TensorNode& self) {
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (auto& g : a->grad) g += self.grad[0];
    };
    return Tensor(make_result(Shape{}, {s}, {a}, backward, "sum"));
}

namespace {

// Shared index machinery for single-axis reductions: out[o] over inner runs.
struct AxisPlan {
    std::int64_t outer, axis_n, inner;
    Shape out_shape;
};

AxisPlan axis_plan(const Shape& s, int ax, bool keepdim) {
    AxisPlan p{1, s[ax], 1, {}};
    for (int i = 0; i < ax; ++i) p.outer *= s[i];
    for (std::size_t i = ax + 1; i < s.size(); ++i) p.inner *= s[i];
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (static_cast<int>(i) == ax) {
            if (keepdim) p.out_shape.push_back(1);
        } else {
            p.out_shape.push_back(s[i]);
        }
    }
    return p;
}

}  // namespace

Tensor sum(const Tensor& ta, int axis, bool keepdim) {
    auto a = ta.node();
    int ax = norm_axis(axis, a->shape.size());
    auto p = axis_plan(a->shape, ax, keepdim);
    std::vector<double> out(static_cast<std::size_t>(p.outer * p.inner), 0.0);
    for (std::int64_t o = 0; o < p.outer; ++o)
        for (std::int64_t k = 0; k < p.axis_n; ++k)
            for (std::int64_t i = 0; i < p.inner; ++i)
                out[o * p.inner + i] += a->data[(o * p.axis_n + k) * p.inner + i];
    auto backward = [a, p](TensorNode& self) {
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (std::int64_t o = 0; o < p.outer; ++o)
            for (std::int64_t k = 0; k < p.axis_n; ++k)
                for (std::int64_t i = 0; i < p.inner; ++i)
                    a->grad[(o * p.axis_n + k) * p.inner + i] += self.grad[o * p.inner + i];
    };
    return Tensor(make_result(p.out_shape, std::move(out), {a}, backward, "sum_axis"));
}

Tensor mean(const Tensor& a) {
    return sum(a) * (1.0 / static_cast<double>(a.numel()));
}

Tensor mean(const Tensor& a, int axis, bool keepdim) {
    int ax = norm_axis(axis, a.ndim());
    return sum(a, axis, keepdim) * (1.0 / static_cast<double>(a.shape()[ax]));
}

Tensor max_reduce(const Tensor& ta, int axis, bool keepdim) {
    auto a = ta.node();
    int ax = norm_axis(axis, a->shape.size());
    auto p = axis_plan(a->shape, ax, keepdim);
    std::vector<double> out(static_cast<std::size_t>(p.outer * p.inner));
    auto argmax = std::make_shared<std::vector<std::int64_t>>(out.size());
    for (std::int64_t o = 0; o < p.outer; ++o)
        for (std::int64_t i = 0; i < p.inner; ++i) {
            std::int64_t best = (o * p.axis_n) * p.inner + i;
            for (std::int64_t k = 1; k < p.axis_n; ++k) {
                std::int64_t idx = (o * p.axis_n + k) * p.inner + i;
                if (a->data[idx] > a->data[best]) best = idx;
            }
            out[o * p.inner + i] = a->data[best];
            (*argmax)[o * p.inner + i] = best;
        }
    auto backward = [a, argmax](TensorNode& self) {
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (std::size_t i = 0; i < self.data.size(); ++i)
            a->grad[(*argmax)[i]] += self.grad[i];
    };
    return Tensor(make_result(p.out_shape, std::move(out), {a}, backward, "max"));
}

Tensor reshape(const Tensor& ta, Shape shape) {
    auto a = ta.node();
    // one -1 dimension is inferred
    std::int64_t known = 1;
    int infer = -1;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (shape[i] == -1) {
            if (infer >= 0) throw TensorError("reshape: multiple -1 dims");
            infer = static_cast<int>(i);
        } else {
            known *= shape[i];
        }
    }
    if (infer >= 0) shape[infer] = ta.numel() / known;
    if (shape_numel(shape) != ta.numel())
        throw TensorError("reshape: numel mismatch " + shape_str(ta.shape()) + " -> " + shape_str(shape));
    auto backward = [a](TensorNode& self) {
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (std::size_t i = 0; i < self.data.size(); ++i) a->grad[i] += self.grad[i];
    };
    return Tensor(make_result(std::move(shape), a->data, {a}, backward, "reshape"));
}

Tensor permute(const Tensor& ta, const std::vector<int>& axes) {
    auto a = ta.node();
    std::size_t nd = a->shape.size();
    if (axes.size() != nd) throw TensorError("permute: axes rank mismatch");
    Shape oshape(nd);
    for (std::size_t i = 0; i < nd; ++i) oshape[i] = a->shape[axes[i]];
    auto ist = row_major_strides(a->shape);
    std::vector<std::int64_t> src_stride(nd);
    for (std::size_t i = 0; i < nd; ++i) src_stride[i] = ist[axes[i]];
    std::int64_t n = ta.numel();
    auto fwd_map = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(n));
    std::vector<double> out(static_cast<std::size_t>(n));
    std::vector<std::int64_t> idx(nd, 0);
    std::int64_t src = 0;
    for (std::int64_t f = 0; f < n; ++f) {
        out[f] = a->data[src];
        (*fwd_map)[f] = src;
        for (int d = static_cast<int>(nd) - 1; d >= 0; --d) {
            idx[d]++;
            src += src_stride[d];
            if (idx[d] < oshape[d]) break;
            src -= src_stride[d] * oshape[d];
            idx[d] = 0;
        }
    }
    auto backward = [a, fwd_map](TensorNode& self) {
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (std::size_t f = 0; f < self.data.size(); ++f) a->grad[(*fwd_map)[f]] += self.grad[f];
    };
    return Tensor(make_result(std::move(oshape), std::move(out), {a}, backward, "permute"));
}

Tensor transpose2d(const Tensor& a) {
    if (a.ndim() != 2) throw TensorError("transpose2d: rank != 2");
    return permute(a, {1, 0});
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw TensorError("concat: empty input");
    int ax = norm_axis(axis, parts[0].ndim());
    Shape oshape = parts[0].shape();
    std::int64_t total = 0;
    for (const auto& t : parts) {
        if (t.ndim() != parts[0].ndim()) throw TensorError("concat: rank mismatch");
        for (std::size_t d = 0; d < oshape.size(); ++d)
            if (static_cast<int>(d) != ax && t.shape()[d] != oshape[d])
                throw TensorError("concat: shape mismatch off-axis");
        total += t.shape()[ax];
    }
    oshape[ax] = total;
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < ax; ++i) outer *= oshape[i];
    for (std::size_t i = ax + 1; i < oshape.size(); ++i) inner *= oshape[i];
    std::vector<double> out(static_cast<std::size_t>(shape_numel(oshape)));
    std::vector<NodePtr> nodes;
    nodes.reserve(parts.size());
    for (const auto& t : parts) nodes.push_back(t.node());
    std::int64_t off = 0;
    for (const auto& n : nodes) {
        std::int64_t an = n->shape[ax];
        for (std::int64_t o = 0; o < outer; ++o)
            std::copy(n->data.begin() + o * an * inner, n->data.begin() + (o + 1) * an * inner,
                      out.begin() + (o * total + off) * inner);
        off += an;
    }
    auto backward = [nodes, outer, inner, total, ax](TensorNode& self) {
        std::int64_t off2 = 0;
        for (const auto& n : nodes) {
            std::int64_t an = n->shape[ax];
            if (n->requires_grad) {
                n->ensure_grad();
                for (std::int64_t o = 0; o < outer; ++o)
                    for (std::int64_t i = 0; i < an * inner; ++i)
                        n->grad[o * an * inner + i] += self.grad[(o * total + off2) * inner + i];
            }
            off2 += an;
        }
    };
    return Tensor(make_result(std::move(oshape), std::move(out), nodes, backward, "concat"));
}

Tensor slice(const Tensor& ta, int axis, std::int64_t start, std::int64_t end) {
    auto a = ta.node();
    int ax = norm_axis(axis, a->shape.size());
    std::int64_t an = a->shape[ax];
    if (start < 0 || end > an || start >= end) throw TensorError("slice: bad range");
    Shape oshape = a->shape;
    oshape[ax] = end - start;
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < ax; ++i) outer *= a->shape[i];
    for (std::size_t i = ax + 1; i < a->shape.size(); ++i) inner *= a->shape[i];
    std::int64_t len = end - start;
    std::vector<double> out(static_cast<std::size_t>(outer * len * inner));
    for (std::int64_t o = 0; o < outer; ++o)
        std::copy(a->data.begin() + (o * an + start) * inner,
                  a->data.begin() + (o * an + end) * inner, out.begin() + o * len * inner);
    auto backward = [a, outer, inner, an, start, len](TensorNode& self) {
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (std::int64_t o = 0; o < outer; ++o)
            for (std::int64_t i = 0; i < len * inner; ++i)
                a->grad[(o * an + start) * inner + i] += self.grad[o * len * inner + i];
    };
    return Tensor(make_result(std::move(oshape), std::move(out), {a}, backward, "slice"));
}

Tensor detach(const Tensor& a) {
    return Tensor::from_data(a.shape(), a.data(), false);
}

Tensor matmul(const Tensor& ta, const Tensor& tb) {
    auto a = ta.node();
    auto b = tb.node();
    if (a->shape.size() != 2 || b->shape.size() != 2) throw TensorError("matmul: rank != 2");
    std::int64_t m = a->shape[0], k = a->shape[1], k2 = b->shape[0], n = b->shape[1];
    if (k != k2)
        throw TensorError("matmul: inner dim mismatch " + shape_str(a->shape) + " x " + shape_str(b->shape));
    std::vector<double> out(static_cast<std::size_t>(m * n), 0.0);
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t p = 0; p < k; ++p) {
            double av = a->data[i * k + p];
            if (av == 0.0) continue;
            const double* brow = &b->data[p * n];
            double* orow = &out[i * n];
            for (std::int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    auto backward = [a, b, m, k, n](TensorNode& self) {
        if (a->requires_grad) {
            a->ensure_grad();
            // dA = dC * B^T
            for (std::int64_t i = 0; i < m; ++i)
                for (std::int64_t j = 0; j < n; ++j) {
                    double g = self.grad[i * n + j];
                    if (g == 0.0) continue;
                    for (std::int64_t p = 0; p < k; ++p) a->grad[i * k + p] += g * b->data[p * n + j];
                }
        }
        if (b->requires_grad) {
            b->ensure_grad();
            // dB = A^T * dC
            for (std::int64_t i = 0; i < m; ++i)
                for (std::int64_t p = 0; p < k; ++p) {
                    double av = a->data[i * k + p];
                    if (av == 0.0) continue;
                    for (std::int64_t j = 0; j < n; ++j) b->grad[p * n + j] += av * self.grad[i * n + j];
                }
        }
    };
    return Tensor(make_result({m, n}, std::move(out), {a, b}, backward, "matmul"));
}

Tensor softmax(const Tensor& ta, int axis) {
    auto a = ta.node();
    int ax = norm_axis(axis, a->shape.size());
    auto p = axis_plan(a->shape, ax, true);
    std::vector<double> out(a->data.size());
    for (std::int64_t o = 0; o < p.outer; ++o)
        for (std::int64_t i = 0; i < p.inner; ++i) {
            double mx = -1e300;
            for (std::int64_t k = 0; k < p.axis_n; ++k)
                mx = std::max(mx, a->data[(o * p.axis_n + k) * p.inner + i]);
            if (!std::isfinite(mx)) throw TensorError("softmax: non-finite input");
            double z = 0;
            for (std::int64_t k = 0; k < p.axis_n; ++k)
                z += std::exp(a->data[(o * p.axis_n + k) * p.inner + i] - mx);
            for (std::int64_t k = 0; k < p.axis_n; ++k) {
                std::int64_t idx = (o * p.axis_n + k) * p.inner + i;
                out[idx] = std::exp(a->data[idx] - mx) / z;
            }
        }
    auto y = std::make_shared<std::vector<double>>(out);
    auto backward = [a, p, y](TensorNode& self) {
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (std::int64_t o = 0; o < p.outer; ++o)
            for (std::int64_t i = 0; i < p.inner; ++i) {
                double dot = 0;
                for (std::int64_t k = 0; k < p.axis_n; ++k) {
                    std::int64_t idx = (o * p.axis_n + k) * p.inner + i;
                    dot += (*y)[idx] * self.grad[idx];
                }
                for (std::int64_t k = 0; k < p.axis_n; ++k) {
                    std::int64_t idx = (o * p.axis_n + k) * p.inner + i;
                    a->grad[idx] += (*y)[idx] * (self.grad[idx] - dot);
                }
            }
    };
    return Tensor(make_result(a->shape, std::move(out), {a}, backward, "softmax"));
}

Tensor layer_norm(const Tensor& ta, const Tensor& tgain, const Tensor& tbias, double eps) {
    auto a = ta.node();
    auto gain = tgain.node();
    auto bias = tbias.node();
    if (a->shape.empty()) throw TensorError("layer_norm: scalar input");
    std::int64_t d = a->shape.back();
    if (d < 2) throw TensorError("layer_norm: last axis must have size >= 2");
    if (gain->numel() != d || bias->numel() != d) throw TensorError("layer_norm: gain/bias size mismatch");
    std::int64_t rows = ta.numel() / d;
    std::vector<double> out(a->data.size());
    auto xhat = std::make_shared<std::vector<double>>(a->data.size());
    auto rstd = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* x = &a->data[r * d];
        double mu = 0;
        for (std::int64_t j = 0; j < d; ++j) mu += x[j];
        mu /= d;
        double var = 0;
        for (std::int64_t j = 0; j < d; ++j) var += (x[j] - mu) * (x[j] - mu);
        var /= d;
        double rs = 1.0 / std::sqrt(var + eps);
        (*rstd)[r] = rs;
        for (std::int64_t j = 0; j < d; ++j) {
            double xh = (x[j] - mu) * rs;
            (*xhat)[r * d + j] = xh;
            out[r * d + j] = xh * gain->data[j] + bias->data[j];
        }
    }
    auto backward = [a, gain, bias, d, rows, xhat, rstd](TensorNode& self) {
        if (gain->requires_grad) gain->ensure_grad();
        if (bias->requires_grad) bias->ensure_grad();
        if (a->requires_grad) a->ensure_grad();
        for (std::int64_t r = 0; r < rows; ++r) {
            const double* g = &self.grad[r * d];
            const double* xh = &(*xhat)[r * d];
            if (gain->requires_grad)
                for (std::int64_t j = 0; j < d; ++j) gain->grad[j] += g[j] * xh[j];
            if (bias->requires_grad)
                for (std::int64_t j = 0; j < d; ++j) bias->grad[j] += g[j];
            if (a->requires_grad) {
                double m1 = 0, m2 = 0;
                for (std::int64_t j = 0; j < d; ++j) {
                    double dxh = g[j] * gain->data[j];
                    m1 += dxh;
                    m2 += dxh * xh[j];
                }
                m1 /= d;
                m2 /= d;
                for (std::int64_t j = 0; j < d; ++j) {
                    double dxh = g[j] * gain->data[j];
                    a->grad[r * d + j] += (*rstd)[r] * (dxh - m1 - xh[j] * m2);
                }
            }
        }
    };
    return Tensor(make_result(a->shape, std::move(out), {a, gain, bias}, backward, "layer_norm"));
}

BilinearResult bilinear_sample(const Tensor& tfeat, const std::vector<std::array<double, 2>>& uv) {
    auto feat = tfeat.node();
    if (feat->shape.size() != 3) throw TensorError("bilinear_sample: feature map must be C x h x w");
    std::int64_t C = feat->shape[0], h = feat->shape[1], w = feat->shape[2];
    std::int64_t N = static_cast<std::int64_t>(uv.size());
    std::vector<double> out(static_cast<std::size_t>(N * C), 0.0);
    std::vector<std::uint8_t> valid(static_cast<std::size_t>(N), 0);
    struct Tap { std::int64_t idx[4]; double wgt[4]; };
    auto taps = std::make_shared<std::vector<Tap>>();
    taps->reserve(uv.size());
    for (std::int64_t p = 0; p < N; ++p) {
        double u = uv[p][0], v = uv[p][1];
        Tap t{};
        if (!(u >= 0.0 && u <= w - 1 && v >= 0.0 && v <= h - 1)) {
            t.wgt[0] = t.wgt[1] = t.wgt[2] = t.wgt[3] = 0;
            taps->push_back(t);
            continue;
        }
        valid[p] = 1;
        std::int64_t x0 = static_cast<std::int64_t>(std::floor(u));
        std::int64_t y0 = static_cast<std::int64_t>(std::floor(v));
        if (x0 == w - 1) x0 = w - 2 >= 0 ? w - 2 : 0;
        if (y0 == h - 1) y0 = h - 2 >= 0 ? h - 2 : 0;
        std::int64_t x1 = std::min(x0 + 1, w - 1);
        std::int64_t y1 = std::min(y0 + 1, h - 1);
        double fx = u - x0, fy = v - y0;
        t.idx[0] = y0 * w + x0; t.wgt[0] = (1 - fx) * (1 - fy);
        t.idx[1] = y0 * w + x1; t.wgt[1] = fx * (1 - fy);
        t.idx[2] = y1 * w + x0; t.wgt[2] = (1 - fx) * fy;
        t.idx[3] = y1 * w + x1; t.wgt[3] = fx * fy;
        for (std::int64_t c = 0; c < C; ++c) {
            const double* plane = &feat->data[c * h * w];
            double acc = 0;
            for (int q = 0; q < 4; ++q) acc += t.wgt[q] * plane[t.idx[q]];
            out[p * C + c] = acc;
        }
        taps->push_back(t);
    }
    auto backward = [feat, taps, C, h, w, N](TensorNode& self) {
        if (!feat->requires_grad) return;
        feat->ensure_grad();
        for (std::int64_t p = 0; p < N; ++p) {
            const Tap& t = (*taps)[p];
            if (t.wgt[0] == 0 && t.wgt[1] == 0 && t.wgt[2] == 0 && t.wgt[3] == 0) continue;
            for (std::int64_t c = 0; c < C; ++c) {
                double g = self.grad[p * C + c];
                if (g == 0.0) continue;
                double* plane = &feat->grad[c * h * w];
                for (int q = 0; q < 4; ++q) plane[t.idx[q]] += g * t.wgt[q];
            }
        }
    };
    Tensor values(make_result({N, C}, std::move(out), {feat}, backward, "bilinear"));
    return {values, std::move(valid)};
}

Tensor softplus(const Tensor& a) {
    // log(1 + e^x) = relu(x) + log(1 + e^{-|x|})
    return relu(a) + log(exp(neg(abs_(a))) + 1.0);
}

Tensor abs_(const Tensor& a) {
    return relu(a) + relu(neg(a));
}

Tensor sqrt_(const Tensor& a) {
    return exp(log(a) * 0.5);
}

Tensor clamp(const Tensor& a, double lo, double hi) {
    // lo + relu(x - lo) - relu(x - hi)
    return relu(a - lo) - relu(a - hi) + lo;
}

void backward(const Tensor& loss) {
    auto root = loss.node();
    if (!root) throw TensorError("backward: undefined tensor");
    if (loss.numel() != 1) throw TensorError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    if (!root->requires_grad) return;

    // reachable set
    std::unordered_set<TensorNode*> seen;
    std::vector<NodePtr> order;
    std::vector<NodePtr> stack{root};
    seen.insert(root.get());
    while (!stack.empty()) {
        auto n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (const auto& p : n->parents)
            if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p);
    }
    // define-by-run guarantees seq increases from inputs to outputs
    std::sort(order.begin(), order.end(),
              [](const NodePtr& x, const NodePtr& y) { return x->seq > y->seq; });
    root->ensure_grad();
    root->grad[0] += 1.0;
    for (const auto& n : order) {
        if (n->backward_fn) {
            n->ensure_grad();
            n->backward_fn(*n);
        }
    }
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor& x, double step) {
    Tensor y = f(x);
    x.zero_grad();
    backward(y);
    std::vector<double> analytic = x.grad();
    double worst = 0;
    for (std::size_t i = 0; i < x.data().size(); ++i) {
        double keep = x.mutable_data()[i];
        x.mutable_data()[i] = keep + step;
        double fp = f(x).item();
        x.mutable_data()[i] = keep - step;
        double fm = f(x).item();
        x.mutable_data()[i] = keep;
        double fd = (fp - fm) / (2 * step);
        double err = std::abs(analytic[i] - fd) / std::max(1.0, std::abs(fd));
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace anchorseg
