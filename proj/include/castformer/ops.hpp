#pragma once

#include <map>
#include <mutex>

#include "castformer/tensor.hpp"

// Tensor algebra primitives. Every backward is itself expressed through these
// ops, so gradients of gradients work (needed by the WGAN-GP penalty).

namespace castformer {

// ---------------------------------------------------------------------------
// broadcasting helpers

namespace detail {

inline Shape broadcast_shapes(const Shape& a, const Shape& b) {
    size_t ra = a.size(), rb = b.size(), r = std::max(ra, rb);
    Shape out(r);
    for (size_t i = 0; i < r; ++i) {
        int64_t da = i < r - ra ? 1 : a[i - (r - ra)];
        int64_t db = i < r - rb ? 1 : b[i - (r - rb)];
        check(da == db || da == 1 || db == 1,
              "broadcast: incompatible shapes " + shape_str(a) + " vs " + shape_str(b));
        out[i] = std::max(da, db);
    }
    return out;
}

inline std::vector<int64_t> row_major_strides(const Shape& s) {
    std::vector<int64_t> st(s.size());
    int64_t acc = 1;
    for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
        st[static_cast<size_t>(i)] = acc;
        acc *= s[static_cast<size_t>(i)];
    }
    return st;
}

// strides of operand `s` aligned to broadcast result `out`; 0 where broadcast
inline std::vector<int64_t> bcast_strides(const Shape& s, const Shape& out) {
    std::vector<int64_t> st(out.size(), 0);
    auto own = row_major_strides(s);
    size_t off = out.size() - s.size();
    for (size_t i = 0; i < s.size(); ++i) {
        if (s[i] != 1) st[off + i] = own[i];
    }
    return st;
}

// odometer walk over `out`, calling f(out_flat, off_a, off_b)
template <typename F>
inline void bcast_walk2(const Shape& out, const std::vector<int64_t>& sa,
                        const std::vector<int64_t>& sb, F&& f) {
    const int64_t total = numel_of(out);
    const size_t r = out.size();
    std::vector<int64_t> ctr(r, 0);
    int64_t oa = 0, ob = 0;
    for (int64_t i = 0; i < total; ++i) {
        f(i, oa, ob);
        for (int j = static_cast<int>(r) - 1; j >= 0; --j) {
            size_t ju = static_cast<size_t>(j);
            if (++ctr[ju] < out[ju]) {
                oa += sa[ju];
                ob += sb[ju];
                break;
            }
            ctr[ju] = 0;
            oa -= sa[ju] * (out[ju] - 1);
            ob -= sb[ju] * (out[ju] - 1);
        }
    }
}

template <typename F>
inline void bcast_walk1(const Shape& out, const std::vector<int64_t>& sa, F&& f) {
    std::vector<int64_t> dummy(out.size(), 0);
    bcast_walk2(out, sa, dummy, [&](int64_t i, int64_t oa, int64_t) { f(i, oa); });
}

} // namespace detail

// ---------------------------------------------------------------------------
// elementwise binary

namespace detail {

template <typename F>
inline Tensor ew_binary_vals(const char* name, const Tensor& a, const Tensor& b, F f,
                             std::function<void(BackwardPass&, const Tensor&)> back,
                             std::vector<Tensor> parents) {
    if (a.shape() == b.shape()) {
        const auto& av = a.values();
        const auto& bv = b.values();
        std::vector<double> out(av.size());
        for (size_t i = 0; i < av.size(); ++i) out[i] = f(av[i], bv[i]);
        return make_op(name, a.shape(), std::move(out), std::move(parents), std::move(back));
    }
    Shape os = broadcast_shapes(a.shape(), b.shape());
    auto sa = bcast_strides(a.shape(), os);
    auto sb = bcast_strides(b.shape(), os);
    std::vector<double> out(static_cast<size_t>(numel_of(os)));
    const double* pa = a.values().data();
    const double* pb = b.values().data();
    bcast_walk2(os, sa, sb, [&](int64_t i, int64_t oa, int64_t ob) {
        out[static_cast<size_t>(i)] = f(pa[oa], pb[ob]);
    });
    return make_op(name, std::move(os), std::move(out), std::move(parents), std::move(back));
}

} // namespace detail

Tensor mul(const Tensor& a, const Tensor& b);
Tensor sum_to(const Tensor& x, const Shape& target);
Tensor broadcast_to(const Tensor& x, const Shape& target);
Tensor neg(const Tensor& x);
Tensor mul_scalar(const Tensor& x, double c);

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::ew_binary_vals(
        "add", a, b, [](double x, double y) { return x + y; },
        [a, b](BackwardPass& p, const Tensor& gy) {
            p.accumulate(a, sum_to(gy, a.shape()));
            p.accumulate(b, sum_to(gy, b.shape()));
        },
        {a, b});
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::ew_binary_vals(
        "sub", a, b, [](double x, double y) { return x - y; },
        [a, b](BackwardPass& p, const Tensor& gy) {
            p.accumulate(a, sum_to(gy, a.shape()));
            p.accumulate(b, sum_to(neg(gy), b.shape()));
        },
        {a, b});
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::ew_binary_vals(
        "mul", a, b, [](double x, double y) { return x * y; },
        [a, b](BackwardPass& p, const Tensor& gy) {
            p.accumulate(a, sum_to(mul(gy, b), a.shape()));
            p.accumulate(b, sum_to(mul(gy, a), b.shape()));
        },
        {a, b});
}

// ---------------------------------------------------------------------------
// elementwise unary / scalar

namespace detail {

template <typename F>
inline Tensor ew_unary_vals(const char* name, const Tensor& x, F f,
                            std::function<void(BackwardPass&, const Tensor&)> back,
                            std::vector<Tensor> parents) {
    const auto& xv = x.values();
    std::vector<double> out(xv.size());
    for (size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
    return make_op(name, x.shape(), std::move(out), std::move(parents), std::move(back));
}

} // namespace detail

inline Tensor add_scalar(const Tensor& x, double c) {
    return detail::ew_unary_vals(
        "add_s", x, [c](double v) { return v + c; },
        [x](BackwardPass& p, const Tensor& gy) { p.accumulate(x, gy); }, {x});
}

inline Tensor mul_scalar(const Tensor& x, double c) {
    return detail::ew_unary_vals(
        "mul_s", x, [c](double v) { return v * c; },
        [x, c](BackwardPass& p, const Tensor& gy) { p.accumulate(x, mul_scalar(gy, c)); }, {x});
}

inline Tensor neg(const Tensor& x) { return mul_scalar(x, -1.0); }

Tensor texp(const Tensor& x);
Tensor reciprocal(const Tensor& x);

// backwards recompute the forward value instead of capturing the output;
// capturing the output in its own closure would create an ownership cycle
inline Tensor texp(const Tensor& x) {
    return detail::ew_unary_vals(
        "exp", x, [](double v) { return std::exp(v); },
        [x](BackwardPass& p, const Tensor& gy) { p.accumulate(x, mul(gy, texp(x))); }, {x});
}

inline Tensor reciprocal(const Tensor& x) {
    return detail::ew_unary_vals(
        "recip", x, [](double v) { return 1.0 / v; },
        [x](BackwardPass& p, const Tensor& gy) {
            Tensor y = reciprocal(x);
            p.accumulate(x, neg(mul(gy, mul(y, y))));
        },
        {x});
}

inline Tensor tlog(const Tensor& x) {
    return detail::ew_unary_vals(
        "log", x, [](double v) { return std::log(v); },
        [x](BackwardPass& p, const Tensor& gy) { p.accumulate(x, mul(gy, reciprocal(x))); },
        {x});
}

inline Tensor ttanh(const Tensor& x) {
    return detail::ew_unary_vals(
        "tanh", x, [](double v) { return std::tanh(v); },
        [x](BackwardPass& p, const Tensor& gy) {
            Tensor y = ttanh(x);
            p.accumulate(x, mul(gy, add_scalar(neg(mul(y, y)), 1.0)));
        },
        {x});
}

inline Tensor terf(const Tensor& x) {
    return detail::ew_unary_vals(
        "erf", x, [](double v) { return std::erf(v); },
        [x](BackwardPass& p, const Tensor& gy) {
            const double c = 2.0 / std::sqrt(M_PI);
            p.accumulate(x, mul(gy, mul_scalar(texp(neg(mul(x, x))), c)));
        },
        {x});
}

inline Tensor pow_scalar(const Tensor& x, double e) {
    return detail::ew_unary_vals(
        "pow_s", x, [e](double v) { return std::pow(v, e); },
        [x, e](BackwardPass& p, const Tensor& gy) {
            p.accumulate(x, mul(gy, mul_scalar(pow_scalar(x, e - 1.0), e)));
        },
        {x});
}

inline Tensor tsqrt(const Tensor& x) { return pow_scalar(x, 0.5); }

inline Tensor tabs(const Tensor& x) {
    const auto& xv = x.values();
    std::vector<double> sign(xv.size());
    for (size_t i = 0; i < xv.size(); ++i) sign[i] = xv[i] < 0.0 ? -1.0 : 1.0;
    Tensor sgn = Tensor::from_values(x.shape(), std::move(sign));
    return detail::ew_unary_vals(
        "abs", x, [](double v) { return std::fabs(v); },
        [x, sgn](BackwardPass& p, const Tensor& gy) { p.accumulate(x, mul(gy, sgn)); }, {x});
}

inline Tensor relu(const Tensor& x) {
    const auto& xv = x.values();
    std::vector<double> mv(xv.size());
    for (size_t i = 0; i < xv.size(); ++i) mv[i] = xv[i] > 0.0 ? 1.0 : 0.0;
    Tensor mask = Tensor::from_values(x.shape(), std::move(mv));
    return detail::ew_unary_vals(
        "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
        [x, mask](BackwardPass& p, const Tensor& gy) { p.accumulate(x, mul(gy, mask)); }, {x});
}

// zero gradient outside (lo, hi): a clamped coordinate stops moving
inline Tensor clamp(const Tensor& x, double lo, double hi) {
    const auto& xv = x.values();
    std::vector<double> mv(xv.size());
    for (size_t i = 0; i < xv.size(); ++i) mv[i] = (xv[i] > lo && xv[i] < hi) ? 1.0 : 0.0;
    Tensor mask = Tensor::from_values(x.shape(), std::move(mv));
    return detail::ew_unary_vals(
        "clamp", x, [lo, hi](double v) { return std::min(std::max(v, lo), hi); },
        [x, mask](BackwardPass& p, const Tensor& gy) { p.accumulate(x, mul(gy, mask)); }, {x});
}

inline Tensor div(const Tensor& a, const Tensor& b) { return mul(a, reciprocal(b)); }

// ---------------------------------------------------------------------------
// reductions / broadcast materialization

// Sum x down to `target` (right-aligned; each aligned dim equal or 1;
// missing leading dims are summed away). Exact adjoint of broadcast_to.
inline Tensor sum_to(const Tensor& x, const Shape& target) {
    if (x.shape() == target) return x;
    check(target.size() <= x.shape().size(), "sum_to: target rank exceeds input rank");
    size_t off = x.shape().size() - target.size();
    for (size_t i = 0; i < target.size(); ++i) {
        check(target[i] == x.shape()[off + i] || target[i] == 1,
              "sum_to: invalid target " + shape_str(target) + " from " + shape_str(x.shape()));
    }
    auto st = detail::bcast_strides(target, x.shape());
    std::vector<double> out(static_cast<size_t>(numel_of(target)), 0.0);
    const double* px = x.values().data();
    detail::bcast_walk1(x.shape(), st,
                        [&](int64_t i, int64_t ot) { out[static_cast<size_t>(ot)] += px[i]; });
    Tensor xt = x;
    return detail::make_op("sum_to", target, std::move(out), {x},
                           [xt](BackwardPass& p, const Tensor& gy) {
                               p.accumulate(xt, broadcast_to(gy, xt.shape()));
                           });
}

inline Tensor broadcast_to(const Tensor& x, const Shape& target) {
    if (x.shape() == target) return x;
    auto st = detail::bcast_strides(x.shape(), target);
    std::vector<double> out(static_cast<size_t>(numel_of(target)));
    const double* px = x.values().data();
    detail::bcast_walk1(target, st,
                        [&](int64_t i, int64_t ox) { out[static_cast<size_t>(i)] = px[ox]; });
    Tensor xt = x;
    return detail::make_op("bcast", target, std::move(out), {x},
                           [xt](BackwardPass& p, const Tensor& gy) {
                               p.accumulate(xt, sum_to(gy, xt.shape()));
                           });
}

inline Tensor sum_all(const Tensor& x) { return sum_to(x, {1}); }

inline Tensor mean_all(const Tensor& x) {
    return mul_scalar(sum_all(x), 1.0 / static_cast<double>(x.numel()));
}

// ---------------------------------------------------------------------------
// movement

inline Tensor reshape(const Tensor& x, Shape dims) {
    check(numel_of(dims) == x.numel(),
          "reshape: " + shape_str(x.shape()) + " -> " + shape_str(dims) + " changes numel");
    Tensor xt = x;
    Shape old = x.shape();
    return detail::make_op("reshape", std::move(dims), x.values(), {x},
                           [xt, old](BackwardPass& p, const Tensor& gy) {
                               p.accumulate(xt, reshape(gy, old));
                           });
}

inline Tensor permute(const Tensor& x, const std::vector<int>& axes) {
    const size_t r = x.shape().size();
    check(axes.size() == r, "permute: axes rank mismatch");
    Shape od(r);
    for (size_t i = 0; i < r; ++i) od[i] = x.shape()[static_cast<size_t>(axes[i])];
    auto xstr = detail::row_major_strides(x.shape());
    std::vector<int64_t> pstr(r);
    for (size_t i = 0; i < r; ++i) pstr[i] = xstr[static_cast<size_t>(axes[i])];
    std::vector<double> out(static_cast<size_t>(x.numel()));
    const double* px = x.values().data();
    detail::bcast_walk1(od, pstr,
                        [&](int64_t i, int64_t ox) { out[static_cast<size_t>(i)] = px[ox]; });
    std::vector<int> inv(r);
    for (size_t i = 0; i < r; ++i) inv[static_cast<size_t>(axes[i])] = static_cast<int>(i);
    Tensor xt = x;
    return detail::make_op("permute", std::move(od), std::move(out), {x},
                           [xt, inv](BackwardPass& p, const Tensor& gy) {
                               p.accumulate(xt, permute(gy, inv));
                           });
}

inline Tensor transpose_last2(const Tensor& x) {
    std::vector<int> axes(x.shape().size());
    std::iota(axes.begin(), axes.end(), 0);
    std::swap(axes[axes.size() - 1], axes[axes.size() - 2]);
    return permute(x, axes);
}

Tensor unslice(const Tensor& g, int axis, int64_t start, const Shape& full);

inline Tensor slice(const Tensor& x, int axis, int64_t start, int64_t len) {
    if (axis < 0) axis += static_cast<int>(x.shape().size());
    const Shape& xs = x.shape();
    check(axis >= 0 && axis < static_cast<int>(xs.size()), "slice: bad axis");
    check(start >= 0 && start + len <= xs[static_cast<size_t>(axis)], "slice: out of range");
    Shape od = xs;
    od[static_cast<size_t>(axis)] = len;
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= xs[static_cast<size_t>(i)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < xs.size(); ++i) inner *= xs[i];
    std::vector<double> out(static_cast<size_t>(outer * len * inner));
    const double* px = x.values().data();
    const int64_t xa = xs[static_cast<size_t>(axis)];
    for (int64_t o = 0; o < outer; ++o) {
        const double* src = px + (o * xa + start) * inner;
        std::copy(src, src + len * inner, out.data() + o * len * inner);
    }
    Tensor xt = x;
    Shape full = xs;
    int ax = axis;
    return detail::make_op("slice", std::move(od), std::move(out), {x},
                           [xt, ax, start, full](BackwardPass& p, const Tensor& gy) {
                               p.accumulate(xt, unslice(gy, ax, start, full));
                           });
}

// zero-pad g back into `full` along axis; adjoint of slice
inline Tensor unslice(const Tensor& g, int axis, int64_t start, const Shape& full) {
    const Shape& gs = g.shape();
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= full[static_cast<size_t>(i)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < full.size(); ++i) inner *= full[i];
    const int64_t len = gs[static_cast<size_t>(axis)];
    const int64_t fa = full[static_cast<size_t>(axis)];
    std::vector<double> out(static_cast<size_t>(numel_of(full)), 0.0);
    const double* pg = g.values().data();
    for (int64_t o = 0; o < outer; ++o) {
        double* dst = out.data() + (o * fa + start) * inner;
        std::copy(pg + o * len * inner, pg + (o + 1) * len * inner, dst);
    }
    Tensor gt = g;
    int ax = axis;
    int64_t st = start, ln = len;
    return detail::make_op("unslice", full, std::move(out), {g},
                           [gt, ax, st, ln](BackwardPass& p, const Tensor& gy) {
                               p.accumulate(gt, slice(gy, ax, st, ln));
                           });
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
    check(!parts.empty(), "concat: empty input");
    if (axis < 0) axis += static_cast<int>(parts[0].shape().size());
    Shape od = parts[0].shape();
    int64_t total = 0;
    for (const Tensor& t : parts) {
        Shape s = t.shape();
        check(s.size() == od.size(), "concat: rank mismatch");
        for (size_t i = 0; i < s.size(); ++i)
            check(static_cast<int>(i) == axis || s[i] == od[i], "concat: shape mismatch");
        total += s[static_cast<size_t>(axis)];
    }
    od[static_cast<size_t>(axis)] = total;
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= od[static_cast<size_t>(i)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < od.size(); ++i) inner *= od[i];
    std::vector<double> out(static_cast<size_t>(numel_of(od)));
    int64_t pos = 0;
    for (const Tensor& t : parts) {
        const int64_t len = t.shape()[static_cast<size_t>(axis)];
        const double* pt = t.values().data();
        for (int64_t o = 0; o < outer; ++o) {
            std::copy(pt + o * len * inner, pt + (o + 1) * len * inner,
                      out.data() + (o * total + pos) * inner);
        }
        pos += len;
    }
    std::vector<Tensor> kept = parts;
    int ax = axis;
    return detail::make_op("concat", std::move(od), std::move(out), parts,
                           [kept, ax](BackwardPass& p, const Tensor& gy) {
                               int64_t at = 0;
                               for (const Tensor& t : kept) {
                                   int64_t len = t.shape()[static_cast<size_t>(ax)];
                                   p.accumulate(t, slice(gy, ax, at, len));
                                   at += len;
                               }
                           });
}

// ---------------------------------------------------------------------------
// gather / scatter-add over precomputed index maps

// For each output element e: idx[e] is a flat source index, or -1 for zero.
// take() reads through the map; put_add() is its exact adjoint.
struct IndexMap {
    Shape src_shape;
    Shape out_shape;
    std::vector<int32_t> idx;

    std::once_flag inv_once;
    std::vector<int32_t> inv_off;  // CSR offsets, size src_numel+1
    std::vector<int32_t> inv_lst;  // output positions feeding each source index

    int64_t src_numel() const { return numel_of(src_shape); }

    void ensure_inverse() {
        std::call_once(inv_once, [this] {
            const int64_t sn = src_numel();
            inv_off.assign(static_cast<size_t>(sn) + 1, 0);
            for (int32_t s : idx)
                if (s >= 0) ++inv_off[static_cast<size_t>(s) + 1];
            for (size_t i = 1; i < inv_off.size(); ++i) inv_off[i] += inv_off[i - 1];
            inv_lst.resize(static_cast<size_t>(inv_off.back()));
            std::vector<int32_t> cur(inv_off.begin(), inv_off.end() - 1);
            for (size_t e = 0; e < idx.size(); ++e) {
                int32_t s = idx[e];
                if (s >= 0) inv_lst[static_cast<size_t>(cur[static_cast<size_t>(s)]++)] =
                        static_cast<int32_t>(e);
            }
        });
    }
};

using IndexMapPtr = std::shared_ptr<IndexMap>;

Tensor put_add(const Tensor& g, const IndexMapPtr& m);

inline Tensor take(const Tensor& x, const IndexMapPtr& m) {
    check(x.shape() == m->src_shape,
          "take: input " + shape_str(x.shape()) + " != map source " + shape_str(m->src_shape));
    const int64_t n = numel_of(m->out_shape);
    std::vector<double> out(static_cast<size_t>(n));
    const double* px = x.values().data();
    const int32_t* pi = m->idx.data();
#pragma omp parallel for schedule(static) if (n > (1 << 15))
    for (int64_t i = 0; i < n; ++i) {
        int32_t s = pi[i];
        out[static_cast<size_t>(i)] = s < 0 ? 0.0 : px[s];
    }
    Tensor xt = x;
    IndexMapPtr mp = m;
    return detail::make_op("take", m->out_shape, std::move(out), {x},
                           [xt, mp](BackwardPass& p, const Tensor& gy) {
                               p.accumulate(xt, put_add(gy, mp));
                           });
}

inline Tensor put_add(const Tensor& g, const IndexMapPtr& m) {
    check(g.shape() == m->out_shape, "put_add: grad shape != map output shape");
    m->ensure_inverse();
    const int64_t sn = m->src_numel();
    std::vector<double> out(static_cast<size_t>(sn), 0.0);
    const double* pg = g.values().data();
    const int32_t* off = m->inv_off.data();
    const int32_t* lst = m->inv_lst.data();
#pragma omp parallel for schedule(static) if (sn > (1 << 15))
    for (int64_t j = 0; j < sn; ++j) {
        double acc = 0.0;
        for (int32_t k = off[j]; k < off[j + 1]; ++k) acc += pg[lst[k]];
        out[static_cast<size_t>(j)] = acc;
    }
    Tensor gt = g;
    IndexMapPtr mp = m;
    return detail::make_op("put_add", m->src_shape, std::move(out), {g},
                           [gt, mp](BackwardPass& p, const Tensor& gy) {
                               p.accumulate(gt, take(gy, mp));
                           });
}

// ---------------------------------------------------------------------------
// matmul: a [*, m, k] x b [*, k, n] with broadcast over leading batch dims

namespace detail {
void matmul_kernel(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    check(as.size() >= 2 && bs.size() >= 2, "matmul: operands must have rank >= 2");
    const int64_t m = as[as.size() - 2], k = as[as.size() - 1];
    const int64_t kb = bs[bs.size() - 2], n = bs[bs.size() - 1];
    check(k == kb, "matmul: inner dims disagree " + shape_str(as) + " x " + shape_str(bs));

    Shape abatch(as.begin(), as.end() - 2), bbatch(bs.begin(), bs.end() - 2);
    Shape batch = detail::broadcast_shapes(abatch, bbatch);
    Shape od = batch;
    od.push_back(m);
    od.push_back(n);

    const int64_t nb = numel_of(batch);
    auto sa = detail::bcast_strides(abatch, batch);
    auto sb = detail::bcast_strides(bbatch, batch);
    // per-batch flat offsets
    std::vector<int64_t> offa(static_cast<size_t>(nb)), offb(static_cast<size_t>(nb));
    {
        int64_t i = 0;
        detail::bcast_walk2(batch, sa, sb, [&](int64_t, int64_t oa, int64_t ob) {
            offa[static_cast<size_t>(i)] = oa * m * k;
            offb[static_cast<size_t>(i)] = ob * k * n;
            ++i;
        });
        if (nb == 0) return Tensor::zeros(od);
        if (batch.empty()) {
            offa[0] = 0;
            offb[0] = 0;
        }
    }

    std::vector<double> out(static_cast<size_t>(nb * m * n));
    const double* pa = a.values().data();
    const double* pb = b.values().data();
#pragma omp parallel for schedule(static) if (nb > 1)
    for (int64_t i = 0; i < nb; ++i) {
        detail::matmul_kernel(pa + offa[static_cast<size_t>(i)], pb + offb[static_cast<size_t>(i)],
                              out.data() + i * m * n, m, k, n);
    }
    Tensor at = a, bt = b;
    return detail::make_op("matmul", std::move(od), std::move(out), {a, b},
                           [at, bt](BackwardPass& p, const Tensor& gy) {
                               p.accumulate(at, sum_to(matmul(gy, transpose_last2(bt)), at.shape()));
                               p.accumulate(bt, sum_to(matmul(transpose_last2(at), gy), bt.shape()));
                           });
}

// ---------------------------------------------------------------------------
// composites

inline Tensor sigmoid(const Tensor& x) {
    return reciprocal(add_scalar(texp(neg(x)), 1.0));
}

// log(1 + e^x), overflow-safe
inline Tensor softplus(const Tensor& x) {
    return add(relu(x), tlog(add_scalar(texp(neg(tabs(x))), 1.0)));
}

inline Tensor gelu(const Tensor& x) {
    return mul_scalar(mul(x, add_scalar(terf(mul_scalar(x, 1.0 / std::sqrt(2.0))), 1.0)), 0.5);
}

namespace detail {

// row maxima over the last axis as a constant (graph-detached) tensor;
// softmax/logsumexp are shift-invariant so this is exact
inline Tensor row_max_const(const Tensor& x) {
    const Shape& s = x.shape();
    const int64_t d = s.back();
    const int64_t rows = x.numel() / d;
    Shape os = s;
    os.back() = 1;
    std::vector<double> out(static_cast<size_t>(rows));
    const double* px = x.values().data();
    for (int64_t r = 0; r < rows; ++r) {
        double mx = px[r * d];
        for (int64_t j = 1; j < d; ++j) mx = std::max(mx, px[r * d + j]);
        out[static_cast<size_t>(r)] = mx;
    }
    return Tensor::from_values(os, std::move(out));
}

} // namespace detail

inline Tensor softmax_last(const Tensor& x) {
    Tensor m = detail::row_max_const(x);
    Tensor e = texp(sub(x, m));
    Shape rs = x.shape();
    rs.back() = 1;
    return mul(e, reciprocal(sum_to(e, rs)));
}

inline Tensor logsumexp_last(const Tensor& x) {
    Tensor m = detail::row_max_const(x);
    Shape rs = x.shape();
    rs.back() = 1;
    return add(m, tlog(sum_to(texp(sub(x, m)), rs)));
}

// inverted-dropout; p = 0 is the identity
inline Tensor dropout(const Tensor& x, double p, Rng& rng) {
    if (p <= 0.0) return x;
    check(p < 1.0, "dropout: p must be < 1");
    std::vector<double> mv(static_cast<size_t>(x.numel()));
    const double keep = 1.0 - p;
    for (auto& m : mv) m = rng.uniform() < keep ? 1.0 / keep : 0.0;
    return mul(x, Tensor::from_values(x.shape(), std::move(mv)));
}

} // namespace castformer
