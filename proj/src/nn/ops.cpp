#include "px3d/nn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include <Eigen/Core>

#include "px3d/error.hpp"
#include "px3d/grid.hpp"

namespace px3d::nn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

void require_same_shape(const Array& a, const Array& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

void require_rank(const Array& x, int lo, int hi, const char* op) {
    if (x.rank() < lo || x.rank() > hi)
        throw ShapeError(std::string(op) + ": unsupported rank for shape " + shape_str(x.shape()));
}

std::vector<double>& grad_of(detail::Node& self, std::size_t i) { return self.inputs[i]->ensure_grad(); }
const std::vector<double>& value_of(const detail::Node& self, std::size_t i) { return self.inputs[i]->value; }

template <typename F, typename D>
Array unary(const char* op, const Array& x, F f, D dfdx) {
    const auto xv = x.values();
    std::vector<double> out(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
    return make_result(op, x.shape(), std::move(out), {x}, [dfdx](detail::Node& self) {
        auto& g = grad_of(self, 0);
        const auto& xin = value_of(self, 0);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * dfdx(xin[i], self.value[i]);
    });
}

}  // namespace

Array add(const Array& a, const Array& b) {
    require_same_shape(a, b, "add");
    const auto av = a.values(), bv = b.values();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
    return make_result("add", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
        for (std::size_t k = 0; k < 2; ++k) {
            if (!self.input_needs_grad(k)) continue;
            auto& g = grad_of(self, k);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
}

Array sub(const Array& a, const Array& b) {
    require_same_shape(a, b, "sub");
    const auto av = a.values(), bv = b.values();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
    return make_result("sub", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
        if (self.input_needs_grad(0)) {
            auto& g = grad_of(self, 0);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (self.input_needs_grad(1)) {
            auto& g = grad_of(self, 1);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
        }
    });
}

Array mul(const Array& a, const Array& b) {
    require_same_shape(a, b, "mul");
    const auto av = a.values(), bv = b.values();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
    return make_result("mul", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
        const auto& av = value_of(self, 0);
        const auto& bv = value_of(self, 1);
        if (self.input_needs_grad(0)) {
            auto& g = grad_of(self, 0);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bv[i];
        }
        if (self.input_needs_grad(1)) {
            auto& g = grad_of(self, 1);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * av[i];
        }
    });
}

Array scale(const Array& a, double k) {
    return unary("scale", a, [k](double x) { return k * x; }, [k](double, double) { return k; });
}

Array relu(const Array& x) {
    return unary("relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
                 [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Array sigmoid(const Array& x) {
    return unary("sigmoid", x,
                 [](double v) { return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); },
                 [](double, double y) { return y * (1.0 - y); });
}

Array gelu(const Array& x) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    return unary("gelu", x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
                 [inv_sqrt_2pi](double v, double) {
                     return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
                 });
}

Array sum(const Array& x) {
    double acc = 0.0;
    for (double v : x.values()) acc += v;
    return make_result("sum", Shape{}, {acc}, {x}, [](detail::Node& self) {
        auto& g = grad_of(self, 0);
        for (double& v : g) v += self.grad[0];
    });
}

Array mean(const Array& x) {
    const auto n = static_cast<double>(std::max<std::int64_t>(1, x.numel()));
    return scale(sum(x), 1.0 / n);
}

Array reshape(const Array& x, Shape shape) {
    if (numel(shape) != x.numel())
        throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
    const auto xv = x.values();
    return make_result("reshape", std::move(shape), std::vector<double>(xv.begin(), xv.end()), {x},
                       [](detail::Node& self) {
                           auto& g = grad_of(self, 0);
                           for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                       });
}

namespace {

// View of a shape as (outer, axis, inner).
struct AxisSplit {
    std::int64_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, int axis) {
    AxisSplit r;
    for (int i = 0; i < axis; ++i) r.outer *= s[i];
    r.len = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
    return r;
}

}  // namespace

Array concat(const std::vector<Array>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Shape& first = parts[0].shape();
    if (axis < 0) axis += static_cast<int>(first.size());
    if (axis < 0 || axis >= static_cast<int>(first.size())) throw ShapeError("concat: axis out of range");
    Shape out_shape = first;
    out_shape[axis] = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        if (s.size() != first.size()) throw ShapeError("concat: rank mismatch");
        for (std::size_t i = 0; i < s.size(); ++i)
            if (static_cast<int>(i) != axis && s[i] != first[i])
                throw ShapeError("concat: shape mismatch " + shape_str(s) + " vs " + shape_str(first) +
                                 " on axis " + std::to_string(i));
        out_shape[axis] += s[axis];
    }
    const AxisSplit o = split_at(out_shape, axis);
    std::vector<double> out(static_cast<std::size_t>(numel(out_shape)));
    std::vector<std::int64_t> offsets;
    std::int64_t off = 0;
    for (const auto& p : parts) {
        offsets.push_back(off);
        const AxisSplit a = split_at(p.shape(), axis);
        const auto v = p.values();
        for (std::int64_t q = 0; q < a.outer; ++q)
            std::copy_n(v.begin() + q * a.len * a.inner, a.len * a.inner,
                        out.begin() + (q * o.len + off) * o.inner);
        off += a.len;
    }
    return make_result("concat", out_shape, std::move(out), parts, [axis, offsets, o](detail::Node& self) {
        for (std::size_t k = 0; k < self.inputs.size(); ++k) {
            if (!self.input_needs_grad(k)) continue;
            auto& g = grad_of(self, k);
            const AxisSplit a = split_at(self.inputs[k]->shape, axis);
            for (std::int64_t q = 0; q < a.outer; ++q) {
                const double* src = self.grad.data() + (q * o.len + offsets[k]) * o.inner;
                double* dst = g.data() + q * a.len * a.inner;
                for (std::int64_t i = 0; i < a.len * a.inner; ++i) dst[i] += src[i];
            }
        }
    });
}

Array narrow(const Array& x, int axis, std::int64_t start, std::int64_t length) {
    const Shape& s = x.shape();
    if (axis < 0) axis += static_cast<int>(s.size());
    if (axis < 0 || axis >= static_cast<int>(s.size()) || start < 0 || length < 0 || start + length > s[axis])
        throw ShapeError("narrow: range out of bounds for " + shape_str(s));
    Shape out_shape = s;
    out_shape[axis] = length;
    const AxisSplit a = split_at(s, axis);
    std::vector<double> out(static_cast<std::size_t>(numel(out_shape)));
    const auto v = x.values();
    for (std::int64_t q = 0; q < a.outer; ++q)
        std::copy_n(v.begin() + (q * a.len + start) * a.inner, length * a.inner, out.begin() + q * length * a.inner);
    return make_result("narrow", out_shape, std::move(out), {x}, [a, start, length](detail::Node& self) {
        auto& g = grad_of(self, 0);
        for (std::int64_t q = 0; q < a.outer; ++q) {
            const double* src = self.grad.data() + q * length * a.inner;
            double* dst = g.data() + (q * a.len + start) * a.inner;
            for (std::int64_t i = 0; i < length * a.inner; ++i) dst[i] += src[i];
        }
    });
}

Array mean_axis(const Array& x, int axis) {
    const Shape& s = x.shape();
    if (axis < 0) axis += static_cast<int>(s.size());
    if (axis < 0 || axis >= static_cast<int>(s.size())) throw ShapeError("mean_axis: axis out of range");
    const AxisSplit a = split_at(s, axis);
    if (a.len == 0) throw ShapeError("mean_axis: empty axis");
    Shape out_shape = s;
    out_shape.erase(out_shape.begin() + axis);
    std::vector<double> out(static_cast<std::size_t>(a.outer * a.inner), 0.0);
    const auto v = x.values();
    const double inv = 1.0 / static_cast<double>(a.len);
    for (std::int64_t q = 0; q < a.outer; ++q)
        for (std::int64_t l = 0; l < a.len; ++l) {
            const double* src = v.data() + (q * a.len + l) * a.inner;
            double* dst = out.data() + q * a.inner;
            for (std::int64_t i = 0; i < a.inner; ++i) dst[i] += src[i];
        }
    for (double& d : out) d *= inv;
    return make_result("mean_axis", out_shape, std::move(out), {x}, [a, inv](detail::Node& self) {
        auto& g = grad_of(self, 0);
        for (std::int64_t q = 0; q < a.outer; ++q)
            for (std::int64_t l = 0; l < a.len; ++l) {
                const double* src = self.grad.data() + q * a.inner;
                double* dst = g.data() + (q * a.len + l) * a.inner;
                for (std::int64_t i = 0; i < a.inner; ++i) dst[i] += src[i] * inv;
            }
    });
}

namespace {

Array pad_or_crop2d(const char* op, const Array& x, std::int64_t rows, std::int64_t cols) {
    require_rank(x, 2, 8, op);
    const Shape& s = x.shape();
    const std::int64_t H = s[s.size() - 2], W = s[s.size() - 1];
    Shape out_shape = s;
    out_shape[s.size() - 2] = rows;
    out_shape[s.size() - 1] = cols;
    const std::int64_t planes = numel(s) / std::max<std::int64_t>(1, H * W);
    const std::int64_t R = std::min(rows, H), C = std::min(cols, W);
    std::vector<double> out(static_cast<std::size_t>(planes * rows * cols), 0.0);
    const auto v = x.values();
    for (std::int64_t p = 0; p < planes; ++p)
        for (std::int64_t r = 0; r < R; ++r)
            std::copy_n(v.begin() + (p * H + r) * W, C, out.begin() + (p * rows + r) * cols);
    return make_result(op, out_shape, std::move(out), {x}, [=](detail::Node& self) {
        auto& g = grad_of(self, 0);
        for (std::int64_t p = 0; p < planes; ++p)
            for (std::int64_t r = 0; r < R; ++r)
                for (std::int64_t c = 0; c < C; ++c) g[(p * H + r) * W + c] += self.grad[(p * rows + r) * cols + c];
    });
}

}  // namespace

Array pad2d(const Array& x, std::int64_t rows, std::int64_t cols) {
    if (rows < x.dim(-2) || cols < x.dim(-1)) throw ShapeError("pad2d: target smaller than input");
    if (rows == x.dim(-2) && cols == x.dim(-1)) return x;
    return pad_or_crop2d("pad2d", x, rows, cols);
}

Array crop2d(const Array& x, std::int64_t rows, std::int64_t cols) {
    if (rows > x.dim(-2) || cols > x.dim(-1)) throw ShapeError("crop2d: target larger than input");
    if (rows == x.dim(-2) && cols == x.dim(-1)) return x;
    return pad_or_crop2d("crop2d", x, rows, cols);
}

// ---------------------------------------------------------------------------
// Convolution via im2col + GEMM. 2D inputs are handled as depth-1 volumes.

namespace {

struct ConvGeom {
    std::int64_t N, C, D, H, W, O, kd, kh, kw;
    std::int64_t spatial() const { return D * H * W; }
    std::int64_t patch() const { return C * kd * kh * kw; }
};

void im2col(const double* x, const ConvGeom& g, double* col) {
    const std::int64_t S = g.spatial();
    const std::int64_t pd = g.kd / 2, ph = g.kh / 2, pw = g.kw / 2;
    std::int64_t row = 0;
    for (std::int64_t c = 0; c < g.C; ++c)
        for (std::int64_t dz = 0; dz < g.kd; ++dz)
            for (std::int64_t dy = 0; dy < g.kh; ++dy)
                for (std::int64_t dx = 0; dx < g.kw; ++dx, ++row) {
                    double* out = col + row * S;
                    const std::int64_t ox = dx - pw;
                    const std::int64_t x_lo = std::max<std::int64_t>(0, -ox);
                    const std::int64_t x_hi = std::min<std::int64_t>(g.W, g.W - ox);
                    for (std::int64_t z = 0; z < g.D; ++z) {
                        const std::int64_t sz = z + dz - pd;
                        for (std::int64_t y = 0; y < g.H; ++y) {
                            double* o = out + (z * g.H + y) * g.W;
                            const std::int64_t sy = y + dy - ph;
                            if (sz < 0 || sz >= g.D || sy < 0 || sy >= g.H) {
                                std::fill(o, o + g.W, 0.0);
                                continue;
                            }
                            const double* src = x + ((c * g.D + sz) * g.H + sy) * g.W;
                            std::fill(o, o + x_lo, 0.0);
                            for (std::int64_t xx = x_lo; xx < x_hi; ++xx) o[xx] = src[xx + ox];
                            std::fill(o + std::max(x_hi, x_lo), o + g.W, 0.0);
                        }
                    }
                }
}

void col2im(const double* col, const ConvGeom& g, double* dx) {
    const std::int64_t S = g.spatial();
    const std::int64_t pd = g.kd / 2, ph = g.kh / 2, pw = g.kw / 2;
    std::int64_t row = 0;
    for (std::int64_t c = 0; c < g.C; ++c)
        for (std::int64_t dz = 0; dz < g.kd; ++dz)
            for (std::int64_t dy = 0; dy < g.kh; ++dy)
                for (std::int64_t dxk = 0; dxk < g.kw; ++dxk, ++row) {
                    const double* in = col + row * S;
                    const std::int64_t ox = dxk - pw;
                    const std::int64_t x_lo = std::max<std::int64_t>(0, -ox);
                    const std::int64_t x_hi = std::min<std::int64_t>(g.W, g.W - ox);
                    for (std::int64_t z = 0; z < g.D; ++z) {
                        const std::int64_t sz = z + dz - pd;
                        if (sz < 0 || sz >= g.D) continue;
                        for (std::int64_t y = 0; y < g.H; ++y) {
                            const std::int64_t sy = y + dy - ph;
                            if (sy < 0 || sy >= g.H) continue;
                            const double* i = in + (z * g.H + y) * g.W;
                            double* dst = dx + ((c * g.D + sz) * g.H + sy) * g.W;
                            for (std::int64_t xx = x_lo; xx < x_hi; ++xx) dst[xx + ox] += i[xx];
                        }
                    }
                }
}

}  // namespace

Array conv(const Array& x, const Array& weight, const Array& bias) {
    const Shape& xs = x.shape();
    const Shape& ws = weight.shape();
    if (xs.size() != 4 && xs.size() != 5) throw ShapeError("conv: input must be 4D or 5D, got " + shape_str(xs));
    if (ws.size() != xs.size())
        throw ShapeError("conv: weight " + shape_str(ws) + " does not match input rank " + shape_str(xs));
    ConvGeom g{};
    g.N = xs[0];
    g.C = xs[1];
    if (xs.size() == 4) {
        g.D = 1, g.H = xs[2], g.W = xs[3];
        g.kd = 1, g.kh = ws[2], g.kw = ws[3];
    } else {
        g.D = xs[2], g.H = xs[3], g.W = xs[4];
        g.kd = ws[2], g.kh = ws[3], g.kw = ws[4];
    }
    g.O = ws[0];
    if (ws[1] != g.C)
        throw ShapeError("conv: expected " + std::to_string(ws[1]) + " input channels, got " + std::to_string(g.C) +
                         " (input " + shape_str(xs) + ", weight " + shape_str(ws) + ")");
    if (g.kd % 2 == 0 || g.kh % 2 == 0 || g.kw % 2 == 0) throw ShapeError("conv: kernel sizes must be odd");
    if (bias.shape() != Shape{g.O})
        throw ShapeError("conv: bias " + shape_str(bias.shape()) + " expected (" + std::to_string(g.O) + ")");

    Shape out_shape = xs;
    out_shape[1] = g.O;
    const std::int64_t S = g.spatial(), K = g.patch();
    const bool pointwise = g.kd == 1 && g.kh == 1 && g.kw == 1;
    std::vector<double> out(static_cast<std::size_t>(g.N * g.O * S));
    std::vector<double> col(pointwise ? 0 : static_cast<std::size_t>(K * S));
    const auto xv = x.values();
    const CMapMat Wm(weight.values().data(), g.O, K);
    const auto bv = bias.values();
    for (std::int64_t n = 0; n < g.N; ++n) {
        const double* xn = xv.data() + n * g.C * S;
        if (!pointwise) im2col(xn, g, col.data());
        const CMapMat Col(pointwise ? xn : col.data(), K, S);
        MapMat Out(out.data() + n * g.O * S, g.O, S);
        Out.noalias() = Wm * Col;
        for (std::int64_t o = 0; o < g.O; ++o) Out.row(o).array() += bv[o];
    }
    return make_result("conv", out_shape, std::move(out), {x, weight, bias}, [g, pointwise](detail::Node& self) {
        const std::int64_t S = g.spatial(), K = g.patch();
        const auto& xv = value_of(self, 0);
        const CMapMat Wm(value_of(self, 1).data(), g.O, K);
        const bool need_x = self.input_needs_grad(0);
        const bool need_w = self.input_needs_grad(1);
        const bool need_b = self.input_needs_grad(2);
        std::vector<double> col(pointwise ? 0 : static_cast<std::size_t>(K * S));
        std::vector<double> dcol(pointwise || !need_x ? 0 : static_cast<std::size_t>(K * S));
        double* dW = need_w ? grad_of(self, 1).data() : nullptr;
        double* dB = need_b ? grad_of(self, 2).data() : nullptr;
        double* dX = need_x ? grad_of(self, 0).data() : nullptr;
        for (std::int64_t n = 0; n < g.N; ++n) {
            const CMapMat dOut(self.grad.data() + n * g.O * S, g.O, S);
            const double* xn = xv.data() + n * g.C * S;
            if (need_w) {
                if (!pointwise) im2col(xn, g, col.data());
                const CMapMat Col(pointwise ? xn : col.data(), K, S);
                MapMat(dW, g.O, K).noalias() += dOut * Col.transpose();
            }
            // Plain loop: Eigen's vectorized sum peels by address, which breaks bitwise reruns.
            if (need_b)
                for (std::int64_t o = 0; o < g.O; ++o) {
                    const double* row = self.grad.data() + (n * g.O + o) * S;
                    dB[o] += std::accumulate(row, row + S, 0.0);
                }
            if (need_x) {
                if (pointwise) {
                    MapMat(dX + n * g.C * S, K, S).noalias() += Wm.transpose() * dOut;
                } else {
                    MapMat(dcol.data(), K, S).noalias() = Wm.transpose() * dOut;
                    col2im(dcol.data(), g, dX + n * g.C * S);
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------

Array batch_norm(const Array& x, const Array& gamma, const Array& beta, const BatchNormState& st, bool training) {
    require_rank(x, 2, 5, "batch_norm");
    const std::int64_t N = x.dim(0), C = x.dim(1);
    const std::int64_t inner = x.numel() / std::max<std::int64_t>(1, N * C);
    if (gamma.shape() != Shape{C} || beta.shape() != Shape{C})
        throw ShapeError("batch_norm: affine parameters must be (" + std::to_string(C) + ")");
    if (!st.running_mean || !st.running_var || st.running_mean->size() != static_cast<std::size_t>(C) ||
        st.running_var->size() != static_cast<std::size_t>(C))
        throw ShapeError("batch_norm: running buffers do not match channel count");
    const std::int64_t M = N * inner;
    const auto xv = x.values();
    std::vector<double> mu(C), invstd(C);
    if (training) {
        for (std::int64_t c = 0; c < C; ++c) {
            double s = 0.0;
            for (std::int64_t n = 0; n < N; ++n) {
                const double* p = xv.data() + (n * C + c) * inner;
                for (std::int64_t i = 0; i < inner; ++i) s += p[i];
            }
            const double m = s / M;
            double v = 0.0;
            for (std::int64_t n = 0; n < N; ++n) {
                const double* p = xv.data() + (n * C + c) * inner;
                for (std::int64_t i = 0; i < inner; ++i) v += (p[i] - m) * (p[i] - m);
            }
            mu[c] = m;
            invstd[c] = 1.0 / std::sqrt(v / M + st.eps);
            const double unbiased = M > 1 ? v / (M - 1) : v;
            (*st.running_mean)[c] = (1.0 - st.momentum) * (*st.running_mean)[c] + st.momentum * m;
            (*st.running_var)[c] = (1.0 - st.momentum) * (*st.running_var)[c] + st.momentum * unbiased;
        }
    } else {
        for (std::int64_t c = 0; c < C; ++c) {
            mu[c] = (*st.running_mean)[c];
            invstd[c] = 1.0 / std::sqrt((*st.running_var)[c] + st.eps);
        }
    }
    const auto gv = gamma.values(), bv = beta.values();
    std::vector<double> xhat(xv.size()), out(xv.size());
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c) {
            const std::int64_t base = (n * C + c) * inner;
            for (std::int64_t i = 0; i < inner; ++i) {
                const double h = (xv[base + i] - mu[c]) * invstd[c];
                xhat[base + i] = h;
                out[base + i] = gv[c] * h + bv[c];
            }
        }
    return make_result(
        "batch_norm", x.shape(), std::move(out), {x, gamma, beta},
        [N, C, inner, M, training, invstd = std::move(invstd), xhat = std::move(xhat)](detail::Node& self) {
            const auto& gv = value_of(self, 1);
            std::vector<double> sum_dy(C, 0.0), sum_dy_xhat(C, 0.0);
            for (std::int64_t n = 0; n < N; ++n)
                for (std::int64_t c = 0; c < C; ++c) {
                    const std::int64_t base = (n * C + c) * inner;
                    for (std::int64_t i = 0; i < inner; ++i) {
                        sum_dy[c] += self.grad[base + i];
                        sum_dy_xhat[c] += self.grad[base + i] * xhat[base + i];
                    }
                }
            if (self.input_needs_grad(1)) {
                auto& g = grad_of(self, 1);
                for (std::int64_t c = 0; c < C; ++c) g[c] += sum_dy_xhat[c];
            }
            if (self.input_needs_grad(2)) {
                auto& g = grad_of(self, 2);
                for (std::int64_t c = 0; c < C; ++c) g[c] += sum_dy[c];
            }
            if (!self.input_needs_grad(0)) return;
            auto& dx = grad_of(self, 0);
            for (std::int64_t n = 0; n < N; ++n)
                for (std::int64_t c = 0; c < C; ++c) {
                    const std::int64_t base = (n * C + c) * inner;
                    const double k = gv[c] * invstd[c];
                    if (training) {
                        const double mdy = sum_dy[c] / M, mdyx = sum_dy_xhat[c] / M;
                        for (std::int64_t i = 0; i < inner; ++i)
                            dx[base + i] += k * (self.grad[base + i] - mdy - xhat[base + i] * mdyx);
                    } else {
                        for (std::int64_t i = 0; i < inner; ++i) dx[base + i] += k * self.grad[base + i];
                    }
                }
        });
}

// ---------------------------------------------------------------------------

Array max_pool2(const Array& x) {
    require_rank(x, 4, 5, "max_pool2");
    const bool vol = x.rank() == 5;
    const std::int64_t N = x.dim(0), C = x.dim(1);
    const std::int64_t D = vol ? x.dim(2) : 1, H = x.dim(-2), W = x.dim(-1);
    const std::int64_t Do = vol ? (D + 1) / 2 : 1, Ho = (H + 1) / 2, Wo = (W + 1) / 2;
    const std::int64_t kd = vol ? 2 : 1;
    Shape out_shape = vol ? Shape{N, C, Do, Ho, Wo} : Shape{N, C, Ho, Wo};
    const std::int64_t planes = N * C;
    std::vector<double> out(static_cast<std::size_t>(planes * Do * Ho * Wo));
    // Index of the winning input element, or -1 when a zero pad won.
    std::vector<std::int64_t> arg(out.size());
    const auto xv = x.values();
    for (std::int64_t p = 0; p < planes; ++p)
        for (std::int64_t z = 0; z < Do; ++z)
            for (std::int64_t y = 0; y < Ho; ++y)
                for (std::int64_t xx = 0; xx < Wo; ++xx) {
                    double best = -std::numeric_limits<double>::infinity();
                    std::int64_t best_i = -1;
                    bool padded = false;
                    for (std::int64_t a = 0; a < kd; ++a)
                        for (std::int64_t b = 0; b < 2; ++b)
                            for (std::int64_t c = 0; c < 2; ++c) {
                                const std::int64_t sz = z * kd + a, sy = y * 2 + b, sx = xx * 2 + c;
                                if (sz >= D || sy >= H || sx >= W) {
                                    padded = true;
                                    continue;
                                }
                                const std::int64_t idx = ((p * D + sz) * H + sy) * W + sx;
                                if (xv[idx] > best) {
                                    best = xv[idx];
                                    best_i = idx;
                                }
                            }
                    if (padded && best < 0.0) {
                        best = 0.0;
                        best_i = -1;
                    }
                    const std::int64_t o = ((p * Do + z) * Ho + y) * Wo + xx;
                    out[o] = best;
                    arg[o] = best_i;
                }
    return make_result("max_pool2", out_shape, std::move(out), {x}, [arg = std::move(arg)](detail::Node& self) {
        auto& g = grad_of(self, 0);
        for (std::size_t o = 0; o < arg.size(); ++o)
            if (arg[o] >= 0) g[static_cast<std::size_t>(arg[o])] += self.grad[o];
    });
}

Array resize_bilinear(const Array& x, std::int64_t rows, std::int64_t cols) {
    require_rank(x, 2, 8, "resize_bilinear");
    const std::int64_t H = x.dim(-2), W = x.dim(-1);
    const std::int64_t planes = x.numel() / std::max<std::int64_t>(1, H * W);
    auto rr = std::make_shared<AxisResampler>(static_cast<int>(H), static_cast<int>(rows));
    auto cr = std::make_shared<AxisResampler>(static_cast<int>(W), static_cast<int>(cols));
    Shape out_shape = x.shape();
    out_shape[out_shape.size() - 2] = rows;
    out_shape[out_shape.size() - 1] = cols;
    std::vector<double> out(static_cast<std::size_t>(planes * rows * cols), 0.0);
    std::vector<double> tmp(static_cast<std::size_t>(H * cols));
    const auto xv = x.values();
    for (std::int64_t p = 0; p < planes; ++p) {
        const double* src = xv.data() + p * H * W;
        for (std::int64_t r = 0; r < H; ++r)
            for (std::int64_t c = 0; c < cols; ++c) {
                double acc = 0.0;
                for (const auto& t : cr->taps[c]) acc += t.weight * src[r * W + t.index];
                tmp[r * cols + c] = acc;
            }
        double* dst = out.data() + p * rows * cols;
        for (std::int64_t r = 0; r < rows; ++r)
            for (const auto& t : rr->taps[r])
                for (std::int64_t c = 0; c < cols; ++c) dst[r * cols + c] += t.weight * tmp[t.index * cols + c];
    }
    return make_result("resize_bilinear", out_shape, std::move(out), {x}, [=](detail::Node& self) {
        auto& g = grad_of(self, 0);
        std::vector<double> tmp(static_cast<std::size_t>(H * cols));
        for (std::int64_t p = 0; p < planes; ++p) {
            std::fill(tmp.begin(), tmp.end(), 0.0);
            const double* go = self.grad.data() + p * rows * cols;
            for (std::int64_t r = 0; r < rows; ++r)
                for (const auto& t : rr->taps[r])
                    for (std::int64_t c = 0; c < cols; ++c) tmp[t.index * cols + c] += t.weight * go[r * cols + c];
            double* gi = g.data() + p * H * W;
            for (std::int64_t r = 0; r < H; ++r)
                for (std::int64_t c = 0; c < cols; ++c)
                    for (const auto& t : cr->taps[c]) gi[r * W + t.index] += t.weight * tmp[r * cols + c];
        }
    });
}

Array upsample2(const Array& x, std::int64_t rows, std::int64_t cols) {
    Array up = resize_bilinear(x, 2 * x.dim(-2), 2 * x.dim(-1));
    if (rows < 0 && cols < 0) return up;
    return crop2d(up, rows < 0 ? up.dim(-2) : rows, cols < 0 ? up.dim(-1) : cols);
}

Array global_avg_pool(const Array& x) {
    require_rank(x, 3, 5, "global_avg_pool");
    const std::int64_t N = x.dim(0), C = x.dim(1);
    const std::int64_t inner = x.numel() / (N * C);
    std::vector<double> out(static_cast<std::size_t>(N * C), 0.0);
    const auto xv = x.values();
    for (std::int64_t p = 0; p < N * C; ++p) {
        double s = 0.0;
        for (std::int64_t i = 0; i < inner; ++i) s += xv[p * inner + i];
        out[p] = s / inner;
    }
    return make_result("global_avg_pool", Shape{N, C}, std::move(out), {x}, [inner](detail::Node& self) {
        auto& g = grad_of(self, 0);
        for (std::size_t p = 0; p < self.grad.size(); ++p) {
            const double d = self.grad[p] / inner;
            for (std::int64_t i = 0; i < inner; ++i) g[p * inner + i] += d;
        }
    });
}

Array linear(const Array& x, const Array& weight, const Array& bias) {
    if (x.rank() != 2 || weight.rank() != 2 || x.dim(1) != weight.dim(1) || bias.shape() != Shape{weight.dim(0)})
        throw ShapeError("linear: x " + shape_str(x.shape()) + ", weight " + shape_str(weight.shape()) + ", bias " +
                         shape_str(bias.shape()));
    const std::int64_t N = x.dim(0), F = x.dim(1), O = weight.dim(0);
    std::vector<double> out(static_cast<std::size_t>(N * O));
    MapMat Y(out.data(), N, O);
    Y.noalias() = CMapMat(x.values().data(), N, F) * CMapMat(weight.values().data(), O, F).transpose();
    const auto bv = bias.values();
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t o = 0; o < O; ++o) Y(n, o) += bv[o];
    return make_result("linear", Shape{N, O}, std::move(out), {x, weight, bias}, [N, F, O](detail::Node& self) {
        const CMapMat dY(self.grad.data(), N, O);
        if (self.input_needs_grad(0))
            MapMat(grad_of(self, 0).data(), N, F).noalias() += dY * CMapMat(value_of(self, 1).data(), O, F);
        if (self.input_needs_grad(1))
            MapMat(grad_of(self, 1).data(), O, F).noalias() +=
                dY.transpose() * CMapMat(value_of(self, 0).data(), N, F);
        if (self.input_needs_grad(2)) {
            auto& g = grad_of(self, 2);
            for (std::int64_t n = 0; n < N; ++n)
                for (std::int64_t o = 0; o < O; ++o) g[o] += dY(n, o);
        }
    });
}

Array channel_scale(const Array& x, const Array& s) {
    require_rank(x, 2, 5, "channel_scale");
    const std::int64_t N = x.dim(0), C = x.dim(1);
    if (s.shape() != Shape{N, C})
        throw ShapeError("channel_scale: scale " + shape_str(s.shape()) + " for input " + shape_str(x.shape()));
    const std::int64_t inner = x.numel() / (N * C);
    const auto xv = x.values(), sv = s.values();
    std::vector<double> out(xv.size());
    for (std::int64_t p = 0; p < N * C; ++p)
        for (std::int64_t i = 0; i < inner; ++i) out[p * inner + i] = xv[p * inner + i] * sv[p];
    return make_result("channel_scale", x.shape(), std::move(out), {x, s}, [N, C, inner](detail::Node& self) {
        const auto& xv = value_of(self, 0);
        const auto& sv = value_of(self, 1);
        const bool nx = self.input_needs_grad(0), ns = self.input_needs_grad(1);
        double* dx = nx ? grad_of(self, 0).data() : nullptr;
        double* ds = ns ? grad_of(self, 1).data() : nullptr;
        for (std::int64_t p = 0; p < N * C; ++p) {
            double acc = 0.0;
            for (std::int64_t i = 0; i < inner; ++i) {
                const double g = self.grad[p * inner + i];
                if (nx) dx[p * inner + i] += g * sv[p];
                acc += g * xv[p * inner + i];
            }
            if (ns) ds[p] += acc;
        }
    });
}

Array l2_normalize(const Array& x) {
    if (x.rank() != 2) throw ShapeError("l2_normalize: expected (N,E), got " + shape_str(x.shape()));
    const std::int64_t N = x.dim(0), E = x.dim(1);
    const auto xv = x.values();
    std::vector<double> out(xv.size()), norms(static_cast<std::size_t>(N));
    for (std::int64_t n = 0; n < N; ++n) {
        double s = 0.0;
        for (std::int64_t e = 0; e < E; ++e) s += xv[n * E + e] * xv[n * E + e];
        norms[n] = std::max(std::sqrt(s), 1e-12);
        for (std::int64_t e = 0; e < E; ++e) out[n * E + e] = xv[n * E + e] / norms[n];
    }
    return make_result("l2_normalize", x.shape(), std::move(out), {x},
                       [N, E, norms = std::move(norms)](detail::Node& self) {
                           auto& g = grad_of(self, 0);
                           for (std::int64_t n = 0; n < N; ++n) {
                               double dot = 0.0;
                               for (std::int64_t e = 0; e < E; ++e)
                                   dot += self.grad[n * E + e] * self.value[n * E + e];
                               for (std::int64_t e = 0; e < E; ++e)
                                   g[n * E + e] += (self.grad[n * E + e] - self.value[n * E + e] * dot) / norms[n];
                           }
                       });
}

Array spatial_mix(const Array& x, const Array& weight, const Array& bias, int block, MixMode mode) {
    if (x.rank() != 4) throw ShapeError("spatial_mix: expected (N,C,H,W), got " + shape_str(x.shape()));
    const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::int64_t b = block, P = b * b;
    if (block <= 0 || H % b != 0 || W % b != 0)
        throw ShapeError("spatial_mix: spatial dims " + shape_str(x.shape()) + " not divisible by block " +
                         std::to_string(block));
    if (weight.shape() != Shape{P, P} || bias.shape() != Shape{P})
        throw ShapeError("spatial_mix: weight must be (" + std::to_string(P) + "," + std::to_string(P) + ")");
    const std::int64_t G = H * W / P;  // groups per plane
    // perm[t * G + g] is the pixel index of token t in group g.
    auto perm = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(H * W));
    const std::int64_t gh = H / b, gw = W / b;
    for (std::int64_t i = 0; i < H; ++i)
        for (std::int64_t j = 0; j < W; ++j) {
            std::int64_t t, grp;
            if (mode == MixMode::local) {
                t = (i % b) * b + (j % b);
                grp = (i / b) * (W / b) + (j / b);
            } else {
                t = (i / gh) * b + (j / gw);
                grp = (i % gh) * gw + (j % gw);
            }
            (*perm)[t * G + grp] = i * W + j;
        }
    const std::int64_t planes = N * C;
    const std::int64_t cols = planes * G;
    RowMat V(P, cols);
    const auto xv = x.values();
    for (std::int64_t p = 0; p < planes; ++p)
        for (std::int64_t t = 0; t < P; ++t)
            for (std::int64_t g = 0; g < G; ++g) V(t, p * G + g) = xv[p * H * W + (*perm)[t * G + g]];
    RowMat Y = CMapMat(weight.values().data(), P, P) * V;
    const auto bv = bias.values();
    std::vector<double> out(xv.size());
    for (std::int64_t p = 0; p < planes; ++p)
        for (std::int64_t t = 0; t < P; ++t)
            for (std::int64_t g = 0; g < G; ++g) out[p * H * W + (*perm)[t * G + g]] = Y(t, p * G + g) + bv[t];
    return make_result("spatial_mix", x.shape(), std::move(out), {x, weight, bias},
                       [=, V = std::move(V)](detail::Node& self) {
                           RowMat dY(P, cols);
                           for (std::int64_t p = 0; p < planes; ++p)
                               for (std::int64_t t = 0; t < P; ++t)
                                   for (std::int64_t g = 0; g < G; ++g)
                                       dY(t, p * G + g) = self.grad[p * H * W + (*perm)[t * G + g]];
                           if (self.input_needs_grad(1))
                               MapMat(grad_of(self, 1).data(), P, P).noalias() += dY * V.transpose();
                           if (self.input_needs_grad(2)) {
                               auto& gb = grad_of(self, 2);
                               for (std::int64_t t = 0; t < P; ++t)
                                   gb[t] += std::accumulate(dY.data() + t * cols, dY.data() + (t + 1) * cols, 0.0);
                           }
                           if (self.input_needs_grad(0)) {
                               const RowMat dV = CMapMat(value_of(self, 1).data(), P, P).transpose() * dY;
                               auto& gx = grad_of(self, 0);
                               for (std::int64_t p = 0; p < planes; ++p)
                                   for (std::int64_t t = 0; t < P; ++t)
                                       for (std::int64_t g = 0; g < G; ++g)
                                           gx[p * H * W + (*perm)[t * G + g]] += dV(t, p * G + g);
                           }
                       });
}

}  // namespace px3d::nn
