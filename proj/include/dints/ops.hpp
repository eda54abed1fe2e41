#pragma once

// Differentiable primitives recorded on an ad::Tape.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "dints/autodiff.hpp"

namespace dints::ad {

namespace detail {

inline void same_tape(Var a, Var b)
{
    if (a.tape != b.tape) throw ValidationError("operands recorded on different tapes");
}

inline void require_scalar(Var s, const char* what)
{
    if (s.value().size() != 1)
        throw ShapeError(std::string(what) + ": expected a scalar, got " + shape_str(s.shape()));
}

} // namespace detail

inline Var add(Var a, Var b)
{
    detail::same_tape(a, b);
    require_same_shape(a.value(), b.value(), "add");
    Tensor out = a.value();
    const auto& bv = b.value().data;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += bv[i];
    return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor&, const Tensor& g) {
        if (Tensor* ga = t.grad_sink(a))
            for (std::size_t i = 0; i < g.size(); ++i) ga->data[i] += g.data[i];
        if (Tensor* gb = t.grad_sink(b))
            for (std::size_t i = 0; i < g.size(); ++i) gb->data[i] += g.data[i];
    });
}

inline Var sub(Var a, Var b)
{
    detail::same_tape(a, b);
    require_same_shape(a.value(), b.value(), "sub");
    Tensor out = a.value();
    const auto& bv = b.value().data;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= bv[i];
    return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor&, const Tensor& g) {
        if (Tensor* ga = t.grad_sink(a))
            for (std::size_t i = 0; i < g.size(); ++i) ga->data[i] += g.data[i];
        if (Tensor* gb = t.grad_sink(b))
            for (std::size_t i = 0; i < g.size(); ++i) gb->data[i] -= g.data[i];
    });
}

/// Elementwise product.
inline Var mul(Var a, Var b)
{
    detail::same_tape(a, b);
    require_same_shape(a.value(), b.value(), "mul");
    Tensor out = a.value();
    const auto& bv = b.value().data;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= bv[i];
    return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor&, const Tensor& g) {
        if (Tensor* ga = t.grad_sink(a)) {
            const auto& bv = t.value(b).data;
            for (std::size_t i = 0; i < g.size(); ++i) ga->data[i] += g.data[i] * bv[i];
        }
        if (Tensor* gb = t.grad_sink(b)) {
            const auto& av = t.value(a).data;
            for (std::size_t i = 0; i < g.size(); ++i) gb->data[i] += g.data[i] * av[i];
        }
    });
}

/// y = scale * x + shift, with constant coefficients.
inline Var affine(Var x, double scale, double shift = 0.0)
{
    Tensor out = x.value();
    for (double& v : out.data) v = scale * v + shift;
    return x.tape->record(std::move(out), {x}, [x, scale](Tape& t, const Tensor&, const Tensor& g) {
        if (Tensor* gx = t.grad_sink(x))
            for (std::size_t i = 0; i < g.size(); ++i) gx->data[i] += scale * g.data[i];
    });
}

inline Var scale(Var x, double c) { return affine(x, c, 0.0); }

/// Tensor times a scalar variable.
inline Var scale_by(Var x, Var s)
{
    detail::same_tape(x, s);
    detail::require_scalar(s, "scale_by");
    const double sv = s.value().data[0];
    Tensor out = x.value();
    for (double& v : out.data) v *= sv;
    return x.tape->record(std::move(out), {x, s}, [x, s](Tape& t, const Tensor&, const Tensor& g) {
        if (Tensor* gx = t.grad_sink(x)) {
            const double sv = t.value(s).data[0];
            for (std::size_t i = 0; i < g.size(); ++i) gx->data[i] += sv * g.data[i];
        }
        if (Tensor* gs = t.grad_sink(s)) {
            const auto& xv = t.value(x).data;
            double acc = 0.0;
            for (std::size_t i = 0; i < g.size(); ++i) acc += g.data[i] * xv[i];
            gs->data[0] += acc;
        }
    });
}

inline Var sum(Var x)
{
    double acc = 0.0;
    for (double v : x.value().data) acc += v;
    return x.tape->record(Tensor::scalar(acc), {x}, [x](Tape& t, const Tensor&, const Tensor& g) {
        if (Tensor* gx = t.grad_sink(x))
            for (double& v : gx->data) v += g.data[0];
    });
}

inline Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

/// Scalar element at flat index i.
inline Var at(Var x, std::size_t i)
{
    if (i >= x.value().size())
        throw ShapeError("at(): index " + std::to_string(i) + " out of range for " + shape_str(x.shape()));
    return x.tape->record(Tensor::scalar(x.value().data[i]), {x}, [x, i](Tape& t, const Tensor&, const Tensor& g) {
        if (Tensor* gx = t.grad_sink(x)) gx->data[i] += g.data[0];
    });
}

inline Var reshape(Var x, Shape shape)
{
    if (shape_numel(shape) != x.value().size())
        throw ShapeError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
    Tensor out(std::move(shape), x.value().data);
    return x.tape->record(std::move(out), {x}, [x](Tape& t, const Tensor&, const Tensor& g) {
        if (Tensor* gx = t.grad_sink(x))
            for (std::size_t i = 0; i < g.size(); ++i) gx->data[i] += g.data[i];
    });
}

/// Rows [begin, end) along axis 0.
inline Var rows(Var x, int begin, int end)
{
    const Tensor& xv = x.value();
    if (xv.rank() < 1 || begin < 0 || end > xv.dim(0) || begin > end)
        throw ShapeError("rows(" + std::to_string(begin) + "," + std::to_string(end) + ") on " +
                         shape_str(xv.shape));
    const std::size_t stride = xv.dim(0) ? xv.size() / static_cast<std::size_t>(xv.dim(0)) : 0;
    Shape s = xv.shape;
    s[0] = end - begin;
    Tensor out(s, 0.0);
    std::copy(xv.data.begin() + static_cast<std::ptrdiff_t>(stride * begin),
              xv.data.begin() + static_cast<std::ptrdiff_t>(stride * end), out.data.begin());
    return x.tape->record(std::move(out), {x}, [x, begin, stride](Tape& t, const Tensor&, const Tensor& g) {
        if (Tensor* gx = t.grad_sink(x))
            for (std::size_t i = 0; i < g.size(); ++i) gx->data[stride * begin + i] += g.data[i];
    });
}

/// Matrix product of rank-2 tensors.
inline Var matmul(Var a, Var b)
{
    detail::same_tape(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0))
        throw ShapeError("matmul " + shape_str(av.shape) + " x " + shape_str(bv.shape));
    const int m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    Tensor out({m, n}, 0.0);
    for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) {
            const double aip = av.at(i, p);
            if (aip == 0.0) continue;
            const double* brow = &bv.data[static_cast<std::size_t>(p) * n];
            double* orow = &out.data[static_cast<std::size_t>(i) * n];
            for (int j = 0; j < n; ++j) orow[j] += aip * brow[j];
        }
    return a.tape->record(std::move(out), {a, b}, [a, b, m, k, n](Tape& t, const Tensor&, const Tensor& g) {
        const Tensor& av = t.value(a);
        const Tensor& bv = t.value(b);
        if (Tensor* ga = t.grad_sink(a))
            for (int i = 0; i < m; ++i)
                for (int p = 0; p < k; ++p) {
                    const double* brow = &bv.data[static_cast<std::size_t>(p) * n];
                    const double* grow = &g.data[static_cast<std::size_t>(i) * n];
                    double acc = 0.0;
                    for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
                    ga->at(i, p) += acc;
                }
        if (Tensor* gb = t.grad_sink(b))
            for (int i = 0; i < m; ++i)
                for (int p = 0; p < k; ++p) {
                    const double aip = av.at(i, p);
                    if (aip == 0.0) continue;
                    const double* grow = &g.data[static_cast<std::size_t>(i) * n];
                    double* gbrow = &gb->data[static_cast<std::size_t>(p) * n];
                    for (int j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
                }
    });
}

namespace detail {

struct AxisView {
    std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisView axis_view(const Shape& s, int axis)
{
    if (axis < 0) axis += static_cast<int>(s.size());
    if (axis < 0 || axis >= static_cast<int>(s.size()))
        throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
    AxisView v;
    for (int i = 0; i < axis; ++i) v.outer *= static_cast<std::size_t>(s[i]);
    v.extent = static_cast<std::size_t>(s[static_cast<std::size_t>(axis)]);
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i)
        v.inner *= static_cast<std::size_t>(s[i]);
    return v;
}

} // namespace detail

/// Softmax along `axis` (negative counts from the back).
inline Var softmax(Var x, int axis = -1)
{
    const Tensor& xv = x.value();
    const auto v = detail::axis_view(xv.shape, axis);
    Tensor out(xv.shape, 0.0);
    for (std::size_t o = 0; o < v.outer; ++o)
        for (std::size_t in = 0; in < v.inner; ++in) {
            const std::size_t base = o * v.extent * v.inner + in;
            double mx = -INFINITY;
            for (std::size_t k = 0; k < v.extent; ++k) mx = std::max(mx, xv.data[base + k * v.inner]);
            double z = 0.0;
            for (std::size_t k = 0; k < v.extent; ++k) {
                const double e = std::exp(xv.data[base + k * v.inner] - mx);
                out.data[base + k * v.inner] = e;
                z += e;
            }
            for (std::size_t k = 0; k < v.extent; ++k) out.data[base + k * v.inner] /= z;
        }
    return x.tape->record(std::move(out), {x}, [x, v](Tape& t, const Tensor& s, const Tensor& g) {
        Tensor* gx = t.grad_sink(x);
        for (std::size_t o = 0; o < v.outer; ++o)
            for (std::size_t in = 0; in < v.inner; ++in) {
                const std::size_t base = o * v.extent * v.inner + in;
                double dot = 0.0;
                for (std::size_t k = 0; k < v.extent; ++k)
                    dot += g.data[base + k * v.inner] * s.data[base + k * v.inner];
                for (std::size_t k = 0; k < v.extent; ++k) {
                    const std::size_t idx = base + k * v.inner;
                    gx->data[idx] += s.data[idx] * (g.data[idx] - dot);
                }
            }
        });
}


/// Logistic function with the output clamped into [eps, 1 - eps]; the
/// adjoint is zero where the clamp is active.
inline Var sigmoid(Var x, double eps = 0.0)
{
    Tensor out = x.value();
    for (double& v : out.data) {
        const double s = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
        v = std::clamp(s, eps, 1.0 - eps);
    }
    return x.tape->record(std::move(out), {x}, [x, eps](Tape& t, const Tensor& y, const Tensor& g) {
        Tensor* gx = t.grad_sink(x);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double s = y.data[i];
            if (eps > 0.0 && (s <= eps || s >= 1.0 - eps)) continue;
            gx->data[i] += g.data[i] * s * (1.0 - s);
        }
    });
}

/// Natural log of max(x, eps); the adjoint is zero where the clamp is active.
inline Var log(Var x, double eps = 0.0)
{
    Tensor out = x.value();
    for (double& v : out.data) v = std::log(std::max(v, eps));
    return x.tape->record(std::move(out), {x}, [x, eps](Tape& t, const Tensor&, const Tensor& g) {
        Tensor* gx = t.grad_sink(x);
        const auto& xv = t.value(x).data;
        for (std::size_t i = 0; i < g.size(); ++i)
            if (xv[i] > eps) gx->data[i] += g.data[i] / xv[i];
    });
}

/// |x| with subgradient 0 at the kink.
inline Var abs(Var x)
{
    Tensor out = x.value();
    for (double& v : out.data) v = std::fabs(v);
    return x.tape->record(std::move(out), {x}, [x](Tape& t, const Tensor&, const Tensor& g) {
        Tensor* gx = t.grad_sink(x);
        const auto& xv = t.value(x).data;
        for (std::size_t i = 0; i < g.size(); ++i)
            gx->data[i] += xv[i] > 0.0 ? g.data[i] : (xv[i] < 0.0 ? -g.data[i] : 0.0);
    });
}

inline Var relu(Var x)
{
    Tensor out = x.value();
    for (double& v : out.data) v = v > 0.0 ? v : 0.0;
    return x.tape->record(std::move(out), {x}, [x](Tape& t, const Tensor&, const Tensor& g) {
        Tensor* gx = t.grad_sink(x);
        const auto& xv = t.value(x).data;
        for (std::size_t i = 0; i < g.size(); ++i)
            if (xv[i] > 0.0) gx->data[i] += g.data[i];
    });
}

} // namespace dints::ad
