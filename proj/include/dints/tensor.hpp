#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "dints/error.hpp"

namespace dints {

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s)
{
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ',';
        os << s[i];
    }
    os << ']';
    return os.str();
}

inline std::size_t shape_numel(const Shape& s)
{
    if (s.size() > 4) throw ShapeError("tensor rank > 4: " + shape_str(s));
    std::size_t n = 1;
    for (int d : s) {
        if (d < 0) throw ShapeError("negative extent in shape " + shape_str(s));
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

/// Dense row-major f64 tensor with up to four axes (N, C, H, W).
/// A rank-0 tensor holds a single scalar.
struct Tensor {
    Shape shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(Shape s, double fill = 0.0) : shape(std::move(s)), data(shape_numel(shape), fill) {}
    Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values))
    {
        if (data.size() != shape_numel(shape))
            throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                             shape_str(shape));
    }

    static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

    std::size_t size() const { return data.size(); }
    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int axis) const { return shape.at(static_cast<std::size_t>(axis)); }

    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }

    double item() const
    {
        if (data.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape));
        return data[0];
    }

    // 2D / 3D / 4D element access, row-major
    double& at(int i, int j) { return data[static_cast<std::size_t>(i) * shape[1] + j]; }
    double at(int i, int j) const { return data[static_cast<std::size_t>(i) * shape[1] + j]; }
    double& at(int i, int j, int k)
    {
        return data[(static_cast<std::size_t>(i) * shape[1] + j) * shape[2] + k];
    }
    double at(int i, int j, int k) const
    {
        return data[(static_cast<std::size_t>(i) * shape[1] + j) * shape[2] + k];
    }
    double& at(int n, int c, int h, int w)
    {
        return data[((static_cast<std::size_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w];
    }
    double at(int n, int c, int h, int w) const
    {
        return data[((static_cast<std::size_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w];
    }

    std::span<double> row(int i)
    {
        const std::size_t stride = data.size() / static_cast<std::size_t>(shape.at(0));
        return {data.data() + stride * static_cast<std::size_t>(i), stride};
    }
    std::span<const double> row(int i) const
    {
        const std::size_t stride = data.size() / static_cast<std::size_t>(shape.at(0));
        return {data.data() + stride * static_cast<std::size_t>(i), stride};
    }

    bool all_finite() const
    {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what)
{
    if (a.shape != b.shape)
        throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                         shape_str(b.shape));
}

} // namespace dints
