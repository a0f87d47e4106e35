#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include "px3d/error.hpp"

namespace px3d {

/// Dense 3D grid, axis 0 slowest (C order). Spacing is in mm per axis.
template <typename T>
struct Grid3 {
    std::array<int, 3> dims{0, 0, 0};
    std::array<double, 3> spacing{1.0, 1.0, 1.0};
    std::vector<T> data;

    Grid3() = default;
    Grid3(std::array<int, 3> d, std::array<double, 3> sp = {1.0, 1.0, 1.0}, T fill = T{})
        : dims(d), spacing(sp), data(static_cast<std::size_t>(d[0]) * d[1] * d[2], fill) {
        if (d[0] <= 0 || d[1] <= 0 || d[2] <= 0) throw ShapeError("Grid3: dims must be positive");
    }

    std::size_t size() const { return data.size(); }
    std::size_t index(int a, int b, int c) const {
        return (static_cast<std::size_t>(a) * dims[1] + b) * dims[2] + c;
    }
    T& at(int a, int b, int c) { return data[index(a, b, c)]; }
    const T& at(int a, int b, int c) const { return data[index(a, b, c)]; }
    bool same_shape(const Grid3& o) const { return dims == o.dims; }
};

/// Dense 2D grid, row-major.
template <typename T>
struct Grid2 {
    int rows = 0;
    int cols = 0;
    std::vector<T> data;

    Grid2() = default;
    Grid2(int r, int c, T fill = T{}) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, fill) {
        if (r <= 0 || c <= 0) throw ShapeError("Grid2: dims must be positive");
    }

    std::size_t size() const { return data.size(); }
    T& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
    const T& at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
    bool same_shape(const Grid2& o) const { return rows == o.rows && cols == o.cols; }
};

using Volume = Grid3<float>;
using VolumeD = Grid3<double>;
using Image = Grid2<float>;
using ImageD = Grid2<double>;

template <typename To, typename From>
Grid3<To> grid_cast(const Grid3<From>& g) {
    Grid3<To> out;
    out.dims = g.dims;
    out.spacing = g.spacing;
    out.data.assign(g.data.begin(), g.data.end());
    return out;
}

template <typename To, typename From>
Grid2<To> grid_cast(const Grid2<From>& g) {
    Grid2<To> out;
    out.rows = g.rows;
    out.cols = g.cols;
    out.data.assign(g.data.begin(), g.data.end());
    return out;
}

/// Resamples one axis of length n_src onto n_dst cells. Shrinking uses exact
/// box (area) averaging, which preserves the mean; growing uses linear
/// interpolation on cell centers with edge clamping. n_src == n_dst is the identity.
struct AxisResampler {
    struct Tap {
        int index;
        double weight;
    };
    std::vector<std::vector<Tap>> taps;

    AxisResampler(int n_src, int n_dst);
};

ImageD resample(const ImageD& img, int rows, int cols);
VolumeD resample(const VolumeD& vol, std::array<int, 3> dims);

/// Min-max normalization to [0,1]; a constant input maps to all zeros.
void normalize_min_max(std::vector<double>& values);

}  // namespace px3d
