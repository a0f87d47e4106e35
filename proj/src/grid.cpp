#include "px3d/grid.hpp"

#include <algorithm>
#include <cmath>

namespace px3d {

AxisResampler::AxisResampler(int n_src, int n_dst) : taps(static_cast<std::size_t>(n_dst)) {
    if (n_src <= 0 || n_dst <= 0) throw ShapeError("AxisResampler: lengths must be positive");
    if (n_src == n_dst) {
        for (int d = 0; d < n_dst; ++d) taps[d] = {{d, 1.0}};
        return;
    }
    const double ratio = static_cast<double>(n_src) / n_dst;
    if (n_dst < n_src) {
        for (int d = 0; d < n_dst; ++d) {
            const double lo = d * ratio;
            const double hi = (d + 1) * ratio;
            const int first = static_cast<int>(std::floor(lo));
            const int last = std::min(n_src - 1, static_cast<int>(std::ceil(hi)) - 1);
            for (int s = first; s <= last; ++s) {
                const double overlap = std::min<double>(hi, s + 1) - std::max<double>(lo, s);
                if (overlap > 0.0) taps[d].push_back({s, overlap / ratio});
            }
        }
        return;
    }
    for (int d = 0; d < n_dst; ++d) {
        double pos = (d + 0.5) * ratio - 0.5;
        pos = std::clamp(pos, 0.0, static_cast<double>(n_src - 1));
        const int i0 = static_cast<int>(std::floor(pos));
        const int i1 = std::min(i0 + 1, n_src - 1);
        const double t = pos - i0;
        if (i1 == i0 || t == 0.0) {
            taps[d] = {{i0, 1.0}};
        } else {
            taps[d] = {{i0, 1.0 - t}, {i1, t}};
        }
    }
}

ImageD resample(const ImageD& img, int rows, int cols) {
    const AxisResampler rr(img.rows, rows);
    const AxisResampler cr(img.cols, cols);
    ImageD tmp(img.rows, cols);
    for (int r = 0; r < img.rows; ++r)
        for (int c = 0; c < cols; ++c) {
            double acc = 0.0;
            for (const auto& t : cr.taps[c]) acc += t.weight * img.at(r, t.index);
            tmp.at(r, c) = acc;
        }
    ImageD out(rows, cols);
    for (int r = 0; r < rows; ++r)
        for (const auto& t : rr.taps[r])
            for (int c = 0; c < cols; ++c) out.at(r, c) += t.weight * tmp.at(t.index, c);
    return out;
}

VolumeD resample(const VolumeD& vol, std::array<int, 3> dims) {
    if (dims == vol.dims) return vol;
    std::array<double, 3> spacing{};
    for (int a = 0; a < 3; ++a) spacing[a] = vol.spacing[a] * vol.dims[a] / dims[a];

    // Axis 2.
    const AxisResampler r2(vol.dims[2], dims[2]);
    VolumeD t2({vol.dims[0], vol.dims[1], dims[2]}, spacing);
    for (int a = 0; a < vol.dims[0]; ++a)
        for (int b = 0; b < vol.dims[1]; ++b)
            for (int c = 0; c < dims[2]; ++c) {
                double acc = 0.0;
                for (const auto& t : r2.taps[c]) acc += t.weight * vol.at(a, b, t.index);
                t2.at(a, b, c) = acc;
            }
    // Axis 1.
    const AxisResampler r1(vol.dims[1], dims[1]);
    VolumeD t1({vol.dims[0], dims[1], dims[2]}, spacing);
    for (int a = 0; a < vol.dims[0]; ++a)
        for (int b = 0; b < dims[1]; ++b)
            for (const auto& t : r1.taps[b])
                for (int c = 0; c < dims[2]; ++c) t1.at(a, b, c) += t.weight * t2.at(a, t.index, c);
    // Axis 0.
    const AxisResampler r0(vol.dims[0], dims[0]);
    VolumeD out(dims, spacing);
    for (int a = 0; a < dims[0]; ++a)
        for (const auto& t : r0.taps[a])
            for (int b = 0; b < dims[1]; ++b)
                for (int c = 0; c < dims[2]; ++c) out.at(a, b, c) += t.weight * t1.at(t.index, b, c);
    return out;
}

void normalize_min_max(std::vector<double>& values) {
    if (values.empty()) return;
    const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
    const double mn = *lo;
    const double range = *hi - mn;
    if (range <= 0.0) {
        std::fill(values.begin(), values.end(), 0.0);
        return;
    }
    for (double& v : values) v = (v - mn) / range;
}

}  // namespace px3d
