#include "px3d/render.hpp"

#include <algorithm>
#include <array>
#include <limits>

#include "px3d/error.hpp"
#include "px3d/metrics.hpp"

namespace px3d {

RenderAxis parse_render_axis(const std::string& s) {
    if (s == "height") return RenderAxis::height;
    if (s == "width") return RenderAxis::width;
    if (s == "depth") return RenderAxis::depth;
    throw ConfigError("axis: expected height, width or depth, got '" + s + "'");
}

namespace {

// Output image axes are the two remaining volume axes in order.
struct RayLayout {
    int a, b, ray;  ///< volume axes for output rows, output cols, and the ray
};

RayLayout layout(RenderAxis axis) {
    switch (axis) {
        case RenderAxis::height: return {1, 2, 0};
        case RenderAxis::width: return {0, 2, 1};
        case RenderAxis::depth: return {0, 1, 2};
    }
    return {0, 1, 2};
}

std::size_t voxel(const Volume& v, int axis_a, int ia, int axis_b, int ib, int axis_r, int ir) {
    std::array<int, 3> idx{};
    idx[axis_a] = ia;
    idx[axis_b] = ib;
    idx[axis_r] = ir;
    return v.index(idx[0], idx[1], idx[2]);
}

}  // namespace

Image render_mip(const Volume& v, RenderAxis axis) {
    const RayLayout L = layout(axis);
    const int rows = v.dims[L.a], cols = v.dims[L.b], n = v.dims[L.ray];
    std::vector<double> out(static_cast<std::size_t>(rows) * cols);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            float m = -std::numeric_limits<float>::infinity();
            for (int k = 0; k < n; ++k) m = std::max(m, v.data[voxel(v, L.a, r, L.b, c, L.ray, k)]);
            out[static_cast<std::size_t>(r) * cols + c] = m;
        }
    normalize_min_max(out);
    Image img(rows, cols);
    std::copy(out.begin(), out.end(), img.data.begin());
    return img;
}

Image render_threshold(const Volume& v, RenderAxis axis) {
    const RayLayout L = layout(axis);
    const int rows = v.dims[L.a], cols = v.dims[L.b], n = v.dims[L.ray];
    const auto mask = threshold_mask(v, 1.5);
    Image img(rows, cols, 0.0f);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c)
            for (int k = 0; k < n; ++k)
                if (mask[voxel(v, L.a, r, L.b, c, L.ray, k)]) {
                    img.at(r, c) = static_cast<float>(1.0 - static_cast<double>(k) / n);
                    break;
                }
    return img;
}

}  // namespace px3d
