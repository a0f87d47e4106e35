#include "px3d/arch.hpp"

#include <algorithm>
#include <cmath>

#include "px3d/error.hpp"

namespace px3d {

namespace {

void fill_frames(ArchCurve& c) {
    const std::size_t n = c.points_mm.size();
    c.tangents.assign(n, Vec3::Zero());
    c.normals.assign(n, Vec3::Zero());
    const Vec3 up(0.0, 0.0, 1.0);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t lo = i == 0 ? 0 : i - 1;
        const std::size_t hi = i + 1 == n ? n - 1 : i + 1;
        Vec3 t = c.points_mm[hi] - c.points_mm[lo];
        t.z() = 0.0;
        const double len = t.norm();
        if (len <= 0.0) throw GeometryError("ArchCurve: degenerate tangent at point " + std::to_string(i));
        t /= len;
        c.tangents[i] = t;
        c.normals[i] = t.cross(up).normalized();
    }
}

}  // namespace

ArchCurve ArchCurve::from_points(std::vector<Vec3> points) {
    if (points.size() < 2) throw GeometryError("ArchCurve: need at least 2 points");
    ArchCurve c;
    c.points_mm = std::move(points);
    c.arc_length_mm.resize(c.points_mm.size());
    c.arc_length_mm[0] = 0.0;
    for (std::size_t i = 1; i < c.points_mm.size(); ++i) {
        const double seg = (c.points_mm[i] - c.points_mm[i - 1]).norm();
        if (seg <= 0.0) throw GeometryError("ArchCurve: repeated point at index " + std::to_string(i));
        c.arc_length_mm[i] = c.arc_length_mm[i - 1] + seg;
    }
    fill_frames(c);
    return c;
}

ArchCurve resample_arch(const ArchCurve& curve, double step_mm) {
    if (!(step_mm > 0.0)) throw GeometryError("resample_arch: step_mm must be > 0");
    if (curve.size() < 2) throw GeometryError("resample_arch: need at least 2 points");
    const double total = curve.length();
    if (!(total > 0.0)) throw GeometryError("resample_arch: zero-length curve");

    // Tolerate floating error so that e.g. 10 / 0.2 yields exactly 50 steps.
    const double ratio = total / step_mm;
    auto full_steps = static_cast<long>(std::floor(ratio + 1e-9));
    std::vector<double> targets;
    targets.reserve(static_cast<std::size_t>(full_steps) + 2);
    for (long k = 0; k <= full_steps; ++k) targets.push_back(std::min(total, k * step_mm));
    if (total - targets.back() > 1e-9 * std::max(1.0, total)) targets.push_back(total);

    std::vector<Vec3> pts;
    pts.reserve(targets.size());
    std::size_t seg = 1;
    for (double s : targets) {
        while (seg + 1 < curve.size() && curve.arc_length_mm[seg] < s) ++seg;
        const double s0 = curve.arc_length_mm[seg - 1];
        const double s1 = curve.arc_length_mm[seg];
        const double t = std::clamp((s - s0) / (s1 - s0), 0.0, 1.0);
        pts.push_back((1.0 - t) * curve.points_mm[seg - 1] + t * curve.points_mm[seg]);
    }
    // A final partial step of ~1e-9 would duplicate the endpoint.
    if (pts.size() >= 2 && (pts.back() - pts[pts.size() - 2]).norm() <= 0.0) pts.pop_back();
    return ArchCurve::from_points(std::move(pts));
}

}  // namespace px3d
