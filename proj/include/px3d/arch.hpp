#pragma once

#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace px3d {

using Vec3 = Eigen::Vector3d;

/// Planar polyline in physical mm, (x, y, z) with z the superior axis.
/// x grows toward the patient's left, y toward posterior. Normals lie in the
/// axial plane and point outward (buccal side): normal = tangent x z-hat.
struct ArchCurve {
    std::vector<Vec3> points_mm;
    std::vector<Vec3> tangents;
    std::vector<Vec3> normals;
    std::vector<double> arc_length_mm;  ///< cumulative, starts at 0

    std::size_t size() const { return points_mm.size(); }
    double length() const { return arc_length_mm.empty() ? 0.0 : arc_length_mm.back(); }

    /// Builds a curve from ordered points, computing arc length, central
    /// difference tangents and normals. Throws GeometryError on < 2 points,
    /// zero total length or repeated consecutive points.
    static ArchCurve from_points(std::vector<Vec3> points);
};

/// Re-spaces the curve at step_mm in arc length; the last segment may be shorter.
ArchCurve resample_arch(const ArchCurve& curve, double step_mm);

}  // namespace px3d
