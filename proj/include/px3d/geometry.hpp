#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "px3d/arch.hpp"
#include "px3d/grid.hpp"
#include "px3d/phantom.hpp"

namespace px3d {

struct ProjectionConfig {
    double unit_mm = 0.2;
    double depth_mm = 40.0;
    double height_mm = 100.0;
    std::array<int, 2> out_px_dims{128, 256};       ///< (H, W)
    std::array<int, 3> out_vol_dims{128, 256, 128};  ///< (H, W, D)

    void validate() const;

    static ProjectionConfig full();
    /// Quarter-resolution preset sized to the default phantom.
    static ProjectionConfig desk();

    int depth_samples() const;
    int height_samples() const;
};

/// Trilinear read at a physical point; neighbours outside the grid count as 0.
double sample_trilinear(const Volume& v, const Vec3& p_mm);

/// Native (height x arc x normal-offset) sampling grid before any resampling.
/// Row 0 is the most superior sample; depth index grows along the outward normal.
struct UnfoldedSampling {
    ArchCurve curve;  ///< resampled at unit_mm
    int rows = 0;
    int depth = 0;
    double unit_mm = 0.0;
    double plane_z_mm = 0.0;

    Vec3 position(int row, int col, int k) const;
};

UnfoldedSampling make_sampling(const ArchCurve& curve, const ProjectionConfig& cfg);

/// Depth-mean along each ray, accumulated ray by ray. (H, arc) native grid.
ImageD project_panoramic_raw(const Volume& volume, const UnfoldedSampling& sampling);
/// Full (H, arc, depth) native grid.
VolumeD reformat_unfolded_raw(const Volume& volume, const UnfoldedSampling& sampling);

/// Pre-normalization outputs resampled to the configured output dims.
ImageD project_panoramic_unnormalized(const Volume& volume, const ArchCurve& curve, const ProjectionConfig& cfg);
VolumeD reformat_unfolded_unnormalized(const Volume& volume, const ArchCurve& curve, const ProjectionConfig& cfg);

Image project_panoramic(const Volume& volume, const ArchCurve& curve, const ProjectionConfig& cfg);
Volume reformat_unfolded(const Volume& volume, const ArchCurve& curve, const ProjectionConfig& cfg);

enum class Misalignment : int { regular = 0, rotation_left = 1, rotation_right = 2, chin_up = 3, chin_down = 4 };
inline constexpr int kMisalignmentClasses = 5;

std::string_view misalignment_name(Misalignment m);

/// lateral: head turn, rotation about the superior (z) axis.
/// vertical: chin up/down, rotation about the left-right (x) axis.
enum class RotationAxis { none, lateral, vertical };

/// Positive lateral degrees turn the head to the patient's left; positive
/// vertical degrees lift the chin.
struct MisalignmentSpec {
    Misalignment label = Misalignment::regular;
    RotationAxis axis = RotationAxis::none;
    double degrees = 0.0;
    Vec3 center_mm = Vec3::Zero();

    void validate() const;
};

/// Rigid rotation about spec.center_mm, trilinear, out-of-bounds reads as 0.
template <typename T>
Grid3<T> simulate_misalignment(const Grid3<T>& volume, const MisalignmentSpec& spec);

/// The seven acquisitions generated per phantom (regular, lateral +-5/+-10, vertical +-5).
std::vector<MisalignmentSpec> standard_misalignments(const Phantom& phantom);

Vec3 lateral_rotation_center(const PhantomMetadata& meta);
Vec3 volume_center(const Volume& v);

struct Sample {
    Image px;
    Volume unfolded;  ///< (H, W, D)
    Misalignment misalignment = Misalignment::regular;
    int binary_label = 0;  ///< 0 regular, 1 misaligned
    std::optional<Image> lesion_mask_2d;
    std::uint64_t source_phantom_id = 0;
    double degrees = 0.0;
};

inline constexpr double kLesionCoverageThreshold = 0.10;

/// 2D lesion mask: ray coverage of the (rotated) 3D mask above 10%.
Image project_lesion_mask(const Volume& mask3d, const ArchCurve& curve, const ProjectionConfig& cfg);

std::vector<Sample> build_samples(const Phantom& phantom, const ProjectionConfig& cfg);

}  // namespace px3d
