#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "px3d/arch.hpp"
#include "px3d/grid.hpp"

namespace px3d {

struct DensityLevels {
    double background = 0.0;
    double soft_tissue = 0.2;
    double bone = 0.6;
    double tooth = 0.95;
    double lesion = 0.3;
};

/// Procedural oral phantom parameters. The volume axes are (z, y, x) with
/// isotropic spacing; z is superior, y posterior, x toward the patient's left.
struct PhantomConfig {
    std::array<int, 3> grid_dims{64, 128, 128};
    double spacing_mm = 0.5;
    int tooth_count = 14;
    double lesion_probability = 0.5;
    std::array<double, 2> lesion_radius_range_mm{4.0, 6.0};
    DensityLevels density;
    double noise_sigma = 0.02;
    std::uint64_t seed = 0;

    /// Throws ConfigError naming the offending field.
    void validate() const;
};

enum class Tissue : std::uint8_t { background = 0, soft_tissue = 1, bone = 2, tooth = 3, lesion = 4 };

struct PhantomMetadata {
    std::uint64_t seed = 0;
    bool lesion_present = false;
    Vec3 lesion_center_mm = Vec3::Zero();
    Vec3 lesion_radii_mm = Vec3::Zero();  ///< semi-axes along x, y, z
    int lesion_tooth = -1;
    double arch_plane_z_mm = 0.0;        ///< height of the arch curve
    double crown_top_z_mm = 0.0;         ///< highest tooth crown
    Vec3 incisor_midpoint_mm = Vec3::Zero();  ///< arch apex between the central incisors
};

struct Phantom {
    Volume volume;
    ArchCurve arch_curve;
    Volume lesion_mask;             ///< 1 where the lesion was carved, else 0
    Grid3<std::uint8_t> tissue;     ///< Tissue label per voxel (before noise)
    PhantomMetadata metadata;
};

/// Physical position of voxel (a0, a1, a2) as (x, y, z) mm.
inline Vec3 voxel_to_mm(const std::array<double, 3>& spacing, double a0, double a1, double a2) {
    return {a2 * spacing[2], a1 * spacing[1], a0 * spacing[0]};
}

Phantom generate_phantom(const PhantomConfig& config);

struct PhantomRecord {
    std::string id;
    std::string volume_path;  ///< relative to the manifest directory
    std::string mask_path;
    PhantomMetadata metadata;
};

struct PhantomManifest {
    std::filesystem::path directory;
    std::vector<PhantomRecord> records;
};

/// Writes `count` phantoms with seeds base_seed .. base_seed+count-1 to
/// `out_dir` plus `phantoms.jsonl`. Output bytes depend only on the arguments.
PhantomManifest generate_dataset(const PhantomConfig& config, int count, std::uint64_t base_seed,
                                 const std::filesystem::path& out_dir);

std::string phantom_metadata_json(const PhantomMetadata& m);

}  // namespace px3d
