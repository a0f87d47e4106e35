#include "px3d/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <random>

#include <nlohmann/json.hpp>

#include "px3d/error.hpp"
#include "px3d/io.hpp"

namespace px3d {

void PhantomConfig::validate() const {
    for (int a = 0; a < 3; ++a)
        if (grid_dims[a] <= 0) throw ConfigError("grid_dims[" + std::to_string(a) + "] must be positive");
    if (!(spacing_mm > 0.0)) throw ConfigError("spacing_mm must be positive");
    if (tooth_count < 1) throw ConfigError("tooth_count must be >= 1");
    if (!(lesion_probability >= 0.0 && lesion_probability <= 1.0))
        throw ConfigError("lesion_probability must lie in [0,1]");
    if (!(lesion_radius_range_mm[0] > 0.0)) throw ConfigError("lesion_radius_range_mm.min must be positive");
    if (lesion_radius_range_mm[0] > lesion_radius_range_mm[1])
        throw ConfigError("lesion_radius_range_mm: min > max");
    const double levels[] = {density.background, density.soft_tissue, density.bone, density.tooth, density.lesion};
    const char* names[] = {"background", "soft_tissue", "bone", "tooth", "lesion"};
    for (int i = 0; i < 5; ++i)
        if (!(levels[i] >= 0.0 && levels[i] <= 1.0))
            throw ConfigError(std::string("density_levels.") + names[i] + " must lie in [0,1]");
    if (!(density.tooth > density.bone)) throw ConfigError("density_levels.tooth must exceed bone");
    if (!(density.bone > density.lesion)) throw ConfigError("density_levels.bone must exceed lesion");
    if (!(density.bone > density.soft_tissue)) throw ConfigError("density_levels.bone must exceed soft_tissue");
    if (!(density.lesion >= density.background)) throw ConfigError("density_levels.lesion must be >= background");
    if (!(density.soft_tissue >= density.background))
        throw ConfigError("density_levels.soft_tissue must be >= background");
    if (!(noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be >= 0");
    const double max_r = lesion_radius_range_mm[1];
    for (int a = 0; a < 3; ++a)
        if (lesion_probability > 0.0 && 2.0 * max_r > (grid_dims[a] - 1) * spacing_mm)
            throw ConfigError("lesion_radius_range_mm.max does not fit grid axis " + std::to_string(a));
}

namespace {

struct ColumnHit {
    double distance;  ///< signed, positive on the normal (outward) side
    double arc;       ///< arc length of the closest point
};

// Closest point on the polyline in the axial plane.
ColumnHit closest_on_curve(const ArchCurve& c, double x, double y) {
    double best = std::numeric_limits<double>::infinity();
    ColumnHit hit{0.0, 0.0};
    for (std::size_t i = 1; i < c.size(); ++i) {
        const Vec3& a = c.points_mm[i - 1];
        const Vec3& b = c.points_mm[i];
        const double dx = b.x() - a.x(), dy = b.y() - a.y();
        const double len2 = dx * dx + dy * dy;
        double t = ((x - a.x()) * dx + (y - a.y()) * dy) / len2;
        t = std::clamp(t, 0.0, 1.0);
        const double px = a.x() + t * dx, py = a.y() + t * dy;
        const double d2 = (x - px) * (x - px) + (y - py) * (y - py);
        if (d2 < best) {
            best = d2;
            const double seg = std::sqrt(len2);
            // Outward normal of the segment: tangent x z-hat = (ty, -tx).
            const double nx = dy / seg, ny = -dx / seg;
            const double side = (x - px) * nx + (y - py) * ny;
            hit.distance = side >= 0.0 ? std::sqrt(d2) : -std::sqrt(d2);
            hit.arc = c.arc_length_mm[i - 1] + t * seg;
        }
    }
    return hit;
}

}  // namespace

Phantom generate_phantom(const PhantomConfig& config) {
    config.validate();
    std::mt19937_64 rng(config.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto jitter = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

    const auto& dims = config.grid_dims;
    const double s = config.spacing_mm;
    const std::array<double, 3> spacing{s, s, s};
    const double Z = (dims[0] - 1) * s;
    const double Y = (dims[1] - 1) * s;
    const double X = (dims[2] - 1) * s;
    const double R = std::min(X, Y);

    const bool lesion = unit(rng) < config.lesion_probability;

    // Parabolic arch y = y_front + depth * ((x - xc) / half_width)^2.
    const double xc = 0.5 * X;
    const double half_width = 0.34 * X * jitter(0.92, 1.08);
    const double arch_depth = 0.55 * Y * jitter(0.92, 1.08);
    const double y_front = 0.18 * Y + jitter(-0.02, 0.02) * Y;
    const double z_plane = 0.5 * Z;

    constexpr int kCurvePoints = 401;
    std::vector<Vec3> pts;
    pts.reserve(kCurvePoints);
    // Ordered from the patient's right (x small) to left.
    for (int i = 0; i < kCurvePoints; ++i) {
        const double u = -1.0 + 2.0 * i / (kCurvePoints - 1);
        pts.emplace_back(xc + u * half_width, y_front + arch_depth * u * u, z_plane);
    }
    ArchCurve curve = ArchCurve::from_points(std::move(pts));
    const double L = curve.length();

    // Cross-section profiles in (normal offset, z) around the curve.
    const double bone_zc = z_plane - 0.12 * Z;
    const double bone_hz = 0.25 * Z;
    const double bone_hw = 0.075 * R * jitter(0.9, 1.1);
    const double soft_zc = z_plane - 0.05 * Z;
    const double soft_hz = 0.40 * Z;
    const double soft_hw = 0.17 * R;

    struct Tooth {
        double arc, zc, half_t, half_n, half_z;
    };
    std::vector<Tooth> teeth;
    const double pitch = L / config.tooth_count;
    for (int k = 0; k < config.tooth_count; ++k) {
        Tooth t;
        t.arc = pitch * (k + 0.5);
        t.zc = z_plane + 0.05 * Z;
        t.half_t = 0.38 * pitch * jitter(0.9, 1.1);
        t.half_n = 0.045 * R * jitter(0.9, 1.1);
        t.half_z = 0.22 * Z * jitter(0.9, 1.1);
        teeth.push_back(t);
    }
    double crown_top = 0.0;
    for (const auto& t : teeth) crown_top = std::max(crown_top, t.zc + t.half_z);

    Phantom ph;
    ph.volume = Volume(dims, spacing, static_cast<float>(config.density.background));
    ph.lesion_mask = Volume(dims, spacing, 0.0f);
    ph.tissue = Grid3<std::uint8_t>(dims, spacing, 0);

    for (int j = 0; j < dims[1]; ++j) {
        for (int i = 0; i < dims[2]; ++i) {
            const double x = i * s, y = j * s;
            const ColumnHit hit = closest_on_curve(curve, x, y);
            const double d = hit.distance;
            for (int k = 0; k < dims[0]; ++k) {
                const double z = k * s;
                Tissue label = Tissue::background;
                const double es = (d / soft_hw) * (d / soft_hw) + ((z - soft_zc) / soft_hz) * ((z - soft_zc) / soft_hz);
                if (es <= 1.0) label = Tissue::soft_tissue;
                const double eb = (d / bone_hw) * (d / bone_hw) + ((z - bone_zc) / bone_hz) * ((z - bone_zc) / bone_hz);
                if (eb <= 1.0) label = Tissue::bone;
                // Only the nearest teeth can contain this column.
                const int nearest = std::clamp(static_cast<int>(hit.arc / pitch), 0, config.tooth_count - 1);
                for (int tk = std::max(0, nearest - 1); tk <= std::min(config.tooth_count - 1, nearest + 1); ++tk) {
                    const Tooth& t = teeth[tk];
                    const double a = (hit.arc - t.arc) / t.half_t;
                    const double b = d / t.half_n;
                    const double c = (z - t.zc) / t.half_z;
                    if (a * a + b * b + c * c <= 1.0) label = Tissue::tooth;
                }
                ph.tissue.at(k, j, i) = static_cast<std::uint8_t>(label);
            }
        }
    }

    PhantomMetadata& meta = ph.metadata;
    meta.seed = config.seed;
    meta.arch_plane_z_mm = z_plane;
    meta.crown_top_z_mm = crown_top;
    meta.incisor_midpoint_mm = Vec3(xc, y_front, z_plane);

    if (lesion) {
        const int tk = std::min(config.tooth_count - 1, static_cast<int>(unit(rng) * config.tooth_count));
        const Tooth& t = teeth[tk];
        Vec3 radii;
        for (int a = 0; a < 3; ++a)
            radii[a] = jitter(config.lesion_radius_range_mm[0], config.lesion_radius_range_mm[1]);
        // Locate the arc-length position on the polyline.
        std::size_t seg = 1;
        while (seg + 1 < curve.size() && curve.arc_length_mm[seg] < t.arc) ++seg;
        const double u = (t.arc - curve.arc_length_mm[seg - 1]) /
                         (curve.arc_length_mm[seg] - curve.arc_length_mm[seg - 1]);
        Vec3 center = (1.0 - u) * curve.points_mm[seg - 1] + u * curve.points_mm[seg];
        center += jitter(-0.5, 0.5) * curve.normals[seg];
        center.z() = t.zc - 0.8 * t.half_z;
        const std::array<double, 3> extent{X, Y, Z};
        for (int a = 0; a < 3; ++a) center[a] = std::clamp(center[a], radii[a], extent[a] - radii[a]);
        meta.lesion_present = true;
        meta.lesion_tooth = tk;
        meta.lesion_center_mm = center;
        meta.lesion_radii_mm = radii;

        const int k0 = std::max(0, static_cast<int>(std::floor((center.z() - radii.z()) / s)));
        const int k1 = std::min(dims[0] - 1, static_cast<int>(std::ceil((center.z() + radii.z()) / s)));
        const int j0 = std::max(0, static_cast<int>(std::floor((center.y() - radii.y()) / s)));
        const int j1 = std::min(dims[1] - 1, static_cast<int>(std::ceil((center.y() + radii.y()) / s)));
        const int i0 = std::max(0, static_cast<int>(std::floor((center.x() - radii.x()) / s)));
        const int i1 = std::min(dims[2] - 1, static_cast<int>(std::ceil((center.x() + radii.x()) / s)));
        for (int k = k0; k <= k1; ++k)
            for (int j = j0; j <= j1; ++j)
                for (int i = i0; i <= i1; ++i) {
                    const double a = (i * s - center.x()) / radii.x();
                    const double b = (j * s - center.y()) / radii.y();
                    const double c = (k * s - center.z()) / radii.z();
                    if (a * a + b * b + c * c <= 1.0) {
                        ph.tissue.at(k, j, i) = static_cast<std::uint8_t>(Tissue::lesion);
                        ph.lesion_mask.at(k, j, i) = 1.0f;
                    }
                }
    }

    // Texture noise has its own stream so shape draws stay stable.
    std::mt19937_64 noise_rng(config.seed ^ 0x9E3779B97F4A7C15ULL);
    std::normal_distribution<double> noise(0.0, config.noise_sigma);
    const double level[] = {config.density.background, config.density.soft_tissue, config.density.bone,
                            config.density.tooth, config.density.lesion};
    for (std::size_t n = 0; n < ph.volume.size(); ++n) {
        const auto label = ph.tissue.data[n];
        double v = level[label];
        if (label != 0 && config.noise_sigma > 0.0) v += noise(noise_rng);
        ph.volume.data[n] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }

    ph.arch_curve = std::move(curve);
    return ph;
}

std::string phantom_metadata_json(const PhantomMetadata& m) {
    auto vec = [](const Vec3& v) { return nlohmann::json::array({v.x(), v.y(), v.z()}); };
    nlohmann::json j;
    j["seed"] = m.seed;
    j["lesion_present"] = m.lesion_present;
    j["lesion_center_mm"] = vec(m.lesion_center_mm);
    j["lesion_radii_mm"] = vec(m.lesion_radii_mm);
    j["lesion_tooth"] = m.lesion_tooth;
    j["arch_plane_z_mm"] = m.arch_plane_z_mm;
    j["crown_top_z_mm"] = m.crown_top_z_mm;
    j["incisor_midpoint_mm"] = vec(m.incisor_midpoint_mm);
    return j.dump();
}

PhantomManifest generate_dataset(const PhantomConfig& config, int count, std::uint64_t base_seed,
                                 const std::filesystem::path& out_dir) {
    if (count < 1) throw ConfigError("count must be >= 1");
    config.validate();
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec || !std::filesystem::is_directory(out_dir))
        throw IoError("cannot create output directory " + out_dir.string());

    PhantomManifest manifest;
    manifest.directory = out_dir;
    std::string lines;
    for (int n = 0; n < count; ++n) {
        PhantomConfig c = config;
        c.seed = base_seed + static_cast<std::uint64_t>(n);
        const Phantom ph = generate_phantom(c);
        char name[32];
        std::snprintf(name, sizeof name, "phantom_%05d", n);
        PhantomRecord rec;
        rec.id = name;
        rec.volume_path = std::string(name) + ".rvol";
        rec.mask_path = std::string(name) + "_lesion.rvol";
        rec.metadata = ph.metadata;
        io::write_volume(ph.volume, out_dir / rec.volume_path);
        io::write_volume(ph.lesion_mask, out_dir / rec.mask_path);
        nlohmann::json j;
        j["id"] = rec.id;
        j["volume"] = rec.volume_path;
        j["lesion_mask"] = rec.mask_path;
        j["metadata"] = nlohmann::json::parse(phantom_metadata_json(rec.metadata));
        lines += j.dump() + "\n";
        manifest.records.push_back(std::move(rec));
    }
    io::atomic_write(out_dir / "phantoms.jsonl", lines);
    return manifest;
}

}  // namespace px3d
