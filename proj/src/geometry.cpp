#include "px3d/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <Eigen/Geometry>

#include "px3d/error.hpp"

namespace px3d {

void ProjectionConfig::validate() const {
    if (!(unit_mm > 0.0)) throw ConfigError("unit_mm must be > 0");
    if (!(depth_mm > 0.0)) throw ConfigError("depth_mm must be > 0");
    if (!(height_mm > 0.0)) throw ConfigError("height_mm must be > 0");
    for (int d : out_px_dims)
        if (d <= 0) throw ConfigError("out_px_dims must be positive");
    for (int d : out_vol_dims)
        if (d <= 0) throw ConfigError("out_vol_dims must be positive");
}

ProjectionConfig ProjectionConfig::full() { return {}; }

ProjectionConfig ProjectionConfig::desk() {
    ProjectionConfig c;
    c.unit_mm = 0.5;
    c.depth_mm = 16.0;
    c.height_mm = 28.0;
    c.out_px_dims = {32, 64};
    c.out_vol_dims = {32, 64, 32};
    return c;
}

int ProjectionConfig::depth_samples() const { return std::max(1, static_cast<int>(std::lround(depth_mm / unit_mm))); }
int ProjectionConfig::height_samples() const {
    return std::max(1, static_cast<int>(std::lround(height_mm / unit_mm)));
}

double sample_trilinear(const Volume& v, const Vec3& p) {
    const double f0 = p.z() / v.spacing[0];
    const double f1 = p.y() / v.spacing[1];
    const double f2 = p.x() / v.spacing[2];
    const double fl0 = std::floor(f0), fl1 = std::floor(f1), fl2 = std::floor(f2);
    const int a0 = static_cast<int>(fl0), a1 = static_cast<int>(fl1), a2 = static_cast<int>(fl2);
    if (a0 < -1 || a1 < -1 || a2 < -1 || a0 >= v.dims[0] || a1 >= v.dims[1] || a2 >= v.dims[2]) return 0.0;
    const double t0 = f0 - fl0, t1 = f1 - fl1, t2 = f2 - fl2;
    double acc = 0.0;
    for (int d0 = 0; d0 < 2; ++d0) {
        const int i0 = a0 + d0;
        if (i0 < 0 || i0 >= v.dims[0]) continue;
        const double w0 = d0 ? t0 : 1.0 - t0;
        if (w0 == 0.0) continue;
        for (int d1 = 0; d1 < 2; ++d1) {
            const int i1 = a1 + d1;
            if (i1 < 0 || i1 >= v.dims[1]) continue;
            const double w1 = d1 ? t1 : 1.0 - t1;
            if (w1 == 0.0) continue;
            const std::size_t base = (static_cast<std::size_t>(i0) * v.dims[1] + i1) * v.dims[2];
            for (int d2 = 0; d2 < 2; ++d2) {
                const int i2 = a2 + d2;
                if (i2 < 0 || i2 >= v.dims[2]) continue;
                const double w2 = d2 ? t2 : 1.0 - t2;
                acc += w0 * w1 * w2 * v.data[base + i2];
            }
        }
    }
    return acc;
}

Vec3 UnfoldedSampling::position(int row, int col, int k) const {
    const double dz = ((rows - 1) * 0.5 - row) * unit_mm;
    const double offset = (k - (depth - 1) * 0.5) * unit_mm;
    const auto c = static_cast<std::size_t>(col);
    Vec3 p = curve.points_mm[c] + offset * curve.normals[c];
    p.z() = plane_z_mm + dz;
    return p;
}

UnfoldedSampling make_sampling(const ArchCurve& curve, const ProjectionConfig& cfg) {
    cfg.validate();
    if (curve.size() == 0) throw GeometryError("projection: empty arch curve");
    UnfoldedSampling s;
    s.curve = resample_arch(curve, cfg.unit_mm);
    s.rows = cfg.height_samples();
    s.depth = cfg.depth_samples();
    s.unit_mm = cfg.unit_mm;
    s.plane_z_mm = s.curve.points_mm.front().z();
    return s;
}

ImageD project_panoramic_raw(const Volume& volume, const UnfoldedSampling& s) {
    const int cols = static_cast<int>(s.curve.size());
    ImageD out(s.rows, cols);
    for (int r = 0; r < s.rows; ++r)
        for (int c = 0; c < cols; ++c) {
            double acc = 0.0;
            for (int k = 0; k < s.depth; ++k) acc += sample_trilinear(volume, s.position(r, c, k));
            out.at(r, c) = acc / s.depth;
        }
    return out;
}

VolumeD reformat_unfolded_raw(const Volume& volume, const UnfoldedSampling& s) {
    const int cols = static_cast<int>(s.curve.size());
    VolumeD out({s.rows, cols, s.depth}, {s.unit_mm, s.unit_mm, s.unit_mm});
    for (int r = 0; r < s.rows; ++r)
        for (int c = 0; c < cols; ++c)
            for (int k = 0; k < s.depth; ++k) out.at(r, c, k) = sample_trilinear(volume, s.position(r, c, k));
    return out;
}

ImageD project_panoramic_unnormalized(const Volume& volume, const ArchCurve& curve, const ProjectionConfig& cfg) {
    const UnfoldedSampling s = make_sampling(curve, cfg);
    return resample(project_panoramic_raw(volume, s), cfg.out_px_dims[0], cfg.out_px_dims[1]);
}

VolumeD reformat_unfolded_unnormalized(const Volume& volume, const ArchCurve& curve, const ProjectionConfig& cfg) {
    const UnfoldedSampling s = make_sampling(curve, cfg);
    return resample(reformat_unfolded_raw(volume, s), cfg.out_vol_dims);
}

Image project_panoramic(const Volume& volume, const ArchCurve& curve, const ProjectionConfig& cfg) {
    ImageD img = project_panoramic_unnormalized(volume, curve, cfg);
    normalize_min_max(img.data);
    return grid_cast<float>(img);
}

Volume reformat_unfolded(const Volume& volume, const ArchCurve& curve, const ProjectionConfig& cfg) {
    VolumeD v = reformat_unfolded_unnormalized(volume, curve, cfg);
    normalize_min_max(v.data);
    return grid_cast<float>(v);
}

std::string_view misalignment_name(Misalignment m) {
    switch (m) {
        case Misalignment::regular: return "regular";
        case Misalignment::rotation_left: return "rotation-left";
        case Misalignment::rotation_right: return "rotation-right";
        case Misalignment::chin_up: return "chin-up";
        case Misalignment::chin_down: return "chin-down";
    }
    return "unknown";
}

void MisalignmentSpec::validate() const {
    const double mag = std::abs(degrees);
    switch (label) {
        case Misalignment::regular:
            if (degrees != 0.0) throw ConfigError("misalignment: regular requires degrees = 0");
            return;
        case Misalignment::rotation_left:
        case Misalignment::rotation_right:
            if (axis != RotationAxis::lateral) throw ConfigError("misalignment: rotation-left/right need the lateral axis");
            if (mag != 5.0 && mag != 10.0) throw ConfigError("misalignment: lateral |degrees| must be 5 or 10");
            if ((label == Misalignment::rotation_left) != (degrees > 0.0))
                throw ConfigError("misalignment: sign of degrees does not match label");
            return;
        case Misalignment::chin_up:
        case Misalignment::chin_down:
            if (axis != RotationAxis::vertical) throw ConfigError("misalignment: chin-up/down need the vertical axis");
            if (mag != 5.0) throw ConfigError("misalignment: vertical |degrees| must be 5");
            if ((label == Misalignment::chin_up) != (degrees > 0.0))
                throw ConfigError("misalignment: sign of degrees does not match label");
            return;
    }
    throw ConfigError("misalignment: unknown label");
}

namespace {

// Rotation applied to the anatomy. Lateral: counter-clockwise about +z moves
// the anterior (-y) side toward +x, the patient's left. Vertical: chin-up
// raises the anterior side, i.e. rotation by -degrees about +x.
Eigen::Matrix3d anatomy_rotation(const MisalignmentSpec& spec) {
    const double rad = spec.degrees * std::numbers::pi / 180.0;
    switch (spec.axis) {
        case RotationAxis::lateral: return Eigen::AngleAxisd(rad, Vec3::UnitZ()).toRotationMatrix();
        case RotationAxis::vertical: return Eigen::AngleAxisd(-rad, Vec3::UnitX()).toRotationMatrix();
        case RotationAxis::none: break;
    }
    return Eigen::Matrix3d::Identity();
}

}  // namespace

template <typename T>
Grid3<T> simulate_misalignment(const Grid3<T>& volume, const MisalignmentSpec& spec) {
    spec.validate();
    if (spec.label == Misalignment::regular || spec.degrees == 0.0) return volume;
    const Eigen::Matrix3d inv = anatomy_rotation(spec).transpose();
    Volume src = grid_cast<float>(volume);
    Grid3<T> out(volume.dims, volume.spacing, T{});
    for (int a = 0; a < volume.dims[0]; ++a)
        for (int b = 0; b < volume.dims[1]; ++b)
            for (int c = 0; c < volume.dims[2]; ++c) {
                const Vec3 p = voxel_to_mm(volume.spacing, a, b, c);
                const Vec3 q = spec.center_mm + inv * (p - spec.center_mm);
                out.at(a, b, c) = static_cast<T>(sample_trilinear(src, q));
            }
    return out;
}

template Grid3<float> simulate_misalignment(const Grid3<float>&, const MisalignmentSpec&);
template Grid3<double> simulate_misalignment(const Grid3<double>&, const MisalignmentSpec&);

Vec3 lateral_rotation_center(const PhantomMetadata& meta) {
    // 10 mm below the crowns, 15 mm posterior of the incisor midpoint.
    return {meta.incisor_midpoint_mm.x(), meta.incisor_midpoint_mm.y() + 15.0, meta.crown_top_z_mm - 10.0};
}

Vec3 volume_center(const Volume& v) {
    return voxel_to_mm(v.spacing, (v.dims[0] - 1) * 0.5, (v.dims[1] - 1) * 0.5, (v.dims[2] - 1) * 0.5);
}

std::vector<MisalignmentSpec> standard_misalignments(const Phantom& phantom) {
    const Vec3 lateral = lateral_rotation_center(phantom.metadata);
    const Vec3 vertical = volume_center(phantom.volume);
    std::vector<MisalignmentSpec> specs;
    specs.push_back({Misalignment::regular, RotationAxis::none, 0.0, vertical});
    for (double deg : {-10.0, -5.0, 5.0, 10.0})
        specs.push_back({deg > 0 ? Misalignment::rotation_left : Misalignment::rotation_right, RotationAxis::lateral,
                         deg, lateral});
    for (double deg : {-5.0, 5.0})
        specs.push_back(
            {deg > 0 ? Misalignment::chin_up : Misalignment::chin_down, RotationAxis::vertical, deg, vertical});
    return specs;
}

Image project_lesion_mask(const Volume& mask3d, const ArchCurve& curve, const ProjectionConfig& cfg) {
    const ImageD coverage = project_panoramic_unnormalized(mask3d, curve, cfg);
    Image out(coverage.rows, coverage.cols, 0.0f);
    for (std::size_t i = 0; i < coverage.size(); ++i)
        out.data[i] = coverage.data[i] > kLesionCoverageThreshold ? 1.0f : 0.0f;
    return out;
}

std::vector<Sample> build_samples(const Phantom& phantom, const ProjectionConfig& cfg) {
    cfg.validate();
    std::vector<Sample> samples;
    for (const MisalignmentSpec& spec : standard_misalignments(phantom)) {
        const Volume rotated = simulate_misalignment(phantom.volume, spec);
        const UnfoldedSampling sampling = make_sampling(phantom.arch_curve, cfg);
        Sample s;
        // The panoramic is the depth mean of the same native grid.
        VolumeD grid = reformat_unfolded_raw(rotated, sampling);
        ImageD px(grid.dims[0], grid.dims[1]);
        for (int r = 0; r < grid.dims[0]; ++r)
            for (int c = 0; c < grid.dims[1]; ++c) {
                double acc = 0.0;
                for (int k = 0; k < grid.dims[2]; ++k) acc += grid.at(r, c, k);
                px.at(r, c) = acc / grid.dims[2];
            }
        px = resample(px, cfg.out_px_dims[0], cfg.out_px_dims[1]);
        normalize_min_max(px.data);
        VolumeD unfolded = resample(grid, cfg.out_vol_dims);
        normalize_min_max(unfolded.data);
        s.px = grid_cast<float>(px);
        s.unfolded = grid_cast<float>(unfolded);
        s.misalignment = spec.label;
        s.binary_label = spec.label == Misalignment::regular ? 0 : 1;
        s.source_phantom_id = phantom.metadata.seed;
        s.degrees = spec.degrees;
        if (phantom.metadata.lesion_present) {
            const Volume mask = simulate_misalignment(phantom.lesion_mask, spec);
            s.lesion_mask_2d = project_lesion_mask(mask, phantom.arch_curve, cfg);
        }
        samples.push_back(std::move(s));
    }
    return samples;
}

}  // namespace px3d
