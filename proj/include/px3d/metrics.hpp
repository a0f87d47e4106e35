#pragma once

#include <map>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "px3d/grid.hpp"

namespace px3d {

/// 10 log10(1 / MSE) for data in [0,1]; +infinity when the inputs are equal.
double psnr(std::span<const float> a, std::span<const float> b);
double psnr(const Image& a, const Image& b);
double psnr(const Volume& a, const Volume& b);

inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;

/// Gaussian-window SSIM (11x11, sigma 1.5, K1 0.01, K2 0.03, range 1) averaged
/// over every valid window position.
double ssim(const ImageD& a, const ImageD& b);
double ssim(const Image& a, const Image& b);
/// Mean of the 2D SSIM of each axis-0 (axial) slice.
double ssim(const Volume& a, const Volume& b);

/// The normalized 11x11 Gaussian weights, row-major.
std::vector<double> ssim_window();

/// Voxels strictly above factor * reference (defaults to the volume's own mean).
std::vector<std::uint8_t> threshold_mask(const Volume& v, double factor = 1.5,
                                         std::optional<double> reference_mean = std::nullopt);

enum class ThresholdReference { own_mean, gt_mean };

/// DSC of the high-density masks (1.5 x mean). Both masks empty gives 1.
double dsc_volumes(const Volume& recon, const Volume& gt, ThresholdReference ref = ThresholdReference::own_mean);

struct MaskMetrics {
    double dsc = 0.0;
    double iou = 0.0;
    double precision = 0.0;
    double recall = 0.0;
};

/// Binary masks (values exactly 0 or 1, else MetricError). Both empty gives
/// all ones; an empty side otherwise scores 0 on the undefined ratio.
MaskMetrics mask_metrics(std::span<const float> pred, std::span<const float> gt);
MaskMetrics mask_metrics(const Image& pred, const Image& gt);

struct ClassStats {
    int support = 0;     ///< true count of this class
    int predicted = 0;
    int true_positive = 0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

struct ClassificationReport {
    int classes = 0;
    int count = 0;
    double accuracy = 0.0;
    double macro_precision = 0.0;
    double macro_recall = 0.0;
    double macro_f1 = 0.0;
    std::vector<ClassStats> per_class;
    std::vector<std::string> warnings;
};

/// Macro averages run over all K classes; a class absent from both inputs adds 0 and a warning.
ClassificationReport classification_report(const std::vector<int>& preds, const std::vector<int>& labels, int classes);

/// Named scalar metrics plus an optional per-class table, rendered as JSON or aligned text.
struct MetricReport {
    std::string task;
    int sample_count = 0;
    std::vector<std::pair<std::string, double>> metrics;
    std::vector<std::pair<std::string, ClassStats>> per_class;
    std::vector<std::string> warnings;

    void add(const std::string& name, double value) { metrics.emplace_back(name, value); }
    std::optional<double> get(const std::string& name) const;
    std::string to_json() const;
    std::string to_text() const;
};

MetricReport to_metric_report(const ClassificationReport& r, const std::string& task,
                              const std::vector<std::string>& class_names = {});

}  // namespace px3d
