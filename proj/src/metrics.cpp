#include "px3d/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include <nlohmann/json.hpp>

#include "px3d/error.hpp"

namespace px3d {

double psnr(std::span<const float> a, std::span<const float> b) {
    if (a.size() != b.size() || a.empty()) throw MetricError("psnr: inputs differ in size or are empty");
    double se = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        se += d * d;
    }
    if (se == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / (se / static_cast<double>(a.size())));
}

double psnr(const Image& a, const Image& b) {
    if (!a.same_shape(b)) throw MetricError("psnr: image shapes differ");
    return psnr(std::span<const float>(a.data), std::span<const float>(b.data));
}

double psnr(const Volume& a, const Volume& b) {
    if (!a.same_shape(b)) throw MetricError("psnr: volume shapes differ");
    return psnr(std::span<const float>(a.data), std::span<const float>(b.data));
}

std::vector<double> ssim_window() {
    std::vector<double> g(kSsimWindow);
    double s = 0.0;
    for (int i = 0; i < kSsimWindow; ++i) {
        const double x = i - kSsimWindow / 2;
        g[i] = std::exp(-x * x / (2.0 * kSsimSigma * kSsimSigma));
        s += g[i];
    }
    for (double& v : g) v /= s;
    std::vector<double> w(kSsimWindow * kSsimWindow);
    for (int i = 0; i < kSsimWindow; ++i)
        for (int j = 0; j < kSsimWindow; ++j) w[i * kSsimWindow + j] = g[i] * g[j];
    return w;
}

namespace {

// Separable valid-mode Gaussian filter of an (rows x cols) map.
std::vector<double> filter_valid(const std::vector<double>& img, int rows, int cols, const std::vector<double>& g) {
    const int k = kSsimWindow;
    const int orows = rows - k + 1, ocols = cols - k + 1;
    std::vector<double> tmp(static_cast<std::size_t>(rows) * ocols);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < ocols; ++c) {
            double acc = 0.0;
            for (int j = 0; j < k; ++j) acc += g[j] * img[static_cast<std::size_t>(r) * cols + c + j];
            tmp[static_cast<std::size_t>(r) * ocols + c] = acc;
        }
    std::vector<double> out(static_cast<std::size_t>(orows) * ocols);
    for (int r = 0; r < orows; ++r)
        for (int c = 0; c < ocols; ++c) {
            double acc = 0.0;
            for (int i = 0; i < k; ++i) acc += g[i] * tmp[static_cast<std::size_t>(r + i) * ocols + c];
            out[static_cast<std::size_t>(r) * ocols + c] = acc;
        }
    return out;
}

double ssim_plane(const std::vector<double>& a, const std::vector<double>& b, int rows, int cols) {
    if (rows < kSsimWindow || cols < kSsimWindow)
        throw MetricError("ssim: " + std::to_string(rows) + "x" + std::to_string(cols) + " is smaller than the " +
                          std::to_string(kSsimWindow) + "x" + std::to_string(kSsimWindow) + " window");
    std::vector<double> g(kSsimWindow);
    {
        const auto w = ssim_window();
        // Row sums of the outer product recover the 1D kernel.
        for (int i = 0; i < kSsimWindow; ++i) {
            double s = 0.0;
            for (int j = 0; j < kSsimWindow; ++j) s += w[i * kSsimWindow + j];
            g[i] = s;
        }
    }
    std::vector<double> aa(a.size()), bb(a.size()), ab(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        aa[i] = a[i] * a[i];
        bb[i] = b[i] * b[i];
        ab[i] = a[i] * b[i];
    }
    const auto mu_a = filter_valid(a, rows, cols, g);
    const auto mu_b = filter_valid(b, rows, cols, g);
    const auto e_aa = filter_valid(aa, rows, cols, g);
    const auto e_bb = filter_valid(bb, rows, cols, g);
    const auto e_ab = filter_valid(ab, rows, cols, g);
    constexpr double C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;
    double total = 0.0;
    for (std::size_t i = 0; i < mu_a.size(); ++i) {
        const double ma = mu_a[i], mb = mu_b[i];
        const double va = e_aa[i] - ma * ma, vb = e_bb[i] - mb * mb, cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
    }
    return total / static_cast<double>(mu_a.size());
}

}  // namespace

double ssim(const ImageD& a, const ImageD& b) {
    if (!a.same_shape(b)) throw MetricError("ssim: image shapes differ");
    return ssim_plane(a.data, b.data, a.rows, a.cols);
}

double ssim(const Image& a, const Image& b) { return ssim(grid_cast<double>(a), grid_cast<double>(b)); }

double ssim(const Volume& a, const Volume& b) {
    if (!a.same_shape(b)) throw MetricError("ssim: volume shapes differ");
    const int n = a.dims[0], rows = a.dims[1], cols = a.dims[2];
    const std::size_t plane = static_cast<std::size_t>(rows) * cols;
    double total = 0.0;
    for (int s = 0; s < n; ++s) {
        std::vector<double> pa(a.data.begin() + s * plane, a.data.begin() + (s + 1) * plane);
        std::vector<double> pb(b.data.begin() + s * plane, b.data.begin() + (s + 1) * plane);
        total += ssim_plane(pa, pb, rows, cols);
    }
    return total / n;
}

std::vector<std::uint8_t> threshold_mask(const Volume& v, double factor, std::optional<double> reference_mean) {
    double mean = 0.0;
    if (reference_mean) {
        mean = *reference_mean;
    } else {
        for (float x : v.data) mean += x;
        mean /= static_cast<double>(std::max<std::size_t>(1, v.size()));
    }
    const double t = factor * mean;
    std::vector<std::uint8_t> m(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) m[i] = v.data[i] > t ? 1 : 0;
    return m;
}

namespace {

double mean_of(const Volume& v) {
    double s = 0.0;
    for (float x : v.data) s += x;
    return s / static_cast<double>(std::max<std::size_t>(1, v.size()));
}

}  // namespace

double dsc_volumes(const Volume& recon, const Volume& gt, ThresholdReference ref) {
    if (!recon.same_shape(gt)) throw MetricError("dsc_volumes: volume shapes differ");
    std::optional<double> reference;
    if (ref == ThresholdReference::gt_mean) reference = mean_of(gt);
    const auto a = threshold_mask(recon, 1.5, reference);
    const auto b = threshold_mask(gt, 1.5, reference);
    std::size_t inter = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        inter += a[i] & b[i];
        na += a[i];
        nb += b[i];
    }
    if (na + nb == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

MaskMetrics mask_metrics(std::span<const float> pred, std::span<const float> gt) {
    if (pred.size() != gt.size()) throw MetricError("mask_metrics: mask sizes differ");
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const float p = pred[i], g = gt[i];
        if ((p != 0.0f && p != 1.0f) || (g != 0.0f && g != 1.0f))
            throw MetricError("mask_metrics: masks must be binary (0 or 1), found value at index " + std::to_string(i));
        tp += (p == 1.0f && g == 1.0f);
        fp += (p == 1.0f && g == 0.0f);
        fn += (p == 0.0f && g == 1.0f);
    }
    MaskMetrics m;
    if (tp + fp + fn == 0) return {1.0, 1.0, 1.0, 1.0};
    const double TP = static_cast<double>(tp), FP = static_cast<double>(fp), FN = static_cast<double>(fn);
    m.dsc = 2.0 * TP / (2.0 * TP + FP + FN);
    m.iou = TP / (TP + FP + FN);
    m.precision = tp + fp > 0 ? TP / (TP + FP) : 0.0;
    m.recall = tp + fn > 0 ? TP / (TP + FN) : 0.0;
    return m;
}

MaskMetrics mask_metrics(const Image& pred, const Image& gt) {
    if (!pred.same_shape(gt)) throw MetricError("mask_metrics: image shapes differ");
    return mask_metrics(std::span<const float>(pred.data), std::span<const float>(gt.data));
}

ClassificationReport classification_report(const std::vector<int>& preds, const std::vector<int>& labels,
                                           int classes) {
    if (preds.size() != labels.size()) throw MetricError("classification_report: preds and labels differ in length");
    if (classes < 1) throw MetricError("classification_report: need at least one class");
    ClassificationReport r;
    r.classes = classes;
    r.count = static_cast<int>(labels.size());
    r.per_class.assign(static_cast<std::size_t>(classes), {});
    int correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const int p = preds[i], l = labels[i];
        if (p < 0 || p >= classes || l < 0 || l >= classes)
            throw MetricError("classification_report: class id outside [0," + std::to_string(classes) + ") at index " +
                              std::to_string(i));
        r.per_class[l].support++;
        r.per_class[p].predicted++;
        if (p == l) {
            r.per_class[l].true_positive++;
            ++correct;
        }
    }
    r.accuracy = r.count > 0 ? static_cast<double>(correct) / r.count : 0.0;
    for (int k = 0; k < classes; ++k) {
        ClassStats& c = r.per_class[k];
        if (c.support == 0 && c.predicted == 0)
            r.warnings.push_back("class " + std::to_string(k) + " absent from predictions and labels; counted as 0");
        c.precision = c.predicted > 0 ? static_cast<double>(c.true_positive) / c.predicted : 0.0;
        c.recall = c.support > 0 ? static_cast<double>(c.true_positive) / c.support : 0.0;
        c.f1 = c.precision + c.recall > 0.0 ? 2.0 * c.precision * c.recall / (c.precision + c.recall) : 0.0;
        r.macro_precision += c.precision / classes;
        r.macro_recall += c.recall / classes;
        r.macro_f1 += c.f1 / classes;
    }
    return r;
}

std::optional<double> MetricReport::get(const std::string& name) const {
    for (const auto& [k, v] : metrics)
        if (k == name) return v;
    return std::nullopt;
}

namespace {

nlohmann::json number(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    if (std::isnan(v)) return "nan";
    return v;
}

std::string fmt(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return buf;
}

}  // namespace

std::string MetricReport::to_json() const {
    nlohmann::ordered_json j;
    j["task"] = task;
    j["samples"] = sample_count;
    nlohmann::ordered_json m = nlohmann::ordered_json::object();
    for (const auto& [k, v] : metrics) m[k] = number(v);
    j["metrics"] = m;
    if (!per_class.empty()) {
        nlohmann::ordered_json pc = nlohmann::ordered_json::array();
        for (const auto& [name, c] : per_class)
            pc.push_back({{"class", name},
                          {"support", c.support},
                          {"precision", number(c.precision)},
                          {"recall", number(c.recall)},
                          {"f1", number(c.f1)}});
        j["per_class"] = pc;
    }
    j["warnings"] = warnings;
    return j.dump(2);
}

std::string MetricReport::to_text() const {
    std::ostringstream os;
    std::size_t width = 7;
    for (const auto& [k, v] : metrics) width = std::max(width, k.size());
    os << "task: " << task << "  samples: " << sample_count << "\n";
    for (const auto& [k, v] : metrics) {
        os << k << std::string(width - k.size() + 2, ' ') << fmt(v) << "\n";
    }
    if (!per_class.empty()) {
        std::size_t cw = 5;
        for (const auto& [name, c] : per_class) cw = std::max(cw, name.size());
        char line[160];
        os << "\n" << "class" << std::string(cw - 5 + 2, ' ');
        std::snprintf(line, sizeof line, "%9s %9s %9s %9s\n", "support", "precision", "recall", "f1");
        os << line;
        for (const auto& [name, c] : per_class) {
            os << name << std::string(cw - name.size() + 2, ' ');
            std::snprintf(line, sizeof line, "%9d %9.4f %9.4f %9.4f\n", c.support, c.precision, c.recall, c.f1);
            os << line;
        }
    }
    for (const auto& w : warnings) os << "warning: " << w << "\n";
    return os.str();
}

MetricReport to_metric_report(const ClassificationReport& r, const std::string& task,
                              const std::vector<std::string>& class_names) {
    MetricReport m;
    m.task = task;
    m.sample_count = r.count;
    m.add("accuracy", r.accuracy);
    m.add("macro_precision", r.macro_precision);
    m.add("macro_recall", r.macro_recall);
    m.add("macro_f1", r.macro_f1);
    if (r.classes == 2) {
        m.add("precision", r.per_class[1].precision);
        m.add("recall", r.per_class[1].recall);
        m.add("f1", r.per_class[1].f1);
    }
    for (int k = 0; k < r.classes; ++k) {
        const std::string name =
            k < static_cast<int>(class_names.size()) ? class_names[k] : "class" + std::to_string(k);
        m.per_class.emplace_back(name, r.per_class[k]);
    }
    m.warnings = r.warnings;
    return m;
}

}  // namespace px3d
