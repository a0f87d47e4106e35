#include "px3d/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "px3d/error.hpp"
#include "px3d/nn/loss.hpp"
#include "px3d/nn/ops.hpp"

namespace px3d {

using nn::Array;
using nn::Shape;

FusedPair depth_fuse(const Array& f2d, const Array& f3d) {
    if (f2d.rank() != 4 || f3d.rank() != 5)
        throw ShapeError("depth_fuse: expected (N,C,H,W) and (N,C,D,H,W), got " + nn::shape_str(f2d.shape()) + " and " +
                         nn::shape_str(f3d.shape()));
    if (f2d.dim(0) != f3d.dim(0) || f2d.dim(1) != f3d.dim(1) || f2d.dim(2) != f3d.dim(3) || f2d.dim(3) != f3d.dim(4))
        throw ShapeError("depth_fuse: 2D " + nn::shape_str(f2d.shape()) + " does not match 3D " +
                         nn::shape_str(f3d.shape()) + " in N, C, H or W");
    const Array slice = nn::reshape(f2d, Shape{f2d.dim(0), f2d.dim(1), 1, f2d.dim(2), f2d.dim(3)});
    FusedPair out;
    out.f3d = nn::concat({f3d, slice}, 2);
    out.f2d = nn::mean_axis(out.f3d, 2);
    return out;
}

Array cma_loss(const Array& z, const Array& z_star, double tau, CmaMode mode) {
    if (z.rank() != 2 || z.shape() != z_star.shape())
        throw ShapeError("cma_loss: embeddings " + nn::shape_str(z.shape()) + " and " + nn::shape_str(z_star.shape()));
    if (!(tau > 0.0)) throw ConfigError("cma_loss: tau must be positive");
    const std::int64_t N = z.dim(0), E = z.dim(1);
    if (N < 2) throw ConfigError("cma_loss: a batch of " + std::to_string(N) + " has no negative pairs");
    const auto a = z.values(), b = z_star.values();
    // s[i][k] = z_i . z*_k / tau
    std::vector<double> s(static_cast<std::size_t>(N * N));
    for (std::int64_t i = 0; i < N; ++i)
        for (std::int64_t k = 0; k < N; ++k) {
            double dot = 0.0;
            for (std::int64_t e = 0; e < E; ++e) dot += a[i * E + e] * b[k * E + e];
            s[i * N + k] = dot / tau;
        }
    const bool inclusive = mode == CmaMode::inclusive;
    // dL/ds, filled alongside the loss.
    std::vector<double> ds(s.size(), 0.0);
    // Terms are summed in sorted order so that permuting the batch gives a
    // bitwise identical loss.
    std::vector<double> terms, exps;
    for (std::int64_t i = 0; i < N; ++i) {
        double m = -std::numeric_limits<double>::infinity();
        for (std::int64_t k = 0; k < N; ++k)
            if (inclusive || k != i) m = std::max(m, s[i * N + k]);
        exps.clear();
        for (std::int64_t k = 0; k < N; ++k)
            if (inclusive || k != i) exps.push_back(std::exp(s[i * N + k] - m));
        std::sort(exps.begin(), exps.end());
        double acc = 0.0;
        for (double e : exps) acc += e;
        const double lse = m + std::log(acc);
        terms.push_back(lse - s[i * N + i]);
        for (std::int64_t k = 0; k < N; ++k)
            if (inclusive || k != i) ds[i * N + k] += std::exp(s[i * N + k] - lse);
        ds[i * N + i] -= 1.0;
    }
    std::sort(terms.begin(), terms.end());
    double loss = 0.0;
    for (double t : terms) loss += t;
    return nn::make_result("cma_loss", Shape{}, {loss}, {z, z_star}, [N, E, tau, ds = std::move(ds)](nn::detail::Node& self) {
        const auto& a = self.inputs[0]->value;
        const auto& b = self.inputs[1]->value;
        const double g = self.grad[0] / tau;
        if (self.input_needs_grad(0)) {
            auto& ga = self.inputs[0]->ensure_grad();
            for (std::int64_t i = 0; i < N; ++i)
                for (std::int64_t k = 0; k < N; ++k) {
                    const double w = g * ds[i * N + k];
                    for (std::int64_t e = 0; e < E; ++e) ga[i * E + e] += w * b[k * E + e];
                }
        }
        if (self.input_needs_grad(1)) {
            auto& gb = self.inputs[1]->ensure_grad();
            for (std::int64_t i = 0; i < N; ++i)
                for (std::int64_t k = 0; k < N; ++k) {
                    const double w = g * ds[i * N + k];
                    for (std::int64_t e = 0; e < E; ++e) gb[k * E + e] += w * a[i * E + e];
                }
        }
    });
}

std::string task_name(JointTask t) {
    switch (t) {
        case JointTask::cls2: return "cls2";
        case JointTask::cls5: return "cls5";
        case JointTask::seg: return "seg";
    }
    return "?";
}

JointTask parse_task(const std::string& s) {
    if (s == "cls2") return JointTask::cls2;
    if (s == "cls5") return JointTask::cls5;
    if (s == "seg") return JointTask::seg;
    throw ConfigError("task: expected cls2, cls5 or seg, got '" + s + "'");
}

JointConfig JointConfig::full(JointTask task) {
    JointConfig c;
    c.task = task;
    return c;
}

JointConfig JointConfig::desk(JointTask task) {
    JointConfig c;
    c.task = task;
    c.channels = {8, 16, 32, 32};
    c.in_rows = 32;
    c.in_cols = 64;
    c.depth = 32;
    return c;
}

int JointConfig::classes() const {
    switch (task) {
        case JointTask::cls2: return 2;
        case JointTask::cls5: return 5;
        case JointTask::seg: return 1;
    }
    return 1;
}

int JointConfig::resolved_tap() const {
    if (cma_tap >= 0) return cma_tap;
    return task == JointTask::seg ? 1 : 3;
}

void JointConfig::validate() const {
    for (int c : channels)
        if (c <= 0) throw ConfigError("JointConfig: channel widths must be positive");
    if (in_rows <= 0 || in_cols <= 0 || depth <= 0) throw ConfigError("JointConfig: dims must be positive");
    const int tap = resolved_tap();
    if (task == JointTask::seg ? (tap < 0 || tap > 2) : (tap < 0 || tap > 3))
        throw ConfigError("JointConfig: cma_tap " + std::to_string(tap) + " out of range for task " + task_name(task));
    if (!(tau > 0.0)) throw ConfigError("JointConfig: tau must be positive");
    if (lambda < 0.0) throw ConfigError("JointConfig: lambda must be non-negative");
}

JointModel::JointModel(const JointConfig& config) : config_(config) {
    config_.validate();
    nn::Rng rng(config_.seed);
    int in = 1;
    for (int l = 0; l < 4; ++l) {
        enc2d_[l] = nn::ConvBlock(in, config_.channels[l], 2, rng);
        in = config_.channels[l];
    }
    if (config_.use_3d) {
        in = 1;
        for (int l = 0; l < 4; ++l) {
            enc3d_[l] = nn::ConvBlock(in, config_.channels[l], 3, rng);
            in = config_.channels[l];
        }
    }
    if (config_.task == JointTask::seg) {
        int prev = config_.channels[3];
        for (int j = 0; j < 3; ++j) {
            const int lvl = 2 - j;
            dec_[j] = nn::ConvBlock(prev + config_.channels[lvl], config_.channels[lvl], 2, rng);
            prev = config_.channels[lvl];
        }
        seg_out_ = nn::Conv(prev, 1, 1, 2, rng);
    } else {
        head_ = nn::Linear(config_.channels[3], config_.classes(), rng);
    }
}

JointOutputs JointModel::forward(const Array& px, const Array& vol, bool training) {
    if (px.rank() != 4 || px.dim(1) != 1 || px.dim(2) != config_.in_rows || px.dim(3) != config_.in_cols)
        throw ShapeError("JointModel: expected px (N,1," + std::to_string(config_.in_rows) + "," +
                         std::to_string(config_.in_cols) + "), got " + nn::shape_str(px.shape()));
    if (config_.use_3d && vol.shape() != Shape{px.dim(0), 1, config_.depth, config_.in_rows, config_.in_cols})
        throw ShapeError("JointModel: expected volume (N,1," + std::to_string(config_.depth) + "," +
                         std::to_string(config_.in_rows) + "," + std::to_string(config_.in_cols) + "), got " +
                         (vol.defined() ? nn::shape_str(vol.shape()) : std::string("none")));
    JointOutputs out;
    std::array<Array, 4> mixed2d, pre2d, pre3d;
    Array x2 = px, x3 = vol;
    for (int l = 0; l < 4; ++l) {
        if (l > 0) {
            x2 = nn::max_pool2(x2);
            if (config_.use_3d) x3 = nn::max_pool2(x3);
        }
        pre2d[l] = enc2d_[l](x2, training);
        if (config_.use_3d) {
            pre3d[l] = enc3d_[l](x3, training);
            const FusedPair f = depth_fuse(pre2d[l], pre3d[l]);
            x2 = f.f2d;
            x3 = f.f3d;
            out.fused_shapes.push_back({x2.shape(), x3.shape()});
        } else {
            x2 = pre2d[l];
        }
        mixed2d[l] = x2;
    }
    const int tap = config_.resolved_tap();
    Array tap2d;
    Array tap3d;
    if (config_.task == JointTask::seg) {
        Array h = mixed2d[3];
        for (int j = 0; j < 3; ++j) {
            const int lvl = 2 - j;
            const Array& skip = mixed2d[lvl];
            h = nn::upsample2(h, skip.dim(2), skip.dim(3));
            h = dec_[j](nn::concat({h, skip}, 1), training);
            if (j == tap) {
                tap2d = h;
                if (config_.use_3d) tap3d = pre3d[lvl];
            }
        }
        out.logits = seg_out_(h);
    } else {
        out.logits = head_(nn::global_avg_pool(mixed2d[3]));
        tap2d = pre2d[tap];
        if (config_.use_3d) tap3d = pre3d[tap];
    }
    if (config_.use_3d) {
        out.z = nn::l2_normalize(nn::global_avg_pool(tap2d));
        out.z_star = nn::l2_normalize(nn::global_avg_pool(tap3d));
    }
    return out;
}

nn::ParamList JointModel::parameters() {
    nn::ParamList list;
    for (int l = 0; l < 4; ++l) enc2d_[l].collect(list, "enc2d." + std::to_string(l));
    if (config_.use_3d)
        for (int l = 0; l < 4; ++l) enc3d_[l].collect(list, "enc3d." + std::to_string(l));
    if (config_.task == JointTask::seg) {
        for (int j = 0; j < 3; ++j) dec_[j].collect(list, "dec." + std::to_string(j));
        seg_out_.collect(list, "seg_out");
    } else {
        head_.collect(list, "head");
    }
    return list;
}

Array volume_to_input(const Volume& v) {
    const Array c = volume_to_channels(v);
    return nn::reshape(c, Shape{1, 1, c.dim(0), c.dim(1), c.dim(2)});
}

nn::LrSchedule joint_lr_schedule(JointTask task, const JointTrainOptions& options) {
    if (task == JointTask::seg)
        return nn::LrSchedule::halve_once(options.lr, static_cast<std::int64_t>(std::llround(0.6 * options.steps)));
    return nn::LrSchedule::cosine(options.lr, options.cosine_t_max);
}

JointLoss joint_loss(const JointOutputs& out, const JointConfig& config, const std::vector<int>& labels,
                     const Array& masks) {
    JointLoss r;
    Array task;
    if (config.task == JointTask::seg) {
        if (!masks.defined() || masks.shape() != out.logits.shape())
            throw ShapeError("joint_loss: segmentation masks must match the logit map " +
                             nn::shape_str(out.logits.shape()));
        task = nn::scale(nn::add(nn::dice_loss(out.logits, masks), nn::bce_with_logits(out.logits, masks)), 0.5);
    } else {
        task = nn::cross_entropy(out.logits, labels);
    }
    r.task = task.item();
    r.total = task;
    if (config.use_3d && config.lambda > 0.0) {
        const Array c = cma_loss(out.z, out.z_star, config.tau, config.cma_mode);
        r.cma = c.item();
        r.total = nn::add(task, nn::scale(c, config.lambda));
    }
    return r;
}

namespace {

int label_for(const JointExample& ex, JointTask task) { return task == JointTask::cls2 ? ex.binary_label : ex.class_id; }

Array mask_array(const Image& m) {
    return Array(Shape{1, 1, m.rows, m.cols}, std::vector<double>(m.data.begin(), m.data.end()));
}

}  // namespace

JointTrainer::JointTrainer(JointModel& model, std::vector<JointExample> data, JointTrainOptions options)
    : model_(model),
      data_(std::move(data)),
      options_(options),
      optimizer_(model.parameters()),
      lr_(joint_lr_schedule(model.config().task, options_)) {
    if (data_.empty()) throw ConfigError("train-joint: the training set is empty");
    const JointConfig& cfg = model_.config();
    for (const auto& ex : data_) {
        if (ex.px.rows != cfg.in_rows || ex.px.cols != cfg.in_cols)
            throw ShapeError("train-joint: sample " + ex.id + " px dims do not match the model");
        px_.push_back(image_to_array(ex.px));
        vol_.push_back(cfg.use_3d ? volume_to_input(ex.volume) : Array());
        if (cfg.task == JointTask::seg) {
            if (!ex.mask) throw ConfigError("train-seg: sample " + ex.id + " has no lesion mask");
            mask_.push_back(mask_array(*ex.mask));
        } else {
            const int l = label_for(ex, cfg.task);
            if (l < 0 || l >= cfg.classes())
                throw ConfigError("train-cls: sample " + ex.id + " label " + std::to_string(l) + " out of range");
        }
    }
}

StepLog JointTrainer::step() {
    const JointConfig& cfg = model_.config();
    const std::int64_t s = steps_done();
    const auto idx = batch_indices(options_.seed, s, options_.batch_size, static_cast<int>(data_.size()));
    std::vector<Array> xs, vs, ms;
    std::vector<int> labels;
    for (int i : idx) {
        xs.push_back(px_[i]);
        if (cfg.use_3d) vs.push_back(vol_[i]);
        if (cfg.task == JointTask::seg) ms.push_back(mask_[i]);
        labels.push_back(label_for(data_[i], cfg.task));
    }
    StepLog log;
    log.step = s;
    log.lr = lr_.at(s);
    try {
        optimizer_.zero_grad();
        const JointOutputs out =
            model_.forward(nn::concat(xs, 0), cfg.use_3d ? nn::concat(vs, 0) : Array(), true);
        const JointLoss loss = joint_loss(out, cfg, labels, ms.empty() ? Array() : nn::concat(ms, 0));
        log.loss = loss.total.item();
        log.parts = {loss.task, loss.cma};
        loss.total.backward();
    } catch (const NumericError& e) {
        std::string ids;
        for (int i : idx) ids += (ids.empty() ? "" : ",") + data_[i].id;
        throw NumericError("train-joint: non-finite value at step " + std::to_string(s) + ", batch [" + ids +
                           "]: " + e.what());
    }
    optimizer_.step(log.lr);
    return log;
}

std::vector<std::vector<double>> joint_predict(JointModel& model, const std::vector<JointExample>& data,
                                               int batch_size) {
    nn::NoGradGuard guard;
    const JointConfig& cfg = model.config();
    std::vector<std::vector<double>> out;
    for (std::size_t start = 0; start < data.size(); start += static_cast<std::size_t>(batch_size)) {
        std::vector<Array> xs, vs;
        const std::size_t end = std::min(data.size(), start + static_cast<std::size_t>(batch_size));
        for (std::size_t i = start; i < end; ++i) {
            xs.push_back(image_to_array(data[i].px));
            if (cfg.use_3d) vs.push_back(volume_to_input(data[i].volume));
        }
        const JointOutputs o = model.forward(nn::concat(xs, 0), cfg.use_3d ? nn::concat(vs, 0) : Array(), false);
        const std::int64_t per = o.logits.numel() / o.logits.dim(0);
        const auto v = o.logits.values();
        for (std::int64_t n = 0; n < o.logits.dim(0); ++n)
            out.emplace_back(v.begin() + n * per, v.begin() + (n + 1) * per);
    }
    return out;
}

std::vector<int> predicted_classes(const std::vector<std::vector<double>>& logits) {
    std::vector<int> out;
    out.reserve(logits.size());
    for (const auto& row : logits)
        out.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
    return out;
}

MaskMetrics mean_mask_metrics(const std::vector<std::vector<double>>& logits, const std::vector<JointExample>& data) {
    if (logits.size() != data.size() || data.empty())
        throw MetricError("mean_mask_metrics: need one logit map per example");
    MaskMetrics acc;
    const double n = static_cast<double>(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
        if (!data[i].mask) throw MetricError("mean_mask_metrics: example " + data[i].id + " has no mask");
        const Image& gt = *data[i].mask;
        if (logits[i].size() != gt.size()) throw MetricError("mean_mask_metrics: map size differs from mask");
        Image pred(gt.rows, gt.cols);
        for (std::size_t k = 0; k < pred.size(); ++k) pred.data[k] = logits[i][k] > 0.0 ? 1.0f : 0.0f;
        const MaskMetrics m = mask_metrics(pred, gt);
        acc.dsc += m.dsc / n;
        acc.iou += m.iou / n;
        acc.precision += m.precision / n;
        acc.recall += m.recall / n;
    }
    return acc;
}

}  // namespace px3d
