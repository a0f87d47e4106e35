#include "px3d/pgr.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "px3d/error.hpp"
#include "px3d/nn/ops.hpp"

namespace px3d {

using nn::Array;
using nn::Shape;

PgrConfig PgrConfig::full() { return PgrConfig{}; }

PgrConfig PgrConfig::desk() {
    PgrConfig c;
    c.stem = 4;
    c.encoder = {8, 16, 32, 32};
    c.bottleneck = 64;
    c.decoder = 32;
    c.in_rows = 32;
    c.in_cols = 64;
    return c;
}

int PgrConfig::stage_channels(int stage) const {
    if (stage < 0 || stage >= kPgrStages) throw ConfigError("PgrConfig: stage " + std::to_string(stage) + " out of range");
    return stage < 4 ? encoder[stage] : decoder;
}

std::array<int, 2> PgrConfig::stage_dims(int stage) const {
    if (stage < 0 || stage >= kPgrStages) throw ConfigError("PgrConfig: stage " + std::to_string(stage) + " out of range");
    const int level = stage < 4 ? stage : 7 - stage;
    return {in_rows >> level, in_cols >> level};
}

bool PgrConfig::guidable(int stage) const { return stage >= 3 && stage < kPgrStages && stage_channels(stage) == depth(); }

void PgrConfig::validate() const {
    if (stem <= 0 || bottleneck <= 0 || decoder <= 0) throw ConfigError("PgrConfig: channel widths must be positive");
    for (int c : encoder)
        if (c <= 0) throw ConfigError("PgrConfig: encoder widths must be positive");
    if (in_rows % 8 != 0 || in_cols % 8 != 0 || in_rows <= 0 || in_cols <= 0)
        throw ConfigError("PgrConfig: input dims must be positive multiples of 8");
}

WeightSchedule WeightSchedule::standard(int n) {
    WeightSchedule s;
    s.alphas.assign(static_cast<std::size_t>(n), 0.0);
    for (int i = 3; i < n; ++i) s.alphas[i] = std::ldexp(1.0, n - 1 - i);
    return s;
}

WeightSchedule WeightSchedule::reversed(int n) {
    WeightSchedule s;
    s.alphas.assign(static_cast<std::size_t>(n), 0.0);
    for (int i = 3; i < n; ++i) s.alphas[i] = std::ldexp(1.0, i - 3);
    return s;
}

WeightSchedule WeightSchedule::one_hot(int stage, double alpha, int n) {
    if (stage < 0 || stage >= n) throw ConfigError("WeightSchedule: stage out of range");
    WeightSchedule s;
    s.alphas.assign(static_cast<std::size_t>(n), 0.0);
    s.alphas[stage] = alpha;
    return s;
}

WeightSchedule WeightSchedule::by_name(const std::string& name) {
    if (name == "standard") return standard();
    if (name == "reversed") return reversed();
    throw ConfigError("alpha-schedule: expected 'standard' or 'reversed', got '" + name + "'");
}

PgrModel::PgrModel(const PgrConfig& config) : config_(config) {
    config_.validate();
    nn::Rng rng(config_.seed);
    stem_ = nn::Conv(1, config_.stem, 3, 2, rng);
    int in = config_.stem;
    for (int i = 0; i < 4; ++i) {
        encoder_[i] = nn::ConvBlock(in, config_.encoder[i], 2, rng);
        in = config_.encoder[i];
    }
    bottleneck_conv_ = nn::Conv(in, config_.bottleneck, 3, 2, rng);
    bottleneck_bn_ = nn::BatchNorm(config_.bottleneck);
    int x_ch = config_.bottleneck;
    for (int j = 0; j < 4; ++j) {
        decoder_[j] = nn::HbBlock(x_ch, config_.encoder[3 - j], config_.decoder, rng, config_.block, config_.reduction,
                                  config_.ablate_hb);
        x_ch = config_.decoder;
    }
}

PgrOutputs PgrModel::forward(const Array& px, bool training) {
    if (px.rank() != 4 || px.dim(1) != 1 || px.dim(2) != config_.in_rows || px.dim(3) != config_.in_cols)
        throw ShapeError("PgrModel: expected input (N,1," + std::to_string(config_.in_rows) + "," +
                         std::to_string(config_.in_cols) + "), got " + nn::shape_str(px.shape()));
    PgrOutputs out;
    Array h = stem_(px);
    for (int i = 0; i < 4; ++i) {
        if (i > 0) h = nn::max_pool2(h);
        h = encoder_[i](h, training);
        out.stages.push_back(h);
    }
    h = nn::relu(bottleneck_bn_(bottleneck_conv_(h), training));
    for (int j = 0; j < 4; ++j) {
        const Array& skip = out.stages[3 - j];
        if (j > 0) h = nn::upsample2(h, skip.dim(2), skip.dim(3));
        h = decoder_[j](h, skip, training);
        out.stages.push_back(h);
    }
    out.reconstruction = out.stages.back();
    return out;
}

nn::ParamList PgrModel::parameters() {
    nn::ParamList list;
    stem_.collect(list, "stem");
    for (int i = 0; i < 4; ++i) encoder_[i].collect(list, "encoder" + std::to_string(i));
    bottleneck_conv_.collect(list, "bottleneck.conv");
    bottleneck_bn_.collect(list, "bottleneck.bn");
    for (int j = 0; j < 4; ++j) decoder_[j].collect(list, "decoder" + std::to_string(j));
    return list;
}

Array volume_to_channels(const Volume& v) {
    const int H = v.dims[0], W = v.dims[1], D = v.dims[2];
    std::vector<double> out(v.size());
    for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w)
            for (int d = 0; d < D; ++d) out[(static_cast<std::size_t>(d) * H + h) * W + w] = v.at(h, w, d);
    return Array(Shape{D, H, W}, std::move(out));
}

Volume channels_to_volume(const Array& a, std::int64_t n, bool clamp01) {
    if (a.rank() != 4 || n < 0 || n >= a.dim(0)) throw ShapeError("channels_to_volume: bad input " + nn::shape_str(a.shape()));
    const int D = static_cast<int>(a.dim(1)), H = static_cast<int>(a.dim(2)), W = static_cast<int>(a.dim(3));
    Volume v({H, W, D});
    const auto vals = a.values();
    const std::size_t base = static_cast<std::size_t>(n) * D * H * W;
    for (int d = 0; d < D; ++d)
        for (int h = 0; h < H; ++h)
            for (int w = 0; w < W; ++w) {
                double x = vals[base + (static_cast<std::size_t>(d) * H + h) * W + w];
                if (clamp01) x = std::clamp(x, 0.0, 1.0);
                v.at(h, w, d) = static_cast<float>(x);
            }
    return v;
}

Array image_to_array(const Image& img) {
    return Array(Shape{1, 1, img.rows, img.cols}, std::vector<double>(img.data.begin(), img.data.end()));
}

Array scale_label(const Volume& gt, int stage, const PgrConfig& config) {
    if (stage < 0 || stage >= kPgrStages || !config.guidable(stage))
        throw ConfigError("scale_label: stage " + std::to_string(stage) + " is not a guidable stage (needs index >= 3 and " +
                          std::to_string(config.depth()) + " channels)");
    if (gt.dims[0] != config.in_rows || gt.dims[1] != config.in_cols || gt.dims[2] != config.depth())
        throw ShapeError("scale_label: ground truth dims do not match the model's (" + std::to_string(config.in_rows) +
                         "," + std::to_string(config.in_cols) + "," + std::to_string(config.depth()) + ")");
    const auto [rows, cols] = config.stage_dims(stage);
    const Array full = volume_to_channels(gt);
    if (rows == config.in_rows && cols == config.in_cols) return full;
    const int D = config.depth();
    const auto vals = full.values();
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(D) * rows * cols);
    for (int d = 0; d < D; ++d) {
        ImageD slice(config.in_rows, config.in_cols);
        std::copy_n(vals.begin() + static_cast<std::ptrdiff_t>(d) * config.in_rows * config.in_cols, slice.size(),
                    slice.data.begin());
        const ImageD small = resample(slice, rows, cols);
        out.insert(out.end(), small.data.begin(), small.data.end());
    }
    return Array(Shape{D, rows, cols}, std::move(out));
}

Array sse_loss(const Array& f, const Array& y) {
    if (f.shape() != y.shape())
        throw ShapeError("sse_loss: " + nn::shape_str(f.shape()) + " vs " + nn::shape_str(y.shape()));
    const std::int64_t n = f.rank() > 0 ? std::max<std::int64_t>(1, f.dim(0)) : 1;
    const Array d = nn::sub(f, y);
    return nn::scale(nn::sum(nn::mul(d, d)), 1.0 / static_cast<double>(n));
}

namespace {

void check_schedule(const WeightSchedule& schedule, const PgrConfig& config) {
    if (schedule.alphas.size() != static_cast<std::size_t>(kPgrStages))
        throw ConfigError("progressive_loss: schedule must have " + std::to_string(kPgrStages) + " weights");
    for (int i = 0; i < kPgrStages; ++i) {
        if (schedule.alphas[i] < 0.0) throw ConfigError("progressive_loss: negative alpha at stage " + std::to_string(i));
        if (schedule.alphas[i] > 0.0 && !config.guidable(i))
            throw ConfigError("progressive_loss: alpha_" + std::to_string(i) + " > 0 but stage " + std::to_string(i) +
                              " carries " + std::to_string(config.stage_channels(i)) + " channels");
    }
}

Array stack(const std::vector<Array>& items) {
    std::vector<Array> parts;
    for (const auto& a : items) {
        Shape s = a.shape();
        s.insert(s.begin(), 1);
        parts.push_back(nn::reshape(a, s));
    }
    return nn::concat(parts, 0);
}

}  // namespace

std::vector<Array> stage_labels(const std::vector<const Volume*>& gts, const WeightSchedule& schedule,
                                const PgrConfig& config) {
    check_schedule(schedule, config);
    std::vector<Array> labels(kPgrStages);
    for (int i = 0; i < kPgrStages; ++i) {
        if (schedule.alphas[i] == 0.0) continue;
        std::vector<Array> per;
        for (const Volume* v : gts) per.push_back(scale_label(*v, i, config));
        labels[i] = stack(per);
    }
    return labels;
}

Array progressive_loss(const std::vector<Array>& stages, const std::vector<Array>& labels,
                       const WeightSchedule& schedule, const PgrConfig& config, std::vector<double>* stage_losses) {
    check_schedule(schedule, config);
    if (stages.size() != static_cast<std::size_t>(kPgrStages) || labels.size() != stages.size())
        throw ShapeError("progressive_loss: expected " + std::to_string(kPgrStages) + " stage outputs and labels");
    if (stage_losses) stage_losses->assign(kPgrStages, 0.0);
    Array total = Array::scalar(0.0);
    for (int i = 0; i < kPgrStages; ++i) {
        if (schedule.alphas[i] == 0.0) continue;
        const Array li = sse_loss(stages[i], labels[i]);
        if (stage_losses) (*stage_losses)[i] = li.item();
        total = nn::add(total, nn::scale(li, schedule.alphas[i]));
    }
    return total;
}

Array progressive_loss(const std::vector<Array>& stages, const std::vector<const Volume*>& gts,
                       const WeightSchedule& schedule, const PgrConfig& config, std::vector<double>* stage_losses) {
    return progressive_loss(stages, stage_labels(gts, schedule, config), schedule, config, stage_losses);
}

std::vector<int> batch_indices(std::uint64_t seed, std::int64_t step, int batch_size, int n) {
    if (n <= 0 || batch_size <= 0) throw ConfigError("batch_indices: empty dataset or batch");
    const int b = std::min(batch_size, n);
    std::vector<int> out;
    std::int64_t cached_epoch = -1;
    std::vector<int> perm(static_cast<std::size_t>(n));
    for (int k = 0; k < b; ++k) {
        const std::int64_t pos = step * b + k;
        const std::int64_t epoch = pos / n;
        if (epoch != cached_epoch) {
            std::iota(perm.begin(), perm.end(), 0);
            nn::Rng rng(seed ^ (0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(epoch + 1)));
            std::shuffle(perm.begin(), perm.end(), rng);
            cached_epoch = epoch;
        }
        out.push_back(perm[static_cast<std::size_t>(pos % n)]);
    }
    return out;
}

PgrTrainer::PgrTrainer(PgrModel& model, std::vector<PgrExample> data, PgrTrainOptions options)
    : model_(model),
      data_(std::move(data)),
      options_(std::move(options)),
      optimizer_(model.parameters()),
      lr_(nn::LrSchedule::step_halving(options_.lr, options_.halve_every)) {
    if (data_.empty()) throw ConfigError("train-recon: the training set is empty");
    const PgrConfig& cfg = model_.config();
    check_schedule(options_.schedule, cfg);
    for (const auto& ex : data_) {
        if (ex.px.rows != cfg.in_rows || ex.px.cols != cfg.in_cols)
            throw ShapeError("train-recon: sample " + ex.id + " has px " + std::to_string(ex.px.rows) + "x" +
                             std::to_string(ex.px.cols));
        px_.push_back(image_to_array(ex.px));
        labels_.push_back(stage_labels({&ex.unfolded}, options_.schedule, cfg));
    }
}

StepLog PgrTrainer::step() {
    const std::int64_t s = steps_done();
    const auto idx = batch_indices(options_.seed, s, options_.batch_size, static_cast<int>(data_.size()));
    std::vector<Array> xs;
    for (int i : idx) xs.push_back(px_[i]);
    std::vector<Array> labels(kPgrStages);
    for (int st = 0; st < kPgrStages; ++st) {
        if (options_.schedule.alphas[st] == 0.0) continue;
        std::vector<Array> parts;
        for (int i : idx) parts.push_back(labels_[i][st]);
        labels[st] = nn::concat(parts, 0);
    }
    StepLog log;
    log.step = s;
    log.lr = lr_.at(s);
    try {
        optimizer_.zero_grad();
        const PgrOutputs out = model_.forward(nn::concat(xs, 0), true);
        const Array loss = progressive_loss(out.stages, labels, options_.schedule, model_.config(), &log.parts);
        log.loss = loss.item();
        loss.backward();
    } catch (const NumericError& e) {
        std::string ids;
        for (int i : idx) ids += (ids.empty() ? "" : ",") + data_[i].id;
        throw NumericError("train-recon: non-finite value at step " + std::to_string(s) + ", batch [" + ids +
                           "]: " + e.what());
    }
    optimizer_.step(log.lr);
    return log;
}

std::vector<Volume> pgr_predict(PgrModel& model, const std::vector<Image>& px, int batch_size) {
    nn::NoGradGuard guard;
    std::vector<Volume> out;
    for (std::size_t start = 0; start < px.size(); start += static_cast<std::size_t>(batch_size)) {
        std::vector<Array> xs;
        for (std::size_t i = start; i < std::min(px.size(), start + batch_size); ++i) xs.push_back(image_to_array(px[i]));
        const PgrOutputs o = model.forward(nn::concat(xs, 0), false);
        for (std::int64_t n = 0; n < o.reconstruction.dim(0); ++n)
            out.push_back(channels_to_volume(o.reconstruction, n, true));
    }
    return out;
}

}  // namespace px3d
