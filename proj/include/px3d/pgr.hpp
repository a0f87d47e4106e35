#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "px3d/grid.hpp"
#include "px3d/nn/layers.hpp"
#include "px3d/nn/optim.hpp"

namespace px3d {

inline constexpr int kPgrStages = 8;

struct PgrConfig {
    int stem = 16;
    std::array<int, 4> encoder{32, 64, 128, 128};
    int bottleneck = 256;
    int decoder = 128;  ///< HB output channels == reconstructed depth
    int block = 8;
    int reduction = 4;
    bool ablate_hb = false;
    int in_rows = 128;
    int in_cols = 256;
    std::uint64_t seed = 0;

    static PgrConfig full();
    /// Every channel width and both input dims divided by 4.
    static PgrConfig desk();

    int depth() const { return decoder; }
    int stage_channels(int stage) const;
    /// (rows, cols) of stage i's feature map.
    std::array<int, 2> stage_dims(int stage) const;
    /// Stage i can be supervised: decoder-side or deepest encoder stage, carrying `depth()` channels.
    bool guidable(int stage) const;
    void validate() const;
};

/// Per-stage SSE weights alpha_0..alpha_{n-1}.
struct WeightSchedule {
    std::vector<double> alphas;

    /// alpha_i = 2^(n-1-i) for i >= 3, zero below.
    static WeightSchedule standard(int n = kPgrStages);
    /// Mirror image: weight grows toward the output (1, 2, 4, ... from stage 3).
    static WeightSchedule reversed(int n = kPgrStages);
    static WeightSchedule one_hot(int stage, double alpha, int n = kPgrStages);
    static WeightSchedule by_name(const std::string& name);
};

struct PgrOutputs {
    nn::Array reconstruction;          ///< (N, D, H, W), linear
    std::vector<nn::Array> stages;     ///< f_0 .. f_7; stages[7] is the reconstruction
};

class PgrModel {
public:
    explicit PgrModel(const PgrConfig& config);

    /// px is (N, 1, in_rows, in_cols).
    PgrOutputs forward(const nn::Array& px, bool training);
    nn::ParamList parameters();
    const PgrConfig& config() const { return config_; }

private:
    PgrConfig config_;
    nn::Conv stem_;
    std::array<nn::ConvBlock, 4> encoder_;
    nn::Conv bottleneck_conv_;
    nn::BatchNorm bottleneck_bn_;
    std::array<nn::HbBlock, 4> decoder_;
};

/// (H, W, D) volume -> (D, H, W) values.
nn::Array volume_to_channels(const Volume& v);
/// Sample n of an (N, D, H, W) array -> (H, W, D) volume; optionally clamped to [0,1].
Volume channels_to_volume(const nn::Array& a, std::int64_t n, bool clamp01);
nn::Array image_to_array(const Image& img);

/// Ground truth (H, W, D) reordered to (D, h, w) at stage `stage`'s spatial size.
/// Throws ConfigError for stages that cannot be guided.
nn::Array scale_label(const Volume& gt, int stage, const PgrConfig& config);

/// sum(|f - y|^2) / N with N the leading (batch) dimension.
nn::Array sse_loss(const nn::Array& f, const nn::Array& y);

/// Batched scaled labels for every stage with alpha > 0; other entries stay undefined.
std::vector<nn::Array> stage_labels(const std::vector<const Volume*>& gts, const WeightSchedule& schedule,
                                    const PgrConfig& config);

/// sum_i alpha_i * sse(f_i, Y_i), skipping zero-weight stages. `stage_losses`
/// receives the unweighted per-stage SSE (0 for skipped stages).
nn::Array progressive_loss(const std::vector<nn::Array>& stages, const std::vector<nn::Array>& labels,
                           const WeightSchedule& schedule, const PgrConfig& config,
                           std::vector<double>* stage_losses = nullptr);
nn::Array progressive_loss(const std::vector<nn::Array>& stages, const std::vector<const Volume*>& gts,
                           const WeightSchedule& schedule, const PgrConfig& config,
                           std::vector<double>* stage_losses = nullptr);

struct PgrExample {
    Image px;
    Volume unfolded;
    std::string id;
};

struct PgrTrainOptions {
    std::int64_t steps = 0;
    int batch_size = 8;
    double lr = 4e-4;
    std::int64_t halve_every = 5000;
    WeightSchedule schedule = WeightSchedule::standard();
    std::uint64_t seed = 0;
};

struct StepLog {
    std::int64_t step = 0;
    double lr = 0.0;
    double loss = 0.0;
    std::vector<double> parts;  ///< per-stage SSE (pgr) or {task, cma} (joint)
};

/// Indices of the samples in batch `step`: epochs are seed-derived permutations,
/// so the order is a pure function of (seed, step, n).
std::vector<int> batch_indices(std::uint64_t seed, std::int64_t step, int batch_size, int n);

/// Owns the optimizer; steps are resumable from (model, optimizer state, step).
class PgrTrainer {
public:
    PgrTrainer(PgrModel& model, std::vector<PgrExample> data, PgrTrainOptions options);

    /// Runs one optimization step; throws NumericError naming the batch on a non-finite loss.
    StepLog step();
    std::int64_t steps_done() const { return optimizer_.state().step; }
    nn::Adam& optimizer() { return optimizer_; }
    const PgrTrainOptions& options() const { return options_; }

private:
    PgrModel& model_;
    std::vector<PgrExample> data_;
    PgrTrainOptions options_;
    nn::Adam optimizer_;
    nn::LrSchedule lr_;
    std::vector<nn::Array> px_;
    std::vector<std::vector<nn::Array>> labels_;  ///< per sample, per stage
};

/// Reconstructs every example (eval mode) as clamped volumes.
std::vector<Volume> pgr_predict(PgrModel& model, const std::vector<Image>& px, int batch_size = 4);

}  // namespace px3d
