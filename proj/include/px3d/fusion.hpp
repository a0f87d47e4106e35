#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "px3d/grid.hpp"
#include "px3d/metrics.hpp"
#include "px3d/nn/layers.hpp"
#include "px3d/nn/optim.hpp"
#include "px3d/pgr.hpp"

namespace px3d {

struct FusedPair {
    nn::Array f2d;  ///< (N, C, H, W): mean over the D+1 slices
    nn::Array f3d;  ///< (N, C, D+1, H, W): 2D map appended as the last depth slice
};

/// Bidirectional feature exchange at one pyramid level.
FusedPair depth_fuse(const nn::Array& f2d, const nn::Array& f3d);

enum class CmaMode { literal, inclusive };

/// Contrastive alignment over a batch of unit embeddings z, z_star (N, E):
///   sum_i -log( exp(s_ii / tau) / sum_{k in K_i} exp(s_ik / tau) ),  s_ik = z_i . z*_k
/// K_i excludes i in literal mode and includes it in inclusive mode.
/// Throws ConfigError when N < 2.
nn::Array cma_loss(const nn::Array& z, const nn::Array& z_star, double tau, CmaMode mode = CmaMode::literal);

enum class JointTask { cls2, cls5, seg };

std::string task_name(JointTask t);
JointTask parse_task(const std::string& s);

struct JointConfig {
    JointTask task = JointTask::cls5;
    std::array<int, 4> channels{32, 64, 128, 128};
    int in_rows = 128;
    int in_cols = 256;
    int depth = 128;
    bool use_3d = true;  ///< false: 2D-only baseline, no 3D branch and no CMA
    /// Level feeding the contrastive loss: encoder level for classification,
    /// decoder block for segmentation. -1 picks the default (3 / 1).
    int cma_tap = -1;
    double tau = 0.1;
    double lambda = 0.1;
    CmaMode cma_mode = CmaMode::literal;
    std::uint64_t seed = 0;

    static JointConfig full(JointTask task);
    static JointConfig desk(JointTask task);

    int classes() const;
    int resolved_tap() const;
    void validate() const;
};

struct JointOutputs {
    nn::Array logits;  ///< (N, K) or (N, 1, H, W)
    nn::Array z, z_star;  ///< (N, C_tap) unit rows; undefined in 2D-only mode
    std::vector<std::array<nn::Shape, 2>> fused_shapes;  ///< per level: mixed 2D, mixed 3D
};

class JointModel {
public:
    explicit JointModel(const JointConfig& config);

    /// px (N,1,H,W); vol (N,1,D,H,W), ignored in 2D-only mode.
    JointOutputs forward(const nn::Array& px, const nn::Array& vol, bool training);
    nn::ParamList parameters();
    const JointConfig& config() const { return config_; }

private:
    JointConfig config_;
    std::array<nn::ConvBlock, 4> enc2d_, enc3d_;
    nn::Linear head_;
    std::array<nn::ConvBlock, 3> dec_;
    nn::Conv seg_out_;
};

/// (H, W, D) volume -> (1, 1, D, H, W).
nn::Array volume_to_input(const Volume& v);

struct JointExample {
    Image px;
    Volume volume;  ///< ground truth or reconstruction, (H, W, D)
    int class_id = 0;
    int binary_label = 0;
    std::optional<Image> mask;
    std::string id;
};

struct JointTrainOptions {
    std::int64_t steps = 0;
    int batch_size = 8;
    double lr = 1e-4;
    std::int64_t cosine_t_max = 200;
    std::uint64_t seed = 0;
};

/// Classification: constant base with cosine annealing; segmentation: halve once at 60% of steps.
nn::LrSchedule joint_lr_schedule(JointTask task, const JointTrainOptions& options);

class JointTrainer {
public:
    JointTrainer(JointModel& model, std::vector<JointExample> data, JointTrainOptions options);

    /// parts = {task loss, cma loss}.
    StepLog step();
    std::int64_t steps_done() const { return optimizer_.state().step; }
    nn::Adam& optimizer() { return optimizer_; }

private:
    JointModel& model_;
    std::vector<JointExample> data_;
    JointTrainOptions options_;
    nn::Adam optimizer_;
    nn::LrSchedule lr_;
    std::vector<nn::Array> px_, vol_, mask_;
};

/// Task loss plus lambda * CMA for one batch.
struct JointLoss {
    nn::Array total;
    double task = 0.0;
    double cma = 0.0;
};
JointLoss joint_loss(const JointOutputs& out, const JointConfig& config, const std::vector<int>& labels,
                     const nn::Array& masks);

/// Eval-mode logits, one row (or map) per example.
std::vector<std::vector<double>> joint_predict(JointModel& model, const std::vector<JointExample>& data,
                                               int batch_size = 8);

/// Argmax of each logit row.
std::vector<int> predicted_classes(const std::vector<std::vector<double>>& logits);

/// Mask metrics of the (logit > 0) maps against each example's mask, averaged over examples.
MaskMetrics mean_mask_metrics(const std::vector<std::vector<double>>& logits, const std::vector<JointExample>& data);

}  // namespace px3d
