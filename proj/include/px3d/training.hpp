#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "px3d/checkpoint.hpp"
#include "px3d/fusion.hpp"
#include "px3d/metrics.hpp"
#include "px3d/pgr.hpp"

namespace px3d {

/// Everything a run needs; written back out as config.json next to its outputs.
struct ExperimentConfig {
    std::string command;        ///< train-recon, train-cls, train-seg, eval
    std::string task;           ///< recon, cls2, cls5, seg
    std::string dims = "desk";  ///< desk or full
    std::uint64_t seed = 0;
    std::int64_t steps = 0;
    int batch_size = 8;
    double lr = 0.0;  ///< 0 picks the task default (4e-4 recon, 1e-4 joint)
    std::int64_t halve_every = 5000;
    std::int64_t cosine_t_max = 200;
    double tau = 0.1;
    double lambda = 0.1;
    std::string cma_mode = "literal";
    int cma_tap = -1;
    std::string alpha_schedule = "standard";
    std::string recon = "gt";  ///< gt or a PGR checkpoint path
    bool use_3d = true;
    bool ablate_hb = false;
    std::string manifest;
    std::string split = "train";
    std::string out;
    std::string resume;
    std::string checkpoint;  ///< eval input
    std::int64_t checkpoint_every = 0;

    double resolved_lr() const;
    nlohmann::ordered_json to_json() const;
    static ExperimentConfig from_json(const nlohmann::json& j);
    /// Hash of the reproducibility-relevant fields (excludes out, resume and checkpoint_every).
    std::string hash() const;
};

/// Reads PX3D_SEED when set; throws ConfigError on a malformed value.
void apply_seed_override(ExperimentConfig& config);

PgrConfig pgr_config_for(const ExperimentConfig& c);
JointConfig joint_config_for(const ExperimentConfig& c);

nlohmann::ordered_json pgr_config_json(const PgrConfig& c);
PgrConfig pgr_config_from_json(const nlohmann::json& j);
nlohmann::ordered_json joint_config_json(const JointConfig& c);
JointConfig joint_config_from_json(const nlohmann::json& j);

struct RunResult {
    std::vector<StepLog> log;
    std::string checkpoint_hash;  ///< FNV-1a of the final checkpoint file
    std::string init_hash;        ///< of the checkpoint written before any step
    std::filesystem::path checkpoint;
};

using StepCallback = std::function<void(const StepLog&)>;

RunResult run_train_recon(const ExperimentConfig& config, const StepCallback& on_step = {});
RunResult run_train_joint(const ExperimentConfig& config, const StepCallback& on_step = {});

/// Evaluates a checkpoint on a manifest split; writes metrics.json / metrics.txt to config.out.
MetricReport run_eval(const ExperimentConfig& config);
/// Classification report from a JSONL fixture of {"pred": p, "label": l} lines.
MetricReport eval_predictions(const std::filesystem::path& predictions, int classes, const std::string& task);

/// Loads PGR/joint models back from checkpoints.
PgrModel load_pgr(const Checkpoint& ckpt);
JointModel load_joint(const Checkpoint& ckpt);

/// Volumes for joint training/eval: ground truth or reconstructions from a frozen PGR checkpoint.
std::vector<Volume> joint_volumes(const std::string& recon, const std::vector<Image>& px,
                                  const std::vector<Volume>& gt);

std::string log_to_jsonl(const std::vector<StepLog>& log);

void write_config(const ExperimentConfig& c, const std::filesystem::path& dir);

}  // namespace px3d
