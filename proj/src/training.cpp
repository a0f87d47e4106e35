#include "px3d/training.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>

#include "px3d/dataset.hpp"
#include "px3d/error.hpp"
#include "px3d/io.hpp"

namespace px3d {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

double ExperimentConfig::resolved_lr() const {
    if (lr > 0.0) return lr;
    return task == "recon" ? 4e-4 : 1e-4;
}

ordered_json ExperimentConfig::to_json() const {
    ordered_json j;
    j["command"] = command;
    j["task"] = task;
    j["dims"] = dims;
    j["seed"] = seed;
    j["steps"] = steps;
    j["batch_size"] = batch_size;
    j["lr"] = resolved_lr();
    j["halve_every"] = halve_every;
    j["cosine_t_max"] = cosine_t_max;
    j["tau"] = tau;
    j["lambda"] = lambda;
    j["cma_mode"] = cma_mode;
    j["cma_tap"] = cma_tap;
    j["alpha_schedule"] = alpha_schedule;
    j["recon"] = recon;
    j["use_3d"] = use_3d;
    j["ablate_hb"] = ablate_hb;
    j["manifest"] = manifest;
    j["split"] = split;
    j["out"] = out;
    j["resume"] = resume;
    j["checkpoint"] = checkpoint;
    j["checkpoint_every"] = checkpoint_every;
    return j;
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
    ExperimentConfig c;
    try {
        c.command = j.value("command", c.command);
        c.task = j.value("task", c.task);
        c.dims = j.value("dims", c.dims);
        c.seed = j.value("seed", c.seed);
        c.steps = j.value("steps", c.steps);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.lr = j.value("lr", c.lr);
        c.halve_every = j.value("halve_every", c.halve_every);
        c.cosine_t_max = j.value("cosine_t_max", c.cosine_t_max);
        c.tau = j.value("tau", c.tau);
        c.lambda = j.value("lambda", c.lambda);
        c.cma_mode = j.value("cma_mode", c.cma_mode);
        c.cma_tap = j.value("cma_tap", c.cma_tap);
        c.alpha_schedule = j.value("alpha_schedule", c.alpha_schedule);
        c.recon = j.value("recon", c.recon);
        c.use_3d = j.value("use_3d", c.use_3d);
        c.ablate_hb = j.value("ablate_hb", c.ablate_hb);
        c.manifest = j.value("manifest", c.manifest);
        c.split = j.value("split", c.split);
        c.out = j.value("out", c.out);
        c.resume = j.value("resume", c.resume);
        c.checkpoint = j.value("checkpoint", c.checkpoint);
        c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    return c;
}

std::string ExperimentConfig::hash() const {
    ordered_json j = to_json();
    j.erase("out");
    j.erase("resume");
    j.erase("checkpoint_every");
    return io::hex64(io::fnv1a64(j.dump()));
}

void apply_seed_override(ExperimentConfig& config) {
    const char* env = std::getenv("PX3D_SEED");
    if (!env || !*env) return;
    char* end = nullptr;
    const unsigned long long v = std::strtoull(env, &end, 10);
    if (*end != '\0') throw ConfigError(std::string("PX3D_SEED is not an unsigned integer: '") + env + "'");
    config.seed = v;
}

PgrConfig pgr_config_for(const ExperimentConfig& c) {
    PgrConfig p;
    if (c.dims == "desk") p = PgrConfig::desk();
    else if (c.dims == "full") p = PgrConfig::full();
    else throw ConfigError("dims: expected desk or full, got '" + c.dims + "'");
    p.seed = c.seed;
    p.ablate_hb = c.ablate_hb;
    return p;
}

JointConfig joint_config_for(const ExperimentConfig& c) {
    const JointTask task = parse_task(c.task);
    JointConfig j;
    if (c.dims == "desk") j = JointConfig::desk(task);
    else if (c.dims == "full") j = JointConfig::full(task);
    else throw ConfigError("dims: expected desk or full, got '" + c.dims + "'");
    j.use_3d = c.use_3d;
    j.tau = c.tau;
    j.lambda = c.lambda;
    j.cma_tap = c.cma_tap;
    if (c.cma_mode == "literal") j.cma_mode = CmaMode::literal;
    else if (c.cma_mode == "inclusive") j.cma_mode = CmaMode::inclusive;
    else throw ConfigError("cma-mode: expected literal or inclusive, got '" + c.cma_mode + "'");
    j.seed = c.seed;
    j.validate();
    return j;
}

ordered_json pgr_config_json(const PgrConfig& c) {
    ordered_json j;
    j["stem"] = c.stem;
    j["encoder"] = c.encoder;
    j["bottleneck"] = c.bottleneck;
    j["decoder"] = c.decoder;
    j["block"] = c.block;
    j["reduction"] = c.reduction;
    j["ablate_hb"] = c.ablate_hb;
    j["in_rows"] = c.in_rows;
    j["in_cols"] = c.in_cols;
    j["seed"] = c.seed;
    return j;
}

PgrConfig pgr_config_from_json(const json& j) {
    PgrConfig c;
    try {
        c.stem = j.at("stem");
        c.encoder = j.at("encoder").get<std::array<int, 4>>();
        c.bottleneck = j.at("bottleneck");
        c.decoder = j.at("decoder");
        c.block = j.at("block");
        c.reduction = j.at("reduction");
        c.ablate_hb = j.at("ablate_hb");
        c.in_rows = j.at("in_rows");
        c.in_cols = j.at("in_cols");
        c.seed = j.at("seed");
    } catch (const json::exception& e) {
        throw FormatError(std::string("checkpoint: bad PGR model section: ") + e.what());
    }
    return c;
}

ordered_json joint_config_json(const JointConfig& c) {
    ordered_json j;
    j["task"] = task_name(c.task);
    j["channels"] = c.channels;
    j["in_rows"] = c.in_rows;
    j["in_cols"] = c.in_cols;
    j["depth"] = c.depth;
    j["use_3d"] = c.use_3d;
    j["cma_tap"] = c.cma_tap;
    j["tau"] = c.tau;
    j["lambda"] = c.lambda;
    j["cma_mode"] = c.cma_mode == CmaMode::literal ? "literal" : "inclusive";
    j["seed"] = c.seed;
    return j;
}

JointConfig joint_config_from_json(const json& j) {
    JointConfig c;
    try {
        c.task = parse_task(j.at("task").get<std::string>());
        c.channels = j.at("channels").get<std::array<int, 4>>();
        c.in_rows = j.at("in_rows");
        c.in_cols = j.at("in_cols");
        c.depth = j.at("depth");
        c.use_3d = j.at("use_3d");
        c.cma_tap = j.at("cma_tap");
        c.tau = j.at("tau");
        c.lambda = j.at("lambda");
        c.cma_mode = j.at("cma_mode").get<std::string>() == "inclusive" ? CmaMode::inclusive : CmaMode::literal;
        c.seed = j.at("seed");
    } catch (const json::exception& e) {
        throw FormatError(std::string("checkpoint: bad joint model section: ") + e.what());
    }
    return c;
}

std::string log_to_jsonl(const std::vector<StepLog>& log) {
    std::string out;
    for (const auto& s : log) {
        ordered_json j;
        j["step"] = s.step;
        j["lr"] = s.lr;
        j["loss"] = s.loss;
        j["parts"] = s.parts;
        out += j.dump() + "\n";
    }
    return out;
}

void write_config(const ExperimentConfig& c, const fs::path& dir) {
    ordered_json j = c.to_json();
    j["config_hash"] = c.hash();
    io::atomic_write(dir / "config.json", j.dump(2) + "\n");
}

namespace {

fs::path prepare_out(const ExperimentConfig& c) {
    if (c.out.empty()) throw ConfigError("--out is required");
    std::error_code ec;
    fs::create_directories(c.out, ec);
    if (ec || !fs::is_directory(c.out)) throw IoError("cannot create output directory " + c.out);
    write_config(c, c.out);
    return c.out;
}

std::string file_hash(const fs::path& p) { return io::hex64(io::fnv1a64(io::read_file(p))); }

Checkpoint make_checkpoint(const std::string& kind, const ordered_json& model, const ExperimentConfig& cfg,
                           const nn::ParamList& params, const nn::Adam& opt) {
    Checkpoint c = capture(params, &opt);
    c.kind = kind;
    c.model = model;
    c.extra = {{"task", cfg.task}, {"recon", cfg.recon}, {"alpha_schedule", cfg.alpha_schedule}, {"dims", cfg.dims}};
    c.rng_state = {{"batch_seed", cfg.seed}, {"next_step", c.step}};
    c.config_hash = cfg.hash();
    return c;
}

// Shared loop: resume, periodic checkpoints, log, final checkpoint.
template <typename Trainer>
RunResult train_loop(const ExperimentConfig& cfg, const fs::path& out, Trainer& trainer, const std::string& kind,
                     const ordered_json& model_json, nn::ParamList params, const StepCallback& on_step) {
    RunResult result;
    const fs::path init = out / "init.ckpt";
    if (!cfg.resume.empty()) {
        const Checkpoint ck = load_checkpoint(cfg.resume);
        if (ck.kind != kind) throw ConfigError("--resume: checkpoint holds a " + ck.kind + " model");
        restore(ck, params, &trainer.optimizer());
        result.init_hash = file_hash(cfg.resume);
        // Keep the earlier part of the curve when resuming inside the same directory.
        const fs::path prior = fs::path(cfg.resume).parent_path() / "log.jsonl";
        if (fs::exists(prior)) {
            const std::string text = io::read_file(prior);
            std::size_t start = 0;
            while (start < text.size()) {
                std::size_t end = text.find('\n', start);
                if (end == std::string::npos) end = text.size();
                const json j = json::parse(text.substr(start, end - start));
                start = end + 1;
                if (j.at("step").get<std::int64_t>() >= ck.step) break;
                result.log.push_back({j.at("step"), j.at("lr"), j.at("loss"), j.at("parts").get<std::vector<double>>()});
            }
        }
    } else {
        save_checkpoint(make_checkpoint(kind, model_json, cfg, params, trainer.optimizer()), init);
        result.init_hash = file_hash(init);
    }
    while (trainer.steps_done() < cfg.steps) {
        StepLog s = trainer.step();
        if (on_step) on_step(s);
        result.log.push_back(std::move(s));
        if (cfg.checkpoint_every > 0 && trainer.steps_done() % cfg.checkpoint_every == 0 &&
            trainer.steps_done() < cfg.steps) {
            char name[48];
            std::snprintf(name, sizeof name, "step_%08lld.ckpt", static_cast<long long>(trainer.steps_done()));
            save_checkpoint(make_checkpoint(kind, model_json, cfg, params, trainer.optimizer()), out / name);
            io::atomic_write(out / "log.jsonl", log_to_jsonl(result.log));
        }
    }
    result.checkpoint = out / "model.ckpt";
    save_checkpoint(make_checkpoint(kind, model_json, cfg, params, trainer.optimizer()), result.checkpoint);
    result.checkpoint_hash = file_hash(result.checkpoint);
    io::atomic_write(out / "log.jsonl", log_to_jsonl(result.log));
    ordered_json summary;
    summary["steps"] = trainer.steps_done();
    summary["final_loss"] = result.log.empty() ? 0.0 : result.log.back().loss;
    summary["init_hash"] = result.init_hash;
    summary["checkpoint_hash"] = result.checkpoint_hash;
    io::atomic_write(out / "summary.json", summary.dump(2) + "\n");
    return result;
}

std::vector<LoadedSample> load_split(const ExperimentConfig& c) {
    if (c.manifest.empty()) throw ConfigError("--manifest is required");
    const SampleManifest m = load_manifest(c.manifest);
    const auto records = m.split(c.split);
    if (records.empty()) throw ConfigError("manifest has no samples in split '" + c.split + "'");
    return load_samples(m, records);
}

}  // namespace

PgrModel load_pgr(const Checkpoint& ckpt) {
    if (ckpt.kind != "pgr") throw ConfigError("expected a PGR checkpoint, found '" + ckpt.kind + "'");
    PgrModel model(pgr_config_from_json(ckpt.model));
    nn::ParamList params = model.parameters();
    restore(ckpt, params, nullptr);
    return model;
}

JointModel load_joint(const Checkpoint& ckpt) {
    if (ckpt.kind != "joint") throw ConfigError("expected a joint checkpoint, found '" + ckpt.kind + "'");
    JointModel model(joint_config_from_json(ckpt.model));
    nn::ParamList params = model.parameters();
    restore(ckpt, params, nullptr);
    return model;
}

RunResult run_train_recon(const ExperimentConfig& config, const StepCallback& on_step) {
    ExperimentConfig cfg = config;
    cfg.task = "recon";
    const PgrConfig pc = pgr_config_for(cfg);
    const WeightSchedule schedule = WeightSchedule::by_name(cfg.alpha_schedule);
    const auto samples = load_split(cfg);
    const fs::path out = prepare_out(cfg);
    std::vector<PgrExample> data;
    for (const auto& s : samples) data.push_back({s.px, s.unfolded, s.record.id});
    PgrModel model(pc);
    PgrTrainOptions opt;
    opt.steps = cfg.steps;
    opt.batch_size = cfg.batch_size;
    opt.lr = cfg.resolved_lr();
    opt.halve_every = cfg.halve_every;
    opt.schedule = schedule;
    opt.seed = cfg.seed;
    PgrTrainer trainer(model, std::move(data), opt);
    return train_loop(cfg, out, trainer, "pgr", pgr_config_json(pc), model.parameters(), on_step);
}

std::vector<Volume> joint_volumes(const std::string& recon, const std::vector<Image>& px,
                                  const std::vector<Volume>& gt) {
    if (recon == "gt") return gt;
    if (!fs::exists(recon)) throw ConfigError("--recon: checkpoint not found: " + recon);
    PgrModel pgr = load_pgr(load_checkpoint(recon));
    return pgr_predict(pgr, px);
}

RunResult run_train_joint(const ExperimentConfig& config, const StepCallback& on_step) {
    ExperimentConfig cfg = config;
    const JointConfig jc = joint_config_for(cfg);
    auto samples = load_split(cfg);
    if (jc.task == JointTask::seg) {
        std::erase_if(samples, [](const LoadedSample& s) { return !s.mask.has_value(); });
        if (samples.empty()) throw ConfigError("train-seg: no samples with lesion masks in the split");
    }
    const fs::path out = prepare_out(cfg);
    std::vector<Image> px;
    std::vector<Volume> gt;
    for (const auto& s : samples) {
        px.push_back(s.px);
        gt.push_back(s.unfolded);
    }
    const auto vols = jc.use_3d ? joint_volumes(cfg.recon, px, gt) : gt;
    std::vector<JointExample> data;
    for (std::size_t i = 0; i < samples.size(); ++i)
        data.push_back({samples[i].px, vols[i], samples[i].record.class_id, samples[i].record.binary_label,
                        samples[i].mask, samples[i].record.id});
    JointModel model(jc);
    JointTrainOptions opt;
    opt.steps = cfg.steps;
    opt.batch_size = cfg.batch_size;
    opt.lr = cfg.resolved_lr();
    opt.cosine_t_max = cfg.cosine_t_max;
    opt.seed = cfg.seed;
    JointTrainer trainer(model, std::move(data), opt);
    return train_loop(cfg, out, trainer, "joint", joint_config_json(jc), model.parameters(), on_step);
}

MetricReport eval_predictions(const fs::path& predictions, int classes, const std::string& task) {
    const std::string text = io::read_file(predictions);
    std::vector<int> preds, labels;
    std::size_t start = 0;
    while (start < text.size()) {
        std::size_t end = text.find('\n', start);
        if (end == std::string::npos) end = text.size();
        const std::string line = text.substr(start, end - start);
        start = end + 1;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const json j = json::parse(line);
            preds.push_back(j.at("pred").get<int>());
            labels.push_back(j.at("label").get<int>());
        } catch (const json::exception& e) {
            throw FormatError("predictions: " + std::string(e.what()));
        }
    }
    return to_metric_report(classification_report(preds, labels, classes), task);
}

MetricReport run_eval(const ExperimentConfig& config) {
    if (config.checkpoint.empty()) throw ConfigError("--checkpoint is required");
    const Checkpoint ck = load_checkpoint(config.checkpoint);
    const auto samples = load_split(config);
    MetricReport report;
    std::string preds_jsonl;
    if (ck.kind == "pgr") {
        PgrModel model = load_pgr(ck);
        std::vector<Image> px;
        for (const auto& s : samples) px.push_back(s.px);
        const auto recon = pgr_predict(model, px);
        double p = 0.0, ss = 0.0, d = 0.0;
        int finite = 0;
        for (std::size_t i = 0; i < samples.size(); ++i) {
            const double v = psnr(recon[i], samples[i].unfolded);
            if (std::isfinite(v)) {
                p += v;
                ++finite;
            }
            ss += ssim(recon[i], samples[i].unfolded);
            d += dsc_volumes(recon[i], samples[i].unfolded);
        }
        report.task = "recon";
        report.sample_count = static_cast<int>(samples.size());
        report.add("psnr", finite > 0 ? p / finite : std::numeric_limits<double>::infinity());
        report.add("ssim", ss / samples.size());
        report.add("dsc", d / samples.size());
    } else {
        JointModel model = load_joint(ck);
        const JointConfig& jc = model.config();
        std::vector<Image> px;
        std::vector<Volume> gt;
        std::vector<const LoadedSample*> used;
        for (const auto& s : samples) {
            if (jc.task == JointTask::seg && !s.mask) continue;
            px.push_back(s.px);
            gt.push_back(s.unfolded);
            used.push_back(&s);
        }
        if (used.empty()) throw ConfigError("eval: no usable samples in split '" + config.split + "'");
        const std::string recon = config.recon.empty() ? ck.extra.value("recon", std::string("gt")) : config.recon;
        const auto vols = jc.use_3d ? joint_volumes(recon, px, gt) : gt;
        std::vector<JointExample> data;
        for (std::size_t i = 0; i < used.size(); ++i)
            data.push_back({px[i], vols[i], used[i]->record.class_id, used[i]->record.binary_label, used[i]->mask,
                            used[i]->record.id});
        const auto logits = joint_predict(model, data);
        if (jc.task == JointTask::seg) {
            const MaskMetrics acc = mean_mask_metrics(logits, data);
            report.task = "seg";
            report.sample_count = static_cast<int>(data.size());
            report.add("dsc", acc.dsc);
            report.add("iou", acc.iou);
            report.add("precision", acc.precision);
            report.add("recall", acc.recall);
        } else {
            const std::vector<int> preds = predicted_classes(logits);
            std::vector<int> labels;
            for (std::size_t i = 0; i < data.size(); ++i) {
                const int l = jc.task == JointTask::cls2 ? data[i].binary_label : data[i].class_id;
                labels.push_back(l);
                preds_jsonl += ordered_json{{"id", data[i].id}, {"pred", preds[i]}, {"label", l}}.dump() + "\n";
            }
            std::vector<std::string> names;
            if (jc.task == JointTask::cls5)
                for (int k = 0; k < kMisalignmentClasses; ++k)
                    names.emplace_back(misalignment_name(static_cast<Misalignment>(k)));
            else
                names = {"regular", "misaligned"};
            report = to_metric_report(classification_report(preds, labels, jc.classes()), task_name(jc.task), names);
        }
    }
    if (!config.out.empty()) {
        const fs::path out = prepare_out(config);
        io::atomic_write(out / "metrics.json", report.to_json() + "\n");
        io::atomic_write(out / "metrics.txt", report.to_text());
        if (!preds_jsonl.empty()) io::atomic_write(out / "predictions.jsonl", preds_jsonl);
    }
    return report;
}

}  // namespace px3d
