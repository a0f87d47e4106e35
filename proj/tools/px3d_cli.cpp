// px3d command line: data generation, training, evaluation and rendering.
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "px3d/dataset.hpp"
#include "px3d/error.hpp"
#include "px3d/io.hpp"
#include "px3d/render.hpp"
#include "px3d/training.hpp"

namespace fs = std::filesystem;
using namespace px3d;

namespace {

struct GenArgs {
    int count = 8;
    std::uint64_t seed = 0;
    std::string out;
    std::string dims = "desk";
    int val = 0;
    int test = 0;
    double lesion_probability = 0.5;
    bool raw_phantoms = false;
};

void add_common(CLI::App* app, ExperimentConfig& c) {
    app->add_option("--manifest", c.manifest, "manifest.jsonl or its directory")->required();
    app->add_option("--out", c.out, "output directory")->required();
    app->add_option("--dims", c.dims, "desk or full")->check(CLI::IsMember({"desk", "full"}));
    app->add_option("--seed", c.seed, "seed (PX3D_SEED overrides)");
    app->add_option("--steps", c.steps, "optimization steps");
    app->add_option("--batch-size", c.batch_size, "batch size");
    app->add_option("--lr", c.lr, "initial learning rate (0 = task default)");
    app->add_option("--split", c.split, "manifest split to train on");
    app->add_option("--checkpoint-every", c.checkpoint_every, "save every N steps (0 = final only)");
    app->add_option("--resume", c.resume, "continue from a checkpoint");
}

void add_joint(CLI::App* app, ExperimentConfig& c, std::string& fusion) {
    app->add_option("--recon", c.recon, "'gt' or a PGR checkpoint supplying the 3D input");
    app->add_option("--tau", c.tau, "contrastive temperature");
    app->add_option("--lambda", c.lambda, "contrastive loss weight");
    app->add_option("--cma-mode", c.cma_mode, "literal or inclusive")->check(CLI::IsMember({"literal", "inclusive"}));
    app->add_option("--cma-tap", c.cma_tap, "level feeding the contrastive loss (-1 = task default)");
    app->add_option("--cosine-tmax", c.cosine_t_max, "cosine annealing period (classification)");
    app->add_option("--fusion", fusion, "joint (2D+3D) or 2d (2D-only baseline)")->check(CLI::IsMember({"joint", "2d"}));
}

void print_step(const StepLog& s, std::int64_t total) {
    const std::int64_t every = std::max<std::int64_t>(1, total / 20);
    if ((s.step + 1) % every != 0 && s.step + 1 != total) return;
    std::printf("step %lld/%lld  lr %.3g  loss %.6g\n", static_cast<long long>(s.step + 1),
                static_cast<long long>(total), s.lr, s.loss);
    std::fflush(stdout);
}

int gen_data(const GenArgs& a) {
    GenDataConfig g;
    g.count = a.count;
    g.seed = a.seed;
    g.val_phantoms = a.val;
    g.test_phantoms = a.test;
    g.write_phantoms = a.raw_phantoms;
    g.phantom.lesion_probability = a.lesion_probability;
    g.projection = a.dims == "full" ? ProjectionConfig::full() : ProjectionConfig::desk();
    const SampleManifest m = generate_samples(g, a.out);
    nlohmann::ordered_json j;
    j["command"] = "gen-data";
    j["count"] = a.count;
    j["seed"] = a.seed;
    j["dims"] = a.dims;
    j["val_phantoms"] = a.val;
    j["test_phantoms"] = a.test;
    j["lesion_probability"] = a.lesion_probability;
    j["raw_phantoms"] = a.raw_phantoms;
    j["phantom"] = {{"grid_dims", g.phantom.grid_dims},
                    {"spacing_mm", g.phantom.spacing_mm},
                    {"tooth_count", g.phantom.tooth_count},
                    {"lesion_radius_range_mm", g.phantom.lesion_radius_range_mm},
                    {"noise_sigma", g.phantom.noise_sigma}};
    j["projection"] = {{"unit_mm", g.projection.unit_mm},
                       {"depth_mm", g.projection.depth_mm},
                       {"height_mm", g.projection.height_mm},
                       {"out_px_dims", g.projection.out_px_dims},
                       {"out_vol_dims", g.projection.out_vol_dims}};
    io::atomic_write(fs::path(a.out) / "config.json", j.dump(2) + "\n");
    std::printf("wrote %zu samples to %s\n", m.records.size(), a.out.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"px3d: panoramic-to-3D reconstruction and 2D-3D joint analysis on phantoms"};
    app.require_subcommand(1);

    GenArgs gen;
    auto* gen_cmd = app.add_subcommand("gen-data", "generate phantoms, projections and a sample manifest");
    gen_cmd->add_option("--count", gen.count, "number of phantoms (7 samples each)");
    gen_cmd->add_option("--seed", gen.seed, "first phantom seed (PX3D_SEED overrides)");
    gen_cmd->add_option("--out", gen.out, "output directory")->required();
    gen_cmd->add_option("--dims", gen.dims, "desk or full")->check(CLI::IsMember({"desk", "full"}));
    gen_cmd->add_option("--val", gen.val, "phantoms assigned to the val split");
    gen_cmd->add_option("--test", gen.test, "phantoms assigned to the test split (taken last)");
    gen_cmd->add_option("--lesion-prob", gen.lesion_probability, "lesion probability per phantom");
    gen_cmd->add_flag("--raw-phantoms", gen.raw_phantoms, "also write the phantom volumes");

    ExperimentConfig recon;
    recon.command = "train-recon";
    recon.task = "recon";
    auto* recon_cmd = app.add_subcommand("train-recon", "train the progressive reconstruction network");
    add_common(recon_cmd, recon);
    recon_cmd->add_option("--alpha-schedule", recon.alpha_schedule, "standard or reversed")
        ->check(CLI::IsMember({"standard", "reversed"}));
    recon_cmd->add_option("--halve-every", recon.halve_every, "halve the learning rate every N steps");
    recon_cmd->add_flag("--ablate-hb", recon.ablate_hb, "drop gated MLP and channel attention from HB blocks");

    ExperimentConfig cls;
    cls.command = "train-cls";
    int classes = 5;
    std::string cls_fusion = "joint";
    auto* cls_cmd = app.add_subcommand("train-cls", "train misalignment classification");
    add_common(cls_cmd, cls);
    add_joint(cls_cmd, cls, cls_fusion);
    cls_cmd->add_option("--classes", classes, "2 or 5")->check(CLI::IsMember({2, 5}));

    ExperimentConfig seg;
    seg.command = "train-seg";
    seg.task = "seg";
    std::string seg_fusion = "joint";
    auto* seg_cmd = app.add_subcommand("train-seg", "train lesion segmentation");
    add_common(seg_cmd, seg);
    add_joint(seg_cmd, seg, seg_fusion);

    ExperimentConfig ev;
    ev.command = "eval";
    ev.split = "test";
    ev.recon = "";
    std::string predictions;
    int ev_classes = 5;
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint (or a prediction fixture)");
    eval_cmd->add_option("--checkpoint", ev.checkpoint, "checkpoint to evaluate");
    eval_cmd->add_option("--manifest", ev.manifest, "manifest.jsonl or its directory");
    eval_cmd->add_option("--split", ev.split, "split to evaluate");
    eval_cmd->add_option("--recon", ev.recon, "override the 3D source ('gt' or a PGR checkpoint)");
    eval_cmd->add_option("--out", ev.out, "output directory")->required();
    eval_cmd->add_option("--predictions", predictions, "JSONL of {pred, label}; skips the model");
    eval_cmd->add_option("--classes", ev_classes, "class count for --predictions");
    eval_cmd->add_option("--task", ev.task, "task label for --predictions reports");

    std::string volume_path, render_out, mode = "mip", axis = "depth";
    auto* render_cmd = app.add_subcommand("render", "render a volume as MIP or threshold depth map");
    render_cmd->add_option("--volume", volume_path, "RVOL file")->required();
    render_cmd->add_option("--out", render_out, "output PNG")->required();
    render_cmd->add_option("--mode", mode, "mip or threshold")->check(CLI::IsMember({"mip", "threshold"}));
    render_cmd->add_option("--axis", axis, "height, width or depth")->check(CLI::IsMember({"height", "width", "depth"}));

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (*gen_cmd) {
            ExperimentConfig tmp;
            tmp.seed = gen.seed;
            apply_seed_override(tmp);
            gen.seed = tmp.seed;
            return gen_data(gen);
        }
        if (*recon_cmd) {
            apply_seed_override(recon);
            const RunResult r = run_train_recon(recon, [&](const StepLog& s) { print_step(s, recon.steps); });
            std::printf("checkpoint %s (%s)\n", r.checkpoint.string().c_str(), r.checkpoint_hash.c_str());
            return 0;
        }
        if (*cls_cmd || *seg_cmd) {
            ExperimentConfig& c = *cls_cmd ? cls : seg;
            if (*cls_cmd) c.task = classes == 2 ? "cls2" : "cls5";
            c.use_3d = (*cls_cmd ? cls_fusion : seg_fusion) == "joint";
            apply_seed_override(c);
            const RunResult r = run_train_joint(c, [&](const StepLog& s) { print_step(s, c.steps); });
            std::printf("checkpoint %s (%s)\n", r.checkpoint.string().c_str(), r.checkpoint_hash.c_str());
            return 0;
        }
        if (*eval_cmd) {
            MetricReport report;
            if (!predictions.empty()) {
                if (ev.task.empty()) ev.task = ev_classes == 2 ? "cls2" : "cls5";
                report = eval_predictions(predictions, ev_classes, ev.task);
                fs::create_directories(ev.out);
                write_config(ev, ev.out);
                io::atomic_write(fs::path(ev.out) / "metrics.json", report.to_json() + "\n");
                io::atomic_write(fs::path(ev.out) / "metrics.txt", report.to_text());
            } else {
                report = run_eval(ev);
            }
            std::cout << report.to_text();
            return 0;
        }
        if (*render_cmd) {
            const Volume v = io::read_volume(volume_path);
            const RenderAxis ax = parse_render_axis(axis);
            const Image img = mode == "mip" ? render_mip(v, ax) : render_threshold(v, ax);
            io::write_png16(img, render_out);
            nlohmann::ordered_json j{{"command", "render"}, {"volume", volume_path}, {"mode", mode}, {"axis", axis}};
            io::atomic_write(fs::path(render_out).parent_path() / (fs::path(render_out).stem().string() + ".config.json"),
                             j.dump(2) + "\n");
            return 0;
        }
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 1;
}
