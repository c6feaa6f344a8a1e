#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"

#include "aimlab/analysis.hpp"
#include "aimlab/checkpoint.hpp"
#include "aimlab/config.hpp"
#include "aimlab/meta.hpp"

namespace fs = std::filesystem;
using namespace aimlab;

namespace {

struct CommonOpts {
    std::string config_path;
    std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
    cmd->add_option("--config", opts.config_path, "JSON config file (flat dotted keys)");
    cmd->add_option("--set", opts.sets, "override a config key, e.g. --set train.total_steps=500");
}

RunConfig resolve_config(RunConfig cfg, const CommonOpts& opts) {
    if (!opts.config_path.empty()) cfg.load_overrides(opts.config_path);
    for (const auto& kv : opts.sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) {
            throw ContractError("--set expects key=value, got '" + kv + "'");
        }
        cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    return cfg;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream os(path);
    if (!os) throw ContractError("cannot write " + path);
    os << text;
}

std::vector<std::size_t> parse_csv_sizes(const std::string& csv) {
    std::vector<std::size_t> out;
    std::stringstream ss(csv);
    std::string piece;
    while (std::getline(ss, piece, ',')) {
        if (!piece.empty()) out.push_back(std::stoul(piece));
    }
    return out;
}

FrameworkModel load_model(const RunConfig& cfg, const PackedDataset& ds,
                          const std::string& checkpoint) {
    Rng rng(cfg.seed);
    auto model = FrameworkModel::build(model_config_from(cfg, ds), rng);
    load_checkpoint(model.params, checkpoint);
    return model;
}

std::vector<CurvePoint> continual_curve_points(const ContinualRun& run) {
    std::vector<CurvePoint> points = run.train.curve;
    for (std::size_t i = 0; i < run.test.classes_seen.size(); ++i) {
        points.push_back({i, "meta_test_train", i + 1, run.test.train_accuracy[i]});
        points.push_back({i, "meta_test_test", i + 1, run.test.test_accuracy[i]});
    }
    return points;
}

int run_cli(int argc, char** argv) {
    CLI::App app{"aimlab: sparse mechanism mixtures for few-shot and continual learning"};
    app.require_subcommand(1);

    // gen-synthetic ------------------------------------------------------------
    auto* gen = app.add_subcommand("gen-synthetic", "generate a packed synthetic dataset");
    SyntheticSpec gen_spec;
    gen_spec.val_classes = 1;
    gen_spec.test_classes = 1;
    std::uint64_t gen_noise_seed = 1;
    std::string gen_out;
    gen->add_option("--classes", gen_spec.classes);
    gen->add_option("--samples", gen_spec.samples_per_class);
    gen->add_option("--image-size", gen_spec.image_size);
    gen->add_option("--noise", gen_spec.noise_std);
    gen->add_option("--val-classes", gen_spec.val_classes);
    gen->add_option("--test-classes", gen_spec.test_classes);
    gen->add_option("--proto-seed", gen_spec.prototype_seed);
    gen->add_option("--noise-seed", gen_noise_seed);
    gen->add_option("--out", gen_out, "output .aimd path")->required();
    gen->callback([&] {
        Rng rng(gen_noise_seed);
        auto ds = gen_synthetic(gen_spec, rng);
        save_packed(ds, gen_out);
        std::cout << "wrote " << gen_out << ": " << ds.n << " images, " << ds.class_count()
                  << " classes\n";
    });

    // pretrain -----------------------------------------------------------------
    auto* pre = app.add_subcommand("pretrain", "supervised pretraining of the feature extractor");
    CommonOpts pre_opts;
    std::uint64_t pre_seed = 0;
    std::string pre_out;
    add_common(pre, pre_opts);
    pre->add_option("--seed", pre_seed)->required();
    pre->add_option("--out", pre_out, "output checkpoint")->required();
    pre->callback([&] {
        RunConfig cfg = resolve_config(RunConfig::defaults(RunConfig::Mode::Fewshot), pre_opts);
        cfg.seed = pre_seed;
        cfg.validate();
        auto ds = dataset_from_config(cfg);
        auto mc = model_config_from(cfg, ds);
        Rng rng(cfg.seed ^ 0xa5a5a5a5ull);
        auto res = pretrain_backbone(ds, mc.backbone, cfg.pretrain_epochs, cfg.pretrain_step, rng);
        ParamMap out;
        for (std::size_t i = 0; i < res.backbone.kernels.size(); ++i) {
            out.add("backbone.conv" + std::to_string(i), res.backbone.kernels[i]);
        }
        save_checkpoint(out, pre_out);
        std::cout << "pretrain train accuracy " << res.train_accuracy << ", wrote " << pre_out
                  << "\n";
    });

    // train-fewshot --------------------------------------------------------------
    auto* tfs = app.add_subcommand("train-fewshot", "episodic meta-training (sib variant)");
    CommonOpts tfs_opts;
    std::uint64_t tfs_seed = 0;
    std::string tfs_out = "run_fewshot";
    add_common(tfs, tfs_opts);
    tfs->add_option("--seed", tfs_seed)->required();
    tfs->add_option("--out-dir", tfs_out);
    tfs->callback([&] {
        RunConfig cfg = resolve_config(RunConfig::defaults(RunConfig::Mode::Fewshot), tfs_opts);
        cfg.seed = tfs_seed;
        cfg.out_dir = tfs_out;
        cfg.validate();
        fs::create_directories(tfs_out);
        cfg.echo(tfs_out + "/run.json");
        auto ds = dataset_from_config(cfg);
        auto run = run_fewshot_pipeline(cfg, ds);
        write_curves_csv(tfs_out + "/curves.csv", run.train.curve);
        write_episodes_csv(tfs_out + "/episodes.csv", run.eval.per_episode);
        save_checkpoint(run.model.params, tfs_out + "/model.aimc");
        std::cout << "pretrain accuracy " << run.pretrain_accuracy << "\n";
        if (run.train.best_val_accuracy >= 0.0) {
            std::cout << "best validation accuracy " << run.train.best_val_accuracy << "\n";
        }
        std::cout << "meta-test accuracy " << run.eval.mean_accuracy << " +/- " << run.eval.ci95
                  << " over " << run.eval.per_episode.size() << " episodes\n";
    });

    // train-continual -------------------------------------------------------------
    auto* tc = app.add_subcommand("train-continual", "sequential-trajectory meta-training");
    CommonOpts tc_opts;
    std::uint64_t tc_seed = 0;
    std::string tc_out = "run_continual";
    std::string tc_variant;
    add_common(tc, tc_opts);
    tc->add_option("--seed", tc_seed)->required();
    tc->add_option("--out-dir", tc_out);
    tc->add_option("--variant", tc_variant, "oml, anml or oml-linear");
    tc->callback([&] {
        RunConfig cfg = resolve_config(RunConfig::defaults(RunConfig::Mode::Continual), tc_opts);
        cfg.seed = tc_seed;
        cfg.out_dir = tc_out;
        if (!tc_variant.empty()) cfg.variant = tc_variant;
        cfg.validate();
        fs::create_directories(tc_out);
        cfg.echo(tc_out + "/run.json");
        auto ds = dataset_from_config(cfg);
        auto run = run_continual_pipeline(cfg, ds);
        write_curves_csv(tc_out + "/curves.csv", continual_curve_points(run));
        save_checkpoint(run.model.params, tc_out + "/model.aimc");
        std::cout << "final meta-test train accuracy " << run.test.train_accuracy.back()
                  << ", test accuracy " << run.test.test_accuracy.back() << " over "
                  << run.test.classes_seen.size() << " classes\n";
    });

    // eval-fewshot -----------------------------------------------------------------
    auto* efs = app.add_subcommand("eval-fewshot", "episodic meta-testing from a checkpoint");
    CommonOpts efs_opts;
    std::string efs_ckpt, efs_mode, efs_out;
    std::uint64_t efs_seed = 1;
    std::size_t efs_episodes = 0;
    add_common(efs, efs_opts);
    efs->add_option("--checkpoint", efs_ckpt)->required();
    efs->add_option("--episodes", efs_episodes);
    efs->add_option("--selection-mode", efs_mode, "hard, stochastic or soft");
    efs->add_option("--seed", efs_seed);
    efs->add_option("--out-dir", efs_out);
    efs->callback([&] {
        RunConfig cfg = resolve_config(RunConfig::defaults(RunConfig::Mode::Fewshot), efs_opts);
        if (!efs_mode.empty()) cfg.eval_selection_mode = efs_mode;
        if (efs_episodes > 0) cfg.eval_episodes = efs_episodes;
        cfg.validate();
        auto ds = dataset_from_config(cfg);
        auto model = load_model(cfg, ds, efs_ckpt);
        TrainConfig tc2 = cfg.train;
        auto eval = meta_test_fewshot(model, ds, cfg.episode, tc2, cfg.eval_episodes,
                                      Split::MetaTest,
                                      selection_mode_from_string(cfg.eval_selection_mode),
                                      efs_seed);
        if (!efs_out.empty()) {
            fs::create_directories(efs_out);
            write_episodes_csv(efs_out + "/episodes.csv", eval.per_episode);
        }
        std::cout << "meta-test accuracy " << eval.mean_accuracy << " +/- " << eval.ci95
                  << " over " << eval.per_episode.size() << " episodes ("
                  << cfg.eval_selection_mode << " selection)\n";
    });

    // eval-continual ------------------------------------------------------------------
    auto* ec = app.add_subcommand("eval-continual", "trajectory meta-testing from a checkpoint");
    CommonOpts ec_opts;
    std::string ec_ckpt, ec_mode, ec_out;
    std::uint64_t ec_seed = 1;
    add_common(ec, ec_opts);
    ec->add_option("--checkpoint", ec_ckpt)->required();
    ec->add_option("--selection-mode", ec_mode);
    ec->add_option("--seed", ec_seed);
    ec->add_option("--out-dir", ec_out);
    ec->callback([&] {
        RunConfig cfg = resolve_config(RunConfig::defaults(RunConfig::Mode::Continual), ec_opts);
        if (!ec_mode.empty()) cfg.eval_selection_mode = ec_mode;
        cfg.validate();
        auto ds = dataset_from_config(cfg);
        auto model = load_model(cfg, ds, ec_ckpt);
        auto curves = meta_test_continual(model, ds, ds.splits.meta_test, cfg.train, ec_seed,
                                          nullptr,
                                          selection_mode_from_string(cfg.eval_selection_mode));
        if (!ec_out.empty()) {
            fs::create_directories(ec_out);
            std::vector<CurvePoint> points;
            for (std::size_t i = 0; i < curves.classes_seen.size(); ++i) {
                points.push_back({i, "meta_test_train", i + 1, curves.train_accuracy[i]});
                points.push_back({i, "meta_test_test", i + 1, curves.test_accuracy[i]});
            }
            write_curves_csv(ec_out + "/curves.csv", points);
        }
        std::cout << "final meta-test train accuracy " << curves.train_accuracy.back()
                  << ", test accuracy " << curves.test_accuracy.back() << " over "
                  << curves.classes_seen.size() << " classes\n";
    });

    // heatmap ---------------------------------------------------------------------------
    auto* hm = app.add_subcommand("heatmap", "per-class mechanism activation frequencies");
    CommonOpts hm_opts;
    std::string hm_ckpt, hm_split = "meta_train", hm_out = "heatmap.csv", hm_masks;
    add_common(hm, hm_opts);
    hm->add_option("--checkpoint", hm_ckpt)->required();
    hm->add_option("--split", hm_split, "meta_train, meta_val or meta_test");
    hm->add_option("--out", hm_out);
    hm->add_option("--dump-masks", hm_masks, "also write per-sample mask rows to this file");
    hm->callback([&] {
        RunConfig cfg = resolve_config(RunConfig::defaults(RunConfig::Mode::Continual), hm_opts);
        cfg.validate();
        auto ds = dataset_from_config(cfg);
        auto model = load_model(cfg, ds, hm_ckpt);
        Split split = hm_split == "meta_val"    ? Split::MetaVal
                      : hm_split == "meta_test" ? Split::MetaTest
                                                : Split::MetaTrain;
        auto table = heatmap_accumulate(model, ds, split);
        write_text(hm_out, table.to_csv());
        if (!hm_masks.empty()) {
            NoGradScope no_grad;
            std::ostringstream masks, scores;
            for (auto class_id : ds.splits.classes(split)) {
                for (auto idx : ds.class_indices(class_id)) {
                    Tensor z = model.features(ds.image(idx));
                    auto att = attend(z, model.aim);
                    auto sv = att.score_values();
                    masks << mask_csv_row(idx, class_id, select_hard(sv, model.config.aim.k).active)
                          << "\n";
                    scores << scores_csv_row(idx, class_id, sv) << "\n";
                }
            }
            write_text(hm_masks, masks.str());
            write_text(hm_masks + ".scores.csv", scores.str());
        }
        std::cout << "wrote " << hm_out << " (" << table.class_ids.size() << " classes x "
                  << table.mechanisms << " mechanisms)\n";
    });

    // trace -----------------------------------------------------------------------------
    auto* tr = app.add_subcommand("trace", "attention scores across a checkpoint series");
    CommonOpts tr_opts;
    std::string tr_dir, tr_samples, tr_out = "trace.csv";
    add_common(tr, tr_opts);
    tr->add_option("--ckpt-dir", tr_dir, "directory holding ckpt_*.aimc")->required();
    tr->add_option("--samples", tr_samples, "comma-separated dataset indices to probe")
        ->required();
    tr->add_option("--out", tr_out);
    tr->callback([&] {
        RunConfig cfg = resolve_config(RunConfig::defaults(RunConfig::Mode::Fewshot), tr_opts);
        cfg.validate();
        auto ds = dataset_from_config(cfg);
        std::vector<std::string> ckpts;
        for (const auto& entry : fs::directory_iterator(tr_dir)) {
            const auto name = entry.path().filename().string();
            if (name.rfind("ckpt_", 0) == 0 && entry.path().extension() == ".aimc") {
                ckpts.push_back(entry.path().string());
            }
        }
        std::sort(ckpts.begin(), ckpts.end());
        if (ckpts.empty()) throw ContractError("trace: no ckpt_*.aimc in " + tr_dir);
        auto rows = attention_trace(model_config_from(cfg, ds), ckpts, ds,
                                    parse_csv_sizes(tr_samples));
        write_text(tr_out, trace_csv(rows));
        std::cout << "wrote " << tr_out << " (" << rows.size() << " rows, " << ckpts.size()
                  << " checkpoints)\n";
    });

    // sweep -----------------------------------------------------------------------------
    auto* sw = app.add_subcommand("sweep", "train+eval across K or l values");
    CommonOpts sw_opts;
    std::string sw_param, sw_values, sw_out = "sweep.csv";
    std::uint64_t sw_seed = 0;
    add_common(sw, sw_opts);
    sw->add_option("--param", sw_param, "k or l")->required();
    sw->add_option("--values", sw_values, "comma-separated values")->required();
    sw->add_option("--seed", sw_seed)->required();
    sw->add_option("--out", sw_out);
    sw->callback([&] {
        RunConfig cfg = resolve_config(RunConfig::defaults(RunConfig::Mode::Fewshot), sw_opts);
        cfg.seed = sw_seed;
        auto ds = dataset_from_config(cfg);
        auto points = sweep(sw_param, parse_csv_sizes(sw_values), cfg, ds);
        write_text(sw_out, sweep_csv(sw_param, points));
        for (const auto& p : points) {
            if (p.valid) {
                std::cout << sw_param << "=" << p.value << ": " << p.accuracy << " +/- " << p.ci95
                          << "\n";
            } else {
                std::cout << sw_param << "=" << p.value << ": skipped (" << p.note << ")\n";
            }
        }
        std::cout << "wrote " << sw_out << "\n";
    });

    // gradcheck --------------------------------------------------------------------------
    auto* gc = app.add_subcommand("gradcheck", "finite-difference verification suite");
    std::uint64_t gc_seed = 20240501;
    gc->add_option("--seed", gc_seed);
    gc->callback([&] {
        auto report = run_gradcheck_suite(gc_seed);
        for (const auto& [name, err] : report.checks) {
            std::cout << (err < 1e-5 ? "ok   " : "FAIL ") << name << " max rel err " << err
                      << "\n";
        }
        std::cout << "worst " << report.worst << " (tolerance 1e-5)\n";
        if (!report.passed()) throw NumericError("gradcheck: tolerance exceeded");
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    try {
        return run_cli(argc, argv);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
