// Acceptance suite: one pass/fail line per criterion, nonzero exit on any
// failure. Heavy trend criteria train real models; expect tens of minutes.

#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "aimlab/analysis.hpp"
#include "aimlab/checkpoint.hpp"
#include "aimlab/config.hpp"
#include "aimlab/meta.hpp"

using namespace aimlab;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void report(int criterion, bool pass, const std::string& detail) {
    std::printf("criterion %2d: %s  %s\n", criterion, pass ? "PASS" : "FAIL", detail.c_str());
    std::fflush(stdout);
    if (!pass) ++g_failures;
}

std::string fmt(const char* format, ...) {
    va_list args;
    va_start(args, format);
    char buf[512];
    std::vsnprintf(buf, sizeof(buf), format, args);
    va_end(args);
    return buf;
}

std::vector<char> slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

// ---- criterion 1: gradient suite ---------------------------------------------------

void criterion_gradients() {
    const auto t0 = std::chrono::steady_clock::now();
    auto rep = run_gradcheck_suite();
    const double secs = seconds_since(t0);
    report(1, rep.passed(1e-5) && secs < 120.0,
           fmt("gradient suite worst rel err %.2e (budget 1e-5), %zu checks, %.1fs (budget 120s)",
               rep.worst, rep.checks.size(), secs));
}

// ---- criterion 2: gating invariants -------------------------------------------------

void criterion_gating() {
    const auto t0 = std::chrono::steady_clock::now();
    AimConfig cfg{.m = 32, .k = 8, .l = 2, .d = 16, .d_hidden = 16, .d_out = 16};
    const std::size_t dim = 24;
    Rng rng(2024);
    AimParams params = AimParams::init(dim, cfg, rng);

    // fixed permutation and permuted parameter view
    std::vector<std::size_t> perm(cfg.m);
    for (std::size_t i = 0; i < cfg.m; ++i) perm[i] = (i * 7 + 3) % cfg.m;
    AimParams permuted = params;
    for (std::size_t i = 0; i < cfg.m; ++i) {
        permuted.h[i] = params.h[perm[i]];
        permuted.wq[i] = params.wq[perm[i]];
        permuted.wm[i] = params.wm[perm[i]];
    }

    bool exact_k = true, normalized = true, inhibited_zero = true, degenerate = true,
         equivariant = true;
    const int trials = 10000;
    for (int i = 0; i < trials; ++i) {
        Tensor z = Tensor::uniform({dim}, 2.0, rng);
        SelectionMask hard_mask;
        {
            TapeScope scope;
            Attention att = attend(z, params);
            for (const auto& pr : att.pair_values()) {
                normalized = normalized && std::abs(pr[0] + pr[1] - 1.0) <= 1e-12;
            }
            auto scores = att.score_values();
            hard_mask = select_hard(scores, cfg.k);
            auto stoch = select_stochastic(scores, cfg.k, cfg.l, rng);
            exact_k = exact_k && hard_mask.active_count() == cfg.k &&
                      stoch.active_count() == cfg.k;
            degenerate = degenerate && select_stochastic(scores, cfg.k, 0, rng) == hard_mask;

            Tensor out = aim_forward(z, hard_mask, att, params);
            backward(sum(out));
            for (std::size_t m = 0; m < cfg.m; ++m) {
                if (hard_mask.active[m]) continue;
                for (double g : params.wm[m].grad()) inhibited_zero = inhibited_zero && g == 0.0;
                for (double g : params.h[m].grad()) inhibited_zero = inhibited_zero && g == 0.0;
            }
            zero_grads(std::span<const Tensor>(params.wm));
            zero_grads(std::span<const Tensor>(params.h));
            zero_grads(std::span<const Tensor>(params.wq));
            params.wk.zero_grad();
        }
        {
            NoGradScope no_grad;
            Rng r1(1), r2(1);
            auto base = aim_apply(z, params, cfg, SelectionMode::Hard, r1);
            auto permd = aim_apply(z, permuted, cfg, SelectionMode::Hard, r2);
            for (std::size_t j = 0; j < base.value.size(); ++j) {
                equivariant =
                    equivariant && std::abs(base.value.at(j) - permd.value.at(j)) <= 1e-12;
            }
        }
    }
    const double secs = seconds_since(t0);
    const bool pass =
        exact_k && normalized && inhibited_zero && degenerate && equivariant && secs < 60.0;
    report(2, pass,
           fmt("gating invariants over %d inputs: exactK=%d pairs1e-12=%d inhibitedZero=%d "
               "l0equiv=%d permEquiv=%d, %.1fs (budget 60s)",
               trials, exact_k, normalized, inhibited_zero, degenerate, equivariant, secs));
}

// ---- criterion 3: sampler uniformity -------------------------------------------------

void criterion_sampler() {
    std::vector<double> scores{0.9, 0.7, 0.5, 0.3, 0.1};
    Rng rng(33);
    std::map<std::vector<bool>, int> counts;
    const int draws = 10000;
    for (int i = 0; i < draws; ++i) counts[select_stochastic(scores, 2, 1, rng).active] += 1;
    bool in_band = counts.size() == 3;
    double chi2 = 0.0;
    for (const auto& [mask, n] : counts) {
        in_band = in_band && std::abs(n / double(draws) - 1.0 / 3.0) <= 0.02;
        chi2 += (n - draws / 3.0) * (n - draws / 3.0) / (draws / 3.0);
    }
    // chi-square, 2 dof: p > 0.01 iff statistic < 9.210
    const bool pass = in_band && chi2 < 9.210;
    report(3, pass,
           fmt("stochastic subsets over %d draws: %zu subsets, band +/-0.02 ok=%d, chi2=%.2f "
               "(crit 9.21)",
               draws, counts.size(), in_band, chi2));
}

// ---- criterion 4: soft decision -------------------------------------------------------

void criterion_soft() {
    AimConfig cfg{.m = 16, .k = 4, .l = 0, .d = 8, .d_hidden = 8, .d_out = 8};
    Rng rng(44);
    AimParams params = AimParams::init(12, cfg, rng);
    Attention att = attend(Tensor::zeros({12}), params);

    bool half_exact = true;
    for (const auto& s : att.score) half_exact = half_exact && s.item() == 0.5;
    auto none = select_soft(att.pair_values(), 0.5);
    auto all = select_soft(att.pair_values(), 0.0);
    const bool pass = half_exact && none.active_count() == 0 && all.active_count() == cfg.m;
    report(4, pass,
           fmt("soft decision on zero input: scores==0.5 exactly %d, active@0.5=%zu (want 0), "
               "active@0=%zu (want %zu)",
               half_exact, none.active_count(), all.active_count(), cfg.m));
}

// ---- criterion 5: few-shot trend ------------------------------------------------------

void criterion_fewshot_trend() {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<double> accs;
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
        RunConfig cfg = RunConfig::defaults(RunConfig::Mode::Fewshot);
        cfg.seed = seed;
        cfg.train.total_steps = 2000;
        cfg.eval_episodes = 600;
        auto ds = dataset_from_config(cfg);
        auto run = run_fewshot_pipeline(cfg, ds);
        accs.push_back(run.eval.mean_accuracy);
        std::printf("  seed %llu: meta-test accuracy %.4f (+/- %.4f)\n",
                    (unsigned long long)seed, run.eval.mean_accuracy, run.eval.ci95);
        std::fflush(stdout);
    }
    double mean = (accs[0] + accs[1] + accs[2]) / 3.0;
    const double secs = seconds_since(t0);
    report(5, mean > 0.40 && secs < 900.0,
           fmt("sib 5-way 1-shot after 2000 steps: mean accuracy %.4f over 3 seeds (budget > "
               "0.40, chance 0.20), %.0fs (budget 900s)",
               mean, secs));
}

// ---- criteria 6 + 7 + 8: continual trend, generalization gap, heatmap ------------------

void criteria_continual() {
    const auto t0 = std::chrono::steady_clock::now();
    const int seeds = 5;
    std::vector<double> aim_test, aim_train, lin_test, lin_train;
    FrameworkModel first_aim_model;
    PackedDataset first_ds;

    for (int seed = 1; seed <= seeds; ++seed) {
        for (const char* variant : {"oml", "oml-linear"}) {
            RunConfig cfg = RunConfig::defaults(RunConfig::Mode::Continual);
            cfg.variant = variant;
            cfg.seed = static_cast<std::uint64_t>(seed);
            auto ds = dataset_from_config(cfg);
            auto run = run_continual_pipeline(cfg, ds);
            const double train_acc = run.test.train_accuracy.back();
            const double test_acc = run.test.test_accuracy.back();
            std::printf("  seed %d %-10s: final train %.4f test %.4f over %zu classes\n", seed,
                        variant, train_acc, test_acc, run.test.classes_seen.size());
            std::fflush(stdout);
            if (std::string(variant) == "oml") {
                aim_train.push_back(train_acc);
                aim_test.push_back(test_acc);
                if (seed == 1) {
                    first_aim_model = run.model;
                    first_ds = ds;
                }
            } else {
                lin_train.push_back(train_acc);
                lin_test.push_back(test_acc);
            }
        }
    }
    auto mean = [](const std::vector<double>& v) {
        double s = 0.0;
        for (double x : v) s += x;
        return s / v.size();
    };
    const double aim_mean = mean(aim_test), lin_mean = mean(lin_test);
    const double secs = seconds_since(t0);
    report(6, aim_mean - lin_mean >= 0.05 && secs < 2700.0,
           fmt("continual trend at 20 classes over %d seeds: aim %.4f vs linear baseline %.4f "
               "(margin %.1f pts, budget >= 5), %.0fs (budget 2700s)",
               seeds, aim_mean, lin_mean, (aim_mean - lin_mean) * 100.0, secs));

    const double aim_gap = std::abs(mean(aim_train) - aim_mean);
    const double lin_gap = std::abs(mean(lin_train) - lin_mean);
    report(7, aim_gap <= lin_gap,
           fmt("generalization gap: aim |train-test| %.4f <= baseline %.4f", aim_gap, lin_gap));

    auto table = heatmap_accumulate(first_aim_model, first_ds, Split::MetaTrain);
    bool rows_exact = true;
    for (std::size_t r = 0; r < table.class_ids.size(); ++r) {
        rows_exact = rows_exact && table.row_sum(r) == static_cast<double>(table.k);
    }
    double best_var = 0.0;
    for (std::size_t m = 0; m < table.mechanisms; ++m) {
        best_var = std::max(best_var, table.mechanism_variance(m));
    }
    report(8, rows_exact && best_var > 0.05,
           fmt("heatmap: row sums exactly K=%zu (%d), max per-mechanism class variance %.4f "
               "(budget > 0.05)",
               table.k, rows_exact, best_var));
}

// ---- criterion 9: l-sweep trend ----------------------------------------------------------

void criterion_l_sweep() {
    const auto t0 = std::chrono::steady_clock::now();
    std::map<std::size_t, std::vector<double>> by_l;
    std::size_t slack_max = 0;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        RunConfig base = RunConfig::defaults(RunConfig::Mode::Fewshot);
        base.seed = seed;
        base.train.total_steps = 400;
        base.train.val_every = 0;
        base.eval_episodes = 200;
        auto ds = dataset_from_config(base);
        const std::size_t l_max = base.aim.m - base.aim.k;
        slack_max = l_max;
        auto points = sweep("l", {0, 2, l_max}, base, ds);
        for (const auto& p : points) {
            if (p.valid) by_l[p.value].push_back(p.accuracy);
            std::printf("  seed %llu l=%zu: %.4f\n", (unsigned long long)seed, p.value,
                        p.accuracy);
            std::fflush(stdout);
        }
    }
    auto mean = [](const std::vector<double>& v) {
        double s = 0.0;
        for (double x : v) s += x;
        return s / v.size();
    };
    const double acc0 = mean(by_l[0]), acc2 = mean(by_l[2]), acc_max = mean(by_l[slack_max]);
    const double secs = seconds_since(t0);
    report(9, acc0 >= acc_max && acc2 >= acc_max,
           fmt("l-sweep over 5 seeds: l=0 %.4f, l=2 %.4f, l=%zu %.4f (small-l must dominate), "
               "%.0fs",
               acc0, acc2, slack_max, acc_max, secs));
}

// ---- criterion 10: determinism and formats -------------------------------------------------

void criterion_determinism() {
    const std::string dir = fs::temp_directory_path().string();

    // identical seeds -> bit-identical curves.csv
    auto run_once = [&](const std::string& tag) {
        RunConfig cfg = RunConfig::defaults(RunConfig::Mode::Continual);
        cfg.seed = 77;
        cfg.train.total_steps = 30;
        cfg.train.curve_every = 5;
        auto ds = dataset_from_config(cfg);
        auto run = run_continual_pipeline(cfg, ds);
        std::vector<CurvePoint> points = run.train.curve;
        for (std::size_t i = 0; i < run.test.classes_seen.size(); ++i) {
            points.push_back({i, "meta_test_train", i + 1, run.test.train_accuracy[i]});
            points.push_back({i, "meta_test_test", i + 1, run.test.test_accuracy[i]});
        }
        const std::string path = dir + "/acc_curves_" + tag + ".csv";
        write_curves_csv(path, points);
        return path;
    };
    const bool curves_identical = slurp(run_once("a")) == slurp(run_once("b"));

    // AIMD round trip is byte-exact
    SyntheticSpec sspec;
    sspec.classes = 6;
    sspec.samples_per_class = 8;
    sspec.image_size = 8;
    sspec.val_classes = 1;
    sspec.test_classes = 1;
    Rng rng(7);
    auto ds = gen_synthetic(sspec, rng);
    const std::string p1 = dir + "/acc_rt1.aimd", p2 = dir + "/acc_rt2.aimd";
    save_packed(ds, p1);
    save_packed(load_packed(p1), p2);
    const bool aimd_exact = slurp(p1) == slurp(p2) && slurp(p1 + ".splits.json") ==
                                                          slurp(p2 + ".splits.json");

    // checkpoint save/load preserves evaluation accuracy exactly
    RunConfig cfg = RunConfig::defaults(RunConfig::Mode::Continual);
    cfg.seed = 9;
    cfg.train.total_steps = 20;
    auto pool = dataset_from_config(cfg);
    Rng build_rng(cfg.seed);
    auto model = FrameworkModel::build(model_config_from(cfg, pool), build_rng);
    TrainConfig tc = cfg.train;
    meta_train_continual(model, pool, tc);
    auto before = meta_test_continual(model, pool, pool.splits.meta_test, tc, 5);

    const std::string ckpt = dir + "/acc_model.aimc";
    save_checkpoint(model.params, ckpt);
    Rng fresh_rng(12345);
    auto fresh = FrameworkModel::build(model_config_from(cfg, pool), fresh_rng);
    load_checkpoint(fresh.params, ckpt);
    auto after = meta_test_continual(fresh, pool, pool.splits.meta_test, tc, 5);
    const bool ckpt_exact = before.test_accuracy == after.test_accuracy &&
                            before.train_accuracy == after.train_accuracy;

    report(10, curves_identical && aimd_exact && ckpt_exact,
           fmt("determinism: curves bit-identical=%d, aimd round-trip byte-exact=%d, checkpoint "
               "preserves accuracy exactly=%d",
               curves_identical, aimd_exact, ckpt_exact));
}

} // namespace

int main(int argc, char** argv) {
    // optional filter: run only the listed criteria numbers
    std::set<int> only;
    for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
    auto want = [&](int c) { return only.empty() || only.count(c) > 0; };

    if (want(1)) criterion_gradients();
    if (want(2)) criterion_gating();
    if (want(3)) criterion_sampler();
    if (want(4)) criterion_soft();
    if (want(5)) criterion_fewshot_trend();
    if (want(6) || want(7) || want(8)) criteria_continual();
    if (want(9)) criterion_l_sweep();
    if (want(10)) criterion_determinism();

    if (g_failures == 0) {
        std::printf("acceptance: all criteria passed\n");
    } else {
        std::printf("acceptance: %d criterion(s) FAILED\n", g_failures);
    }
    return g_failures == 0 ? 0 : 1;
}
