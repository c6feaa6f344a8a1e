#include "aimlab/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <sstream>

#include "aimlab/checkpoint.hpp"

namespace aimlab {

double HeatmapTable::value(std::size_t r, std::size_t m) const {
    return static_cast<double>(counts[r][m]) / static_cast<double>(samples_per_class[r]);
}

double HeatmapTable::row_sum(std::size_t r) const {
    std::size_t total = 0;
    for (auto c : counts[r]) total += c;
    return static_cast<double>(total) / static_cast<double>(samples_per_class[r]);
}

double HeatmapTable::mechanism_variance(std::size_t m) const {
    const std::size_t rows = counts.size();
    if (rows < 2) return 0.0;
    double mean = 0.0;
    for (std::size_t r = 0; r < rows; ++r) mean += value(r, m);
    mean /= static_cast<double>(rows);
    double var = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        const double d = value(r, m) - mean;
        var += d * d;
    }
    return var / static_cast<double>(rows - 1);
}

std::string HeatmapTable::to_csv() const {
    std::ostringstream os;
    os.precision(17);
    os << "class_id";
    for (std::size_t m = 0; m < mechanisms; ++m) os << ",m" << m;
    os << "\n";
    for (std::size_t r = 0; r < class_ids.size(); ++r) {
        os << class_ids[r];
        for (std::size_t m = 0; m < mechanisms; ++m) os << "," << value(r, m);
        os << "\n";
    }
    return os.str();
}

HeatmapTable heatmap_accumulate(const FrameworkModel& model, const PackedDataset& ds,
                                Split split) {
    if (!model.uses_aim()) {
        throw ContractError("heatmap_accumulate: model has no aim module");
    }
    NoGradScope no_grad;
    HeatmapTable table;
    table.mechanisms = model.config.aim.m;
    table.k = model.config.aim.k;
    for (auto class_id : ds.splits.classes(split)) {
        const auto& indices = ds.class_indices(class_id);
        if (indices.empty()) {
            std::cerr << "heatmap: class " << class_id << " has no samples, row omitted\n";
            continue;
        }
        std::vector<std::size_t> row(table.mechanisms, 0);
        for (auto idx : indices) {
            Tensor z = model.features(ds.image(idx));
            auto mask = activation_mask(z, model.aim, model.config.aim);
            for (std::size_t m = 0; m < table.mechanisms; ++m) {
                if (mask[m]) row[m] += 1;
            }
        }
        table.class_ids.push_back(class_id);
        table.counts.push_back(std::move(row));
        table.samples_per_class.push_back(indices.size());
    }
    return table;
}

std::vector<TraceRow> attention_trace(const ModelConfig& model_cfg,
                                      const std::vector<std::string>& checkpoint_paths,
                                      const PackedDataset& ds,
                                      const std::vector<std::size_t>& probe_samples) {
    std::vector<TraceRow> rows;
    Rng scratch(1);
    FrameworkModel probe = FrameworkModel::build(model_cfg, scratch);
    NoGradScope no_grad;
    for (std::size_t epoch = 0; epoch < checkpoint_paths.size(); ++epoch) {
        try {
            load_checkpoint(probe.params, checkpoint_paths[epoch]);
        } catch (const ParseError& e) {
            std::cerr << "trace: skipping checkpoint " << checkpoint_paths[epoch] << " (" << e.what()
                      << ")\n";
            continue;
        }
        for (auto sample : probe_samples) {
            Tensor z = probe.features(ds.image(sample));
            Attention att = attend(z, probe.aim);
            auto scores = att.score_values();
            for (std::size_t m = 0; m < scores.size(); ++m) {
                rows.push_back({epoch, sample, m, scores[m]});
            }
        }
    }
    return rows;
}

std::string trace_csv(const std::vector<TraceRow>& rows) {
    std::ostringstream os;
    os.precision(17);
    os << "epoch,sample_id,mechanism,score\n";
    for (const auto& r : rows) {
        os << r.epoch << "," << r.sample_id << "," << r.mechanism << "," << r.score << "\n";
    }
    return os.str();
}

ScoreSeparation score_separation(const FrameworkModel& model, const PackedDataset& ds,
                                 const std::vector<std::size_t>& probe_samples) {
    if (!model.uses_aim()) throw ContractError("score_separation: model has no aim module");
    NoGradScope no_grad;
    ScoreSeparation sep;
    std::size_t active_n = 0, inhibited_n = 0;
    for (auto sample : probe_samples) {
        Tensor z = model.features(ds.image(sample));
        Attention att = attend(z, model.aim);
        auto scores = att.score_values();
        auto mask = select_hard(scores, model.config.aim.k);
        for (std::size_t m = 0; m < scores.size(); ++m) {
            if (mask.active[m]) {
                sep.active_mean += scores[m];
                ++active_n;
            } else {
                sep.inhibited_mean += scores[m];
                ++inhibited_n;
            }
        }
    }
    if (active_n) sep.active_mean /= static_cast<double>(active_n);
    if (inhibited_n) sep.inhibited_mean /= static_cast<double>(inhibited_n);
    return sep;
}

// ---- pipelines ------------------------------------------------------------------------

FewshotRun run_fewshot_pipeline(const RunConfig& cfg, const PackedDataset& ds,
                                const TrainHooks* hooks) {
    cfg.validate();
    if (variant_from_string(cfg.variant) != Variant::Sib) {
        throw ContractError("fewshot pipeline: variant must be sib");
    }
    ModelConfig mc = model_config_from(cfg, ds);

    Rng pre_rng(cfg.seed ^ 0xa5a5a5a5ull);
    auto pre = pretrain_backbone(ds, mc.backbone, cfg.pretrain_epochs, cfg.pretrain_step, pre_rng);

    Rng build_rng(cfg.seed);
    FewshotRun run{FrameworkModel::build(mc, build_rng), {}, {}, pre.train_accuracy};
    for (std::size_t i = 0; i < pre.backbone.kernels.size(); ++i) {
        run.model.backbone.kernels[i].copy_data_from(pre.backbone.kernels[i]);
    }

    TrainConfig tc = cfg.train;
    tc.seed = cfg.seed;
    tc.out_dir = cfg.out_dir;
    run.train = meta_train_fewshot(run.model, ds, cfg.episode, tc, hooks);
    run.eval = meta_test_fewshot(run.model, ds, cfg.episode, tc, cfg.eval_episodes,
                                 Split::MetaTest, selection_mode_from_string(cfg.eval_selection_mode),
                                 cfg.seed ^ 0xeeeeull, hooks);
    return run;
}

ContinualRun run_continual_pipeline(const RunConfig& cfg, const PackedDataset& ds,
                                    const TrainHooks* hooks) {
    cfg.validate();
    if (variant_from_string(cfg.variant) == Variant::Sib) {
        throw ContractError("continual pipeline: variant must be oml, anml or oml-linear");
    }
    ModelConfig mc = model_config_from(cfg, ds);
    Rng build_rng(cfg.seed);
    ContinualRun run{FrameworkModel::build(mc, build_rng), {}, {}};

    TrainConfig tc = cfg.train;
    tc.seed = cfg.seed;
    tc.out_dir = cfg.out_dir;
    run.train = meta_train_continual(run.model, ds, tc, hooks);
    run.test = meta_test_continual(run.model, ds, ds.splits.meta_test, tc, cfg.seed ^ 0xeeeeull,
                                   hooks);
    return run;
}

// ---- gradient verification --------------------------------------------------------------

namespace {

using BuildFn = std::function<Tensor()>;

double check_points(const char*, Rng& rng, int points,
                    const std::function<double(Rng&)>& one_point) {
    double worst = 0.0;
    for (int i = 0; i < points; ++i) worst = std::max(worst, one_point(rng));
    return worst;
}

double composed_oml_check(Rng& rng) {
    ModelConfig mc;
    mc.variant = Variant::Oml;
    mc.backbone = ConvBackboneSpec::stack(2, 3, {2, 2}, 1, 8, 8);
    mc.aim = AimConfig{.m = 4, .k = 2, .l = 0, .d = 5, .d_hidden = 5, .d_out = 6};
    mc.classes = 3;
    mc.reduce_dim = 7;
    Rng build_rng(rng.next_u64());
    auto model = FrameworkModel::build(mc, build_rng);
    Tensor img = Tensor::uniform({1, 8, 8}, 0.5, build_rng);

    SelectionMask fixed;
    {
        NoGradScope ng;
        fixed = select_hard(attend(model.features(img), model.aim).score_values(), mc.aim.k);
    }
    std::vector<Tensor> params;
    for (const auto& [name, t] : model.params.items) {
        if (name.rfind("aim.wm.", 0) == 0) {
            const std::size_t idx = std::stoul(name.substr(7));
            if (!fixed.active[idx]) continue; // inactive mechanisms carry no gradient
        }
        params.push_back(t);
    }
    auto build = [&] {
        Tensor z = model.features(img);
        Attention att = attend(z, model.aim);
        Tensor zt = aim_forward(z, fixed, att, model.aim);
        return cross_entropy(model.head.forward(zt), 1);
    };
    return finite_diff_check(build, params);
}

double composed_anml_check(Rng& rng) {
    ModelConfig mc;
    mc.variant = Variant::Anml;
    mc.backbone = ConvBackboneSpec::stack(2, 3, {2, 2}, 1, 8, 8);
    mc.nm_backbone = mc.backbone;
    mc.aim = AimConfig{.m = 4, .k = 2, .l = 0, .d = 5, .d_hidden = 5, .d_out = 6};
    mc.classes = 3;
    mc.reduce_dim = 7;
    Rng build_rng(rng.next_u64());
    auto model = FrameworkModel::build(mc, build_rng);
    Tensor img = Tensor::uniform({1, 8, 8}, 0.5, build_rng);

    SelectionMask fixed;
    {
        NoGradScope ng;
        fixed = select_hard(attend(model.features(img), model.aim).score_values(), mc.aim.k);
    }
    std::vector<Tensor> params;
    for (const auto& [name, t] : model.params.items) {
        if (name.rfind("aim.wm.", 0) == 0) {
            const std::size_t idx = std::stoul(name.substr(7));
            if (!fixed.active[idx]) continue;
        }
        params.push_back(t);
    }
    auto build = [&] {
        Tensor z = model.features(img);
        Attention att = attend(z, model.aim);
        Tensor zt = aim_forward(z, fixed, att, model.aim);
        return cross_entropy(model.head.forward(zt), 0);
    };
    return finite_diff_check(build, params);
}

// full Sib pipeline on the tape: support averaging through AIM, phi from
// theta, one synthetic step, cosine loss on a query
double composed_sib_check(Rng& rng) {
    const std::size_t ways = 3, d_out = 6, feat = 10;
    AimConfig acfg{.m = 4, .k = 2, .l = 0, .d = 5, .d_hidden = 5, .d_out = d_out};
    Rng build_rng(rng.next_u64());
    AimParams aim = AimParams::init(feat, acfg, build_rng);
    Tensor theta = Tensor::uniform({d_out}, 1.0, build_rng, true);
    Tensor tau = Tensor::scalar(5.0, true);
    SyntheticGradNet net = SyntheticGradNet::init(ways, d_out, build_rng);
    for (auto& v : net.fc3.w.data()) v = build_rng.uniform(-0.05, 0.05);

    std::vector<Tensor> support, queries;
    for (std::size_t c = 0; c < ways; ++c) support.push_back(Tensor::uniform({feat}, 1.0, build_rng));
    for (int q = 0; q < 2; ++q) queries.push_back(Tensor::uniform({feat}, 1.0, build_rng));

    auto fixed_mask = [&](const Tensor& z) {
        NoGradScope ng;
        return select_hard(attend(z, aim).score_values(), acfg.k);
    };
    std::vector<SelectionMask> support_masks, query_masks;
    for (const auto& s : support) support_masks.push_back(fixed_mask(s));
    for (const auto& q : queries) query_masks.push_back(fixed_mask(q));

    std::vector<Tensor> params{theta, tau, net.fc1.w, net.fc1.b, net.fc2.w,
                               net.fc2.b, net.fc3.w, net.fc3.b, aim.wk};
    for (std::size_t i = 0; i < acfg.m; ++i) {
        params.push_back(aim.h[i]);
        params.push_back(aim.wq[i]);
        params.push_back(aim.wm[i]);
    }

    auto build = [&] {
        std::vector<std::vector<Tensor>> by_class(ways);
        for (std::size_t c = 0; c < ways; ++c) {
            Attention att = attend(support[c], aim);
            by_class[c].push_back(aim_forward(support[c], support_masks[c], att, aim));
        }
        auto phi_rows = feature_average_init(by_class, theta);
        std::vector<Tensor> zq;
        for (std::size_t q = 0; q < queries.size(); ++q) {
            Attention att = attend(queries[q], aim);
            zq.push_back(aim_forward(queries[q], query_masks[q], att, aim));
        }
        phi_rows = synthetic_update(phi_rows, tau, zq, net, 1e-2, 1);
        return cross_entropy(cosine_logits(zq[0], phi_rows, tau), 1);
    };
    return finite_diff_check(build, params);
}

} // namespace

GradcheckReport run_gradcheck_suite(std::uint64_t seed) {
    GradcheckReport report;
    Rng rng(seed);
    const int points = 10;

    auto record = [&](const std::string& name, double err) {
        report.checks.emplace_back(name, err);
        report.worst = std::max(report.worst, err);
    };

    record("matmul", check_points("matmul", rng, points, [](Rng& r) {
            Tensor a = Tensor::uniform({3, 4}, 1.0, r, true);
            Tensor b = Tensor::uniform({4, 2}, 1.0, r, true);
            const Tensor params[] = {a, b};
            return finite_diff_check([&] { return sum(matmul(a, b)); }, params);
        }));
    record("vecmat", check_points("vecmat", rng, points, [](Rng& r) {
            Tensor x = Tensor::uniform({5}, 1.0, r, true);
            Tensor w = Tensor::uniform({5, 3}, 1.0, r, true);
            const Tensor params[] = {x, w};
            return finite_diff_check([&] { return sum(vecmat(x, w)); }, params);
        }));
    record("dot", check_points("dot", rng, points, [](Rng& r) {
            Tensor a = Tensor::uniform({6}, 1.0, r, true);
            Tensor b = Tensor::uniform({6}, 1.0, r, true);
            const Tensor params[] = {a, b};
            return finite_diff_check([&] { return dot(a, b); }, params);
        }));
    record("add_sub_mul", check_points("add_sub_mul", rng, points, [](Rng& r) {
            Tensor a = Tensor::uniform({4}, 1.0, r, true);
            Tensor b = Tensor::uniform({4}, 1.0, r, true);
            const Tensor params[] = {a, b};
            return finite_diff_check([&] { return sum(mul(add(a, b), sub(a, b))); }, params);
        }));
    record("scale", check_points("scale", rng, points, [](Rng& r) {
            Tensor t = Tensor::uniform({4}, 1.0, r, true);
            Tensor s = Tensor::scalar(r.uniform(0.5, 1.5), true);
            const Tensor params[] = {t, s};
            return finite_diff_check([&] { return sum(add(scale(t, 1.7), scale(t, s))); }, params);
        }));
    record("relu", check_points("relu", rng, points, [](Rng& r) {
            Tensor t = Tensor::uniform({8}, 1.0, r, true);
            const Tensor params[] = {t};
            return finite_diff_check([&] { return sum(relu(t)); }, params);
        }));
    record("l2_normalize", check_points("l2_normalize", rng, points, [](Rng& r) {
            Tensor t = Tensor::uniform({5}, 1.0, r, true);
            Tensor c = Tensor::uniform({5}, 1.0, r);
            const Tensor params[] = {t};
            return finite_diff_check([&] { return dot(l2_normalize(t), c); }, params);
        }));
    record("mean_sum", check_points("mean_sum", rng, points, [](Rng& r) {
            Tensor t = Tensor::uniform({6}, 1.0, r, true);
            const Tensor params[] = {t};
            return finite_diff_check([&] { return add(mean(t), sum(t)); }, params);
        }));
    record("concat_flatten_reshape_take_row", check_points("shapes", rng, points, [](Rng& r) {
            Tensor a = Tensor::uniform({4}, 1.0, r, true);
            Tensor b = Tensor::uniform({2, 3}, 1.0, r, true);
            const Tensor params[] = {a, b};
            return finite_diff_check(
                [&] {
                    Tensor joined = concat(a, flatten(b));
                    Tensor back = reshape(joined, {5, 2});
                    return add(take(joined, 1), sum(row(back, 3)));
                },
                params);
        }));
    record("softmax", check_points("softmax", rng, points, [](Rng& r) {
            Tensor t = Tensor::uniform({3, 4}, 2.0, r, true);
            Tensor c = Tensor::uniform({12}, 1.0, r);
            const Tensor params[] = {t};
            return finite_diff_check([&] { return dot(flatten(softmax(t, 1)), c); }, params);
        }));
    record("conv2d", check_points("conv2d", rng, points, [](Rng& r) {
            Tensor x = Tensor::uniform({2, 6, 6}, 1.0, r, true);
            Tensor k = Tensor::uniform({2, 2, 3, 3}, 0.5, r, true);
            const Tensor params[] = {x, k};
            return finite_diff_check([&] { return mean(conv2d(x, k, 2, 1)); }, params);
        }));
    record("cross_entropy", check_points("cross_entropy", rng, points, [](Rng& r) {
            Tensor t = Tensor::uniform({5}, 2.0, r, true);
            const Tensor params[] = {t};
            return finite_diff_check([&] { return cross_entropy(t, 2); }, params);
        }));
    record("composed_sib", check_points("composed_sib", rng, points,
                                     [](Rng& r) { return composed_sib_check(r); }));
    record("composed_oml", check_points("composed_oml", rng, points,
                                     [](Rng& r) { return composed_oml_check(r); }));
    record("composed_anml", check_points("composed_anml", rng, points,
                                      [](Rng& r) { return composed_anml_check(r); }));
    return report;
}

// ---- sweeps ---------------------------------------------------------------------------

std::vector<SweepPoint> sweep(const std::string& param, const std::vector<std::size_t>& values,
                              const RunConfig& base, const PackedDataset& ds) {
    if (param != "k" && param != "l") {
        throw ContractError("sweep: parameter must be 'k' or 'l'");
    }
    std::vector<SweepPoint> points;
    for (auto v : values) {
        SweepPoint p;
        p.value = v;
        RunConfig cfg = base;
        if (param == "k") {
            cfg.aim.k = v;
        } else {
            cfg.aim.l = v;
        }
        try {
            cfg.validate();
            auto run = run_fewshot_pipeline(cfg, ds);
            p.valid = true;
            p.accuracy = run.eval.mean_accuracy;
            p.ci95 = run.eval.ci95;
        } catch (const ContractError& e) {
            p.valid = false;
            p.note = e.what();
            std::cerr << "sweep: skipping " << param << "=" << v << " (" << e.what() << ")\n";
        }
        points.push_back(std::move(p));
    }
    double mean = 0.0;
    std::size_t valid = 0;
    for (const auto& p : points) {
        if (p.valid) {
            mean += p.accuracy;
            ++valid;
        }
    }
    if (valid) mean /= static_cast<double>(valid);
    for (auto& p : points) {
        if (p.valid) p.zero_meaned = p.accuracy - mean;
    }
    return points;
}

std::string sweep_csv(const std::string& param, const std::vector<SweepPoint>& points) {
    std::ostringstream os;
    os.precision(17);
    os << param << ",valid,accuracy,ci95,zero_meaned,note\n";
    for (const auto& p : points) {
        os << p.value << "," << (p.valid ? 1 : 0) << "," << p.accuracy << "," << p.ci95 << ","
           << p.zero_meaned << "," << p.note << "\n";
    }
    return os.str();
}

} // namespace aimlab
