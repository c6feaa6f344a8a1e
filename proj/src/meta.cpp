#include "aimlab/meta.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "aimlab/checkpoint.hpp"

namespace aimlab {

void TrainConfig::validate() const {
    if (nu_in <= 0.0 || nu_out <= 0.0 || eps_syn <= 0.0) {
        throw ContractError("train config: step sizes must be positive");
    }
    if (inner_steps < 1) throw ContractError("train config: inner iterations must be at least 1");
    if (synthetic_steps < 1) throw ContractError("train config: synthetic steps must be at least 1");
}

namespace {

std::size_t argmax_allowed(const Tensor& logits, const std::vector<char>* allow) {
    std::size_t best = logits.size();
    for (std::size_t i = 0; i < logits.size(); ++i) {
        if (allow && !(*allow)[i]) continue;
        if (best == logits.size() || logits.at(i) > logits.at(best)) best = i;
    }
    return best;
}

void fire(const TrainHooks* hooks, const char* phase, std::size_t index) {
    if (hooks && hooks->on_grad_sample) hooks->on_grad_sample(phase, index);
}

std::string checkpoint_name(const std::string& dir, std::size_t step) {
    std::ostringstream os;
    os << dir << "/ckpt_" << std::setw(6) << std::setfill('0') << step << ".aimc";
    return os.str();
}

void maybe_checkpoint(const FrameworkModel& model, const TrainConfig& cfg, std::size_t step) {
    if (cfg.checkpoint_every == 0 || cfg.out_dir.empty()) return;
    if ((step + 1) % cfg.checkpoint_every != 0) return;
    std::filesystem::create_directories(cfg.out_dir);
    save_checkpoint(model.params, checkpoint_name(cfg.out_dir, step + 1));
}

} // namespace

void write_curves_csv(const std::string& path, const std::vector<CurvePoint>& points) {
    std::ofstream os(path);
    if (!os) throw ContractError("cannot write " + path);
    os << "step,split,classes_seen,accuracy\n";
    os.precision(17);
    for (const auto& p : points) {
        os << p.step << "," << p.split << "," << p.classes_seen << "," << p.accuracy << "\n";
    }
}

void write_episodes_csv(const std::string& path, const std::vector<double>& accuracies) {
    std::ofstream os(path);
    if (!os) throw ContractError("cannot write " + path);
    os << "episode,accuracy\n";
    os.precision(17);
    for (std::size_t i = 0; i < accuracies.size(); ++i) os << i << "," << accuracies[i] << "\n";
}

FeatureCache::FeatureCache(const FrameworkModel& model, const PackedDataset& ds)
    : model_(model), ds_(ds), slots_(ds.n), valid_(ds.n, 0) {}

const Tensor& FeatureCache::get(std::size_t index) {
    if (!valid_[index]) {
        NoGradScope no_grad;
        slots_[index] = model_.features(ds_.image(index));
        valid_[index] = 1;
    }
    return slots_[index];
}

void FeatureCache::invalidate() { std::fill(valid_.begin(), valid_.end(), 0); }

void inner_adapt(FrameworkModel& model, std::span<const Sample> support, const PackedDataset& ds,
                 std::size_t inner_steps, double nu_in, SelectionMode mode, Rng& rng,
                 FeatureCache* cache, const TrainHooks* hooks) {
    if (support.empty()) throw ContractError("inner_adapt: empty support set");
    const auto fast = model.fast_tensors();
    const auto all = model.all_tensors();
    const bool cached = cache != nullptr && model.features_are_inner_constant();
    SgdOptimizer opt{nu_in};
    for (std::size_t t = 0; t < inner_steps; ++t) {
        for (const auto& s : support) {
            TapeScope scope;
            Tensor z = cached ? cache->get(s.index) : model.features(ds.image(s.index));
            auto res = model.forward_from_features(z, mode, rng);
            Tensor loss = cross_entropy(res.logits, s.label);
            backward(loss);
            fire(hooks, "inner", s.index);
            opt.step(std::span<const Tensor>(fast));
            zero_grads(std::span<const Tensor>(all));
        }
    }
}

OuterStats outer_step(FrameworkModel& model, std::span<const Sample> query,
                      const PackedDataset& ds, double nu_out, SelectionMode mode, Rng& rng,
                      const TrainHooks* hooks) {
    if (query.empty()) throw ContractError("outer_step: empty query set");
    const auto slow = model.slow_tensors();
    const auto all = model.all_tensors();
    OuterStats stats;
    std::size_t hits = 0;
    TapeScope scope;
    std::vector<Tensor> losses;
    losses.reserve(query.size());
    for (const auto& q : query) {
        Tensor z = model.features(ds.image(q.index));
        auto res = model.forward_from_features(z, mode, rng);
        losses.push_back(cross_entropy(res.logits, q.label));
        if (argmax_allowed(res.logits, nullptr) == q.label) ++hits;
        fire(hooks, "outer", q.index);
    }
    Tensor loss = losses.size() == 1 ? losses.front() : mean(concat(losses));
    stats.loss = loss.item();
    backward(loss);
    SgdOptimizer{nu_out}.step(std::span<const Tensor>(slow));
    zero_grads(std::span<const Tensor>(all));
    stats.accuracy = static_cast<double>(hits) / static_cast<double>(query.size());
    return stats;
}

double evaluate_accuracy(const FrameworkModel& model, const PackedDataset& ds,
                         std::span<const Sample> samples, SelectionMode mode, Rng& rng,
                         const std::vector<std::uint32_t>* allowed_classes, FeatureCache* cache) {
    if (samples.empty()) throw ContractError("evaluate_accuracy: no samples");
    NoGradScope no_grad;
    std::vector<char> allow;
    if (allowed_classes) {
        allow.assign(model.config.classes, 0);
        for (auto c : *allowed_classes) allow[c] = 1;
    }
    const bool cached = cache != nullptr && model.features_are_inner_constant();
    std::size_t hits = 0;
    for (const auto& s : samples) {
        Tensor z = cached ? cache->get(s.index) : model.features(ds.image(s.index));
        auto res = model.forward_from_features(z, mode, rng);
        if (argmax_allowed(res.logits, allowed_classes ? &allow : nullptr) == s.label) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(samples.size());
}

// ---- Sib episodes -----------------------------------------------------------------

namespace {

struct SibEpisodeStats {
    double query_accuracy = 0.0;
};

// One meta-step (train) or one evaluation episode (test). The caller owns the
// model mutation policy: meta-training passes the live model, meta-testing a
// clone.
SibEpisodeStats sib_episode(FrameworkModel& model, const PackedDataset& ds, const Episode& ep,
                            const TrainConfig& cfg, Rng& rng, FeatureCache& cache, bool train,
                            SelectionMode eval_mode, const TrainHooks* hooks) {
    const std::size_t ways = model.config.classes;
    const std::size_t d_out = model.config.aim.d_out;
    const AimConfig& acfg = model.config.aim;

    // support pass with the current AIM state -> per-class averaged features
    std::vector<Tensor> w_avg(ways);
    {
        NoGradScope no_grad;
        std::vector<std::vector<Tensor>> tilde(ways);
        for (const auto& s : ep.support) {
            Tensor z = cache.get(s.index);
            tilde[s.label].push_back(
                aim_apply(z, model.aim, acfg, SelectionMode::Stochastic, rng).value);
        }
        Tensor ones = Tensor::full({d_out}, 1.0);
        auto rows = feature_average_init(tilde, ones);
        for (std::size_t c = 0; c < ways; ++c) w_avg[c] = rows[c];
    }

    // phi starts as theta (Hadamard) the averaged support features
    std::vector<double> phi_init(ways * d_out);
    for (std::size_t c = 0; c < ways; ++c) {
        for (std::size_t j = 0; j < d_out; ++j) {
            phi_init[c * d_out + j] = model.gen.theta.at(j) * w_avg[c].at(j);
        }
    }
    model.cosine.phi.data() = phi_init;

    // inner adaptation of {aim, phi}, support order shuffled once
    std::vector<Sample> order(ep.support.begin(), ep.support.end());
    rng.shuffle(order);
    inner_adapt(model, order, ds, cfg.inner_steps, cfg.nu_in, SelectionMode::Stochastic, rng,
                &cache, hooks);

    // query features under the adapted AIM, constants for what follows
    const SelectionMode query_mode = train ? SelectionMode::Stochastic : eval_mode;
    std::vector<Tensor> zq;
    zq.reserve(ep.query.size());
    {
        NoGradScope no_grad;
        for (const auto& q : ep.query) {
            zq.push_back(aim_apply(cache.get(q.index), model.aim, acfg, query_mode, rng).value);
        }
    }

    SibEpisodeStats stats;
    if (train) {
        // outer pass: rebuild phi on the tape so theta and the synthetic net
        // receive first-order gradient, the inner SGD deltas held constant
        const auto slow = model.slow_tensors();
        const auto all = model.all_tensors();
        TapeScope scope;
        std::vector<Tensor> phi_rows;
        phi_rows.reserve(ways);
        for (std::size_t c = 0; c < ways; ++c) {
            std::vector<double> delta(d_out);
            for (std::size_t j = 0; j < d_out; ++j) {
                delta[j] = model.cosine.phi.at(c * d_out + j) - phi_init[c * d_out + j];
            }
            Tensor delta_t = Tensor::from(std::move(delta), {d_out});
            phi_rows.push_back(add(mul(model.gen.theta, w_avg[c]), delta_t));
        }
        phi_rows = synthetic_update(phi_rows, model.cosine.tau, zq, model.sgn, cfg.eps_syn,
                                    cfg.synthetic_steps);
        std::vector<Tensor> losses;
        losses.reserve(ep.query.size());
        std::size_t hits = 0;
        for (std::size_t j = 0; j < ep.query.size(); ++j) {
            Tensor logits = cosine_logits(zq[j], phi_rows, model.cosine.tau);
            if (argmax_allowed(logits, nullptr) == ep.query[j].label) ++hits;
            losses.push_back(cross_entropy(logits, ep.query[j].label));
            fire(hooks, "outer", ep.query[j].index);
        }
        backward(mean(concat(losses)));
        SgdOptimizer{cfg.nu_out}.step(std::span<const Tensor>(slow));
        zero_grads(std::span<const Tensor>(all));
        stats.query_accuracy = static_cast<double>(hits) / static_cast<double>(ep.query.size());
    } else {
        // transductive refinement, then evaluation
        NoGradScope no_grad;
        std::vector<Tensor> phi_rows;
        phi_rows.reserve(ways);
        for (std::size_t c = 0; c < ways; ++c) phi_rows.push_back(row(model.cosine.phi, c));
        phi_rows = synthetic_update(phi_rows, model.cosine.tau, zq, model.sgn, cfg.eps_syn,
                                    cfg.synthetic_steps);
        std::size_t hits = 0;
        for (std::size_t j = 0; j < ep.query.size(); ++j) {
            Tensor logits = cosine_logits(zq[j], phi_rows, model.cosine.tau);
            if (argmax_allowed(logits, nullptr) == ep.query[j].label) ++hits;
        }
        stats.query_accuracy = static_cast<double>(hits) / static_cast<double>(ep.query.size());
    }
    return stats;
}

std::vector<std::vector<double>> snapshot_params(const FrameworkModel& model) {
    std::vector<std::vector<double>> out;
    out.reserve(model.params.items.size());
    for (const auto& [name, t] : model.params.items) out.push_back(t.data());
    return out;
}

void restore_params(FrameworkModel& model, const std::vector<std::vector<double>>& snap) {
    for (std::size_t i = 0; i < model.params.items.size(); ++i) {
        model.params.items[i].second.data() = snap[i];
    }
}

} // namespace

FewshotTrainResult meta_train_fewshot(FrameworkModel& model, const PackedDataset& ds,
                                      const EpisodeSpec& episode, const TrainConfig& cfg,
                                      const TrainHooks* hooks) {
    cfg.validate();
    episode.validate();
    if (model.config.variant != Variant::Sib) {
        throw ContractError("meta_train_fewshot: model must be the sib variant");
    }
    if (!model.backbone.frozen()) {
        throw ContractError("meta_train_fewshot: backbone must be pretrained and frozen");
    }
    if (episode.ways != model.config.classes) {
        throw ContractError("meta_train_fewshot: episode ways do not match the model head");
    }

    Rng rng(cfg.seed);
    FeatureCache cache(model, ds);
    FewshotTrainResult out;
    double best = -1.0;
    std::vector<std::vector<double>> best_snap;

    const bool can_validate = cfg.val_every > 0 && !ds.splits.meta_val.empty();
    for (std::size_t step = 0; step < cfg.total_steps; ++step) {
        Episode ep = sample_episode(ds, episode, Split::MetaTrain, rng);
        auto stats = sib_episode(model, ds, ep, cfg, rng, cache, /*train=*/true,
                                 SelectionMode::Hard, hooks);
        if (cfg.curve_every > 0 && step % cfg.curve_every == 0) {
            out.curve.push_back({step, "meta_train_episode", episode.ways, stats.query_accuracy});
        }
        maybe_checkpoint(model, cfg, step);
        if (can_validate && (step + 1) % cfg.val_every == 0) {
            const std::uint64_t val_seed = cfg.seed ^ (0x9e3779b97f4a7c15ull * (step + 1));
            auto val = meta_test_fewshot(model, ds, episode, cfg, cfg.val_episodes, Split::MetaVal,
                                         SelectionMode::Hard, val_seed, nullptr);
            out.curve.push_back({step + 1, "meta_val", episode.ways, val.mean_accuracy});
            if (val.mean_accuracy > best) {
                best = val.mean_accuracy;
                best_snap = snapshot_params(model);
            }
        }
    }
    if (best >= 0.0) {
        restore_params(model, best_snap);
        out.best_val_accuracy = best;
    }
    return out;
}

FewshotEval meta_test_fewshot(const FrameworkModel& model, const PackedDataset& ds,
                              const EpisodeSpec& episode, const TrainConfig& cfg,
                              std::size_t episodes, Split split, SelectionMode eval_mode,
                              std::uint64_t seed, const TrainHooks* hooks) {
    if (model.config.variant != Variant::Sib) {
        throw ContractError("meta_test_fewshot: model must be the sib variant");
    }
    if (episodes == 0) throw ContractError("meta_test_fewshot: needs at least one episode");
    Rng rng(seed);
    FeatureCache cache(model, ds); // extractor frozen: shared across episode clones
    FewshotEval out;
    out.per_episode.reserve(episodes);
    for (std::size_t e = 0; e < episodes; ++e) {
        Episode ep = sample_episode(ds, episode, split, rng);
        FrameworkModel work = model.clone();
        auto stats = sib_episode(work, ds, ep, cfg, rng, cache, /*train=*/false, eval_mode, hooks);
        out.per_episode.push_back(stats.query_accuracy);
    }
    double acc = 0.0;
    for (double a : out.per_episode) acc += a;
    out.mean_accuracy = acc / static_cast<double>(episodes);
    if (episodes > 1) {
        double var = 0.0;
        for (double a : out.per_episode) {
            var += (a - out.mean_accuracy) * (a - out.mean_accuracy);
        }
        var /= static_cast<double>(episodes - 1);
        out.ci95 = 1.96 * std::sqrt(var) / std::sqrt(static_cast<double>(episodes));
    }
    return out;
}

// ---- continual ------------------------------------------------------------------------

ContinualTrainResult meta_train_continual(FrameworkModel& model, const PackedDataset& ds,
                                          const TrainConfig& cfg, const TrainHooks* hooks) {
    cfg.validate();
    if (model.config.variant == Variant::Sib) {
        throw ContractError("meta_train_continual: model must be a continual variant");
    }
    Rng rng(cfg.seed);

    std::vector<Sample> train_pool;
    for (auto c : ds.splits.meta_train) {
        for (auto idx : ds.class_indices(c)) train_pool.push_back({idx, c});
    }
    std::vector<std::size_t> pool_order(train_pool.size());
    std::iota(pool_order.begin(), pool_order.end(), 0);

    FeatureCache cache(model, ds);
    ContinualTrainResult out;
    for (std::size_t step = 0; step < cfg.total_steps; ++step) {
        Trajectory traj =
            sample_trajectory(ds, cfg.classes_per_traj, cfg.traj_shots, Split::MetaTrain, rng);
        for (const auto& task : traj.tasks) model.reinit_head_class(task.class_id, rng);

        std::vector<Sample> support;
        for (const auto& task : traj.tasks) {
            auto idxs = task.support;
            rng.shuffle(idxs);
            for (auto i : idxs) support.push_back({i, task.class_id});
        }
        inner_adapt(model, support, ds, cfg.inner_steps, cfg.nu_in, SelectionMode::Stochastic, rng,
                    &cache, hooks);

        std::vector<Sample> outer;
        for (const auto& task : traj.tasks) {
            for (auto i : task.test) outer.push_back({i, task.class_id});
        }
        const std::size_t replay = std::min(cfg.remember_batch, pool_order.size());
        for (std::size_t i = 0; i < replay; ++i) {
            std::swap(pool_order[i], pool_order[i + rng.below(pool_order.size() - i)]);
            outer.push_back(train_pool[pool_order[i]]);
        }
        auto stats = outer_step(model, outer, ds, cfg.nu_out, SelectionMode::Stochastic, rng, hooks);
        cache.invalidate(); // slow weights moved

        if (cfg.curve_every > 0 && step % cfg.curve_every == 0) {
            out.curve.push_back({step, "meta_train", cfg.classes_per_traj, stats.accuracy});
        }
        maybe_checkpoint(model, cfg, step);
    }
    return out;
}

ContinualCurves meta_test_continual(const FrameworkModel& model, const PackedDataset& ds,
                                    const std::vector<std::uint32_t>& classes,
                                    const TrainConfig& cfg, std::uint64_t seed,
                                    const TrainHooks* hooks, SelectionMode eval_mode) {
    if (model.config.variant == Variant::Sib) {
        throw ContractError("meta_test_continual: model must be a continual variant");
    }
    if (classes.empty()) throw ContractError("meta_test_continual: no classes");

    FrameworkModel work = model.clone();
    Rng rng(seed);
    Trajectory traj = trajectory_over_classes(ds, classes, cfg.traj_shots, rng);
    for (const auto& task : traj.tasks) work.reinit_head_class(task.class_id, rng);

    FeatureCache cache(work, ds); // slow and frozen weights are locked here
    ContinualCurves out;
    TrajectoryState state;
    for (const auto& task : traj.tasks) {
        state.classes_seen.push_back(task.class_id);
        for (auto i : task.support) state.train_seen.push_back({i, task.class_id});
        for (auto i : task.test) state.test_seen.push_back({i, task.class_id});

        std::vector<Sample> support;
        for (auto i : task.support) support.push_back({i, task.class_id});
        rng.shuffle(support);
        inner_adapt(work, support, ds, cfg.inner_steps, cfg.nu_in, SelectionMode::Hard, rng,
                    &cache, hooks);

        out.classes_seen.push_back(task.class_id);
        out.train_accuracy.push_back(evaluate_accuracy(work, ds, state.train_seen, eval_mode, rng,
                                                       &state.classes_seen, &cache));
        out.test_accuracy.push_back(evaluate_accuracy(work, ds, state.test_seen, eval_mode, rng,
                                                      &state.classes_seen, &cache));
    }
    return out;
}

CurveBand aggregate_curves(const std::vector<std::vector<double>>& runs) {
    if (runs.empty()) throw ContractError("aggregate_curves: no runs");
    const std::size_t n = runs.front().size();
    for (const auto& r : runs) {
        if (r.size() != n) throw ContractError("aggregate_curves: curve lengths differ");
    }
    CurveBand band;
    band.mean.assign(n, 0.0);
    band.stddev.assign(n, 0.0);
    for (const auto& r : runs) {
        for (std::size_t i = 0; i < n; ++i) band.mean[i] += r[i];
    }
    for (auto& m : band.mean) m /= static_cast<double>(runs.size());
    if (runs.size() > 1) {
        for (const auto& r : runs) {
            for (std::size_t i = 0; i < n; ++i) {
                band.stddev[i] += (r[i] - band.mean[i]) * (r[i] - band.mean[i]);
            }
        }
        for (auto& s : band.stddev) {
            s = std::sqrt(s / static_cast<double>(runs.size() - 1));
        }
    }
    return band;
}

} // namespace aimlab
