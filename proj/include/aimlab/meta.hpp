#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "aimlab/data.hpp"
#include "aimlab/models.hpp"

namespace aimlab {

struct TrainConfig {
    std::size_t inner_steps = 1; // T: passes over the support set, batch size 1
    double nu_in = 1e-2;         // inner-loop step size
    double nu_out = 1e-3;        // outer-loop step size
    double eps_syn = 1e-3;       // synthetic-gradient step size (Sib)
    std::size_t synthetic_steps = 3;
    std::size_t total_steps = 2000;
    std::uint64_t seed = 1;
    std::size_t remember_batch = 16; // continual outer-loss replay of meta-train classes
    std::size_t classes_per_traj = 1;
    std::size_t traj_shots = 15; // support images per class in a trajectory
    std::size_t val_every = 250; // few-shot validation cadence, 0 = off
    std::size_t val_episodes = 100;
    std::size_t curve_every = 50;      // training-curve sampling cadence
    std::size_t checkpoint_every = 0;  // 0 = no periodic checkpoints
    std::string out_dir;               // checkpoint directory, "" = none

    void validate() const;
};

// Instrumentation: invoked once per sample that feeds a gradient computation.
struct TrainHooks {
    std::function<void(const std::string& phase, std::size_t sample_index)> on_grad_sample;
};

struct CurvePoint {
    std::size_t step = 0;
    std::string split;
    std::size_t classes_seen = 0;
    double accuracy = 0.0;
};

void write_curves_csv(const std::string& path, const std::vector<CurvePoint>& points);
void write_episodes_csv(const std::string& path, const std::vector<double>& accuracies);

// Caches the model's feature path per dataset index; only valid while the
// parameters feeding that path do not move.
class FeatureCache {
public:
    FeatureCache(const FrameworkModel& model, const PackedDataset& ds);
    const Tensor& get(std::size_t index);
    void invalidate();

private:
    const FrameworkModel& model_;
    const PackedDataset& ds_;
    std::vector<Tensor> slots_;
    std::vector<char> valid_;
};

// T passes of batch-size-1 SGD on cross-entropy over the support set, in the
// given order, updating only the fast partition.
void inner_adapt(FrameworkModel& model, std::span<const Sample> support, const PackedDataset& ds,
                 std::size_t inner_steps, double nu_in, SelectionMode mode, Rng& rng,
                 FeatureCache* cache = nullptr, const TrainHooks* hooks = nullptr);

struct OuterStats {
    double loss = 0.0;
    double accuracy = 0.0;
};

// First-order meta-update: mean query cross-entropy at the adapted
// parameters, gradients into the slow partition only.
OuterStats outer_step(FrameworkModel& model, std::span<const Sample> query,
                      const PackedDataset& ds, double nu_out, SelectionMode mode, Rng& rng,
                      const TrainHooks* hooks = nullptr);

// Accuracy over samples; argmax may be restricted to an allowed class set
// (continual protocol evaluates over the classes seen so far).
double evaluate_accuracy(const FrameworkModel& model, const PackedDataset& ds,
                         std::span<const Sample> samples, SelectionMode mode, Rng& rng,
                         const std::vector<std::uint32_t>* allowed_classes = nullptr,
                         FeatureCache* cache = nullptr);

// ---- few-shot (Sib) ------------------------------------------------------------

struct FewshotTrainResult {
    std::vector<CurvePoint> curve;
    double best_val_accuracy = -1.0; // -1 when validation never ran
};

// Episodic meta-training. The AIM fast state persists across episodes; phi is
// regenerated per episode from feature averaging. Slow updates cover theta,
// tau and the synthetic-gradient net. Validation every val_every steps picks
// the checkpoint that is restored at the end.
FewshotTrainResult meta_train_fewshot(FrameworkModel& model, const PackedDataset& ds,
                                      const EpisodeSpec& episode, const TrainConfig& cfg,
                                      const TrainHooks* hooks = nullptr);

struct FewshotEval {
    double mean_accuracy = 0.0;
    double ci95 = 0.0;
    std::vector<double> per_episode;
};

// Meta-testing over episodes sampled from a split; adaptation happens on a
// clone, the incoming model is untouched. Final query evaluation uses
// eval_mode (hard by default).
FewshotEval meta_test_fewshot(const FrameworkModel& model, const PackedDataset& ds,
                              const EpisodeSpec& episode, const TrainConfig& cfg,
                              std::size_t episodes, Split split, SelectionMode eval_mode,
                              std::uint64_t seed, const TrainHooks* hooks = nullptr);

// ---- continual (Oml / Anml / OmlLinear) ----------------------------------------

struct ContinualTrainResult {
    std::vector<CurvePoint> curve;
};

// Sequential-trajectory meta-training: per step, fresh classifier columns for
// the trajectory's classes, inner adaptation over the class sequence, then a
// slow update on the trajectory's test samples plus a small replay batch of
// meta-train classes.
ContinualTrainResult meta_train_continual(FrameworkModel& model, const PackedDataset& ds,
                                          const TrainConfig& cfg,
                                          const TrainHooks* hooks = nullptr);

// Accumulated trajectory bookkeeping: grows class by class and is never
// sampled from during adaptation (no rehearsal).
struct TrajectoryState {
    std::vector<Sample> train_seen;          // accumulated support sets
    std::vector<Sample> test_seen;           // accumulated test sets
    std::vector<std::uint32_t> classes_seen; // arrival order
};

struct ContinualCurves {
    std::vector<std::uint32_t> classes_seen; // class arriving at each point
    std::vector<double> train_accuracy;      // on accumulated S'_train
    std::vector<double> test_accuracy;       // on accumulated S'_test
};

// Meta-test trajectory over unseen classes, one class at a time, fast weights
// only, hard selection during adaptation; accuracies over the accumulated
// train/test sets after each class. eval_mode switches the selection rule
// used for the accuracy evaluations (hard vs soft comparisons run from the
// same checkpoint). The incoming model is untouched.
ContinualCurves meta_test_continual(const FrameworkModel& model, const PackedDataset& ds,
                                    const std::vector<std::uint32_t>& classes,
                                    const TrainConfig& cfg, std::uint64_t seed,
                                    const TrainHooks* hooks = nullptr,
                                    SelectionMode eval_mode = SelectionMode::Hard);

// mean and sample standard deviation per curve position over repeated runs
struct CurveBand {
    std::vector<double> mean;
    std::vector<double> stddev;
};

CurveBand aggregate_curves(const std::vector<std::vector<double>>& runs);

} // namespace aimlab
