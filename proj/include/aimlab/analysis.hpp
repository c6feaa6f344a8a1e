#pragma once

#include <string>
#include <vector>

#include "aimlab/config.hpp"
#include "aimlab/meta.hpp"

namespace aimlab {

// Per-class mean activation frequencies under forced hard selection. Counts
// are kept as integers so the row-sum identity (= K exactly) survives the
// division.
struct HeatmapTable {
    std::vector<std::uint32_t> class_ids;          // row labels
    std::vector<std::vector<std::size_t>> counts;  // rows x M
    std::vector<std::size_t> samples_per_class;    // per row
    std::size_t mechanisms = 0;
    std::size_t k = 0;

    double value(std::size_t r, std::size_t m) const;
    double row_sum(std::size_t r) const; // (sum of counts) / n, exact
    // variance across classes of one mechanism's activation frequency
    double mechanism_variance(std::size_t m) const;
    std::string to_csv() const; // class_id,m0..m{M-1}
};

HeatmapTable heatmap_accumulate(const FrameworkModel& model, const PackedDataset& ds, Split split);

// Input-slot attention scores for probe samples across a checkpoint series.
struct TraceRow {
    std::size_t epoch;
    std::size_t sample_id;
    std::size_t mechanism;
    double score;
};

std::vector<TraceRow> attention_trace(const ModelConfig& model_cfg,
                                      const std::vector<std::string>& checkpoint_paths,
                                      const PackedDataset& ds,
                                      const std::vector<std::size_t>& probe_samples);

std::string trace_csv(const std::vector<TraceRow>& rows);

// mean input-slot score of active vs inhibited mechanisms over probe samples
struct ScoreSeparation {
    double active_mean = 0.0;
    double inhibited_mean = 0.0;
    double gap() const { return active_mean - inhibited_mean; }
};

ScoreSeparation score_separation(const FrameworkModel& model, const PackedDataset& ds,
                                 const std::vector<std::size_t>& probe_samples);

// ---- pipelines -------------------------------------------------------------------

struct FewshotRun {
    FrameworkModel model;
    FewshotTrainResult train;
    FewshotEval eval;
    double pretrain_accuracy = 0.0;
};

FewshotRun run_fewshot_pipeline(const RunConfig& cfg, const PackedDataset& ds,
                                const TrainHooks* hooks = nullptr);

struct ContinualRun {
    FrameworkModel model;
    ContinualTrainResult train;
    ContinualCurves test;
};

ContinualRun run_continual_pipeline(const RunConfig& cfg, const PackedDataset& ds,
                                    const TrainHooks* hooks = nullptr);

// ---- gradient verification -----------------------------------------------------

struct GradcheckReport {
    std::vector<std::pair<std::string, double>> checks; // name -> max rel err
    double worst = 0.0;
    bool passed(double tolerance = 1e-5) const { return worst < tolerance; }
};

// Finite-difference checks for every differentiable primitive and each
// composed framework variant, 10 random points each.
GradcheckReport run_gradcheck_suite(std::uint64_t seed = 20240501);

// ---- sweeps -----------------------------------------------------------------------

struct SweepPoint {
    std::size_t value = 0;
    bool valid = false;
    std::string note;     // why a value was skipped
    double accuracy = 0.0;
    double ci95 = 0.0;
    double zero_meaned = 0.0;
};

// One full train+eval per value over the few-shot pipeline, shared seed.
// Invalid values are skipped and reported in the table.
std::vector<SweepPoint> sweep(const std::string& param, const std::vector<std::size_t>& values,
                              const RunConfig& base, const PackedDataset& ds);

std::string sweep_csv(const std::string& param, const std::vector<SweepPoint>& points);

} // namespace aimlab
