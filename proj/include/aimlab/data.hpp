#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "aimlab/rng.hpp"
#include "aimlab/tensor.hpp"

namespace aimlab {

enum class Split { MetaTrain, MetaVal, MetaTest };

std::string to_string(Split split);

struct SplitManifest {
    std::vector<std::uint32_t> meta_train;
    std::vector<std::uint32_t> meta_val;
    std::vector<std::uint32_t> meta_test;

    const std::vector<std::uint32_t>& classes(Split split) const;
};

// Image dataset in the packed `AIMD` container. Raw pixel storage is kept so
// a save reproduces the file byte for byte; image() hands out the [0,1]
// float64 view the models consume.
struct PackedDataset {
    enum class Dtype : std::uint8_t { U8 = 0, F64 = 1 };

    Dtype dtype = Dtype::F64;
    std::size_t n = 0, channels = 0, height = 0, width = 0;
    std::vector<std::uint8_t> raw_u8;
    std::vector<double> raw_f64;
    std::vector<std::uint32_t> labels;
    std::vector<std::string> class_names; // optional, may be empty
    SplitManifest splits;

    // synthetic provenance, empty for real packs
    std::vector<std::vector<double>> prototypes; // per class, C*H*W pixels

    std::size_t class_count() const;
    std::size_t pixels() const { return channels * height * width; }
    Tensor image(std::size_t i) const;
    const std::vector<std::size_t>& class_indices(std::uint32_t class_id) const;

    void validate() const; // label range + split disjointness, hard assertion

private:
    mutable std::vector<std::vector<std::size_t>> by_class_;
    void build_index() const;
};

PackedDataset load_packed(const std::string& path);
void save_packed(const PackedDataset& ds, const std::string& path);

// Few-shot task: k relabeled classes, disjoint support and query sets.
struct EpisodeSpec {
    std::size_t ways = 5;
    std::size_t shots = 1;
    std::size_t queries = 15;
    void validate() const;
};

struct Sample {
    std::size_t index; // into the dataset
    std::size_t label; // relabeled for episodes, absolute for trajectories
};

struct Episode {
    std::vector<std::uint32_t> classes; // position = relabeled id
    std::vector<Sample> support;
    std::vector<Sample> query;
};

Episode sample_episode(const PackedDataset& ds, const EpisodeSpec& spec, Split split, Rng& rng);

// Continual task sequence: distinct classes, per class a support set of
// `shots` images and a test set of the remaining images.
struct TrajectoryTask {
    std::uint32_t class_id;
    std::vector<std::size_t> support;
    std::vector<std::size_t> test;
};

struct Trajectory {
    std::vector<TrajectoryTask> tasks;
};

Trajectory sample_trajectory(const PackedDataset& ds, std::size_t classes_per_traj,
                             std::size_t shots, Split split, Rng& rng);
Trajectory trajectory_over_classes(const PackedDataset& ds,
                                   const std::vector<std::uint32_t>& classes, std::size_t shots,
                                   Rng& rng);

// Deterministic oracle dataset: each class is a fixed random prototype image
// plus Gaussian pixel noise. noise_std = 0 makes classes exactly separable.
struct SyntheticSpec {
    std::size_t classes = 20;
    std::size_t samples_per_class = 40;
    std::size_t image_size = 28; // square, single channel
    std::uint64_t prototype_seed = 7;
    double noise_std = 0.1;
    std::size_t val_classes = 2;
    std::size_t test_classes = 5;
    void validate() const;
};

PackedDataset gen_synthetic(const SyntheticSpec& spec, Rng& rng);

// Brute-force nearest-prototype classifier accuracy (the dataset's
// Bayes-proxy ceiling). Only meaningful for synthetic packs.
double nearest_prototype_accuracy(const PackedDataset& ds);

} // namespace aimlab
