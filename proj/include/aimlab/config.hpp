#pragma once

#include <string>

#include "aimlab/data.hpp"
#include "aimlab/meta.hpp"
#include "aimlab/models.hpp"

namespace aimlab {

// Fully resolved run configuration. Serializes to flat JSON with dotted keys
// so a run.json echo can be fed back through --config for a bit-identical
// rerun.
struct RunConfig {
    enum class Mode { Fewshot, Continual };

    // dataset: packed file when set, otherwise the synthetic generator
    std::string dataset_path;
    SyntheticSpec synthetic;

    std::string variant = "sib";
    std::size_t backbone_layers = 4;
    std::size_t backbone_channels = 16;
    std::string backbone_strides = "2,2,2,2";
    std::size_t nm_channels = 16; // anml neuromodulatory net
    std::size_t reduce_dim = 0;
    double tau_init = 10.0;

    AimConfig aim;

    EpisodeSpec episode;
    TrainConfig train;

    std::size_t pretrain_epochs = 10;
    double pretrain_step = 0.05;

    std::size_t eval_episodes = 2000;
    std::string eval_selection_mode = "hard";

    std::uint64_t seed = 1;
    std::string out_dir;

    static RunConfig defaults(Mode mode);

    std::vector<std::size_t> strides() const;
    std::string to_json() const;                  // flat, dotted keys, ordered
    void load_overrides(const std::string& path); // json file on top of *this
    void set(const std::string& key, const std::string& value);
    void echo(const std::string& path) const; // writes run.json
    void validate() const;
};

PackedDataset dataset_from_config(const RunConfig& cfg);
ModelConfig model_config_from(const RunConfig& cfg, const PackedDataset& ds);

} // namespace aimlab
