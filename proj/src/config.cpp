#include "aimlab/config.hpp"

#include <fstream>
#include <sstream>

#include "json.hpp"

namespace aimlab {

RunConfig RunConfig::defaults(Mode mode) {
    RunConfig cfg;
    if (mode == Mode::Fewshot) {
        cfg.variant = "sib";
        cfg.synthetic = SyntheticSpec{.classes = 20,
                                      .samples_per_class = 40,
                                      .image_size = 28,
                                      .prototype_seed = 7,
                                      .noise_std = 0.1,
                                      .val_classes = 5,
                                      .test_classes = 5};
        cfg.backbone_layers = 4;
        cfg.backbone_channels = 16;
        cfg.backbone_strides = "2,2,2,2";
        cfg.reduce_dim = 0;
        cfg.aim = AimConfig{.m = 32, .k = 8, .l = 2, .d = 32, .d_hidden = 64, .d_out = 64};
        cfg.episode = EpisodeSpec{.ways = 5, .shots = 1, .queries = 15};
        cfg.train.inner_steps = 3;
        cfg.train.nu_in = 3e-3;
        cfg.train.nu_out = 5e-3;
        cfg.train.eps_syn = 1e-3;
        cfg.train.total_steps = 2000;
        cfg.train.val_every = 250;
        cfg.train.val_episodes = 100;
    } else {
        cfg.variant = "oml";
        cfg.synthetic = SyntheticSpec{.classes = 60,
                                      .samples_per_class = 30,
                                      .image_size = 28,
                                      .prototype_seed = 7,
                                      .noise_std = 0.1,
                                      .val_classes = 0,
                                      .test_classes = 20};
        cfg.backbone_layers = 2;
        cfg.backbone_channels = 8;
        cfg.backbone_strides = "2,2";
        cfg.reduce_dim = 12;
        cfg.aim = AimConfig{.m = 64, .k = 10, .l = 2, .d = 16, .d_hidden = 32, .d_out = 64};
        cfg.train.inner_steps = 1;
        cfg.train.nu_in = 1e-2;
        cfg.train.nu_out = 1e-2;
        cfg.train.total_steps = 4000;
        cfg.train.remember_batch = 16;
        cfg.train.classes_per_traj = 1;
        cfg.train.traj_shots = 15;
        cfg.train.val_every = 0;
    }
    return cfg;
}

std::vector<std::size_t> RunConfig::strides() const {
    std::vector<std::size_t> out;
    std::stringstream ss(backbone_strides);
    std::string piece;
    while (std::getline(ss, piece, ',')) {
        if (!piece.empty()) out.push_back(static_cast<std::size_t>(std::stoul(piece)));
    }
    if (out.empty()) throw ContractError("config: backbone.strides is empty");
    return out;
}

namespace {

// one row per key keeps the echo diffable and override-friendly
template <typename F>
void for_each_key(F&& f) {
    f("dataset.path");
    f("synthetic.classes");
    f("synthetic.samples_per_class");
    f("synthetic.image_size");
    f("synthetic.prototype_seed");
    f("synthetic.noise_std");
    f("synthetic.val_classes");
    f("synthetic.test_classes");
    f("model.variant");
    f("model.backbone_layers");
    f("model.backbone_channels");
    f("model.backbone_strides");
    f("model.nm_channels");
    f("model.reduce_dim");
    f("model.tau_init");
    f("aim.m");
    f("aim.k");
    f("aim.l");
    f("aim.d");
    f("aim.d_hidden");
    f("aim.d_out");
    f("aim.selection_mode");
    f("aim.soft_threshold");
    f("episode.ways");
    f("episode.shots");
    f("episode.queries");
    f("train.inner_steps");
    f("train.nu_in");
    f("train.nu_out");
    f("train.eps_syn");
    f("train.synthetic_steps");
    f("train.total_steps");
    f("train.remember_batch");
    f("train.classes_per_traj");
    f("train.traj_shots");
    f("train.val_every");
    f("train.val_episodes");
    f("train.curve_every");
    f("train.checkpoint_every");
    f("pretrain.epochs");
    f("pretrain.step_size");
    f("eval.episodes");
    f("eval.selection_mode");
    f("seed");
    f("out_dir");
}

} // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
    auto as_size = [&] { return static_cast<std::size_t>(std::stoull(value)); };
    auto as_u64 = [&] { return static_cast<std::uint64_t>(std::stoull(value)); };
    auto as_double = [&] { return std::stod(value); };

    if (key == "dataset.path") dataset_path = value;
    else if (key == "synthetic.classes") synthetic.classes = as_size();
    else if (key == "synthetic.samples_per_class") synthetic.samples_per_class = as_size();
    else if (key == "synthetic.image_size") synthetic.image_size = as_size();
    else if (key == "synthetic.prototype_seed") synthetic.prototype_seed = as_u64();
    else if (key == "synthetic.noise_std") synthetic.noise_std = as_double();
    else if (key == "synthetic.val_classes") synthetic.val_classes = as_size();
    else if (key == "synthetic.test_classes") synthetic.test_classes = as_size();
    else if (key == "model.variant") variant = value;
    else if (key == "model.backbone_layers") backbone_layers = as_size();
    else if (key == "model.backbone_channels") backbone_channels = as_size();
    else if (key == "model.backbone_strides") backbone_strides = value;
    else if (key == "model.nm_channels") nm_channels = as_size();
    else if (key == "model.reduce_dim") reduce_dim = as_size();
    else if (key == "model.tau_init") tau_init = as_double();
    else if (key == "aim.m") aim.m = as_size();
    else if (key == "aim.k") aim.k = as_size();
    else if (key == "aim.l") aim.l = as_size();
    else if (key == "aim.d") aim.d = as_size();
    else if (key == "aim.d_hidden") aim.d_hidden = as_size();
    else if (key == "aim.d_out") aim.d_out = as_size();
    else if (key == "aim.selection_mode") aim.selection_mode = selection_mode_from_string(value);
    else if (key == "aim.soft_threshold") aim.soft_threshold = as_double();
    else if (key == "episode.ways") episode.ways = as_size();
    else if (key == "episode.shots") episode.shots = as_size();
    else if (key == "episode.queries") episode.queries = as_size();
    else if (key == "train.inner_steps") train.inner_steps = as_size();
    else if (key == "train.nu_in") train.nu_in = as_double();
    else if (key == "train.nu_out") train.nu_out = as_double();
    else if (key == "train.eps_syn") train.eps_syn = as_double();
    else if (key == "train.synthetic_steps") train.synthetic_steps = as_size();
    else if (key == "train.total_steps") train.total_steps = as_size();
    else if (key == "train.remember_batch") train.remember_batch = as_size();
    else if (key == "train.classes_per_traj") train.classes_per_traj = as_size();
    else if (key == "train.traj_shots") train.traj_shots = as_size();
    else if (key == "train.val_every") train.val_every = as_size();
    else if (key == "train.val_episodes") train.val_episodes = as_size();
    else if (key == "train.curve_every") train.curve_every = as_size();
    else if (key == "train.checkpoint_every") train.checkpoint_every = as_size();
    else if (key == "pretrain.epochs") pretrain_epochs = as_size();
    else if (key == "pretrain.step_size") pretrain_step = as_double();
    else if (key == "eval.episodes") eval_episodes = as_size();
    else if (key == "eval.selection_mode") eval_selection_mode = value;
    else if (key == "seed") seed = as_u64();
    else if (key == "out_dir") out_dir = value;
    else throw ContractError("config: unknown key '" + key + "'");
}

namespace {

std::string get_value(const RunConfig& c, const std::string& key) {
    std::ostringstream os;
    os.precision(17);
    if (key == "dataset.path") os << c.dataset_path;
    else if (key == "synthetic.classes") os << c.synthetic.classes;
    else if (key == "synthetic.samples_per_class") os << c.synthetic.samples_per_class;
    else if (key == "synthetic.image_size") os << c.synthetic.image_size;
    else if (key == "synthetic.prototype_seed") os << c.synthetic.prototype_seed;
    else if (key == "synthetic.noise_std") os << c.synthetic.noise_std;
    else if (key == "synthetic.val_classes") os << c.synthetic.val_classes;
    else if (key == "synthetic.test_classes") os << c.synthetic.test_classes;
    else if (key == "model.variant") os << c.variant;
    else if (key == "model.backbone_layers") os << c.backbone_layers;
    else if (key == "model.backbone_channels") os << c.backbone_channels;
    else if (key == "model.backbone_strides") os << c.backbone_strides;
    else if (key == "model.nm_channels") os << c.nm_channels;
    else if (key == "model.reduce_dim") os << c.reduce_dim;
    else if (key == "model.tau_init") os << c.tau_init;
    else if (key == "aim.m") os << c.aim.m;
    else if (key == "aim.k") os << c.aim.k;
    else if (key == "aim.l") os << c.aim.l;
    else if (key == "aim.d") os << c.aim.d;
    else if (key == "aim.d_hidden") os << c.aim.d_hidden;
    else if (key == "aim.d_out") os << c.aim.d_out;
    else if (key == "aim.selection_mode") os << to_string(c.aim.selection_mode);
    else if (key == "aim.soft_threshold") os << c.aim.soft_threshold;
    else if (key == "episode.ways") os << c.episode.ways;
    else if (key == "episode.shots") os << c.episode.shots;
    else if (key == "episode.queries") os << c.episode.queries;
    else if (key == "train.inner_steps") os << c.train.inner_steps;
    else if (key == "train.nu_in") os << c.train.nu_in;
    else if (key == "train.nu_out") os << c.train.nu_out;
    else if (key == "train.eps_syn") os << c.train.eps_syn;
    else if (key == "train.synthetic_steps") os << c.train.synthetic_steps;
    else if (key == "train.total_steps") os << c.train.total_steps;
    else if (key == "train.remember_batch") os << c.train.remember_batch;
    else if (key == "train.classes_per_traj") os << c.train.classes_per_traj;
    else if (key == "train.traj_shots") os << c.train.traj_shots;
    else if (key == "train.val_every") os << c.train.val_every;
    else if (key == "train.val_episodes") os << c.train.val_episodes;
    else if (key == "train.curve_every") os << c.train.curve_every;
    else if (key == "train.checkpoint_every") os << c.train.checkpoint_every;
    else if (key == "pretrain.epochs") os << c.pretrain_epochs;
    else if (key == "pretrain.step_size") os << c.pretrain_step;
    else if (key == "eval.episodes") os << c.eval_episodes;
    else if (key == "eval.selection_mode") os << c.eval_selection_mode;
    else if (key == "seed") os << c.seed;
    else if (key == "out_dir") os << c.out_dir;
    else throw ContractError("config: unknown key '" + key + "'");
    return os.str();
}

} // namespace

std::string RunConfig::to_json() const {
    nlohmann::ordered_json j;
    for_each_key([&](const char* key) { j[key] = get_value(*this, key); });
    return j.dump(1);
}

void RunConfig::load_overrides(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ParseError("cannot open config " + path);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const std::exception& e) {
        throw ParseError(std::string("config: ") + e.what());
    }
    for (const auto& [key, value] : j.items()) {
        if (value.is_string()) {
            set(key, value.get<std::string>());
        } else {
            set(key, value.dump());
        }
    }
}

void RunConfig::echo(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw ContractError("cannot write " + path);
    os << to_json() << "\n";
}

void RunConfig::validate() const {
    aim.validate();
    train.validate();
    episode.validate();
    if (dataset_path.empty()) synthetic.validate();
    (void)strides();
    variant_from_string(variant);
    selection_mode_from_string(eval_selection_mode);
}

PackedDataset dataset_from_config(const RunConfig& cfg) {
    if (!cfg.dataset_path.empty()) return load_packed(cfg.dataset_path);
    Rng rng(cfg.synthetic.prototype_seed ^ 0x5bf03635ull);
    return gen_synthetic(cfg.synthetic, rng);
}

ModelConfig model_config_from(const RunConfig& cfg, const PackedDataset& ds) {
    ModelConfig mc;
    mc.variant = variant_from_string(cfg.variant);
    const auto strides = cfg.strides();
    mc.backbone = ConvBackboneSpec::stack(cfg.backbone_layers, cfg.backbone_channels, strides,
                                          ds.channels, ds.height, ds.width);
    if (mc.variant == Variant::Anml) {
        mc.nm_backbone = ConvBackboneSpec::stack(cfg.backbone_layers, cfg.nm_channels, strides,
                                                 ds.channels, ds.height, ds.width);
    }
    mc.aim = cfg.aim;
    mc.reduce_dim = cfg.reduce_dim;
    mc.tau_init = cfg.tau_init;
    mc.classes = mc.variant == Variant::Sib ? cfg.episode.ways : ds.class_count();
    return mc;
}

} // namespace aimlab
