#include "aimlab/models.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace aimlab {

// ---- conv backbone -----------------------------------------------------------

ConvBackboneSpec ConvBackboneSpec::stack(std::size_t layer_count, std::size_t channels,
                                         const std::vector<std::size_t>& strides,
                                         std::size_t in_channels, std::size_t height,
                                         std::size_t width) {
    ConvBackboneSpec spec;
    spec.in_channels = in_channels;
    spec.height = height;
    spec.width = width;
    std::size_t in = in_channels;
    for (std::size_t i = 0; i < layer_count; ++i) {
        const std::size_t stride = strides.empty() ? 2 : strides[i % strides.size()];
        spec.layers.push_back({in, channels, stride});
        in = channels;
    }
    return spec;
}

void ConvBackboneSpec::validate() const {
    if (layers.empty()) throw ContractError("backbone: needs at least one layer");
    if (layers.front().in_channels != in_channels) {
        throw ContractError("backbone: first layer channels disagree with the input");
    }
    for (std::size_t i = 1; i < layers.size(); ++i) {
        if (layers[i].in_channels != layers[i - 1].out_channels) {
            throw ContractError("backbone: channel chain broken at layer " + std::to_string(i));
        }
    }
    output_dim(); // throws if a layer collapses the map
}

std::size_t ConvBackboneSpec::output_dim() const {
    std::size_t h = height, w = width;
    for (const auto& layer : layers) {
        // 3x3 kernel, padding 1
        if (h + 2 < 3 || w + 2 < 3) throw ContractError("backbone: feature map vanished");
        h = (h + 2 - 3) / layer.stride + 1;
        w = (w + 2 - 3) / layer.stride + 1;
        if (h == 0 || w == 0) throw ContractError("backbone: feature map vanished");
    }
    return layers.back().out_channels * h * w;
}

ConvBackbone ConvBackbone::init(const ConvBackboneSpec& spec, Rng& rng) {
    spec.validate();
    ConvBackbone bb;
    bb.spec = spec;
    for (const auto& layer : spec.layers) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(layer.in_channels * 9));
        bb.kernels.push_back(
            Tensor::uniform({layer.out_channels, layer.in_channels, 3, 3}, bound, rng, true));
    }
    return bb;
}

Tensor ConvBackbone::forward(const Tensor& image) const {
    if (image.shape().size() != 3 || image.shape()[0] != spec.in_channels ||
        image.shape()[1] != spec.height || image.shape()[2] != spec.width) {
        throw DimensionError("backbone: image " + shape_str(image.shape()) +
                             " does not match spec input [" + std::to_string(spec.in_channels) +
                             "x" + std::to_string(spec.height) + "x" + std::to_string(spec.width) +
                             "]");
    }
    Tensor x = image;
    for (std::size_t i = 0; i < kernels.size(); ++i) {
        x = relu(conv2d(x, kernels[i], spec.layers[i].stride, 1));
    }
    return flatten(x);
}

void ConvBackbone::freeze() {
    for (auto& k : kernels) k.set_requires_grad(false);
}

bool ConvBackbone::frozen() const {
    return std::all_of(kernels.begin(), kernels.end(),
                       [](const Tensor& k) { return !k.requires_grad(); });
}

Tensor backbone_forward(const ConvBackbone& backbone, const Tensor& image) {
    return backbone.forward(image);
}

// ---- linear / cosine head ------------------------------------------------------

Linear Linear::init(std::size_t in, std::size_t out, Rng& rng, bool zero_init) {
    Linear l;
    if (zero_init) {
        l.w = Tensor::zeros({in, out}, true);
        l.b = Tensor::zeros({out}, true);
    } else {
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        l.w = Tensor::uniform({in, out}, bound, rng, true);
        l.b = Tensor::zeros({out}, true);
    }
    return l;
}

Tensor Linear::forward(const Tensor& x) const { return add(vecmat(x, w), b); }

Tensor cosine_logits(const Tensor& z, const std::vector<Tensor>& phi_rows, const Tensor& tau) {
    Tensor zn = l2_normalize(z);
    std::vector<Tensor> logits;
    logits.reserve(phi_rows.size());
    for (const auto& phi : phi_rows) {
        logits.push_back(scale(dot(zn, l2_normalize(phi)), tau));
    }
    return concat(logits);
}

Tensor cosine_logits(const Tensor& z, const CosineHead& head) {
    std::vector<Tensor> rows;
    const std::size_t classes = head.phi.shape()[0];
    rows.reserve(classes);
    for (std::size_t c = 0; c < classes; ++c) rows.push_back(row(head.phi, c));
    return cosine_logits(z, rows, head.tau);
}

// ---- feature averaging ------------------------------------------------------------

std::vector<Tensor> feature_average_init(const std::vector<std::vector<Tensor>>& support_by_class,
                                         const Tensor& theta) {
    std::vector<Tensor> rows;
    rows.reserve(support_by_class.size());
    for (std::size_t c = 0; c < support_by_class.size(); ++c) {
        const auto& feats = support_by_class[c];
        if (feats.empty()) {
            throw ContractError("feature_average_init: class " + std::to_string(c) +
                                " has no support features");
        }
        Tensor acc;
        for (const auto& f : feats) {
            Tensor n = l2_normalize(f);
            acc = acc.defined() ? add(acc, n) : n;
        }
        Tensor w_avg = scale(acc, 1.0 / static_cast<double>(feats.size()));
        bool all_zero = true;
        for (double v : w_avg.data()) all_zero = all_zero && v == 0.0;
        if (all_zero) numeric_flags().zero_norm_events += 1; // cancelled support set
        rows.push_back(mul(theta, w_avg));
    }
    return rows;
}

// ---- synthetic gradient net ---------------------------------------------------------

SyntheticGradNet SyntheticGradNet::init(std::size_t ways, std::size_t d_out, Rng& rng) {
    SyntheticGradNet net;
    net.ways = ways;
    net.d_out = d_out;
    const std::size_t hidden = 8 * ways;
    net.fc1 = Linear::init(ways * ways, hidden, rng);
    net.fc2 = Linear::init(hidden, hidden, rng);
    net.fc3 = Linear::init(hidden, ways * d_out, rng, /*zero_init=*/true);
    return net;
}

Tensor SyntheticGradNet::forward(const Tensor& input) const {
    return fc3.forward(relu(fc2.forward(relu(fc1.forward(input)))));
}

std::vector<Tensor> synthetic_update(std::vector<Tensor> phi_rows, const Tensor& tau,
                                     const std::vector<Tensor>& query_features,
                                     const SyntheticGradNet& net, double eps, std::size_t steps) {
    if (steps < 1) throw ContractError("synthetic_update: steps must be at least 1");
    if (query_features.empty()) throw ContractError("synthetic_update: no query features");
    const std::size_t k = phi_rows.size();
    const std::size_t d_out = phi_rows.front().size();
    if (net.ways != k || net.d_out != d_out) {
        throw ContractError("synthetic_update: net emits " + std::to_string(net.ways) + "x" +
                            std::to_string(net.d_out) + ", phi is " + std::to_string(k) + "x" +
                            std::to_string(d_out));
    }

    std::vector<Tensor> query_norm;
    query_norm.reserve(query_features.size());
    for (const auto& q : query_features) query_norm.push_back(l2_normalize(q));
    const double inv_q = 1.0 / static_cast<double>(query_norm.size());

    for (std::size_t s = 0; s < steps; ++s) {
        // soft class-mean query logits, label-free
        std::vector<Tensor> mean_rows(k);
        for (const auto& qn : query_norm) {
            std::vector<Tensor> per_class;
            per_class.reserve(k);
            for (const auto& phi : phi_rows) {
                per_class.push_back(scale(dot(qn, l2_normalize(phi)), tau));
            }
            Tensor logits = concat(per_class);
            Tensor probs = softmax(logits, 0);
            for (std::size_t c = 0; c < k; ++c) {
                Tensor term = scale(logits, take(probs, c));
                mean_rows[c] = mean_rows[c].defined() ? add(mean_rows[c], term) : term;
            }
        }
        for (auto& r : mean_rows) r = scale(r, inv_q);
        Tensor g = net.forward(concat(mean_rows));
        if (g.size() != k * d_out) {
            throw ContractError("synthetic_update: gradient size " + std::to_string(g.size()) +
                                " does not match phi " + std::to_string(k * d_out));
        }
        Tensor g2 = reshape(g, {k, d_out});
        for (std::size_t c = 0; c < k; ++c) {
            phi_rows[c] = sub(phi_rows[c], scale(row(g2, c), eps));
        }
    }
    return phi_rows;
}

Tensor anml_modulate(const Tensor& nm, const Tensor& p) {
    if (nm.shape() != p.shape()) {
        throw DimensionError("anml_modulate: shapes " + shape_str(nm.shape()) + " and " +
                             shape_str(p.shape()) + " differ");
    }
    return mul(nm, p);
}

// ---- framework model -----------------------------------------------------------------

Variant variant_from_string(const std::string& s) {
    if (s == "sib") return Variant::Sib;
    if (s == "oml") return Variant::Oml;
    if (s == "anml") return Variant::Anml;
    if (s == "oml-linear") return Variant::OmlLinear;
    throw ContractError("unknown variant '" + s + "'");
}

std::string to_string(Variant v) {
    switch (v) {
        case Variant::Sib: return "sib";
        case Variant::Oml: return "oml";
        case Variant::Anml: return "anml";
        case Variant::OmlLinear: return "oml-linear";
    }
    return "?";
}

bool FastSlowPartition::is_fast(const std::string& name) const {
    return std::find(fast.begin(), fast.end(), name) != fast.end();
}

bool FastSlowPartition::is_slow(const std::string& name) const {
    return std::find(slow.begin(), slow.end(), name) != slow.end();
}

void FastSlowPartition::validate_cover(const ParamMap& params) const {
    std::set<std::string> seen;
    auto absorb = [&](const std::vector<std::string>& names, const char* which) {
        for (const auto& n : names) {
            if (!params.contains(n)) {
                throw ContractError(std::string("partition: ") + which + " lists unknown " + n);
            }
            if (!seen.insert(n).second) {
                throw ContractError("partition: " + n + " assigned twice");
            }
        }
    };
    absorb(fast, "fast");
    absorb(slow, "slow");
    absorb(frozen, "frozen");
    for (const auto& [name, t] : params.items) {
        if (seen.count(name) == 0) {
            throw ContractError("partition: " + name + " is not assigned");
        }
    }
}

void ModelConfig::validate() const {
    backbone.validate();
    if (variant == Variant::Anml) nm_backbone.validate();
    if (variant != Variant::OmlLinear) aim.validate();
    if (classes < 2) throw ContractError("model: needs at least two classes");
}

std::size_t baseline_hidden_for_equal_params(std::size_t feature_dim, const AimConfig& aim,
                                             std::size_t classes) {
    const std::size_t aim_params = aim.m * aim.d_hidden + aim.m * aim.d_hidden * aim.d +
                                   feature_dim * aim.d + aim.m * feature_dim * aim.d_out;
    const std::size_t aim_head = classes * aim.d_out + classes;
    const std::size_t denom = feature_dim + 1 + classes;
    std::size_t h = (aim_params + aim_head) / denom;
    return std::max<std::size_t>(h, 1);
}

FrameworkModel FrameworkModel::build(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    FrameworkModel m;
    m.config = cfg;

    m.backbone = ConvBackbone::init(cfg.backbone, rng);
    for (std::size_t i = 0; i < m.backbone.kernels.size(); ++i) {
        m.params.add("backbone.conv" + std::to_string(i), m.backbone.kernels[i]);
    }
    std::size_t feat_dim = cfg.backbone.output_dim();

    if (cfg.variant == Variant::Anml) {
        m.nm = ConvBackbone::init(cfg.nm_backbone, rng);
        if (cfg.nm_backbone.output_dim() != feat_dim) {
            throw ContractError("anml: neuromodulatory output " +
                                std::to_string(cfg.nm_backbone.output_dim()) +
                                " must match prediction output " + std::to_string(feat_dim));
        }
        for (std::size_t i = 0; i < m.nm.kernels.size(); ++i) {
            m.params.add("nm.conv" + std::to_string(i), m.nm.kernels[i]);
        }
    }

    if (cfg.reduce_dim > 0) {
        m.reduce = Linear::init(feat_dim, cfg.reduce_dim, rng);
        m.params.add("reduce.w", m.reduce.w);
        m.params.add("reduce.b", m.reduce.b);
        feat_dim = cfg.reduce_dim;
    }

    if (cfg.variant == Variant::OmlLinear) {
        std::size_t hidden = cfg.baseline_hidden;
        if (hidden == 0) hidden = baseline_hidden_for_equal_params(feat_dim, cfg.aim, cfg.classes);
        m.baseline = Linear::init(feat_dim, hidden, rng);
        m.params.add("baseline.w", m.baseline.w);
        m.params.add("baseline.b", m.baseline.b);
        m.head = Linear::init(hidden, cfg.classes, rng);
        m.params.add("head.w", m.head.w);
        m.params.add("head.b", m.head.b);
    } else {
        m.aim = AimParams::init(feat_dim, cfg.aim, rng);
        for (std::size_t i = 0; i < cfg.aim.m; ++i) {
            m.params.add("aim.h." + std::to_string(i), m.aim.h[i]);
        }
        for (std::size_t i = 0; i < cfg.aim.m; ++i) {
            m.params.add("aim.wq." + std::to_string(i), m.aim.wq[i]);
        }
        m.params.add("aim.wk", m.aim.wk);
        for (std::size_t i = 0; i < cfg.aim.m; ++i) {
            m.params.add("aim.wm." + std::to_string(i), m.aim.wm[i]);
        }
        if (cfg.variant == Variant::Sib) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.aim.d_out));
            m.cosine.phi = Tensor::uniform({cfg.classes, cfg.aim.d_out}, bound, rng, true);
            m.cosine.tau = Tensor::scalar(cfg.tau_init, true);
            m.params.add("head.phi", m.cosine.phi);
            m.params.add("head.tau", m.cosine.tau);
            m.gen.theta = Tensor::full({cfg.aim.d_out}, 1.0, true);
            m.params.add("gen.theta", m.gen.theta);
            m.sgn = SyntheticGradNet::init(cfg.classes, cfg.aim.d_out, rng);
            m.params.add("sgn.fc1.w", m.sgn.fc1.w);
            m.params.add("sgn.fc1.b", m.sgn.fc1.b);
            m.params.add("sgn.fc2.w", m.sgn.fc2.w);
            m.params.add("sgn.fc2.b", m.sgn.fc2.b);
            m.params.add("sgn.fc3.w", m.sgn.fc3.w);
            m.params.add("sgn.fc3.b", m.sgn.fc3.b);
        } else {
            m.head = Linear::init(cfg.aim.d_out, cfg.classes, rng);
            m.params.add("head.w", m.head.w);
            m.params.add("head.b", m.head.b);
        }
    }

    // fast / slow / frozen assignment per framework
    auto with_prefix = [&](const std::string& prefix) {
        std::vector<std::string> out;
        for (const auto& [name, t] : m.params.items) {
            if (name.rfind(prefix, 0) == 0) out.push_back(name);
        }
        return out;
    };
    auto extend = [](std::vector<std::string>& into, const std::vector<std::string>& more) {
        into.insert(into.end(), more.begin(), more.end());
    };

    switch (cfg.variant) {
        case Variant::Sib:
            extend(m.partition.fast, with_prefix("aim."));
            m.partition.fast.push_back("head.phi");
            m.partition.slow = {"gen.theta", "head.tau"};
            extend(m.partition.slow, with_prefix("sgn."));
            extend(m.partition.frozen, with_prefix("backbone."));
            m.backbone.freeze();
            break;
        case Variant::Oml:
            extend(m.partition.fast, with_prefix("aim."));
            extend(m.partition.fast, with_prefix("head."));
            extend(m.partition.slow, with_prefix("backbone."));
            extend(m.partition.slow, with_prefix("reduce."));
            break;
        case Variant::OmlLinear:
            extend(m.partition.fast, with_prefix("baseline."));
            extend(m.partition.fast, with_prefix("head."));
            extend(m.partition.slow, with_prefix("backbone."));
            extend(m.partition.slow, with_prefix("reduce."));
            break;
        case Variant::Anml:
            extend(m.partition.fast, with_prefix("backbone."));
            extend(m.partition.fast, with_prefix("reduce."));
            extend(m.partition.fast, with_prefix("aim."));
            extend(m.partition.fast, with_prefix("head."));
            extend(m.partition.slow, with_prefix("nm."));
            break;
    }
    m.partition.validate_cover(m.params);
    return m;
}

Tensor FrameworkModel::features(const Tensor& image) const {
    Tensor z;
    if (config.variant == Variant::Anml) {
        z = anml_modulate(nm.forward(image), backbone.forward(image));
    } else {
        z = backbone.forward(image);
    }
    if (has_reduce()) z = reduce.forward(z);
    return z;
}

bool FrameworkModel::features_are_inner_constant() const {
    switch (config.variant) {
        case Variant::Sib:
        case Variant::Oml:
        case Variant::OmlLinear: return true; // extractor is slow or frozen
        case Variant::Anml: return false;     // prediction net adapts
    }
    return false;
}

ForwardResult FrameworkModel::forward_from_features(const Tensor& z, SelectionMode mode,
                                                    Rng& rng) const {
    ForwardResult out;
    if (config.variant == Variant::OmlLinear) {
        out.logits = head.forward(baseline.forward(z));
        return out;
    }
    AimOutput ao = aim_apply(z, aim, config.aim, mode, rng);
    out.mask = std::move(ao.mask);
    out.has_mask = true;
    if (config.variant == Variant::Sib) {
        out.logits = cosine_logits(ao.value, cosine);
    } else {
        out.logits = head.forward(ao.value);
    }
    return out;
}

ForwardResult FrameworkModel::forward(const Tensor& image, SelectionMode mode, Rng& rng) const {
    return forward_from_features(features(image), mode, rng);
}

void FrameworkModel::reinit_head_class(std::size_t class_id, Rng& rng) {
    if (config.variant == Variant::Sib) {
        throw ContractError("reinit_head_class: sib regenerates phi per episode");
    }
    if (class_id >= config.classes) throw ContractError("reinit_head_class: class out of range");
    const std::size_t in = head.in_dim(), out = head.out_dim();
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    for (std::size_t i = 0; i < in; ++i) {
        head.w.at(i * out + class_id) = rng.uniform(-bound, bound);
    }
    head.b.at(class_id) = 0.0;
}

std::vector<Tensor> FrameworkModel::all_tensors() const {
    std::vector<Tensor> out;
    out.reserve(params.items.size());
    for (const auto& [name, t] : params.items) out.push_back(t);
    return out;
}

FrameworkModel FrameworkModel::clone() const {
    Rng scratch(1);
    FrameworkModel copy = build(config, scratch);
    for (const auto& [name, src] : params.items) {
        Tensor& dst = copy.params.at(name);
        dst.copy_data_from(src);
        if (dst.requires_grad() != src.requires_grad()) dst.set_requires_grad(src.requires_grad());
    }
    return copy;
}

// ---- pretraining -----------------------------------------------------------------------

PretrainResult pretrain_backbone(const PackedDataset& ds, const ConvBackboneSpec& spec,
                                 std::size_t epochs, double step_size, Rng& rng) {
    PretrainResult out;
    out.backbone = ConvBackbone::init(spec, rng);

    const auto& train_classes = ds.splits.meta_train;
    if (train_classes.empty()) throw ContractError("pretrain: empty meta-train split");
    std::vector<std::size_t> dense(ds.class_count(), 0); // class id -> head output
    std::vector<std::size_t> samples;
    for (std::size_t i = 0; i < train_classes.size(); ++i) {
        dense[train_classes[i]] = i;
        for (auto idx : ds.class_indices(train_classes[i])) samples.push_back(idx);
    }
    std::sort(samples.begin(), samples.end());

    Linear throwaway = Linear::init(spec.output_dim(), train_classes.size(), rng);
    std::vector<Tensor> learnable(out.backbone.kernels.begin(), out.backbone.kernels.end());
    learnable.push_back(throwaway.w);
    learnable.push_back(throwaway.b);
    SgdOptimizer opt{step_size};

    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        rng.shuffle(samples);
        for (auto idx : samples) {
            TapeScope scope;
            Tensor logits = throwaway.forward(out.backbone.forward(ds.image(idx)));
            Tensor loss = cross_entropy(logits, dense[ds.labels[idx]]);
            backward(loss);
            opt.step(std::span<const Tensor>(learnable));
            zero_grads(std::span<const Tensor>(learnable));
        }
    }

    std::size_t hits = 0;
    {
        NoGradScope no_grad;
        for (auto idx : samples) {
            Tensor logits = throwaway.forward(out.backbone.forward(ds.image(idx)));
            std::size_t best = 0;
            for (std::size_t c = 1; c < logits.size(); ++c) {
                if (logits.at(c) > logits.at(best)) best = c;
            }
            hits += best == dense[ds.labels[idx]] ? 1 : 0;
        }
    }
    out.train_accuracy = samples.empty() ? 0.0 : static_cast<double>(hits) / samples.size();
    out.backbone.freeze();
    return out;
}

} // namespace aimlab
