#include "aimlab/aim.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <sstream>

namespace aimlab {

SelectionMode selection_mode_from_string(const std::string& s) {
    if (s == "hard") return SelectionMode::Hard;
    if (s == "stochastic") return SelectionMode::Stochastic;
    if (s == "soft") return SelectionMode::Soft;
    throw ContractError("unknown selection mode '" + s + "'");
}

std::string to_string(SelectionMode mode) {
    switch (mode) {
        case SelectionMode::Hard: return "hard";
        case SelectionMode::Stochastic: return "stochastic";
        case SelectionMode::Soft: return "soft";
    }
    return "?";
}

void AimConfig::validate() const {
    if (m == 0 || d == 0 || d_hidden == 0 || d_out == 0) {
        throw ContractError("aim config: dimensions must be positive");
    }
    if (k < 1 || k > m) throw ContractError("aim config: K must satisfy 1 <= K <= M");
    if (k + l > m) throw ContractError("aim config: K + l must not exceed M");
    if (soft_threshold <= 0.0 || soft_threshold >= 1.0) {
        throw ContractError("aim config: soft_threshold must lie in (0,1)");
    }
}

AimParams AimParams::init(std::size_t input_dim, const AimConfig& cfg, Rng& rng) {
    cfg.validate();
    AimParams p;
    const double hb = 1.0 / std::sqrt(static_cast<double>(cfg.d_hidden));
    const double db = 1.0 / std::sqrt(static_cast<double>(input_dim));
    p.h.reserve(cfg.m);
    p.wq.reserve(cfg.m);
    p.wm.reserve(cfg.m);
    for (std::size_t i = 0; i < cfg.m; ++i) p.h.push_back(Tensor::uniform({cfg.d_hidden}, hb, rng, true));
    for (std::size_t i = 0; i < cfg.m; ++i) {
        p.wq.push_back(Tensor::uniform({cfg.d_hidden, cfg.d}, hb, rng, true));
    }
    p.wk = Tensor::uniform({input_dim, cfg.d}, db, rng, true);
    for (std::size_t i = 0; i < cfg.m; ++i) {
        p.wm.push_back(Tensor::uniform({input_dim, cfg.d_out}, db, rng, true));
    }
    p.null_vec = Tensor::zeros({input_dim}, false);
    return p;
}

std::size_t AimParams::learnable_count() const {
    std::size_t n = wk.size();
    for (const auto& t : h) n += t.size();
    for (const auto& t : wq) n += t.size();
    for (const auto& t : wm) n += t.size();
    return n;
}

std::size_t SelectionMask::active_count() const {
    return static_cast<std::size_t>(std::count(active.begin(), active.end(), true));
}

std::vector<double> Attention::score_values() const {
    std::vector<double> v(score.size());
    for (std::size_t i = 0; i < score.size(); ++i) v[i] = score[i].item();
    return v;
}

std::vector<std::array<double, 2>> Attention::pair_values() const {
    std::vector<std::array<double, 2>> v(pair.size());
    for (std::size_t i = 0; i < pair.size(); ++i) v[i] = {pair[i].at(0), pair[i].at(1)};
    return v;
}

Attention attend(const Tensor& z, const AimParams& params) {
    if (z.shape().size() != 1 || z.shape()[0] != params.input_dim()) {
        throw DimensionError("attend: input " + shape_str(z.shape()) + " does not match key map " +
                             shape_str(params.wk.shape()));
    }
    const std::size_t m = params.mechanism_count();
    const double inv_sqrt_d =
        1.0 / std::sqrt(static_cast<double>(params.wk.shape()[1]));

    Tensor key_input = vecmat(z, params.wk);
    Tensor key_null = vecmat(params.null_vec, params.wk);

    Attention att;
    att.pair.reserve(m);
    att.score.reserve(m);
    for (std::size_t i = 0; i < m; ++i) {
        Tensor q = vecmat(params.h[i], params.wq[i]);
        Tensor logit_in = scale(dot(q, key_input), inv_sqrt_d);
        Tensor logit_null = scale(dot(q, key_null), inv_sqrt_d);
        Tensor pair = softmax(concat(logit_in, logit_null), 0);
        att.score.push_back(take(pair, 0));
        att.pair.push_back(std::move(pair));
    }
    return att;
}

namespace {

// indices ordered by descending score, lower index first on ties
std::vector<std::size_t> rank_indices(const std::vector<double>& scores) {
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a < b;
    });
    return idx;
}

SelectionMask mask_from_indices(const std::vector<double>& scores,
                                const std::vector<std::size_t>& chosen) {
    SelectionMask mask;
    mask.active.assign(scores.size(), false);
    mask.weights.assign(scores.size(), 0.0);
    for (std::size_t i : chosen) {
        mask.active[i] = true;
        mask.weights[i] = scores[i];
    }
    return mask;
}

} // namespace

SelectionMask select_hard(const std::vector<double>& scores, std::size_t k) {
    if (k < 1 || k > scores.size()) {
        throw ContractError("select_hard: K=" + std::to_string(k) + " out of range for M=" +
                            std::to_string(scores.size()));
    }
    auto ranked = rank_indices(scores);
    ranked.resize(k);
    return mask_from_indices(scores, ranked);
}

SelectionMask select_stochastic(const std::vector<double>& scores, std::size_t k, std::size_t l,
                                Rng& rng) {
    if (k < 1 || k + l > scores.size()) {
        throw ContractError("select_stochastic: K=" + std::to_string(k) + ", l=" +
                            std::to_string(l) + " out of range for M=" +
                            std::to_string(scores.size()));
    }
    if (l == 0) return select_hard(scores, k);
    auto ranked = rank_indices(scores);
    ranked.resize(k + l);
    // partial Fisher-Yates: the first K entries are a uniform K-subset
    for (std::size_t i = 0; i < k; ++i) {
        std::swap(ranked[i], ranked[i + rng.below(ranked.size() - i)]);
    }
    ranked.resize(k);
    return mask_from_indices(scores, ranked);
}

SelectionMask select_soft(const std::vector<std::array<double, 2>>& pairs, double threshold) {
    SelectionMask mask;
    mask.active.assign(pairs.size(), false);
    mask.weights.assign(pairs.size(), 0.0);
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        if (pairs[i][0] > threshold) {
            mask.active[i] = true;
            mask.weights[i] = pairs[i][0];
        }
    }
    return mask;
}

SelectionMask select(const Attention& att, const AimConfig& cfg, SelectionMode mode, Rng& rng) {
    switch (mode) {
        case SelectionMode::Hard: return select_hard(att.score_values(), cfg.k);
        case SelectionMode::Stochastic:
            return select_stochastic(att.score_values(), cfg.k, cfg.l, rng);
        case SelectionMode::Soft: return select_soft(att.pair_values(), cfg.soft_threshold);
    }
    throw ContractError("select: bad mode");
}

Tensor aim_forward(const Tensor& z, const SelectionMask& mask, const Attention& att,
                   const AimParams& params) {
    if (z.shape().size() != 1 || z.shape()[0] != params.input_dim()) {
        throw DimensionError("aim_forward: input " + shape_str(z.shape()) +
                             " does not match mechanism weights " +
                             shape_str(params.wm.front().shape()));
    }
    if (mask.active.size() != params.mechanism_count()) {
        throw DimensionError("aim_forward: mask covers " + std::to_string(mask.active.size()) +
                             " mechanisms, params have " +
                             std::to_string(params.mechanism_count()));
    }
    Tensor combined;
    for (std::size_t i = 0; i < mask.active.size(); ++i) {
        if (!mask.active[i]) continue;
        Tensor weighted = scale(params.wm[i], att.score[i]);
        combined = combined.defined() ? add(combined, weighted) : weighted;
    }
    const std::size_t d_out = params.wm.front().shape()[1];
    if (!combined.defined()) return Tensor::zeros({d_out}); // soft mode may select nothing
    return vecmat(z, combined);
}

AimOutput aim_apply(const Tensor& z, const AimParams& params, const AimConfig& cfg,
                    SelectionMode mode, Rng& rng) {
    Attention att = attend(z, params);
    SelectionMask mask = select(att, cfg, mode, rng);
    return {aim_forward(z, mask, att, params), std::move(mask)};
}

std::vector<bool> activation_mask(const Tensor& z, const AimParams& params, const AimConfig& cfg) {
    NoGradScope no_grad;
    Attention att = attend(z, params);
    return select_hard(att.score_values(), cfg.k).active;
}

std::string mask_csv_row(std::size_t sample_id, std::size_t class_id,
                         const std::vector<bool>& mask) {
    std::ostringstream os;
    os << sample_id << "," << class_id;
    for (bool b : mask) os << "," << (b ? 1 : 0);
    return os.str();
}

std::string scores_csv_row(std::size_t sample_id, std::size_t class_id,
                           const std::vector<double>& scores) {
    std::ostringstream os;
    os.precision(17);
    os << sample_id << "," << class_id;
    for (double s : scores) os << "," << s;
    return os.str();
}

} // namespace aimlab
