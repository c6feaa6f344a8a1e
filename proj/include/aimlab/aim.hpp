#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include "aimlab/tensor.hpp"

namespace aimlab {

enum class SelectionMode { Hard, Stochastic, Soft };

SelectionMode selection_mode_from_string(const std::string& s);
std::string to_string(SelectionMode mode);

// Gating hyperparameters for one AIM module.
struct AimConfig {
    std::size_t m = 32;        // mechanism count
    std::size_t k = 8;         // active count
    std::size_t l = 2;         // stochastic slack during training
    std::size_t d = 32;        // attention embedding dimension
    std::size_t d_hidden = 64; // mechanism hidden-state dimension
    std::size_t d_out = 64;    // mechanism output dimension
    SelectionMode selection_mode = SelectionMode::Hard; // inference-time mode
    double soft_threshold = 0.5;

    void validate() const;
};

// Learnable state of an AIM module. The null slot is a fixed all-zeros key
// alternative: a mechanism attending to it is declining the input.
struct AimParams {
    std::vector<Tensor> h;  // M hidden states, each [d_hidden]
    std::vector<Tensor> wq; // M query maps, each [d_hidden x d]
    Tensor wk;              // shared key map [D x d]
    std::vector<Tensor> wm; // M mechanism weights, each [D x d_out]
    Tensor null_vec;        // [D], all zeros, not learnable

    static AimParams init(std::size_t input_dim, const AimConfig& cfg, Rng& rng);
    std::size_t input_dim() const { return wk.shape()[0]; }
    std::size_t mechanism_count() const { return h.size(); }
    std::size_t learnable_count() const; // total scalar parameters
};

// Per-sample record of which mechanisms fired and at what attention weight.
struct SelectionMask {
    std::vector<bool> active;    // length M
    std::vector<double> weights; // length M, zero where inactive

    std::size_t active_count() const;
    bool operator==(const SelectionMask&) const = default;
};

// Result of cross-attention scoring: per mechanism, the two-slot softmax
// (input slot first, null slot second) and the input-slot score. Both stay
// on the tape so selection weights carry gradient.
struct Attention {
    std::vector<Tensor> pair;  // M tensors of shape [2]
    std::vector<Tensor> score; // M tensors of shape [1]

    std::vector<double> score_values() const;
    std::vector<std::array<double, 2>> pair_values() const;
};

// Scores each mechanism against the input representation:
// pair_m = softmax([<h_m Wq_m, z Wk>, <h_m Wq_m, null Wk>] / sqrt(d)).
Attention attend(const Tensor& z, const AimParams& params);

// Keep the K largest scores; ties break toward the lower index.
SelectionMask select_hard(const std::vector<double>& scores, std::size_t k);

// Uniformly sample a K-subset of the top-(K+l) scores. l = 0 degenerates to
// select_hard, bit for bit.
SelectionMask select_stochastic(const std::vector<double>& scores, std::size_t k, std::size_t l,
                                Rng& rng);

// A mechanism is active iff its input-slot score strictly exceeds the
// threshold; the active count is data-dependent and may be zero.
SelectionMask select_soft(const std::vector<std::array<double, 2>>& pairs, double threshold);

SelectionMask select(const Attention& att, const AimConfig& cfg, SelectionMode mode, Rng& rng);

// Sparse weighted sum: z_out = z * (sum over active m of w_m * Wm_m).
// Differentiable wrt z, the active Wm, and through the weights into h, Wq, Wk.
// Inactive mechanisms receive exactly zero gradient.
Tensor aim_forward(const Tensor& z, const SelectionMask& mask, const Attention& att,
                   const AimParams& params);

struct AimOutput {
    Tensor value;
    SelectionMask mask;
};

// attend + select + forward in one call.
AimOutput aim_apply(const Tensor& z, const AimParams& params, const AimConfig& cfg,
                    SelectionMode mode, Rng& rng);

// Deterministic hard top-K activity vector for analysis; never touches the tape.
std::vector<bool> activation_mask(const Tensor& z, const AimParams& params, const AimConfig& cfg);

// CSV row "sample_id, class_id, m0..m{M-1}" for mask (0/1) and score dumps.
std::string mask_csv_row(std::size_t sample_id, std::size_t class_id,
                         const std::vector<bool>& mask);
std::string scores_csv_row(std::size_t sample_id, std::size_t class_id,
                           const std::vector<double>& scores);

} // namespace aimlab
