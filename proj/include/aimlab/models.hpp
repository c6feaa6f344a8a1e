#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "aimlab/aim.hpp"
#include "aimlab/data.hpp"
#include "aimlab/params.hpp"
#include "aimlab/tensor.hpp"

namespace aimlab {

// ---- building blocks ---------------------------------------------------------

// 3x3 convolutions with padding 1, strided, ReLU after every layer.
struct ConvLayerSpec {
    std::size_t in_channels = 1;
    std::size_t out_channels = 8;
    std::size_t stride = 2;
};

struct ConvBackboneSpec {
    std::vector<ConvLayerSpec> layers;
    std::size_t in_channels = 1;
    std::size_t height = 28;
    std::size_t width = 28;

    static ConvBackboneSpec stack(std::size_t layer_count, std::size_t channels,
                                  const std::vector<std::size_t>& strides, std::size_t in_channels,
                                  std::size_t height, std::size_t width);
    std::size_t output_dim() const; // flattened size after the final layer
    void validate() const;
};

struct ConvBackbone {
    ConvBackboneSpec spec;
    std::vector<Tensor> kernels;

    static ConvBackbone init(const ConvBackboneSpec& spec, Rng& rng);
    Tensor forward(const Tensor& image) const;
    void freeze();
    bool frozen() const;
};

Tensor backbone_forward(const ConvBackbone& backbone, const Tensor& image);

struct Linear {
    Tensor w; // [in x out]
    Tensor b; // [out]

    static Linear init(std::size_t in, std::size_t out, Rng& rng, bool zero_init = false);
    Tensor forward(const Tensor& x) const;
    std::size_t in_dim() const { return w.shape()[0]; }
    std::size_t out_dim() const { return w.shape()[1]; }
};

// Cosine-similarity classifier with learnable temperature. A zero feature or
// a zero class vector contributes a zero logit and bumps the zero-norm flag.
struct CosineHead {
    Tensor phi; // [classes x d_out]
    Tensor tau; // scalar temperature
};

Tensor cosine_logits(const Tensor& z, const CosineHead& head);
Tensor cosine_logits(const Tensor& z, const std::vector<Tensor>& phi_rows, const Tensor& tau);

// Slow weights that turn averaged support features into classifier vectors.
struct WeightGenerator {
    Tensor theta; // [d_out], starts at all-ones
};

// Per class: average of the l2-normalized support features, then theta
// (Hadamard) on top. Stays on the tape, so theta receives gradient when the
// rows feed a loss.
std::vector<Tensor> feature_average_init(const std::vector<std::vector<Tensor>>& support_by_class,
                                         const Tensor& theta);

// 3-layer MLP, hidden width 8*ways, mapping class-mean query logits
// [ways*ways] to a synthetic gradient for phi [ways*d_out]. The last layer
// starts at zero so early updates are no-ops.
struct SyntheticGradNet {
    Linear fc1, fc2, fc3;
    std::size_t ways = 0, d_out = 0;

    static SyntheticGradNet init(std::size_t ways, std::size_t d_out, Rng& rng);
    Tensor forward(const Tensor& input) const;
};

// Label-free transductive refinement: per step the net eats the soft
// class-mean query logits and emits a gradient for every phi row.
std::vector<Tensor> synthetic_update(std::vector<Tensor> phi_rows, const Tensor& tau,
                                     const std::vector<Tensor>& query_features,
                                     const SyntheticGradNet& net, double eps, std::size_t steps);

Tensor anml_modulate(const Tensor& nm, const Tensor& p);

// ---- framework variants --------------------------------------------------------

enum class Variant { Sib, Oml, Anml, OmlLinear };

Variant variant_from_string(const std::string& s);
std::string to_string(Variant v);

struct FastSlowPartition {
    std::vector<std::string> fast;
    std::vector<std::string> slow;
    std::vector<std::string> frozen;

    bool is_fast(const std::string& name) const;
    bool is_slow(const std::string& name) const;
    // pairwise disjoint and covering every parameter; throws otherwise
    void validate_cover(const ParamMap& params) const;
};

struct ModelConfig {
    Variant variant = Variant::Sib;
    ConvBackboneSpec backbone;    // f_psi (Sib/Oml) or the prediction net (Anml)
    ConvBackboneSpec nm_backbone; // Anml neuromodulatory net
    AimConfig aim;
    std::size_t classes = 5;    // ways for Sib, total class count for continual
    std::size_t reduce_dim = 0; // 0 = no dimension-reduction layer before AIM
    double tau_init = 10.0;
    std::size_t baseline_hidden = 0; // OmlLinear: 0 = match AIM parameter count

    void validate() const;
};

struct ForwardResult {
    Tensor logits;
    SelectionMask mask;
    bool has_mask = false;
};

// Equal-parameter width for the OmlLinear baseline: a single hidden linear
// layer sized so the swapped-in block plus its head match the AIM fast path.
std::size_t baseline_hidden_for_equal_params(std::size_t feature_dim, const AimConfig& aim,
                                             std::size_t classes);

class FrameworkModel {
public:
    static FrameworkModel build(const ModelConfig& cfg, Rng& rng);

    ModelConfig config;
    ConvBackbone backbone;
    ConvBackbone nm;
    Linear reduce;
    AimParams aim;
    Linear baseline;
    Linear head;       // continual classifier
    CosineHead cosine; // Sib classifier
    WeightGenerator gen;
    SyntheticGradNet sgn;

    ParamMap params;
    FastSlowPartition partition;

    bool has_reduce() const { return config.reduce_dim > 0; }
    bool uses_aim() const { return config.variant != Variant::OmlLinear; }

    // representation entering AIM (or the baseline block)
    Tensor features(const Tensor& image) const;
    // true when features() reads only slow or frozen parameters, so inner
    // loops may cache them
    bool features_are_inner_constant() const;

    ForwardResult forward_from_features(const Tensor& z, SelectionMode mode, Rng& rng) const;
    ForwardResult forward(const Tensor& image, SelectionMode mode, Rng& rng) const;

    std::vector<Tensor> fast_tensors() const { return params.tensors(partition.fast); }
    std::vector<Tensor> slow_tensors() const { return params.tensors(partition.slow); }
    std::vector<Tensor> all_tensors() const;

    // re-randomize one classifier column (continual protocol for fresh classes)
    void reinit_head_class(std::size_t class_id, Rng& rng);

    FrameworkModel clone() const;
};

// Supervised pretraining of a feature extractor on the meta-train split with
// a throwaway linear head; the returned backbone is frozen.
struct PretrainResult {
    ConvBackbone backbone;
    double train_accuracy = 0.0;
};

PretrainResult pretrain_backbone(const PackedDataset& ds, const ConvBackboneSpec& spec,
                                 std::size_t epochs, double step_size, Rng& rng);

} // namespace aimlab
