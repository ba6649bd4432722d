#pragma once

#include <functional>

#include "due/diffusion.hpp"

namespace due {

// ------------------------------------------------------------------ types

enum class UncertaintySource { monte_carlo, predicted };

const char* to_string(UncertaintySource s);
UncertaintySource uncertainty_source_from_string(const std::string& s);

// Per-voxel uncertainty; zero at depths carrying human annotations.
struct UncertaintyMap {
    Tensor values;  // rank 3, nonnegative
    UncertaintySource source = UncertaintySource::monte_carlo;

    void validate() const;
};

// Per-voxel supervision weight in [0, 1]; 1 at known slice depths.
struct WeightMap {
    Tensor values;  // rank 3

    void validate() const;
};

// Conditioning context for the imputed uncertainty predictor: the two
// bounding slices of one interval plus the depth fractions to predict at.
struct NPContext {
    Tensor past, future;  // (H, W)
    int past_depth = 0, future_depth = 0;
    std::vector<float> targets;  // strictly increasing, inside (0, 1)

    int gap() const { return future_depth - past_depth; }
    void validate() const;
};

// --------------------------------------------------------- Monte Carlo

// Population variance (divide by T) of T interpolation outcomes per voxel.
// `run` maps a derived per-run seed to a filled volume.
UncertaintyMap mc_variance(const std::function<DenseAnnotation(uint64_t)>& run,
                           const SparseAnnotation& sparse, int depth, int t_runs,
                           uint64_t root_seed);

UncertaintyMap mc_variance(UNet2d& net, const DiffusionSchedule& sched,
                           const SparseAnnotation& sparse, int depth, int t_runs,
                           uint64_t root_seed, int block = 2);

// ------------------------------------------------------------- predictor

struct UQConfig {
    int width = 8;           // conv trunk width
    int latent = 32;         // z dimension
    int groups = 4;          // group-norm groups
    double kl_weight = 1e-2;

    int ctx_dim() const { return 2 * width + 8; }
    void validate() const;
};

// Neural-process-style variational encoder/decoder. The context trunk embeds
// the two bounding slices and their gap; prior and posterior are diagonal
// Gaussians over z; the decoder maps (z, context, depth fraction) to a
// nonnegative variance image via softplus.
struct UQPredictor {
    UQConfig cfg;

    nn::Conv2d c1, c2;  // context trunk
    nn::GroupNorm cg1, cg2;
    nn::SiLU ca1, ca2;
    nn::Linear gap_fc;
    nn::SiLU ga;
    nn::Linear prior_head;

    nn::Conv2d t1c, t2c;  // target-set encoder feeding the posterior
    nn::GroupNorm tg1, tg2;
    nn::SiLU ta1, ta2;
    nn::Linear post_head;

    nn::Conv2d d1c, d2c, d3c;  // decoder
    nn::GroupNorm dg1, dg2;
    nn::SiLU da1, da2;
    nn::Linear zproj;
    nn::Softplus out_act;

    void configure(const UQConfig& cfg_);
    void init(Rng& rng);
    nn::ParamList params();
};

// KL(q || p) between diagonal Gaussians, summed over dimensions.
double kl_diag_gaussians(const Tensor& mu_q, const Tensor& logvar_q, const Tensor& mu_p,
                         const Tensor& logvar_p);

// One training pair: the context and the mc_variance images of its interval
// interior, stacked (K, H, W) in target order.
struct UQExample {
    NPContext context;
    Tensor targets;
};

struct UQLossParts {
    double recon = 0.0;
    double kl = 0.0;
    double total = 0.0;
};

// Deterministic objective for one example: reconstruction from the posterior
// mean plus weighted KL(posterior || prior). With `accumulate_grads` the
// parameter gradients are added, scaled by grad_scale.
UQLossParts uq_example_loss(UQPredictor& pred, const UQExample& example, bool accumulate_grads,
                            double grad_scale = 1.0);

struct UQTrainConfig {
    int epochs = 40;
    int batch_size = 4;
    double lr = 1e-3;
    double clip_norm = 1.0;
    uint64_t seed = 0;
    UQConfig arch;
};

EpochHistory train_uq_predictor(UQPredictor& pred, const std::vector<UQExample>& examples,
                                const UQTrainConfig& cfg);

// Deterministic inference from the prior mean: one variance image per target
// fraction, stacked (K, H, W).
UncertaintyMap predict_uncertainty(UQPredictor& pred, const NPContext& context);

// Whole-volume prediction: per-interval predictions concatenated at interior
// depths; known depths and depths outside the extent stay zero.
UncertaintyMap predict_uncertainty_volume(UQPredictor& pred, const SparseAnnotation& sparse,
                                          int depth);

// UQ checkpoint: parameter blob + meta.json.
void save_uq_predictor(const std::string& dir, UQPredictor& pred, const UQTrainConfig& cfg,
                       const EpochHistory& history);
UQPredictor load_uq_predictor(const std::string& dir);

// --------------------------------------------------------------- weights

// Flipped sigmoid raw_w = 1/(1 + e^u) over generated (non-known) depths,
// min-max normalized per volume; known depths pinned to 1. Constant
// uncertainty over generated voxels degenerates to all-ones.
WeightMap uncertainty_to_weights(const UncertaintyMap& u, const std::vector<int>& known_depths);

// Element-wise product of weights and the interpolated mask; known depths are
// copied from the human slices verbatim.
DenseAnnotation build_supervision_target(const DenseAnnotation& interpolated,
                                         const WeightMap& weights,
                                         const SparseAnnotation& sparse);

}  // namespace due
