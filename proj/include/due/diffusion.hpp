#pragma once

#include "due/data_types.hpp"
#include "due/nn.hpp"

namespace due {

// ---------------------------------------------------------------- schedule

enum class ScheduleKind { linear, cosine };

const char* to_string(ScheduleKind kind);
ScheduleKind schedule_kind_from_string(const std::string& s);

struct DiffusionSchedule {
    int n_steps = 0;
    std::vector<double> betas;       // betas[t-1] = beta_t for t = 1..n_steps
    std::vector<double> alpha_bars;  // alpha_bars[t-1], strictly decreasing

    void validate() const;
    double beta(int t) const { return betas[size_t(t - 1)]; }
    double alpha_bar(int t) const {  // convention: alpha_bar(0) = 1
        return t == 0 ? 1.0 : alpha_bars[size_t(t - 1)];
    }
};

DiffusionSchedule make_schedule(int n_steps, double beta_min, double beta_max, ScheduleKind kind);

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, 1 <= t <= n_steps
Tensor forward_noise(const Tensor& x0, int t, const Tensor& eps,
                     const DiffusionSchedule& sched);

// ---------------------------------------------------------------- denoiser

struct UNetConfig {
    int w0 = 16, w1 = 32, w2 = 48;  // channel widths per resolution level
    int temb_dim = 64;
    int groups = 8;

    void validate() const;
};

// Residual block with timestep conditioning added between the convolutions.
struct ResBlock2d {
    int cin = 0, cout = 0;
    nn::GroupNorm gn1, gn2;
    nn::SiLU a1, a2, ta;
    nn::Conv2d conv1, conv2, skip;
    nn::Linear tproj;
    bool has_skip = false;
    Tensor gtemb;  // dL/dtemb contribution, filled by backward

    void configure(const std::string& name, int cin_, int cout_, int temb_dim, int groups);
    void init(Rng& rng);
    void collect(nn::ParamList& out);
    Tensor forward(const Tensor& x, const Tensor& temb, bool keep_cache = true);
    Tensor backward(const Tensor& gout);
};

// Slice denoiser: 3 resolution levels, skip connections, sinusoidal timestep
// embedding. Input (N, 4, H, W) = (noisy target, masked past condition,
// masked future condition, position plane); output (N, 1, H, W).
struct UNet2d {
    UNetConfig cfg;
    nn::Conv2d conv_in, down1, down2, upc1, upc2, conv_out;
    ResBlock2d enc0, enc1, enc2, mid, dec1, dec0;
    nn::GroupNorm gn_out;
    nn::SiLU a_out;
    nn::Linear t1, t2;
    nn::SiLU t_act;

    void configure(const UNetConfig& cfg_);
    void init(Rng& rng);
    nn::ParamList params();
    Tensor forward(const Tensor& x, const std::vector<float>& t_steps, bool keep_cache = true);
    Tensor backward(const Tensor& gout);
};

// ---------------------------------------------------------------- training

// One training draw: annotated slices A_i, A_{i+1} bounding a target A_j
// strictly between them; position = the target's depth fraction in (0, 1).
struct SliceTriple {
    Tensor past, target, future;  // (H, W) each
    float position = 0.5f;
};

struct TrainingExample {
    Tensor input;  // (4, H, W): x_t, masked past, masked future, position plane
    Tensor eps;    // (1, H, W)
    int t = 1;
};

// Draw order per example: t, noise, past mask, future mask. p_mask is the
// probability of zeroing a condition channel.
TrainingExample make_training_example(const SliceTriple& triple, const DiffusionSchedule& sched,
                                      double p_mask, Rng& rng);

// Mean squared error between predicted and true noise; 0 iff pred == eps.
double example_loss(const Tensor& eps_pred, const Tensor& eps);

// Default schedule: cosine with a wide beta clamp, so alpha_bar(T) is close
// to zero for any step count and sampling starts from (almost) pure noise.
// A linear schedule needs beta_max tuned to n_steps by hand.
struct DiffusionConfig {
    int n_steps = 200;
    double beta_min = 1e-4;
    double beta_max = 0.999;
    ScheduleKind kind = ScheduleKind::cosine;
};

struct DenoiserTrainConfig {
    int epochs = 30;
    int batch_size = 8;
    double lr = 1e-3;
    double p_mask = 0.5;
    double clip_norm = 1.0;
    uint64_t seed = 0;
    DiffusionConfig diffusion;
    UNetConfig arch;
};

struct DenoiserModel {
    UNet2d net;
    DiffusionSchedule schedule;
    DenoiserTrainConfig cfg;
};

struct EpochHistory {
    std::vector<double> epoch_loss;
};

// Configures and initializes model.net from model.cfg, then minimizes the
// denoising objective over the triple stream. Empty stream -> training error.
EpochHistory train_denoiser(DenoiserModel& model, const std::vector<SliceTriple>& triples);

// Reverse ancestral sampling of a block of slices at the given depth
// fractions (strictly increasing, in (0, 1)), conditioned on past/future.
// Deterministic given the rng state; outputs clamped to [0, 1].
std::vector<Tensor> sample_block(UNet2d& net, const DiffusionSchedule& sched, const Tensor& past,
                                 const Tensor& future, const std::vector<float>& positions,
                                 Rng& rng);

struct IntervalRequest {
    Tensor past, future;  // (H, W)
    int gap = 1;          // index difference d_i; d_i - 1 interior slices
    int block = 2;        // autoregressive block size B
    uint64_t seed = 0;
};

// Fills one interval in blocks of <= B slices; after each block the past
// condition becomes the last generated slice. Position channel carries each
// slice's depth fraction within the original interval. gap = 1 -> {}.
std::vector<Tensor> interpolate_interval(UNet2d& net, const DiffusionSchedule& sched,
                                         const IntervalRequest& request);

// Chunked autoregressive filling of a whole sparse annotation. Known slices
// are copied bit-exactly; depths outside the annotated extent stay zero.
DenseAnnotation interpolate_volume(UNet2d& net, const DiffusionSchedule& sched,
                                   const SparseAnnotation& sparse, int depth, uint64_t seed,
                                   int block = 2);

// Checkpoint directory: params.bin + meta.json (architecture, schedule,
// mask policy, seed, epoch losses).
void save_denoiser(const std::string& dir, DenoiserModel& model, const EpochHistory& history);
DenoiserModel load_denoiser(const std::string& dir);

}  // namespace due
