#pragma once

#include <string>
#include <vector>

#include "due/tensor.hpp"

// Minimal from-scratch layers with explicit forward/backward and cached
// activations. Tensors are (N, C, D, H, W) for volumes and (N, C, H, W) for
// slices. Each layer owns its parameters; backward() accumulates into .g and
// returns dL/dinput. Loops only ever partition output elements, so results
// are bit-identical at any thread count.

namespace due::nn {

struct Param {
    std::string name;
    Tensor w;  // value
    Tensor g;  // gradient, same shape

    void init_shape(std::string n, std::vector<int> shape) {
        name = std::move(n);
        w = Tensor(shape);
        g = Tensor(std::move(shape));
    }
};

using ParamList = std::vector<Param*>;

void zero_grads(const ParamList& params);
int64_t param_count(const ParamList& params);
double grad_norm(const ParamList& params);
void clip_grad_norm(const ParamList& params, double max_norm);

// Checkpoint blob: magic "DUEP", version, then (name, shape, f32 payload) per
// parameter. load_params requires an exact name/shape match.
void save_params(const std::string& path, const ParamList& params);
void load_params(const std::string& path, const ParamList& params);

// 3D convolution, kernel k in {1, 3}, per-axis stride, zero padding k/2.
struct Conv3d {
    int cin = 0, cout = 0, k = 1;
    int stride[3] = {1, 1, 1};
    int kdims[3] = {1, 1, 1};
    Param weight, bias;
    Tensor x_cache;

    // kz lets a (1, k, k) kernel express 2D convolution over (N, C, 1, H, W)
    void configure(const std::string& name, int cin_, int cout_, int k_, int stride_dhw[3],
                   int kz = -1);
    void init(Rng& rng, bool zero_weights = false);
    void collect(ParamList& out);
    std::vector<int> out_shape(const std::vector<int>& in_shape) const;
    Tensor forward(const Tensor& x, bool keep_cache = true);
    Tensor backward(const Tensor& gout);
};

// 2D convolution on (N, C, H, W); wraps the 3D core with a depth-1 axis.
struct Conv2d {
    Conv3d core;

    void configure(const std::string& name, int cin, int cout, int k, int stride);
    void init(Rng& rng, bool zero_weights = false) { core.init(rng, zero_weights); }
    void collect(ParamList& out) { core.collect(out); }
    Tensor forward(const Tensor& x, bool keep_cache = true);
    Tensor backward(const Tensor& gout);
};

// GroupNorm over (N, C, spatial...). groups must divide channels.
struct GroupNorm {
    int channels = 0, groups = 1;
    double eps = 1e-5;
    Param gamma, beta;
    Tensor xhat_cache;
    std::vector<double> inv_std_cache;  // per (n, group)
    std::vector<int> in_shape_cache;

    void configure(const std::string& name, int channels_, int groups_);
    void init();
    void collect(ParamList& out);
    Tensor forward(const Tensor& x, bool keep_cache = true);
    Tensor backward(const Tensor& gout);
};

struct Linear {
    int in = 0, out = 0;
    Param weight, bias;  // weight (out, in)
    Tensor x_cache;

    void configure(const std::string& name, int in_, int out_);
    void init(Rng& rng, double scale = 1.0);
    void collect(ParamList& out_list);
    Tensor forward(const Tensor& x, bool keep_cache = true);  // (N, in) -> (N, out)
    Tensor backward(const Tensor& gout);
};

struct ReLU {
    Tensor x_cache;
    Tensor forward(const Tensor& x, bool keep_cache = true);
    Tensor backward(const Tensor& gout);
};

struct SiLU {
    Tensor x_cache;
    Tensor forward(const Tensor& x, bool keep_cache = true);
    Tensor backward(const Tensor& gout);
};

struct Softplus {
    Tensor x_cache;
    Tensor forward(const Tensor& x, bool keep_cache = true);
    Tensor backward(const Tensor& gout);
};

// (N, C, spatial...) -> (N, C), mean over all spatial positions
Tensor global_avg_pool(const Tensor& x);
Tensor global_avg_pool_backward(const Tensor& gout, const std::vector<int>& in_shape);

// Block-average (N, C, D, H, W) by integer factors; dims must divide evenly.
Tensor avg_pool3d(const Tensor& x, int fz, int fy, int fx);

// Trilinear resize of (D, H, W) or (N, C, D, H, W) to the target spatial
// size; corner-aligned so end slices map exactly.
Tensor upsample_trilinear(const Tensor& x, int Do, int Ho, int Wo);

// Nearest-neighbor 2x upsample on (N, C, H, W).
Tensor upsample_nearest2x(const Tensor& x);
Tensor upsample_nearest2x_backward(const Tensor& gout);

// Channel concat/split on (N, C, spatial...).
Tensor concat_channels(const Tensor& a, const Tensor& b);
void split_channels(const Tensor& g, int ca, Tensor& ga, Tensor& gb);

// Sinusoidal embedding of scalar steps t into dim channels (dim even):
// [sin(t * f_0..f_{h-1}), cos(t * f_0..f_{h-1})], f_i = 10000^(-i / (h - 1)).
Tensor timestep_embedding(const std::vector<float>& t, int dim);

struct Adam {
    double lr = 1e-3, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    int64_t t = 0;
    std::vector<Tensor> m, v;

    explicit Adam(double lr_ = 1e-3) : lr(lr_) {}
    void step(const ParamList& params);
};

}  // namespace due::nn
