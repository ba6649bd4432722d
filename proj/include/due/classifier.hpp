#pragma once

#include <array>

#include "due/data_types.hpp"
#include "due/nn.hpp"

namespace due {

// ---------------------------------------------------------------- network

struct ClassifierConfig {
    std::vector<int> widths = {16, 32, 64};  // one entry per stage
    int blocks_per_stage = 2;
    int groups = 8;

    int stages() const { return int(widths.size()); }
    // stem stride 2, plus stride 2 entering every stage after the first
    int downsample_factor() const { return 1 << stages(); }
    void validate() const;
};

// Basic residual unit: conv-gn-relu-conv-gn plus (projected) shortcut.
struct ResBlock3d {
    int cin = 0, cout = 0, stride = 1;
    nn::Conv3d conv1, conv2, skip;
    nn::GroupNorm gn1, gn2;
    nn::ReLU a1, a2;
    bool has_skip = false;

    void configure(const std::string& name, int cin_, int cout_, int stride_, int groups);
    void init(Rng& rng);
    void collect(nn::ParamList& out);
    Tensor forward(const Tensor& x, bool keep_cache = true);
    Tensor backward(const Tensor& gout);
};

// Small residual 3D classifier: strided stem, residual stages, global average
// pooling, 2-way linear head. The last stage's activation is the designated
// explanation layer.
struct ResNet3d {
    ClassifierConfig cfg;
    nn::Conv3d stem;
    nn::GroupNorm stem_gn;
    nn::ReLU stem_act;
    std::vector<ResBlock3d> blocks;
    std::vector<int> stage_end;  // one past the last block of each stage
    nn::Linear head;
    std::vector<int> feat_shape;  // cached by forward_head for the GAP backward

    void configure(const ClassifierConfig& cfg_);
    void init(Rng& rng);
    nn::ParamList params();

    // trunk up to and including stage `upto` (1-based; -1 = all stages)
    Tensor forward_features(const Tensor& x, bool keep_cache = true, int upto = -1);
    Tensor forward_head(const Tensor& features, bool keep_cache = true);  // -> (N, 2) logits
    Tensor backward_head(const Tensor& glogits);
    // trunk backward; `from` matches the stage the feature gradient lives at
    Tensor backward_features(const Tensor& gfeat, int from = -1);

    Tensor logits(const Tensor& x, bool keep_cache = true);
};

// Deterministically initialized classifier for the given seed.
ResNet3d build_classifier(const ClassifierConfig& cfg, uint64_t seed);

// Softmax class probabilities for one volume (D, H, W).
std::array<double, 2> predict(ResNet3d& net, const Tensor& volume);
// Batched variant over (N, 1, D, H, W).
Tensor predict_batch(ResNet3d& net, const Tensor& volumes);  // -> (N, 2) rows sum to 1

// ---------------------------------------------------------------- Grad-CAM

struct Saliency {
    Tensor values;  // (D, H, W) in [0, 1]
    int target_class = 1;
    std::string layer;
};

// Channel weights are spatially averaged gradients of the class score at the
// chosen stage; the rectified weighted activation sum is upsampled to input
// resolution and min-max normalized (an all-zero map stays all-zero).
// Leaves parameter gradients untouched (restores them around the pass).
Saliency gradcam3d(ResNet3d& net, const Tensor& volume, int target_class,
                   const std::string& layer_id);

// Stage index (1-based) for a layer id like "stage3"; validation error if the
// id names no stage of this config.
int resolve_layer_id(const ClassifierConfig& cfg, const std::string& layer_id);

// ---------------------------------------------------- explanation losses

enum class ExpLossKind { l1, bce, mse };

const char* to_string(ExpLossKind kind);
ExpLossKind exp_loss_kind_from_string(const std::string& s);

// Mean over voxels of the chosen distance; BCE clamps the saliency into
// [eps, 1 - eps] first. An optional weight map (same shape) multiplies each
// voxel's term; the divisor stays the voxel count, so all-ones weights give
// the unweighted loss exactly.
double explanation_loss(const Tensor& saliency, const Tensor& target, ExpLossKind kind,
                        const Tensor* weights = nullptr);
// Same value, plus d(loss)/d(saliency) accumulated into gsal scaled by scale.
double explanation_loss_grad(const Tensor& saliency, const Tensor& target, ExpLossKind kind,
                             Tensor& gsal, double scale, const Tensor* weights = nullptr);

}  // namespace due
