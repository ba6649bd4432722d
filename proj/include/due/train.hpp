#pragma once

#include "due/classifier.hpp"

namespace due {

enum class TrainMode { baseline, baseline_plus, due };

const char* to_string(TrainMode mode);
TrainMode train_mode_from_string(const std::string& s);

struct TrainSample {
    Tensor volume;  // (D, H, W)
    int label = 0;
    Tensor target;  // (D, H, W) supervision mask; empty when absent
    Tensor weight;  // (D, H, W) per-voxel loss weights; empty = unweighted

    bool has_target() const { return target.numel() > 0; }
    bool has_weight() const { return weight.numel() > 0; }
};

struct TrainConfig {
    TrainMode mode = TrainMode::baseline;
    double lambda_exp = 1.0;
    ExpLossKind loss_kind = ExpLossKind::l1;
    // Experimental: supervise against the unweighted target and multiply the
    // per-voxel explanation loss by the weight map instead of pre-scaling the
    // target. Consumed by the pipeline when choosing which artifacts to load;
    // train_classifier itself uses whatever weights the samples carry.
    bool weight_in_loss = false;
    int epochs = 50;
    int batch_size = 4;
    double lr = 1e-3;
    double clip_norm = 5.0;
    uint64_t seed = 0;
    ClassifierConfig arch;

    void validate() const;
};

struct ClassifierHistory {
    std::vector<double> pred_loss;  // per-epoch mean cross-entropy over samples
    std::vector<double> exp_loss;   // per-epoch explanation term, same per-sample scale
    std::vector<double> val_accuracy;   // present only when a validation set is given
    std::vector<double> val_pred_loss;
};

// Mean cross-entropy of (N, 2) logits against 0/1 labels.
double prediction_loss(const Tensor& logits, const std::vector<int>& labels);

// One training objective evaluation over a stacked batch (N, 1, D, H, W):
// mean cross-entropy plus lambda times the explanation term, which compares
// each positive sample's rectified channel-weighted activation map against
// its pooled target (pooled_targets entries may be null for samples without
// one; lambda > 0 requires a target on every positive). with_grad accumulates
// exact gradients — including the head-weight path through the channel
// weights — into the net's parameters; callers zero grads first. lambda = 0
// never touches the explanation branch, so the total equals the prediction
// loss bitwise. pooled_weights, when non-empty, must parallel pooled_targets;
// a non-null entry multiplies that sample's per-voxel explanation loss.
double batch_objective(ResNet3d& net, const Tensor& xb, const std::vector<int>& labels,
                       const std::vector<const Tensor*>& pooled_targets, double lambda,
                       ExpLossKind kind, bool with_grad, double* pred_out = nullptr,
                       double* exp_out = nullptr,
                       const std::vector<const Tensor*>& pooled_weights = {});

// (D, H, W) mask block-averaged down to the classifier's feature resolution.
Tensor pool_target(const Tensor& target, int factor);

// Trains a freshly built classifier. The explanation term supervises the
// positive-class saliency of positive samples at the coarse feature
// resolution (targets are average-pooled to match); baseline mode — and any
// mode at lambda 0 — never evaluates that branch, so those runs are
// bit-identical to a plain classifier given the same seed.
ClassifierHistory train_classifier(ResNet3d& net, const std::vector<TrainSample>& data,
                                   const TrainConfig& cfg,
                                   const std::vector<TrainSample>* val = nullptr);

void save_classifier(const std::string& dir, ResNet3d& net, const TrainConfig& cfg);
struct LoadedClassifier {
    ResNet3d net;
    TrainConfig cfg;
};
LoadedClassifier load_classifier(const std::string& dir);

void save_history(const std::string& path, const ClassifierHistory& history);
ClassifierHistory load_history(const std::string& path);

}  // namespace due
