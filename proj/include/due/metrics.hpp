#pragma once

#include "due/tensor.hpp"

namespace due {

// Explanation-overlap and prediction metrics. All functions are pure.
//
// Empty-vs-empty conventions: IoU(empty, empty) = 1 and P/R/F1(empty, empty)
// = 1, so a correct all-negative explanation is not penalized. A denominator
// of zero otherwise yields 0.

struct PrecisionRecallF1 {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

// voxel -> 1 iff value >= threshold
Tensor binarize(const Tensor& saliency, double threshold);

double iou(const Tensor& a, const Tensor& b);

PrecisionRecallF1 precision_recall_f1(const Tensor& pred, const Tensor& gt);

// Mann-Whitney statistic; ties count 1/2. Requires both classes present.
double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels);

// Area under the precision-recall step curve: descending-score sweep with
// ties grouped, area = sum over distinct thresholds of (R_k - R_{k-1}) * P_k
// with R_0 = 0. Step integration, not trapezoids. Requires >= 1 positive.
double pr_auc(const std::vector<double>& scores, const std::vector<int>& labels);

double accuracy(const std::vector<int>& predicted, const std::vector<int>& labels);

struct SweepCurves {
    std::vector<double> thresholds;
    std::vector<double> mean_iou;
    std::vector<double> mean_f1;
};

std::vector<double> default_sweep_thresholds();  // {0, 0.1, ..., 0.9}

SweepCurves threshold_sweep(const std::vector<Tensor>& saliencies,
                            const std::vector<Tensor>& ground_truth,
                            const std::vector<double>& thresholds = default_sweep_thresholds());

struct MeanStd {
    double mean = 0.0;
    double std_dev = 0.0;  // population standard deviation
};

MeanStd mean_std(const std::vector<double>& xs);

}  // namespace due
