#pragma once

#include <map>
#include <string>
#include <vector>

#include "due/classifier.hpp"
#include "due/metrics.hpp"

namespace due {

// Per-sample evaluation record. Explanation metrics (iou/precision/recall/f1)
// are filled only where has_explanation is true: positives, scored by
// binarizing the full-resolution Grad-CAM saliency against the dense mask.
struct SampleMetrics {
    std::string id;
    int label = 0;
    double p_positive = 0.0;
    bool has_explanation = false;
    double iou = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

struct EvaluationResult {
    std::vector<SampleMetrics> per_sample;
    SweepCurves sweep;                         // threshold sweep over positives
    std::map<std::string, MeanStd> aggregates; // iou/.../accuracy/roc_auc/pr_auc
};

struct EvalSample {
    std::string id;
    int label = 0;
    Tensor volume;   // (D, H, W)
    Tensor gt_mask;  // (D, H, W), binary
};

// Score every sample; positives additionally get explanation metrics at
// `threshold`. Scalar dataset-level metrics (accuracy, roc_auc, pr_auc) enter
// the aggregate map with std_dev 0; roc_auc/pr_auc are omitted when the split
// lacks the classes they need.
EvaluationResult evaluate_samples(ResNet3d& net, const std::vector<EvalSample>& samples,
                                  double threshold = 0.5);

struct ReportInputs {
    std::string classifier_dir;      // checkpoint: meta.json + params.bin
    std::string dataset_dir;         // manifest.json + volumes/masks
    std::string split = "test";      // empty = all samples
    std::string out_dir;
    std::string config_json = "{}";  // snapshot embedded verbatim in the report
    double threshold = 0.5;
    int max_overlays = 6;            // saliency overlay figures to render
};

// Evaluate a stored classifier on a dataset split and write out_dir/report.json
// plus figures/ (middle-slice saliency overlays, sweep curves). Missing input
// artifacts raise one reporting error listing every absence.
EvaluationResult emit_report(const ReportInputs& inputs);

// Parse a report.json back into the exact aggregates/per-sample/sweep values.
EvaluationResult load_report(const std::string& path);

// ---- figure helpers ------------------------------------------------------

struct PlotSeries {
    std::string name;
    std::vector<double> xs;
    std::vector<double> ys;
    std::uint8_t rgb[3] = {220, 90, 40};
};

// Small self-contained line plot (used for sweep curves and lambda
// sensitivity). log_x plots x on a log10 axis; y range is fixed by the caller.
void render_line_plot(const std::string& path, const std::string& title,
                      const std::vector<PlotSeries>& series, bool log_x = false,
                      double y_min = 0.0, double y_max = 1.0);

}  // namespace due
