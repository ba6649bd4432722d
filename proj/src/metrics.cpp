#include "due/metrics.hpp"

#include <algorithm>

namespace due {

Tensor binarize(const Tensor& saliency, double threshold) {
    require(threshold >= 0.0 && threshold <= 1.0, ErrorKind::validation,
            "binarize threshold must be in [0, 1]");
    Tensor out(saliency.shape);
    int64_t n = saliency.numel();
    for (int64_t i = 0; i < n; ++i) out[i] = double(saliency[i]) >= threshold ? 1.0f : 0.0f;
    return out;
}

double iou(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "iou");
    int64_t inter = 0, uni = 0;
    int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) {
        bool av = a[i] >= 0.5f, bv = b[i] >= 0.5f;
        inter += (av && bv);
        uni += (av || bv);
    }
    if (uni == 0) return 1.0;  // both empty
    return double(inter) / double(uni);
}

PrecisionRecallF1 precision_recall_f1(const Tensor& pred, const Tensor& gt) {
    check_same_shape(pred, gt, "precision_recall_f1");
    int64_t tp = 0, fp = 0, fn = 0;
    int64_t n = pred.numel();
    for (int64_t i = 0; i < n; ++i) {
        bool p = pred[i] >= 0.5f, g = gt[i] >= 0.5f;
        tp += (p && g);
        fp += (p && !g);
        fn += (!p && g);
    }
    PrecisionRecallF1 r;
    if (tp + fp + fn == 0) {
        r.precision = r.recall = r.f1 = 1.0;  // both masks empty
        return r;
    }
    r.precision = (tp + fp) > 0 ? double(tp) / double(tp + fp) : 0.0;
    r.recall = (tp + fn) > 0 ? double(tp) / double(tp + fn) : 0.0;
    r.f1 = (r.precision + r.recall) > 0 ? 2.0 * r.precision * r.recall / (r.precision + r.recall)
                                        : 0.0;
    return r;
}

double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    require(scores.size() == labels.size(), ErrorKind::validation,
            "roc_auc: scores/labels length mismatch");
    int64_t n_pos = 0, n_neg = 0;
    for (int y : labels) (y == 1 ? n_pos : n_neg)++;
    require(n_pos > 0 && n_neg > 0, ErrorKind::metric_undefined,
            "roc_auc undefined: both classes must be present");

    size_t n = scores.size();
    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return scores[a] < scores[b]; });

    // average ranks over tie groups, 1-based
    double rank_sum_pos = 0.0;
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        double avg_rank = 0.5 * double(i + 1 + j);  // mean of ranks i+1 .. j
        for (size_t k = i; k < j; ++k)
            if (labels[order[k]] == 1) rank_sum_pos += avg_rank;
        i = j;
    }
    return (rank_sum_pos - 0.5 * double(n_pos) * double(n_pos + 1)) /
           (double(n_pos) * double(n_neg));
}

double pr_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    require(scores.size() == labels.size(), ErrorKind::validation,
            "pr_auc: scores/labels length mismatch");
    int64_t n_pos = 0;
    for (int y : labels) n_pos += (y == 1);
    require(n_pos > 0, ErrorKind::metric_undefined, "pr_auc undefined: no positive labels");

    size_t n = scores.size();
    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return scores[a] > scores[b]; });

    double area = 0.0;
    double prev_recall = 0.0;
    int64_t tp = 0, fp = 0;
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        for (size_t k = i; k < j; ++k) (labels[order[k]] == 1 ? tp : fp)++;
        double recall = double(tp) / double(n_pos);
        double precision = double(tp) / double(tp + fp);
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    return area;
}

double accuracy(const std::vector<int>& predicted, const std::vector<int>& labels) {
    require(predicted.size() == labels.size() && !labels.empty(), ErrorKind::validation,
            "accuracy: predicted/labels length mismatch or empty");
    int64_t hit = 0;
    for (size_t i = 0; i < labels.size(); ++i) hit += (predicted[i] == labels[i]);
    return double(hit) / double(labels.size());
}

std::vector<double> default_sweep_thresholds() {
    std::vector<double> t;
    for (int i = 0; i < 10; ++i) t.push_back(0.1 * i);
    return t;
}

SweepCurves threshold_sweep(const std::vector<Tensor>& saliencies,
                            const std::vector<Tensor>& ground_truth,
                            const std::vector<double>& thresholds) {
    require(!saliencies.empty(), ErrorKind::validation, "threshold_sweep: empty input");
    require(saliencies.size() == ground_truth.size(), ErrorKind::validation,
            "threshold_sweep: saliency/ground-truth lists must align");
    SweepCurves curves;
    curves.thresholds = thresholds;
    for (double t : thresholds) {
        double iou_acc = 0.0, f1_acc = 0.0;
        for (size_t i = 0; i < saliencies.size(); ++i) {
            Tensor bin = binarize(saliencies[i], t);
            iou_acc += iou(bin, ground_truth[i]);
            f1_acc += precision_recall_f1(bin, ground_truth[i]).f1;
        }
        curves.mean_iou.push_back(iou_acc / double(saliencies.size()));
        curves.mean_f1.push_back(f1_acc / double(saliencies.size()));
    }
    return curves;
}

MeanStd mean_std(const std::vector<double>& xs) {
    require(!xs.empty(), ErrorKind::validation, "mean_std: empty input");
    MeanStd r;
    double s = 0.0;
    for (double x : xs) s += x;
    r.mean = s / double(xs.size());
    double q = 0.0;
    for (double x : xs) q += (x - r.mean) * (x - r.mean);
    r.std_dev = std::sqrt(q / double(xs.size()));
    return r;
}

}  // namespace due
