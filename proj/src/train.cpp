#include "due/train.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

namespace due {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

const char* to_string(TrainMode mode) {
    switch (mode) {
        case TrainMode::baseline: return "baseline";
        case TrainMode::baseline_plus: return "baseline_plus";
        case TrainMode::due: return "due";
    }
    return "baseline";
}

TrainMode train_mode_from_string(const std::string& s) {
    if (s == "baseline") return TrainMode::baseline;
    if (s == "baseline_plus") return TrainMode::baseline_plus;
    if (s == "due") return TrainMode::due;
    fail(ErrorKind::configuration, "unknown train mode: " + s);
}

void TrainConfig::validate() const {
    require(lambda_exp >= 0.0, ErrorKind::configuration, "train: lambda must be >= 0");
    require(epochs >= 1, ErrorKind::configuration, "train: epochs must be >= 1");
    require(batch_size >= 1, ErrorKind::configuration, "train: batch_size must be >= 1");
    require(lr > 0.0, ErrorKind::configuration, "train: lr must be positive");
    require(clip_norm > 0.0, ErrorKind::configuration, "train: clip_norm must be positive");
    arch.validate();
}

double prediction_loss(const Tensor& logits, const std::vector<int>& labels) {
    require(logits.rank() == 2 && logits.dim(1) == 2, ErrorKind::validation,
            "prediction_loss: logits must be (N, 2)");
    require(size_t(logits.dim(0)) == labels.size(), ErrorKind::validation,
            "prediction_loss: label count mismatch");
    require(!labels.empty(), ErrorKind::validation, "prediction_loss: empty batch");
    double acc = 0.0;
    for (size_t n = 0; n < labels.size(); ++n) {
        require(labels[n] == 0 || labels[n] == 1, ErrorKind::validation,
                "prediction_loss: labels must be 0 or 1");
        double l0 = logits[int64_t(n) * 2], l1 = logits[int64_t(n) * 2 + 1];
        double m = std::max(l0, l1);
        double lse = m + std::log(std::exp(l0 - m) + std::exp(l1 - m));
        acc += lse - (labels[n] == 0 ? l0 : l1);
    }
    return acc / double(labels.size());
}

Tensor pool_target(const Tensor& target, int factor) {
    require(target.rank() == 3, ErrorKind::validation, "pool_target: mask must be (D, H, W)");
    Tensor t5({1, 1, target.dim(0), target.dim(1), target.dim(2)});
    t5.v = target.v;
    Tensor p = nn::avg_pool3d(t5, factor, factor, factor);
    Tensor out({p.dim(2), p.dim(3), p.dim(4)});
    out.v = std::move(p.v);
    return out;
}

// Explanation term for one positive batch element. The coarse map is the
// rectified activation sum weighted per channel by the positive-class head
// weight over the voxel count — the spatial mean of the class-score gradient.
// The gradient therefore has two paths: through the activations with the
// channel weights held fixed, and through the head weights that define them.
static double explanation_term(ResNet3d& net, const Tensor& A, int b, const Tensor& pooled,
                               ExpLossKind kind, double scale, bool with_grad, Tensor* gA,
                               const Tensor* pooled_w = nullptr) {
    int C = A.dim(1);
    int64_t nvox = int64_t(A.dim(2)) * A.dim(3) * A.dim(4);
    const float* W = net.head.weight.w.data();  // (2, C); row 1 = positive class
    std::vector<double> alpha(static_cast<size_t>(C));
    for (int k = 0; k < C; ++k) alpha[size_t(k)] = double(W[C + k]) / double(nvox);

    const float* Ab = A.data() + int64_t(b) * C * nvox;
    Tensor coarse({A.dim(2), A.dim(3), A.dim(4)});
    check_same_shape(coarse, pooled, "explanation target (pooled)");
    std::vector<double> pre(static_cast<size_t>(nvox));
    for (int64_t i = 0; i < nvox; ++i) {
        double s = 0.0;
        for (int k = 0; k < C; ++k) s += alpha[size_t(k)] * Ab[int64_t(k) * nvox + i];
        pre[size_t(i)] = s;
        coarse[i] = s > 0.0 ? float(s) : 0.0f;
    }

    if (!with_grad) return explanation_loss(coarse, pooled, kind, pooled_w);

    Tensor gco(coarse.shape);
    double loss = explanation_loss_grad(coarse, pooled, kind, gco, 1.0, pooled_w);

    float* gAb = gA->data() + int64_t(b) * C * nvox;
    float* Wg = net.head.weight.g.data();
    for (int k = 0; k < C; ++k) {
        double wsum = 0.0;
        for (int64_t i = 0; i < nvox; ++i) {
            if (pre[size_t(i)] <= 0.0) continue;  // rectifier gate
            double gm = gco[i];
            gAb[int64_t(k) * nvox + i] += float(scale * gm * alpha[size_t(k)]);
            wsum += gm * Ab[int64_t(k) * nvox + i];
        }
        Wg[C + k] += float(scale * wsum / double(nvox));
    }
    return loss;
}

double batch_objective(ResNet3d& net, const Tensor& xb, const std::vector<int>& labels,
                       const std::vector<const Tensor*>& pooled_targets, double lambda,
                       ExpLossKind kind, bool with_grad, double* pred_out, double* exp_out,
                       const std::vector<const Tensor*>& pooled_weights) {
    require(xb.rank() == 5, ErrorKind::validation, "batch_objective: input must be rank 5");
    int nb = xb.dim(0);
    require(size_t(nb) == labels.size() && size_t(nb) == pooled_targets.size(),
            ErrorKind::validation, "batch_objective: batch size mismatch");
    require(pooled_weights.empty() || pooled_weights.size() == size_t(nb),
            ErrorKind::validation, "batch_objective: weight count mismatch");
    require(lambda >= 0.0, ErrorKind::configuration, "batch_objective: lambda must be >= 0");
    auto weight_of = [&](int b) {
        return pooled_weights.empty() ? nullptr : pooled_weights[size_t(b)];
    };
    bool active = lambda > 0.0;
    if (active)
        for (int b = 0; b < nb; ++b)
            require(labels[size_t(b)] != 1 || pooled_targets[size_t(b)] != nullptr,
                    ErrorKind::configuration,
                    "batch_objective: positive sample lacks an explanation target");

    Tensor A = net.forward_features(xb, with_grad);
    Tensor logits = net.forward_head(A, with_grad);
    double pred = prediction_loss(logits, labels);

    double exp_sum = 0.0;
    if (with_grad) {
        Tensor glogits({nb, 2});
        for (int b = 0; b < nb; ++b) {
            int y = labels[size_t(b)];
            double l0 = logits[b * 2], l1 = logits[b * 2 + 1];
            double m = std::max(l0, l1);
            double e0 = std::exp(l0 - m), e1 = std::exp(l1 - m);
            double z = e0 + e1;
            glogits[b * 2] = float((e0 / z - (y == 0 ? 1.0 : 0.0)) / nb);
            glogits[b * 2 + 1] = float((e1 / z - (y == 1 ? 1.0 : 0.0)) / nb);
        }
        Tensor gA = net.backward_head(glogits);
        if (active)
            for (int b = 0; b < nb; ++b)
                if (labels[size_t(b)] == 1)
                    exp_sum += explanation_term(net, A, b, *pooled_targets[size_t(b)], kind,
                                                lambda / nb, true, &gA, weight_of(b));
        net.backward_features(gA);
    } else if (active) {
        for (int b = 0; b < nb; ++b)
            if (labels[size_t(b)] == 1)
                exp_sum += explanation_term(net, A, b, *pooled_targets[size_t(b)], kind, 0.0,
                                            false, nullptr, weight_of(b));
    }

    double exp_mean = exp_sum / double(nb);
    if (pred_out) *pred_out = pred;
    if (exp_out) *exp_out = active ? exp_mean : 0.0;
    // at lambda = 0 the total IS the prediction loss, bit for bit
    return active ? pred + lambda * exp_mean : pred;
}

static Tensor stack_volumes(const std::vector<TrainSample>& data, const std::vector<size_t>& idx,
                            size_t begin, size_t end) {
    const auto& vs = data[idx[begin]].volume.shape;
    Tensor xb({int(end - begin), 1, vs[0], vs[1], vs[2]});
    int64_t stride = data[idx[begin]].volume.numel();
    for (size_t b = begin; b < end; ++b)
        std::copy(data[idx[b]].volume.v.begin(), data[idx[b]].volume.v.end(),
                  xb.v.begin() + int64_t(b - begin) * stride);
    return xb;
}

static void eval_validation(ResNet3d& net, const std::vector<TrainSample>& val, int batch_size,
                            double& accuracy, double& pred) {
    std::vector<size_t> idx(val.size());
    std::iota(idx.begin(), idx.end(), size_t(0));
    double ce = 0.0;
    int64_t correct = 0;
    for (size_t begin = 0; begin < val.size(); begin += size_t(batch_size)) {
        size_t end = std::min(val.size(), begin + size_t(batch_size));
        Tensor xb = stack_volumes(val, idx, begin, end);
        Tensor lg = net.logits(xb, false);
        std::vector<int> labels;
        for (size_t b = begin; b < end; ++b) labels.push_back(val[b].label);
        ce += prediction_loss(lg, labels) * double(end - begin);
        for (size_t b = begin; b < end; ++b) {
            int pred_label = lg[int64_t(b - begin) * 2 + 1] > lg[int64_t(b - begin) * 2] ? 1 : 0;
            if (pred_label == val[b].label) ++correct;
        }
    }
    accuracy = double(correct) / double(val.size());
    pred = ce / double(val.size());
}

ClassifierHistory train_classifier(ResNet3d& net, const std::vector<TrainSample>& data,
                                   const TrainConfig& cfg,
                                   const std::vector<TrainSample>* val) {
    cfg.validate();
    require(!data.empty(), ErrorKind::training, "train_classifier: empty training set");
    const auto& vshape = data[0].volume.shape;
    auto check_sample = [&](const TrainSample& s) {
        require(s.volume.rank() == 3, ErrorKind::validation,
                "train_classifier: volumes must be (D, H, W)");
        require(s.volume.shape == vshape, ErrorKind::validation,
                "train_classifier: all volumes must share one shape");
        require(s.label == 0 || s.label == 1, ErrorKind::validation,
                "train_classifier: labels must be 0 or 1");
        if (s.has_target()) check_same_shape(s.target, s.volume, "train_classifier target");
        if (s.has_weight()) {
            require(s.has_target(), ErrorKind::validation,
                    "train_classifier: a loss weight map needs a target");
            check_same_shape(s.weight, s.volume, "train_classifier weight");
        }
    };
    for (const auto& s : data) {
        check_sample(s);
        if (cfg.mode != TrainMode::baseline && s.label == 1)
            require(s.has_target(), ErrorKind::configuration,
                    std::string(to_string(cfg.mode)) +
                        " mode needs a supervision target for every positive sample");
    }
    if (val)
        for (const auto& s : *val) check_sample(s);

    net = build_classifier(cfg.arch, cfg.seed);
    nn::ParamList ps = net.params();
    nn::Adam adam(cfg.lr);

    // baseline mode and lambda = 0 never evaluate the explanation branch, so
    // those runs stay bit-identical to a plain classifier under the same seed
    bool active = cfg.mode != TrainMode::baseline && cfg.lambda_exp > 0.0;
    int factor = cfg.arch.downsample_factor();
    std::vector<Tensor> pooled(data.size());
    std::vector<Tensor> pooled_w(data.size());
    bool any_weight = false;
    if (active)
        for (size_t i = 0; i < data.size(); ++i)
            if (data[i].label == 1) {
                pooled[i] = pool_target(data[i].target, factor);
                if (data[i].has_weight()) {
                    pooled_w[i] = pool_target(data[i].weight, factor);
                    any_weight = true;
                }
            }

    ClassifierHistory hist;
    size_t n = data.size();
    for (int e = 0; e < cfg.epochs; ++e) {
        Rng erng(derive_seed(cfg.seed, "cls-epoch", uint64_t(e)));
        std::vector<size_t> idx(n);
        std::iota(idx.begin(), idx.end(), size_t(0));
        erng.shuffle(idx);

        double pred_sum = 0.0, exp_sum = 0.0;
        for (size_t begin = 0; begin < n; begin += size_t(cfg.batch_size)) {
            size_t end = std::min(n, begin + size_t(cfg.batch_size));
            int nb = int(end - begin);
            Tensor xb = stack_volumes(data, idx, begin, end);
            std::vector<int> labels(static_cast<size_t>(nb));
            std::vector<const Tensor*> pp(size_t(nb), nullptr);
            std::vector<const Tensor*> pw;
            if (any_weight) pw.assign(size_t(nb), nullptr);
            for (int b = 0; b < nb; ++b) {
                size_t i = idx[begin + size_t(b)];
                labels[size_t(b)] = data[i].label;
                if (active && data[i].label == 1) {
                    pp[size_t(b)] = &pooled[i];
                    if (any_weight && data[i].has_weight()) pw[size_t(b)] = &pooled_w[i];
                }
            }

            nn::zero_grads(ps);
            double pred = 0.0, expl = 0.0;
            batch_objective(net, xb, labels, pp, active ? cfg.lambda_exp : 0.0, cfg.loss_kind,
                            true, &pred, &expl, pw);
            nn::clip_grad_norm(ps, cfg.clip_norm);
            adam.step(ps);
            pred_sum += pred * nb;
            exp_sum += expl * nb;
        }
        hist.pred_loss.push_back(pred_sum / double(n));
        hist.exp_loss.push_back(active ? exp_sum / double(n) : 0.0);
        if (val) {
            double acc, ce;
            eval_validation(net, *val, cfg.batch_size, acc, ce);
            hist.val_accuracy.push_back(acc);
            hist.val_pred_loss.push_back(ce);
        }
    }
    return hist;
}

// --------------------------------------------------------------- checkpoint

void save_classifier(const std::string& dir, ResNet3d& net, const TrainConfig& cfg) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    require(!ec, ErrorKind::io, "cannot create checkpoint directory: " + dir);

    nn::ParamList params = net.params();
    nn::save_params(dir + "/params.bin", params);

    json meta;
    meta["format_version"] = 1;
    meta["arch"] = {{"widths", cfg.arch.widths},
                    {"blocks_per_stage", cfg.arch.blocks_per_stage},
                    {"groups", cfg.arch.groups}};
    meta["train"] = {{"mode", to_string(cfg.mode)},
                     {"lambda", cfg.lambda_exp},
                     {"loss_kind", to_string(cfg.loss_kind)},
                     {"weight_in_loss", cfg.weight_in_loss},
                     {"epochs", cfg.epochs},
                     {"batch_size", cfg.batch_size},
                     {"lr", cfg.lr},
                     {"clip_norm", cfg.clip_norm},
                     {"seed", cfg.seed}};

    std::ofstream out(dir + "/meta.json", std::ios::binary);
    require(bool(out), ErrorKind::io, "cannot write " + dir + "/meta.json");
    out << meta.dump(2) << "\n";
    require(bool(out), ErrorKind::io, "failed writing " + dir + "/meta.json");
}

LoadedClassifier load_classifier(const std::string& dir) {
    std::ifstream in(dir + "/meta.json", std::ios::binary);
    require(bool(in), ErrorKind::io, "cannot open " + dir + "/meta.json");
    json meta;
    try {
        in >> meta;
    } catch (const json::exception& e) {
        fail(ErrorKind::corrupt_file, std::string("bad classifier meta.json: ") + e.what());
    }

    LoadedClassifier lc;
    try {
        const auto& a = meta.at("arch");
        lc.cfg.arch.widths = a.at("widths").get<std::vector<int>>();
        lc.cfg.arch.blocks_per_stage = a.at("blocks_per_stage").get<int>();
        lc.cfg.arch.groups = a.at("groups").get<int>();
        const auto& t = meta.at("train");
        lc.cfg.mode = train_mode_from_string(t.at("mode").get<std::string>());
        lc.cfg.lambda_exp = t.at("lambda").get<double>();
        lc.cfg.loss_kind = exp_loss_kind_from_string(t.at("loss_kind").get<std::string>());
        lc.cfg.epochs = t.at("epochs").get<int>();
        lc.cfg.batch_size = t.at("batch_size").get<int>();
        lc.cfg.lr = t.at("lr").get<double>();
        lc.cfg.clip_norm = t.at("clip_norm").get<double>();
        lc.cfg.seed = t.at("seed").get<uint64_t>();
    } catch (const json::exception& e) {
        fail(ErrorKind::corrupt_file, std::string("incomplete classifier meta.json: ") + e.what());
    }

    lc.net.configure(lc.cfg.arch);
    nn::ParamList params = lc.net.params();
    nn::load_params(dir + "/params.bin", params);
    return lc;
}

void save_history(const std::string& path, const ClassifierHistory& history) {
    json h;
    h["pred_loss"] = history.pred_loss;
    h["exp_loss"] = history.exp_loss;
    if (!history.val_accuracy.empty()) {
        h["val_accuracy"] = history.val_accuracy;
        h["val_pred_loss"] = history.val_pred_loss;
    }
    std::ofstream out(path, std::ios::binary);
    require(bool(out), ErrorKind::io, "cannot write " + path);
    out << h.dump(2) << "\n";
    require(bool(out), ErrorKind::io, "failed writing " + path);
}

ClassifierHistory load_history(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(bool(in), ErrorKind::io, "cannot open " + path);
    json h;
    try {
        in >> h;
    } catch (const json::exception& e) {
        fail(ErrorKind::corrupt_file, std::string("bad history file: ") + e.what());
    }
    ClassifierHistory hist;
    try {
        hist.pred_loss = h.at("pred_loss").get<std::vector<double>>();
        hist.exp_loss = h.at("exp_loss").get<std::vector<double>>();
        if (h.contains("val_accuracy")) {
            hist.val_accuracy = h.at("val_accuracy").get<std::vector<double>>();
            hist.val_pred_loss = h.at("val_pred_loss").get<std::vector<double>>();
        }
    } catch (const json::exception& e) {
        fail(ErrorKind::corrupt_file, std::string("incomplete history file: ") + e.what());
    }
    return hist;
}

}  // namespace due
