#include "due/classifier.hpp"

#include <cmath>

namespace due {

void ClassifierConfig::validate() const {
    require(!widths.empty(), ErrorKind::configuration, "classifier: needs at least one stage");
    require(blocks_per_stage >= 1, ErrorKind::configuration,
            "classifier: blocks_per_stage must be >= 1");
    require(groups >= 1, ErrorKind::configuration, "classifier: groups must be >= 1");
    for (int w : widths)
        require(w > 0 && w % groups == 0, ErrorKind::configuration,
                "classifier: stage widths must be positive multiples of groups");
}

// ---------------------------------------------------------------- ResBlock3d

void ResBlock3d::configure(const std::string& name, int cin_, int cout_, int stride_,
                           int groups) {
    cin = cin_;
    cout = cout_;
    stride = stride_;
    int s1[3] = {stride_, stride_, stride_};
    int s2[3] = {1, 1, 1};
    conv1.configure(name + ".conv1", cin_, cout_, 3, s1);
    conv2.configure(name + ".conv2", cout_, cout_, 3, s2);
    gn1.configure(name + ".gn1", cout_, groups);
    gn2.configure(name + ".gn2", cout_, groups);
    has_skip = (stride_ != 1 || cin_ != cout_);
    if (has_skip) skip.configure(name + ".skip", cin_, cout_, 1, s1);
}

void ResBlock3d::init(Rng& rng) {
    conv1.init(rng);
    conv2.init(rng);
    if (has_skip) skip.init(rng);
    gn1.init();
    gn2.init();
}

void ResBlock3d::collect(nn::ParamList& out) {
    conv1.collect(out);
    conv2.collect(out);
    if (has_skip) skip.collect(out);
    gn1.collect(out);
    gn2.collect(out);
}

Tensor ResBlock3d::forward(const Tensor& x, bool keep_cache) {
    Tensor h = a1.forward(gn1.forward(conv1.forward(x, keep_cache), keep_cache), keep_cache);
    Tensor m = gn2.forward(conv2.forward(h, keep_cache), keep_cache);
    if (has_skip) {
        Tensor sk = skip.forward(x, keep_cache);
        check_same_shape(m, sk, "resblock3d shortcut");
        axpy(1.0f, sk, m);
    } else {
        check_same_shape(m, x, "resblock3d shortcut");
        axpy(1.0f, x, m);
    }
    return a2.forward(m, keep_cache);
}

Tensor ResBlock3d::backward(const Tensor& gout) {
    Tensor g = a2.backward(gout);
    Tensor gx = conv1.backward(gn1.backward(a1.backward(conv2.backward(gn2.backward(g)))));
    if (has_skip)
        axpy(1.0f, skip.backward(g), gx);
    else
        axpy(1.0f, g, gx);
    return gx;
}

// ----------------------------------------------------------------- ResNet3d

void ResNet3d::configure(const ClassifierConfig& cfg_) {
    cfg_.validate();
    cfg = cfg_;
    int s2[3] = {2, 2, 2};
    stem.configure("cls.stem", 1, cfg.widths[0], 3, s2);
    stem_gn.configure("cls.stem_gn", cfg.widths[0], cfg.groups);

    blocks.clear();
    stage_end.clear();
    int cin = cfg.widths[0];
    for (int s = 0; s < cfg.stages(); ++s) {
        int w = cfg.widths[size_t(s)];
        for (int b = 0; b < cfg.blocks_per_stage; ++b) {
            int stride = (b == 0 && s > 0) ? 2 : 1;
            ResBlock3d blk;
            blk.configure("cls.s" + std::to_string(s + 1) + ".b" + std::to_string(b),
                          b == 0 ? cin : w, w, stride, cfg.groups);
            blocks.push_back(std::move(blk));
        }
        cin = w;
        stage_end.push_back(int(blocks.size()));
    }
    head.configure("cls.head", cfg.widths.back(), 2);
}

void ResNet3d::init(Rng& rng) {
    stem.init(rng);
    stem_gn.init();
    for (auto& b : blocks) b.init(rng);
    head.init(rng);
}

nn::ParamList ResNet3d::params() {
    nn::ParamList ps;
    stem.collect(ps);
    stem_gn.collect(ps);
    for (auto& b : blocks) b.collect(ps);
    head.collect(ps);
    return ps;
}

Tensor ResNet3d::forward_features(const Tensor& x, bool keep_cache, int upto) {
    require(x.rank() == 5 && x.dim(1) == 1, ErrorKind::validation,
            "classifier: input must be (N, 1, D, H, W)");
    int f = cfg.downsample_factor();
    for (int i = 2; i < 5; ++i)
        require(x.dim(i) > 0 && x.dim(i) % f == 0, ErrorKind::configuration,
                "classifier: spatial dims must be positive multiples of the " +
                    std::to_string(f) + "x downsampling factor");
    if (upto < 0) upto = cfg.stages();
    require(upto >= 1 && upto <= cfg.stages(), ErrorKind::validation,
            "classifier: stage out of range");

    Tensor h = stem_act.forward(stem_gn.forward(stem.forward(x, keep_cache), keep_cache),
                                keep_cache);
    for (int b = 0; b < stage_end[size_t(upto) - 1]; ++b)
        h = blocks[size_t(b)].forward(h, keep_cache);
    return h;
}

Tensor ResNet3d::forward_head(const Tensor& features, bool keep_cache) {
    require(features.rank() == 5, ErrorKind::validation, "classifier head: rank-5 input");
    feat_shape = features.shape;
    return head.forward(nn::global_avg_pool(features), keep_cache);
}

Tensor ResNet3d::backward_head(const Tensor& glogits) {
    return nn::global_avg_pool_backward(head.backward(glogits), feat_shape);
}

Tensor ResNet3d::backward_features(const Tensor& gfeat, int from) {
    if (from < 0) from = cfg.stages();
    Tensor g = gfeat;
    for (int b = stage_end[size_t(from) - 1] - 1; b >= 0; --b)
        g = blocks[size_t(b)].backward(g);
    return stem.backward(stem_gn.backward(stem_act.backward(g)));
}

Tensor ResNet3d::logits(const Tensor& x, bool keep_cache) {
    return forward_head(forward_features(x, keep_cache), keep_cache);
}

ResNet3d build_classifier(const ClassifierConfig& cfg, uint64_t seed) {
    ResNet3d net;
    net.configure(cfg);
    Rng rng(derive_seed(seed, "cls-init"));
    net.init(rng);
    return net;
}

// ------------------------------------------------------------------ predict

static void softmax2(double l0, double l1, double& p0, double& p1) {
    double m = std::max(l0, l1);
    double e0 = std::exp(l0 - m), e1 = std::exp(l1 - m);
    double z = e0 + e1;
    p0 = e0 / z;
    p1 = e1 / z;
}

std::array<double, 2> predict(ResNet3d& net, const Tensor& volume) {
    require(volume.rank() == 3, ErrorKind::validation, "predict: volume must be (D, H, W)");
    Tensor x({1, 1, volume.dim(0), volume.dim(1), volume.dim(2)});
    x.v = volume.v;
    Tensor lg = net.logits(x, false);
    std::array<double, 2> p{};
    softmax2(lg[0], lg[1], p[0], p[1]);
    return p;
}

Tensor predict_batch(ResNet3d& net, const Tensor& volumes) {
    require(volumes.rank() == 5, ErrorKind::validation,
            "predict_batch: input must be (N, 1, D, H, W)");
    Tensor lg = net.logits(volumes, false);
    Tensor out({volumes.dim(0), 2});
    for (int n = 0; n < volumes.dim(0); ++n) {
        double p0, p1;
        softmax2(lg[n * 2], lg[n * 2 + 1], p0, p1);
        out[n * 2] = float(p0);
        out[n * 2 + 1] = float(p1);
    }
    return out;
}

// ----------------------------------------------------------------- Grad-CAM

int resolve_layer_id(const ClassifierConfig& cfg, const std::string& layer_id) {
    for (int s = 1; s <= cfg.stages(); ++s)
        if (layer_id == "stage" + std::to_string(s)) return s;
    fail(ErrorKind::validation, "gradcam3d: unknown layer id '" + layer_id + "'");
}

Saliency gradcam3d(ResNet3d& net, const Tensor& volume, int target_class,
                   const std::string& layer_id) {
    require(volume.rank() == 3, ErrorKind::validation, "gradcam3d: volume must be (D, H, W)");
    require(target_class == 0 || target_class == 1, ErrorKind::validation,
            "gradcam3d: target class must be 0 or 1");
    int stage = resolve_layer_id(net.cfg, layer_id);

    // the pass below accumulates into parameter gradients; stash and restore
    nn::ParamList ps = net.params();
    std::vector<std::vector<float>> saved;
    saved.reserve(ps.size());
    for (auto* p : ps) saved.push_back(p->g.v);

    Tensor x({1, 1, volume.dim(0), volume.dim(1), volume.dim(2)});
    x.v = volume.v;

    Tensor act = net.forward_features(x, true, stage);
    Tensor h = act;
    for (int b = net.stage_end[size_t(stage) - 1]; b < int(net.blocks.size()); ++b)
        h = net.blocks[size_t(b)].forward(h, true);
    net.forward_head(h, true);

    Tensor glogits({1, 2});
    glogits[target_class] = 1.0f;
    Tensor gact = net.backward_head(glogits);
    for (int b = int(net.blocks.size()) - 1; b >= net.stage_end[size_t(stage) - 1]; --b)
        gact = net.blocks[size_t(b)].backward(gact);

    for (size_t i = 0; i < ps.size(); ++i) ps[i]->g.v = std::move(saved[i]);

    // spatially averaged score gradient per channel, then rectified weighted sum
    int C = act.dim(1);
    int64_t nvox = int64_t(act.dim(2)) * act.dim(3) * act.dim(4);
    std::vector<double> alpha(size_t(C), 0.0);
    for (int k = 0; k < C; ++k) {
        double acc = 0.0;
        const float* g = gact.data() + int64_t(k) * nvox;
        for (int64_t i = 0; i < nvox; ++i) acc += g[i];
        alpha[size_t(k)] = acc / double(nvox);
    }
    Tensor coarse({act.dim(2), act.dim(3), act.dim(4)});
    for (int64_t i = 0; i < nvox; ++i) {
        double s = 0.0;
        for (int k = 0; k < C; ++k) s += alpha[size_t(k)] * act[int64_t(k) * nvox + i];
        coarse[i] = s > 0.0 ? float(s) : 0.0f;
    }

    Saliency sal;
    sal.values = nn::upsample_trilinear(coarse, volume.dim(0), volume.dim(1), volume.dim(2));
    float mn = sal.values.min_value(), mx = sal.values.max_value();
    if (mx > mn) {
        for (auto& v : sal.values.v) v = (v - mn) / (mx - mn);
    } else {
        sal.values.zero();
    }
    sal.target_class = target_class;
    sal.layer = layer_id;
    return sal;
}

// ------------------------------------------------------ explanation losses

const char* to_string(ExpLossKind kind) {
    switch (kind) {
        case ExpLossKind::l1: return "l1";
        case ExpLossKind::bce: return "bce";
        case ExpLossKind::mse: return "mse";
    }
    return "l1";
}

ExpLossKind exp_loss_kind_from_string(const std::string& s) {
    if (s == "l1") return ExpLossKind::l1;
    if (s == "bce") return ExpLossKind::bce;
    if (s == "mse") return ExpLossKind::mse;
    fail(ErrorKind::configuration, "unknown explanation loss kind: " + s);
}

static constexpr double kBceEps = 1e-6;

double explanation_loss(const Tensor& saliency, const Tensor& target, ExpLossKind kind,
                        const Tensor* weights) {
    check_same_shape(saliency, target, "explanation_loss");
    require(saliency.numel() > 0, ErrorKind::validation, "explanation_loss: empty input");
    if (weights) check_same_shape(saliency, *weights, "explanation_loss weights");
    int64_t n = saliency.numel();
    auto wt = [&](int64_t i) { return weights ? double((*weights)[i]) : 1.0; };
    double acc = 0.0;
    switch (kind) {
        case ExpLossKind::l1:
            for (int64_t i = 0; i < n; ++i)
                acc += wt(i) * std::abs(double(saliency[i]) - target[i]);
            break;
        case ExpLossKind::mse:
            for (int64_t i = 0; i < n; ++i) {
                double d = double(saliency[i]) - target[i];
                acc += wt(i) * d * d;
            }
            break;
        case ExpLossKind::bce:
            for (int64_t i = 0; i < n; ++i) {
                double s = std::min(std::max(double(saliency[i]), kBceEps), 1.0 - kBceEps);
                double t = target[i];
                acc -= wt(i) * (t * std::log(s) + (1.0 - t) * std::log(1.0 - s));
            }
            break;
    }
    return acc / double(n);
}

double explanation_loss_grad(const Tensor& saliency, const Tensor& target, ExpLossKind kind,
                             Tensor& gsal, double scale, const Tensor* weights) {
    check_same_shape(saliency, target, "explanation_loss");
    check_same_shape(saliency, gsal, "explanation_loss grad");
    require(saliency.numel() > 0, ErrorKind::validation, "explanation_loss: empty input");
    if (weights) check_same_shape(saliency, *weights, "explanation_loss weights");
    int64_t n = saliency.numel();
    const double inv_n = 1.0 / double(n);
    auto wt = [&](int64_t i) { return weights ? double((*weights)[i]) : 1.0; };
    double acc = 0.0;
    switch (kind) {
        case ExpLossKind::l1:
            for (int64_t i = 0; i < n; ++i) {
                double w = wt(i);
                double d = double(saliency[i]) - target[i];
                acc += w * std::abs(d);
                double sg = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
                gsal[i] += float(scale * w * sg * inv_n);
            }
            break;
        case ExpLossKind::mse:
            for (int64_t i = 0; i < n; ++i) {
                double w = wt(i);
                double d = double(saliency[i]) - target[i];
                acc += w * d * d;
                gsal[i] += float(scale * w * 2.0 * d * inv_n);
            }
            break;
        case ExpLossKind::bce:
            for (int64_t i = 0; i < n; ++i) {
                double w = wt(i);
                double raw = saliency[i];
                double s = std::min(std::max(raw, kBceEps), 1.0 - kBceEps);
                double t = target[i];
                acc -= w * (t * std::log(s) + (1.0 - t) * std::log(1.0 - s));
                if (raw > kBceEps && raw < 1.0 - kBceEps)
                    gsal[i] += float(scale * w * (-t / s + (1.0 - t) / (1.0 - s)) * inv_n);
            }
            break;
    }
    return acc / double(n);  // same rounding as the value-only path
}

}  // namespace due
