#include "due/uncertainty.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

namespace due {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

// ------------------------------------------------------------------ types

const char* to_string(UncertaintySource s) {
    return s == UncertaintySource::monte_carlo ? "monte_carlo" : "predicted";
}

UncertaintySource uncertainty_source_from_string(const std::string& s) {
    if (s == "monte_carlo") return UncertaintySource::monte_carlo;
    if (s == "predicted") return UncertaintySource::predicted;
    fail(ErrorKind::configuration, "unknown uncertainty source: " + s);
}

void UncertaintyMap::validate() const {
    require(values.rank() == 3, ErrorKind::validation, "uncertainty map must be rank 3");
    for (float v : values.v)
        require(std::isfinite(v) && v >= 0.0f, ErrorKind::validation,
                "uncertainty values must be finite and nonnegative");
}

void WeightMap::validate() const {
    require(values.rank() == 3, ErrorKind::validation, "weight map must be rank 3");
    for (float v : values.v)
        require(v >= 0.0f && v <= 1.0f, ErrorKind::validation, "weights must lie in [0, 1]");
}

void NPContext::validate() const {
    require(past.rank() == 2, ErrorKind::validation, "context slices must be rank 2");
    check_same_shape(past, future, "np context");
    require(future_depth > past_depth, ErrorKind::validation,
            "context: future depth must exceed past depth");
    require(!targets.empty(), ErrorKind::validation, "context: no target fractions");
    float prev = 0.0f;
    for (float f : targets) {
        require(f > 0.0f && f < 1.0f, ErrorKind::validation,
                "context: target fractions must lie strictly inside (0, 1)");
        require(f > prev, ErrorKind::validation,
                "context: target fractions must be strictly increasing");
        prev = f;
    }
}

// --------------------------------------------------------- Monte Carlo

UncertaintyMap mc_variance(const std::function<DenseAnnotation(uint64_t)>& run,
                           const SparseAnnotation& sparse, int depth, int t_runs,
                           uint64_t root_seed) {
    require(t_runs >= 2, ErrorKind::validation, "mc_variance: need at least 2 runs");
    sparse.validate();

    std::vector<double> sum, sum_sq;
    std::vector<float> first;
    std::vector<char> varies;
    std::vector<int> shape;
    for (int r = 0; r < t_runs; ++r) {
        DenseAnnotation vol = run(derive_seed(root_seed, "mc-run", uint64_t(r)));
        if (r == 0) {
            shape = vol.mask.shape;
            require(vol.mask.rank() == 3 && vol.depth() == depth, ErrorKind::validation,
                    "mc_variance: run output has unexpected shape");
            sum.assign(size_t(vol.mask.numel()), 0.0);
            sum_sq.assign(size_t(vol.mask.numel()), 0.0);
            first.assign(vol.mask.v.begin(), vol.mask.v.end());
            varies.assign(size_t(vol.mask.numel()), 0);
        } else {
            require(vol.mask.shape == shape, ErrorKind::validation,
                    "mc_variance: run outputs disagree in shape");
        }
        for (int64_t i = 0; i < vol.mask.numel(); ++i) {
            double v = vol.mask[i];
            sum[size_t(i)] += v;
            sum_sq[size_t(i)] += v * v;
            if (vol.mask[i] != first[size_t(i)]) varies[size_t(i)] = 1;
        }
    }

    UncertaintyMap out;
    out.source = UncertaintySource::monte_carlo;
    out.values = Tensor(shape);
    const double inv_t = 1.0 / double(t_runs);
    for (int64_t i = 0; i < out.values.numel(); ++i) {
        if (!varies[size_t(i)]) {
            out.values[i] = 0.0f;  // identical outcomes: exactly zero, no residue
            continue;
        }
        double m = sum[size_t(i)] * inv_t;
        out.values[i] = float(std::max(0.0, sum_sq[size_t(i)] * inv_t - m * m));
    }

    // known depths are copied, never generated: exactly zero by contract
    const int64_t S = int64_t(shape[1]) * shape[2];
    for (const auto& s : sparse.slices) {
        float* row = out.values.data() + int64_t(s.depth_index) * S;
        std::fill(row, row + S, 0.0f);
    }
    out.validate();
    return out;
}

UncertaintyMap mc_variance(UNet2d& net, const DiffusionSchedule& sched,
                           const SparseAnnotation& sparse, int depth, int t_runs,
                           uint64_t root_seed, int block) {
    auto run = [&](uint64_t seed) {
        return interpolate_volume(net, sched, sparse, depth, seed, block);
    };
    return mc_variance(run, sparse, depth, t_runs, root_seed);
}

// ------------------------------------------------------------- predictor

void UQConfig::validate() const {
    require(width > 0 && latent > 0, ErrorKind::configuration,
            "uq: width and latent must be positive");
    require(groups > 0 && width % groups == 0 && (2 * width) % groups == 0,
            ErrorKind::configuration, "uq: groups must divide the trunk widths");
    require(kl_weight >= 0.0, ErrorKind::configuration, "uq: kl_weight must be nonnegative");
}

void UQPredictor::configure(const UQConfig& cfg_) {
    cfg_.validate();
    cfg = cfg_;
    const int w = cfg.width;
    c1.configure("uq.c1", 2, w, 3, 2);
    cg1.configure("uq.cg1", w, cfg.groups);
    c2.configure("uq.c2", w, 2 * w, 3, 2);
    cg2.configure("uq.cg2", 2 * w, cfg.groups);
    gap_fc.configure("uq.gap_fc", 1, 8);
    prior_head.configure("uq.prior", cfg.ctx_dim(), 2 * cfg.latent);
    t1c.configure("uq.t1", 2, w, 3, 2);
    tg1.configure("uq.tg1", w, cfg.groups);
    t2c.configure("uq.t2", w, 2 * w, 3, 2);
    tg2.configure("uq.tg2", 2 * w, cfg.groups);
    post_head.configure("uq.post", cfg.ctx_dim() + 2 * w, 2 * cfg.latent);
    d1c.configure("uq.d1", 3, w, 3, 1);
    dg1.configure("uq.dg1", w, cfg.groups);
    d2c.configure("uq.d2", w, w, 3, 1);
    dg2.configure("uq.dg2", w, cfg.groups);
    d3c.configure("uq.d3", w, 1, 3, 1);
    zproj.configure("uq.zproj", cfg.latent + cfg.ctx_dim(), w);
}

void UQPredictor::init(Rng& rng) {
    c1.init(rng);
    cg1.init();
    c2.init(rng);
    cg2.init();
    gap_fc.init(rng);
    prior_head.init(rng);
    t1c.init(rng);
    tg1.init();
    t2c.init(rng);
    tg2.init();
    post_head.init(rng);
    d1c.init(rng);
    dg1.init();
    d2c.init(rng);
    dg2.init();
    d3c.init(rng);
    zproj.init(rng);
}

nn::ParamList UQPredictor::params() {
    nn::ParamList out;
    c1.collect(out);
    cg1.collect(out);
    c2.collect(out);
    cg2.collect(out);
    gap_fc.collect(out);
    prior_head.collect(out);
    t1c.collect(out);
    tg1.collect(out);
    t2c.collect(out);
    tg2.collect(out);
    post_head.collect(out);
    d1c.collect(out);
    dg1.collect(out);
    d2c.collect(out);
    dg2.collect(out);
    d3c.collect(out);
    zproj.collect(out);
    return out;
}

double kl_diag_gaussians(const Tensor& mu_q, const Tensor& logvar_q, const Tensor& mu_p,
                         const Tensor& logvar_p) {
    check_same_shape(mu_q, logvar_q, "kl");
    check_same_shape(mu_q, mu_p, "kl");
    check_same_shape(mu_q, logvar_p, "kl");
    double acc = 0.0;
    for (int64_t i = 0; i < mu_q.numel(); ++i) {
        double lq = logvar_q[i], lp = logvar_p[i];
        double dm = double(mu_q[i]) - double(mu_p[i]);
        acc += 0.5 * (std::exp(lq - lp) + dm * dm * std::exp(-lp) - 1.0 + lp - lq);
    }
    return acc;
}

namespace {

// (1, A) ++ (1, B) -> (1, A + B)
Tensor cat_rows(const Tensor& a, const Tensor& b) {
    Tensor out({1, a.dim(1) + b.dim(1)});
    std::memcpy(out.data(), a.data(), size_t(a.numel()) * sizeof(float));
    std::memcpy(out.data() + a.numel(), b.data(), size_t(b.numel()) * sizeof(float));
    return out;
}

void split_row(const Tensor& g, int a, Tensor& ga, Tensor& gb) {
    ga = Tensor({1, a});
    gb = Tensor({1, g.dim(1) - a});
    std::memcpy(ga.data(), g.data(), size_t(a) * sizeof(float));
    std::memcpy(gb.data(), g.data() + a, size_t(g.dim(1) - a) * sizeof(float));
}

Tensor context_input(const NPContext& ctx) {
    const int H = ctx.past.dim(0), W = ctx.past.dim(1);
    const int64_t S = int64_t(H) * W;
    Tensor in({1, 2, H, W});
    std::memcpy(in.data(), ctx.past.data(), size_t(S) * sizeof(float));
    std::memcpy(in.data() + S, ctx.future.data(), size_t(S) * sizeof(float));
    return in;
}

Tensor decoder_input(const NPContext& ctx) {
    const int K = int(ctx.targets.size());
    const int H = ctx.past.dim(0), W = ctx.past.dim(1);
    const int64_t S = int64_t(H) * W;
    Tensor in({K, 3, H, W});
    for (int k = 0; k < K; ++k) {
        float* row = in.data() + int64_t(k) * 3 * S;
        std::memcpy(row, ctx.past.data(), size_t(S) * sizeof(float));
        std::memcpy(row + S, ctx.future.data(), size_t(S) * sizeof(float));
        for (int64_t i = 0; i < S; ++i) row[2 * S + i] = ctx.targets[size_t(k)];
    }
    return in;
}

// trunk embedding of (past, future, gap) -> (1, ctx_dim)
Tensor context_forward(UQPredictor& P, const NPContext& ctx, bool keep,
                       std::vector<int>* e2_shape = nullptr) {
    Tensor e1 = P.ca1.forward(P.cg1.forward(P.c1.forward(context_input(ctx), keep), keep), keep);
    Tensor e2 = P.ca2.forward(P.cg2.forward(P.c2.forward(e1, keep), keep), keep);
    if (e2_shape) *e2_shape = e2.shape;
    Tensor cf = nn::global_avg_pool(e2);

    Tensor gin({1, 1});
    gin[0] = float(ctx.gap());
    Tensor ge = P.ga.forward(P.gap_fc.forward(gin, keep), keep);
    return cat_rows(cf, ge);
}

// decoder: (z, context features, fraction planes) -> (K, 1, H, W), softplus'd
Tensor decode_forward(UQPredictor& P, const NPContext& ctx, const Tensor& z, const Tensor& ctxf,
                      bool keep, std::vector<int>* h_shape = nullptr) {
    const int K = int(ctx.targets.size());
    Tensor h = P.d1c.forward(decoder_input(ctx), keep);

    Tensor zb = P.zproj.forward(cat_rows(z, ctxf), keep);  // (1, w)
    const int C = h.dim(1);
    const int64_t S = int64_t(h.dim(2)) * h.dim(3);
    for (int k = 0; k < K; ++k)
        for (int c = 0; c < C; ++c) {
            float add = zb[c];
            float* hp = h.data() + (int64_t(k) * C + c) * S;
            for (int64_t i = 0; i < S; ++i) hp[i] += add;
        }
    if (h_shape) *h_shape = h.shape;

    Tensor h2 = P.da1.forward(P.dg1.forward(h, keep), keep);
    Tensor h3 = P.da2.forward(P.dg2.forward(P.d2c.forward(h2, keep), keep), keep);
    return P.out_act.forward(P.d3c.forward(h3, keep), keep);
}

}  // namespace

UQLossParts uq_example_loss(UQPredictor& P, const UQExample& example, bool accumulate_grads,
                            double grad_scale) {
    const NPContext& ctx = example.context;
    ctx.validate();
    const int K = int(ctx.targets.size());
    const int H = ctx.past.dim(0), W = ctx.past.dim(1);
    require(example.targets.rank() == 3 && example.targets.dim(0) == K &&
                example.targets.dim(1) == H && example.targets.dim(2) == W,
            ErrorKind::validation, "uq example: targets must stack (K, H, W) over the fractions");

    const int L = P.cfg.latent;
    const bool keep = accumulate_grads;

    std::vector<int> e2_shape;
    Tensor ctxf = context_forward(P, ctx, keep, &e2_shape);

    Tensor pp = P.prior_head.forward(ctxf, keep);  // (1, 2L)
    Tensor mu_p, lv_p;
    split_row(pp, L, mu_p, lv_p);

    // posterior sees the context plus the mean-aggregated target encodings
    const int64_t S = int64_t(H) * W;
    Tensor tin({K, 2, H, W});
    for (int k = 0; k < K; ++k) {
        float* row = tin.data() + int64_t(k) * 2 * S;
        std::memcpy(row, example.targets.data() + int64_t(k) * S, size_t(S) * sizeof(float));
        for (int64_t i = 0; i < S; ++i) row[S + i] = ctx.targets[size_t(k)];
    }
    Tensor f1 = P.ta1.forward(P.tg1.forward(P.t1c.forward(tin, keep), keep), keep);
    Tensor f2 = P.ta2.forward(P.tg2.forward(P.t2c.forward(f1, keep), keep), keep);
    std::vector<int> f2_shape = f2.shape;
    Tensor tf = nn::global_avg_pool(f2);  // (K, 2w)

    const int TW = tf.dim(1);
    Tensor tagg({1, TW});
    for (int c = 0; c < TW; ++c) {
        double acc = 0.0;
        for (int k = 0; k < K; ++k) acc += tf[int64_t(k) * TW + c];
        tagg[c] = float(acc / double(K));
    }

    Tensor qq = P.post_head.forward(cat_rows(ctxf, tagg), keep);
    Tensor mu_q, lv_q;
    split_row(qq, L, mu_q, lv_q);

    // deterministic bound: decode from the posterior mean
    std::vector<int> h_shape;
    Tensor pv = decode_forward(P, ctx, mu_q, ctxf, keep, &h_shape);  // (K, 1, H, W)

    UQLossParts parts;
    const int64_t M = pv.numel();
    double acc = 0.0;
    for (int64_t i = 0; i < M; ++i) {
        double d = double(pv[i]) - double(example.targets[i]);
        acc += d * d;
    }
    parts.recon = acc / double(M);
    parts.kl = kl_diag_gaussians(mu_q, lv_q, mu_p, lv_p);
    parts.total = parts.recon + P.cfg.kl_weight * parts.kl;

    if (!accumulate_grads) return parts;

    const double s = grad_scale;
    const double klw = P.cfg.kl_weight;

    // ---- decoder
    Tensor gpv(pv.shape);
    for (int64_t i = 0; i < M; ++i)
        gpv[i] = float(s * 2.0 * (double(pv[i]) - double(example.targets[i])) / double(M));
    Tensor gh3 = P.d3c.backward(P.out_act.backward(gpv));
    Tensor gh2 = P.d2c.backward(P.dg2.backward(P.da2.backward(gh3)));
    Tensor gh = P.dg1.backward(P.da1.backward(gh2));

    const int C = h_shape[1];
    const int64_t HS = int64_t(h_shape[2]) * h_shape[3];
    Tensor gzb({1, C});
    for (int c = 0; c < C; ++c) {
        double a = 0.0;
        for (int k = 0; k < K; ++k) {
            const float* gp = gh.data() + (int64_t(k) * C + c) * HS;
            for (int64_t i = 0; i < HS; ++i) a += gp[i];
        }
        gzb[c] = float(a);
    }
    P.d1c.backward(gh);  // decoder input is data, gradient discarded
    Tensor gzin = P.zproj.backward(gzb);
    Tensor gz, gctx_dec;
    split_row(gzin, L, gz, gctx_dec);

    // ---- KL term
    Tensor gmu_q = gz;  // z == mu_q
    Tensor glv_q({1, L}), gmu_p({1, L}), glv_p({1, L});
    for (int i = 0; i < L; ++i) {
        double lq = lv_q[i], lp = lv_p[i];
        double dm = double(mu_q[i]) - double(mu_p[i]);
        double e = std::exp(lq - lp);
        gmu_q[i] += float(s * klw * dm * std::exp(-lp));
        glv_q[i] = float(s * klw * 0.5 * (e - 1.0));
        gmu_p[i] = float(-s * klw * dm * std::exp(-lp));
        glv_p[i] = float(s * klw * 0.5 * (1.0 - e - dm * dm * std::exp(-lp)));
    }

    // ---- posterior path
    Tensor gqin = P.post_head.backward(cat_rows(gmu_q, glv_q));
    Tensor gctx_post, gtagg;
    split_row(gqin, ctxf.dim(1), gctx_post, gtagg);

    Tensor gtf({K, TW});
    for (int k = 0; k < K; ++k)
        for (int c = 0; c < TW; ++c) gtf[int64_t(k) * TW + c] = gtagg[c] / float(K);
    Tensor gf2 = nn::global_avg_pool_backward(gtf, f2_shape);
    Tensor gf1 = P.t2c.backward(P.tg2.backward(P.ta2.backward(gf2)));
    P.t1c.backward(P.tg1.backward(P.ta1.backward(gf1)));

    // ---- prior path
    Tensor gctx_prior = P.prior_head.backward(cat_rows(gmu_p, glv_p));

    // ---- context trunk collects all three uses
    Tensor gctx = gctx_dec;
    axpy(1.0f, gctx_post, gctx);
    axpy(1.0f, gctx_prior, gctx);
    Tensor gcf, gge;
    split_row(gctx, e2_shape[1], gcf, gge);

    Tensor ge2 = nn::global_avg_pool_backward(gcf, e2_shape);
    Tensor ge1 = P.c2.backward(P.cg2.backward(P.ca2.backward(ge2)));
    P.c1.backward(P.cg1.backward(P.ca1.backward(ge1)));
    P.gap_fc.backward(P.ga.backward(gge));

    return parts;
}

EpochHistory train_uq_predictor(UQPredictor& pred, const std::vector<UQExample>& examples,
                                const UQTrainConfig& cfg) {
    require(!examples.empty(), ErrorKind::training, "train_uq_predictor: no training examples");
    require(cfg.epochs >= 1 && cfg.batch_size >= 1, ErrorKind::configuration,
            "train_uq_predictor: epochs and batch_size must be positive");

    pred.configure(cfg.arch);
    Rng init_rng(derive_seed(cfg.seed, "uq-init"));
    pred.init(init_rng);

    nn::ParamList params = pred.params();
    nn::Adam opt(cfg.lr);

    const size_t n = examples.size();
    std::vector<size_t> order(n);
    EpochHistory history;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng rng(derive_seed(cfg.seed, "uq-epoch", uint64_t(epoch)));
        for (size_t i = 0; i < n; ++i) order[i] = i;
        rng.shuffle(order);

        double loss_sum = 0.0;
        for (size_t start = 0; start < n; start += size_t(cfg.batch_size)) {
            size_t nb = std::min(size_t(cfg.batch_size), n - start);
            nn::zero_grads(params);
            for (size_t b = 0; b < nb; ++b) {
                UQLossParts parts =
                    uq_example_loss(pred, examples[order[start + b]], true, 1.0 / double(nb));
                loss_sum += parts.total;
            }
            nn::clip_grad_norm(params, cfg.clip_norm);
            opt.step(params);
        }
        history.epoch_loss.push_back(loss_sum / double(n));
    }
    return history;
}

UncertaintyMap predict_uncertainty(UQPredictor& P, const NPContext& context) {
    context.validate();
    const int K = int(context.targets.size());
    const int H = context.past.dim(0), W = context.past.dim(1);

    Tensor ctxf = context_forward(P, context, /*keep=*/false);
    Tensor pp = P.prior_head.forward(ctxf, false);
    Tensor mu_p, lv_p;
    split_row(pp, P.cfg.latent, mu_p, lv_p);
    Tensor pv = decode_forward(P, context, mu_p, ctxf, /*keep=*/false);

    UncertaintyMap out;
    out.source = UncertaintySource::predicted;
    out.values = Tensor({K, H, W});
    std::memcpy(out.values.data(), pv.data(), size_t(pv.numel()) * sizeof(float));
    out.validate();
    return out;
}

UncertaintyMap predict_uncertainty_volume(UQPredictor& pred, const SparseAnnotation& sparse,
                                          int depth) {
    sparse.validate();
    require(sparse.slices.size() >= 2, ErrorKind::validation,
            "predict_uncertainty_volume: need at least 2 annotated slices");
    require(depth > sparse.extent.second, ErrorKind::validation,
            "predict_uncertainty_volume: depth does not cover the annotated extent");

    const int H = sparse.slices[0].mask.dim(0);
    const int W = sparse.slices[0].mask.dim(1);
    const int64_t S = int64_t(H) * W;

    UncertaintyMap out;
    out.source = UncertaintySource::predicted;
    out.values = Tensor({depth, H, W});

    for (size_t i = 0; i + 1 < sparse.slices.size(); ++i) {
        const auto& lo = sparse.slices[i];
        const auto& hi = sparse.slices[i + 1];
        const int d = hi.depth_index - lo.depth_index;
        if (d < 2) continue;
        NPContext ctx;
        ctx.past = lo.mask;
        ctx.future = hi.mask;
        ctx.past_depth = lo.depth_index;
        ctx.future_depth = hi.depth_index;
        for (int j = 1; j < d; ++j) ctx.targets.push_back(float(j) / float(d));
        UncertaintyMap part = predict_uncertainty(pred, ctx);
        for (int j = 1; j < d; ++j)
            std::memcpy(out.values.data() + int64_t(lo.depth_index + j) * S,
                        part.values.data() + int64_t(j - 1) * S, size_t(S) * sizeof(float));
    }
    out.validate();
    return out;
}

void save_uq_predictor(const std::string& dir, UQPredictor& pred, const UQTrainConfig& cfg,
                       const EpochHistory& history) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    require(!ec, ErrorKind::io, "cannot create checkpoint directory: " + dir);

    nn::ParamList params = pred.params();
    nn::save_params(dir + "/params.bin", params);

    json meta;
    meta["format_version"] = 1;
    meta["arch"] = {{"width", pred.cfg.width},
                    {"latent", pred.cfg.latent},
                    {"groups", pred.cfg.groups},
                    {"kl_weight", pred.cfg.kl_weight}};
    meta["train"] = {{"epochs", cfg.epochs},
                     {"batch_size", cfg.batch_size},
                     {"lr", cfg.lr},
                     {"clip_norm", cfg.clip_norm},
                     {"seed", cfg.seed}};
    meta["history"] = {{"epoch_loss", history.epoch_loss}};

    std::ofstream out(dir + "/meta.json", std::ios::binary);
    require(bool(out), ErrorKind::io, "cannot write " + dir + "/meta.json");
    out << meta.dump(2) << "\n";
    require(bool(out), ErrorKind::io, "failed writing " + dir + "/meta.json");
}

UQPredictor load_uq_predictor(const std::string& dir) {
    std::ifstream in(dir + "/meta.json", std::ios::binary);
    require(bool(in), ErrorKind::io, "cannot open " + dir + "/meta.json");
    json meta;
    try {
        in >> meta;
    } catch (const json::exception& e) {
        fail(ErrorKind::corrupt_file, std::string("bad uq meta.json: ") + e.what());
    }

    UQConfig arch;
    try {
        const auto& a = meta.at("arch");
        arch.width = a.at("width").get<int>();
        arch.latent = a.at("latent").get<int>();
        arch.groups = a.at("groups").get<int>();
        arch.kl_weight = a.at("kl_weight").get<double>();
    } catch (const json::exception& e) {
        fail(ErrorKind::corrupt_file, std::string("incomplete uq meta.json: ") + e.what());
    }

    UQPredictor pred;
    pred.configure(arch);
    nn::ParamList params = pred.params();
    nn::load_params(dir + "/params.bin", params);
    return pred;
}

// --------------------------------------------------------------- weights

WeightMap uncertainty_to_weights(const UncertaintyMap& u, const std::vector<int>& known_depths) {
    u.validate();
    const int D = u.values.dim(0), H = u.values.dim(1), W = u.values.dim(2);
    const int64_t S = int64_t(H) * W;

    std::vector<char> known(size_t(D), 0);
    for (int z : known_depths) {
        require(z >= 0 && z < D, ErrorKind::validation,
                "uncertainty_to_weights: known depth out of range");
        known[size_t(z)] = 1;
    }

    WeightMap out;
    out.values = Tensor(u.values.shape);

    // stable flipped sigmoid: u >= 0, so compute via exp(-u)
    auto raw_weight = [](double v) {
        double e = std::exp(-v);
        return e / (1.0 + e);
    };

    double lo = 0.0, hi = 0.0;
    bool any = false;
    for (int z = 0; z < D; ++z) {
        if (known[size_t(z)]) continue;
        const float* row = u.values.data() + int64_t(z) * S;
        for (int64_t i = 0; i < S; ++i) {
            double r = raw_weight(row[i]);
            if (!any) {
                lo = hi = r;
                any = true;
            } else {
                lo = std::min(lo, r);
                hi = std::max(hi, r);
            }
        }
    }

    for (int z = 0; z < D; ++z) {
        float* wrow = out.values.data() + int64_t(z) * S;
        if (known[size_t(z)]) {
            std::fill(wrow, wrow + S, 1.0f);
            continue;
        }
        const float* row = u.values.data() + int64_t(z) * S;
        if (!any || hi == lo) {
            std::fill(wrow, wrow + S, 1.0f);  // constant uncertainty: stated convention
            continue;
        }
        const double inv = 1.0 / (hi - lo);
        for (int64_t i = 0; i < S; ++i)
            wrow[i] = float((raw_weight(row[i]) - lo) * inv);
    }
    out.validate();
    return out;
}

DenseAnnotation build_supervision_target(const DenseAnnotation& interpolated,
                                         const WeightMap& weights,
                                         const SparseAnnotation& sparse) {
    require(interpolated.mask.shape == weights.values.shape, ErrorKind::validation,
            "build_supervision_target: shape mismatch");
    weights.validate();
    sparse.validate();

    const int D = interpolated.depth();
    const int64_t S = int64_t(interpolated.height()) * interpolated.width();

    DenseAnnotation out;
    out.provenance = MaskProvenance::interpolated;
    out.mask = Tensor(interpolated.mask.shape);
    for (int64_t i = 0; i < out.mask.numel(); ++i)
        out.mask[i] = weights.values[i] * interpolated.mask[i];

    // human slices pass through untouched
    for (const auto& s : sparse.slices) {
        require(s.depth_index >= 0 && s.depth_index < D, ErrorKind::validation,
                "build_supervision_target: sparse depth out of range");
        require(s.mask.numel() == S, ErrorKind::validation,
                "build_supervision_target: sparse slice shape mismatch");
        std::memcpy(out.mask.data() + int64_t(s.depth_index) * S, s.mask.data(),
                    size_t(S) * sizeof(float));
    }
    return out;
}

}  // namespace due
