#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>

#include <unistd.h>

#include "due/uncertainty.hpp"

using namespace due;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("due_uq_" + std::to_string(::getpid()) + "_" + std::to_string(counter()++));
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
    static int& counter() {
        static int c = 0;
        return c;
    }
    std::string str() const { return path.string(); }
};

Tensor blob_slice(int H, int W, double cy, double cx, double r) {
    Tensor s({H, W});
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double d = std::sqrt((y - cy) * (y - cy) + (x - cx) * (x - cx));
            s[int64_t(y) * W + x] = float(std::min(1.0, std::max(0.0, 1.5 - d / r)));
        }
    return s;
}

// sparse pair of single-voxel slices bounding one generated depth
SparseAnnotation tiny_sparse() {
    SparseAnnotation sp;
    Tensor a({1, 1}), b({1, 1});
    a[0] = 1.0f;
    b[0] = 1.0f;
    sp.slices.push_back({0, a});
    sp.slices.push_back({2, b});
    sp.extent = {0, 2};
    return sp;
}

UQConfig tiny_uq() {
    UQConfig c;
    c.width = 4;
    c.latent = 4;
    c.groups = 2;
    c.kl_weight = 1e-2;
    return c;
}

NPContext demo_context(int H, int W, int g = 4) {
    NPContext ctx;
    ctx.past = blob_slice(H, W, H * 0.4, W * 0.4, 2.0);
    ctx.future = blob_slice(H, W, H * 0.6, W * 0.6, 2.5);
    ctx.past_depth = 2;
    ctx.future_depth = 2 + g;
    for (int j = 1; j < g; ++j) ctx.targets.push_back(float(j) / float(g));
    return ctx;
}

UQExample demo_example(int H, int W, int g, uint64_t seed) {
    UQExample ex;
    ex.context = demo_context(H, W, g);
    const int K = int(ex.context.targets.size());
    ex.targets = Tensor({K, H, W});
    Rng rng(seed);
    for (int k = 0; k < K; ++k) {
        Tensor bump = blob_slice(H, W, H * 0.5, W * 0.5, 1.0 + 0.3 * g);
        for (int64_t i = 0; i < bump.numel(); ++i)
            ex.targets[int64_t(k) * H * W + i] =
                0.05f * float(g) * bump[i] + 0.002f * float(rng.uniform());
    }
    return ex;
}

double proj_loss_total(UQPredictor& pred, const UQExample& ex) {
    return uq_example_loss(pred, ex, false).total;
}

void fd_param(UQPredictor& pred, const UQExample& ex, Tensor& w, const Tensor& g, Rng& rng,
              int probes = 6, double eps = 1e-3, double tol = 2e-2) {
    for (int k = 0; k < probes; ++k) {
        int64_t i = rng.randint(0, w.numel() - 1);
        float keep = w[i];
        w[i] = keep + float(eps);
        double lp = proj_loss_total(pred, ex);
        w[i] = keep - float(eps);
        double lm = proj_loss_total(pred, ex);
        w[i] = keep;
        double fd = (lp - lm) / (2.0 * eps);
        double an = double(g[i]);
        double err = std::abs(fd - an) / std::max({1.0, std::abs(fd), std::abs(an)});
        INFO("elem ", i, " fd ", fd, " analytic ", an);
        CHECK(err < tol);
    }
}

}  // namespace

// ------------------------------------------------------------ Monte Carlo

TEST_CASE("mc variance of a deterministic interpolator is identically zero") {
    SparseAnnotation sp = tiny_sparse();
    auto stub = [&](uint64_t) {
        DenseAnnotation d;
        d.mask = Tensor({3, 1, 1});
        d.mask[0] = 1.0f;
        d.mask[1] = 0.7f;
        d.mask[2] = 1.0f;
        d.provenance = MaskProvenance::interpolated;
        return d;
    };
    UncertaintyMap u = mc_variance(stub, sp, 3, 5, 99);
    CHECK(u.source == UncertaintySource::monte_carlo);
    REQUIRE(u.values.shape == std::vector<int>{3, 1, 1});
    for (float v : u.values.v) CHECK(v == 0.0f);
}

TEST_CASE("mc variance hand cases") {
    SparseAnnotation sp = tiny_sparse();

    SUBCASE("values 0 and 1 over two runs give 0.25") {
        int call = 0;
        auto stub = [&](uint64_t) {
            DenseAnnotation d;
            d.mask = Tensor({3, 1, 1});
            d.mask[0] = 1.0f;
            d.mask[1] = (call++ == 0) ? 0.0f : 1.0f;
            d.mask[2] = 1.0f;
            return d;
        };
        UncertaintyMap u = mc_variance(stub, sp, 3, 2, 1);
        CHECK(u.values[1] == doctest::Approx(0.25).epsilon(1e-9));
        CHECK(u.values[0] == 0.0f);
        CHECK(u.values[2] == 0.0f);
    }

    SUBCASE("values 0,0,1,1 over four runs give 0.25") {
        int call = 0;
        auto stub = [&](uint64_t) {
            DenseAnnotation d;
            d.mask = Tensor({3, 1, 1});
            d.mask[1] = (call++ < 2) ? 0.0f : 1.0f;
            return d;
        };
        UncertaintyMap u = mc_variance(stub, sp, 3, 4, 1);
        CHECK(u.values[1] == doctest::Approx(0.25).epsilon(1e-9));
    }

    SUBCASE("fewer than two runs is rejected") {
        auto stub = [&](uint64_t) {
            DenseAnnotation d;
            d.mask = Tensor({3, 1, 1});
            return d;
        };
        CHECK_THROWS_AS(mc_variance(stub, sp, 3, 1, 1), Error);
        try {
            mc_variance(stub, sp, 3, 1, 1);
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::validation);
        }
    }
}

TEST_CASE("mc variance derives per-run seeds from the root seed") {
    SparseAnnotation sp = tiny_sparse();
    std::vector<uint64_t> seen;
    auto stub = [&](uint64_t s) {
        seen.push_back(s);
        DenseAnnotation d;
        d.mask = Tensor({3, 1, 1});
        return d;
    };
    mc_variance(stub, sp, 3, 3, 4242);
    REQUIRE(seen.size() == 3);
    for (int r = 0; r < 3; ++r) CHECK(seen[size_t(r)] == derive_seed(4242, "mc-run", uint64_t(r)));
}

TEST_CASE("mc variance matches the stacked brute-force oracle") {
    const int D = 6, H = 4, W = 5, T = 5;
    SparseAnnotation sp;
    Tensor a({H, W}), b({H, W});
    a.fill(1.0f);
    b.fill(1.0f);
    sp.slices.push_back({1, a});
    sp.slices.push_back({4, b});
    sp.extent = {1, 4};

    auto stub = [&](uint64_t seed) {
        Rng rng(seed);
        DenseAnnotation d;
        d.mask = Tensor({D, H, W});
        for (auto& v : d.mask.v) v = float(rng.uniform());
        const int64_t S = int64_t(H) * W;
        for (int z : {1, 4}) {  // knowns identical across runs, as the contract demands
            float* row = d.mask.data() + int64_t(z) * S;
            std::fill(row, row + S, 1.0f);
        }
        return d;
    };
    UncertaintyMap u = mc_variance(stub, sp, D, T, 777);

    // oracle: stack the runs, mean of squares minus square of mean
    std::vector<Tensor> stack;
    for (int r = 0; r < T; ++r) stack.push_back(stub(derive_seed(777, "mc-run", uint64_t(r))).mask);
    for (int64_t i = 0; i < u.values.numel(); ++i) {
        double s = 0.0, s2 = 0.0;
        for (int r = 0; r < T; ++r) {
            s += stack[size_t(r)][i];
            s2 += double(stack[size_t(r)][i]) * stack[size_t(r)][i];
        }
        double oracle = s2 / T - (s / T) * (s / T);
        CHECK(std::abs(double(u.values[i]) - oracle) < 1e-6);
    }

    // and the known rows are exact zeros
    const int64_t S = int64_t(H) * W;
    for (int z : {1, 4})
        for (int64_t i = 0; i < S; ++i) CHECK(u.values[int64_t(z) * S + i] == 0.0f);
}

TEST_CASE("mc variance over a real denoiser is deterministic") {
    Rng init(3);
    UNet2d net;
    UNetConfig arch;
    arch.w0 = 4;
    arch.w1 = 4;
    arch.w2 = 4;
    arch.temb_dim = 4;
    arch.groups = 2;
    net.configure(arch);
    net.init(init);
    DiffusionSchedule sched = make_schedule(6, 1e-3, 0.05, ScheduleKind::linear);

    SparseAnnotation sp;
    Tensor a = blob_slice(8, 8, 3, 3, 2.0), b = blob_slice(8, 8, 5, 5, 2.0);
    for (auto& v : a.v) v = v > 0.5f ? 1.0f : 0.0f;
    for (auto& v : b.v) v = v > 0.5f ? 1.0f : 0.0f;
    sp.slices.push_back({1, a});
    sp.slices.push_back({3, b});
    sp.extent = {1, 3};

    UncertaintyMap u1 = mc_variance(net, sched, sp, 5, 2, 11);
    UncertaintyMap u2 = mc_variance(net, sched, sp, 5, 2, 11);
    CHECK(u1.values.v == u2.values.v);
    CHECK_NOTHROW(u1.validate());

    const int64_t S = 64;
    for (int z : {1, 3})
        for (int64_t i = 0; i < S; ++i) CHECK(u1.values[int64_t(z) * S + i] == 0.0f);
}

// -------------------------------------------------------------- KL + loss

TEST_CASE("kl between diagonal gaussians") {
    Tensor mu({1, 3}), lv({1, 3});
    mu.fill(0.3f);
    lv.fill(-0.4f);
    CHECK(kl_diag_gaussians(mu, lv, mu, lv) == 0.0);

    // unit-variance mean shift: KL = d^2 / 2
    Tensor mq({1, 1}), lq({1, 1}), mp({1, 1}), lp({1, 1});
    mq[0] = 1.0f;
    CHECK(kl_diag_gaussians(mq, lq, mp, lp) == doctest::Approx(0.5).epsilon(1e-12));

    // variance-only gap: KL = (e^l - 1 - l) / 2
    mq[0] = 0.0f;
    lq[0] = float(std::log(2.0));
    CHECK(kl_diag_gaussians(mq, lq, mp, lp) ==
          doctest::Approx(0.5 * (2.0 - 1.0 - std::log(2.0))).epsilon(1e-6));

    // asymmetry
    CHECK(kl_diag_gaussians(mq, lq, mp, lp) != doctest::Approx(kl_diag_gaussians(mp, lp, mq, lq)));

    Tensor bad({1, 2});
    CHECK_THROWS_AS(kl_diag_gaussians(mu, lv, bad, bad), Error);
}

TEST_CASE("example loss is pure and decomposes as recon + weighted kl") {
    UQPredictor pred;
    pred.configure(tiny_uq());
    Rng rng(17);
    pred.init(rng);

    UQExample ex = demo_example(8, 8, 4, 5);
    UQLossParts a = uq_example_loss(pred, ex, false);
    UQLossParts b = uq_example_loss(pred, ex, false);
    CHECK(a.total == b.total);  // identical inputs, identical per-sample losses
    CHECK(a.recon == b.recon);
    CHECK(a.kl == b.kl);
    CHECK(a.total == a.recon + pred.cfg.kl_weight * a.kl);
    CHECK(a.recon >= 0.0);
    CHECK(a.kl >= 0.0);

    // zero kl weight leaves the pure reconstruction objective
    UQPredictor pred0;
    UQConfig cfg0 = tiny_uq();
    cfg0.kl_weight = 0.0;
    pred0.configure(cfg0);
    Rng rng0(17);
    pred0.init(rng0);
    UQLossParts c = uq_example_loss(pred0, ex, false);
    CHECK(c.total == c.recon);
    CHECK(c.recon == doctest::Approx(a.recon).epsilon(1e-12));  // same params, same recon

    // gradient accumulation does not change the value
    nn::ParamList ps = pred.params();
    nn::zero_grads(ps);
    UQLossParts d = uq_example_loss(pred, ex, true);
    CHECK(d.total == a.total);

    UQExample bad = ex;
    bad.targets = Tensor({1, 8, 8});
    CHECK_THROWS_AS(uq_example_loss(pred, bad, false), Error);
}

TEST_CASE("example loss gradients agree with finite differences") {
    UQPredictor pred;
    pred.configure(tiny_uq());
    Rng rng(23);
    pred.init(rng);

    UQExample ex = demo_example(8, 8, 3, 9);
    nn::ParamList ps = pred.params();
    nn::zero_grads(ps);
    uq_example_loss(pred, ex, true);

    Rng probe(31);
    fd_param(pred, ex, pred.c1.core.weight.w, pred.c1.core.weight.g, probe);
    fd_param(pred, ex, pred.gap_fc.weight.w, pred.gap_fc.weight.g, probe);
    fd_param(pred, ex, pred.prior_head.weight.w, pred.prior_head.weight.g, probe);
    fd_param(pred, ex, pred.post_head.weight.w, pred.post_head.weight.g, probe);
    fd_param(pred, ex, pred.t1c.core.weight.w, pred.t1c.core.weight.g, probe);
    fd_param(pred, ex, pred.d2c.core.weight.w, pred.d2c.core.weight.g, probe);
    fd_param(pred, ex, pred.zproj.weight.w, pred.zproj.weight.g, probe);
    fd_param(pred, ex, pred.dg1.gamma.w, pred.dg1.gamma.g, probe);
    fd_param(pred, ex, pred.cg2.beta.w, pred.cg2.beta.g, probe);
    fd_param(pred, ex, pred.d3c.core.bias.w, pred.d3c.core.bias.g, probe, 2);
}

// ---------------------------------------------------------------- training

TEST_CASE("uq training reduces the objective deterministically") {
    std::vector<UQExample> exs;
    for (int g : {2, 3, 4, 4, 3, 2})
        exs.push_back(demo_example(8, 8, g, uint64_t(100 + g)));

    UQTrainConfig cfg;
    cfg.arch = tiny_uq();
    cfg.epochs = 8;
    cfg.batch_size = 3;
    cfg.lr = 2e-3;
    cfg.seed = 55;

    UQPredictor pred;
    EpochHistory hist = train_uq_predictor(pred, exs, cfg);
    REQUIRE(hist.epoch_loss.size() == 8);
    for (double l : hist.epoch_loss) CHECK(std::isfinite(l));
    CHECK(hist.epoch_loss.back() < hist.epoch_loss.front());

    UQPredictor pred2;
    EpochHistory hist2 = train_uq_predictor(pred2, exs, cfg);
    CHECK(hist2.epoch_loss == hist.epoch_loss);
    nn::ParamList pa = pred.params(), pb = pred2.params();
    for (size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->w.v == pb[i]->w.v);

    UQPredictor pred3;
    CHECK_THROWS_AS(train_uq_predictor(pred3, {}, cfg), Error);
    try {
        train_uq_predictor(pred3, {}, cfg);
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::training);
    }
}

// --------------------------------------------------------------- inference

TEST_CASE("prediction is deterministic, nonnegative, and counted") {
    UQPredictor pred;
    pred.configure(tiny_uq());
    Rng rng(41);
    pred.init(rng);

    NPContext ctx = demo_context(8, 8, 4);
    REQUIRE(ctx.targets.size() == 3);
    UncertaintyMap a = predict_uncertainty(pred, ctx);
    UncertaintyMap b = predict_uncertainty(pred, ctx);
    CHECK(a.source == UncertaintySource::predicted);
    REQUIRE(a.values.shape == std::vector<int>{3, 8, 8});  // one image per fraction
    CHECK(a.values.v == b.values.v);
    for (float v : a.values.v) CHECK(v >= 0.0f);

    NPContext bad = ctx;
    bad.targets = {0.5f, 0.25f};
    CHECK_THROWS_AS(predict_uncertainty(pred, bad), Error);
    bad.targets = {};
    CHECK_THROWS_AS(predict_uncertainty(pred, bad), Error);
    bad.targets = {0.0f};
    CHECK_THROWS_AS(predict_uncertainty(pred, bad), Error);
    bad = ctx;
    bad.future_depth = bad.past_depth;
    CHECK_THROWS_AS(predict_uncertainty(pred, bad), Error);
}

TEST_CASE("volume prediction concatenates per-interval outputs") {
    UQPredictor pred;
    pred.configure(tiny_uq());
    Rng rng(43);
    pred.init(rng);

    const int H = 8, W = 8, D = 8;
    const int64_t S = int64_t(H) * W;
    SparseAnnotation sp;
    Tensor a = blob_slice(H, W, 3, 3, 2.0), b = blob_slice(H, W, 5, 5, 2.0);
    for (auto& v : a.v) v = v > 0.5f ? 1.0f : 0.0f;
    for (auto& v : b.v) v = v > 0.5f ? 1.0f : 0.0f;
    sp.slices.push_back({2, a});
    sp.slices.push_back({5, b});
    sp.extent = {2, 5};

    UncertaintyMap u = predict_uncertainty_volume(pred, sp, D);
    REQUIRE(u.values.shape == std::vector<int>{D, H, W});

    // interior depths 3,4 match a manual per-interval prediction
    NPContext ctx;
    ctx.past = a;
    ctx.future = b;
    ctx.past_depth = 2;
    ctx.future_depth = 5;
    ctx.targets = {1.0f / 3, 2.0f / 3};
    UncertaintyMap manual = predict_uncertainty(pred, ctx);
    for (int64_t i = 0; i < S; ++i) {
        CHECK(u.values[3 * S + i] == manual.values[i]);
        CHECK(u.values[4 * S + i] == manual.values[S + i]);
    }
    // knowns and depths outside the extent stay zero
    for (int z : {0, 1, 2, 5, 6, 7})
        for (int64_t i = 0; i < S; ++i) CHECK(u.values[int64_t(z) * S + i] == 0.0f);

    SparseAnnotation lone;
    lone.slices.push_back({2, a});
    lone.extent = {2, 2};
    CHECK_THROWS_AS(predict_uncertainty_volume(pred, lone, D), Error);
}

TEST_CASE("uq checkpoints round-trip through disk") {
    TempDir tmp;
    std::vector<UQExample> exs;
    for (int g : {2, 3, 4}) exs.push_back(demo_example(8, 8, g, uint64_t(g)));

    UQTrainConfig cfg;
    cfg.arch = tiny_uq();
    cfg.epochs = 2;
    cfg.batch_size = 2;
    cfg.seed = 7;

    UQPredictor pred;
    EpochHistory hist = train_uq_predictor(pred, exs, cfg);
    save_uq_predictor(tmp.str() + "/uq", pred, cfg, hist);

    UQPredictor loaded = load_uq_predictor(tmp.str() + "/uq");
    CHECK(loaded.cfg.width == pred.cfg.width);
    CHECK(loaded.cfg.latent == pred.cfg.latent);
    CHECK(loaded.cfg.kl_weight == pred.cfg.kl_weight);

    NPContext ctx = demo_context(8, 8, 3);
    UncertaintyMap a = predict_uncertainty(pred, ctx);
    UncertaintyMap b = predict_uncertainty(loaded, ctx);
    CHECK(a.values.v == b.values.v);

    std::ofstream bad(tmp.str() + "/uq/meta.json", std::ios::trunc);
    bad << "still not json";
    bad.close();
    CHECK_THROWS_AS(load_uq_predictor(tmp.str() + "/uq"), Error);
    CHECK_THROWS_AS(load_uq_predictor(tmp.str() + "/missing"), Error);
}

// ----------------------------------------------------------------- weights

TEST_CASE("weights from uncertainty follow the flipped sigmoid with min-max") {
    SUBCASE("constant uncertainty degenerates to all ones") {
        UncertaintyMap u;
        u.values = Tensor({2, 2, 2});
        WeightMap w = uncertainty_to_weights(u, {});
        for (float v : w.values.v) CHECK(v == 1.0f);

        u.values.fill(0.37f);
        w = uncertainty_to_weights(u, {});
        for (float v : w.values.v) CHECK(v == 1.0f);
    }

    SUBCASE("hand case: raw weights 0.5 and 0.25 normalize to 1 and 0") {
        UncertaintyMap u;
        u.values = Tensor({1, 1, 2});
        u.values[0] = 0.0f;
        u.values[1] = float(std::log(3.0));
        WeightMap w = uncertainty_to_weights(u, {});
        CHECK(w.values[0] == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(w.values[1] == doctest::Approx(0.0).epsilon(1e-12));
    }

    SUBCASE("known depths pin to 1 and stay out of the normalization") {
        UncertaintyMap u;
        u.values = Tensor({3, 1, 2});
        // known depth 0 carries zeros (the map invariant); generated rows in [0.1, 0.2]
        u.values[0] = 0.0f;
        u.values[1] = 0.0f;
        u.values[2] = 0.1f;
        u.values[3] = 0.2f;
        u.values[4] = 0.15f;
        u.values[5] = 0.1f;
        WeightMap w = uncertainty_to_weights(u, {0});
        CHECK(w.values[0] == 1.0f);
        CHECK(w.values[1] == 1.0f);
        // if the known row leaked into min-max, u = 0.1 could not reach weight 1
        CHECK(w.values[2] == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(w.values[3] == doctest::Approx(0.0).epsilon(1e-12));
        CHECK(w.values[5] == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(w.values[4] > 0.0f);
        CHECK(w.values[4] < 1.0f);
    }

    SUBCASE("monotone non-increasing in uncertainty, attains 0 and 1") {
        UncertaintyMap u;
        u.values = Tensor({2, 4, 4});
        Rng rng(3);
        for (auto& v : u.values.v) v = float(rng.uniform(0.0, 0.3));
        WeightMap w = uncertainty_to_weights(u, {});
        bool saw0 = false, saw1 = false;
        for (int64_t i = 0; i < u.values.numel(); ++i) {
            for (int64_t j = 0; j < u.values.numel(); ++j)
                if (u.values[i] < u.values[j]) CHECK(w.values[i] >= w.values[j]);
            saw0 = saw0 || w.values[i] == 0.0f;
            saw1 = saw1 || w.values[i] == 1.0f;
        }
        CHECK(saw0);
        CHECK(saw1);
    }

    SUBCASE("out-of-range known depth is rejected") {
        UncertaintyMap u;
        u.values = Tensor({2, 2, 2});
        CHECK_THROWS_AS(uncertainty_to_weights(u, {5}), Error);
    }
}

TEST_CASE("supervision targets are weighted interpolations with human slices intact") {
    const int D = 4, H = 2, W = 2;
    const int64_t S = int64_t(H) * W;

    DenseAnnotation interp;
    interp.provenance = MaskProvenance::interpolated;
    interp.mask = Tensor({D, H, W});
    Rng rng(5);
    for (auto& v : interp.mask.v) v = float(rng.uniform());

    SparseAnnotation sp;
    Tensor s0({H, W}), s3({H, W});
    s0.fill(1.0f);
    s3[0] = 1.0f;
    sp.slices.push_back({0, s0});
    sp.slices.push_back({3, s3});
    sp.extent = {0, 3};
    // knowns in the interpolated volume are the human slices
    std::memcpy(interp.mask.data(), s0.data(), size_t(S) * sizeof(float));
    std::memcpy(interp.mask.data() + 3 * S, s3.data(), size_t(S) * sizeof(float));

    WeightMap w;
    w.values = Tensor({D, H, W});
    w.values.fill(0.5f);
    const int64_t kS = 0, k3 = 3 * S;
    for (int64_t i = 0; i < S; ++i) {
        w.values[kS + i] = 1.0f;
        w.values[k3 + i] = 1.0f;
    }

    DenseAnnotation target = build_supervision_target(interp, w, sp);
    CHECK(target.provenance == MaskProvenance::interpolated);
    for (int64_t i = 0; i < S; ++i) {
        CHECK(target.mask[i] == s0[i]);
        CHECK(target.mask[3 * S + i] == s3[i]);
    }
    for (int z : {1, 2})
        for (int64_t i = 0; i < S; ++i)
            CHECK(target.mask[int64_t(z) * S + i] ==
                  doctest::Approx(0.5 * interp.mask[int64_t(z) * S + i]).epsilon(1e-12));

    // simple product example: voxel 1.0 at weight 0.5 becomes 0.5
    interp.mask[S] = 1.0f;
    target = build_supervision_target(interp, w, sp);
    CHECK(target.mask[S] == 0.5f);

    // never exceeds the interpolated mask
    for (int64_t i = 0; i < target.mask.numel(); ++i)
        CHECK(target.mask[i] <= interp.mask[i] + 1e-12f);

    // all-ones weights give back the interpolated mask
    WeightMap ones;
    ones.values = Tensor({D, H, W});
    ones.values.fill(1.0f);
    DenseAnnotation same = build_supervision_target(interp, ones, sp);
    CHECK(same.mask.v == interp.mask.v);

    WeightMap bad;
    bad.values = Tensor({D, H, W + 1});
    CHECK_THROWS_AS(build_supervision_target(interp, bad, sp), Error);
}
