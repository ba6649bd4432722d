#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <functional>

#include "due/nn.hpp"

using namespace due;
using namespace due::nn;
namespace fs = std::filesystem;

namespace {

double proj_loss(const Tensor& y, const Tensor& p) {
    double s = 0.0;
    for (int64_t i = 0; i < y.numel(); ++i) s += double(y[i]) * double(p[i]);
    return s;
}

// Central-difference check of dL/dt for a handful of elements of t, where
// L(t) = sum(p * forward()). `fwd` must recompute the full forward pass.
void fd_check(Tensor& t, const Tensor& analytic, const std::function<double()>& loss, Rng& rng,
              int probes = 12, double eps = 5e-3, double tol = 2e-2) {
    for (int k = 0; k < probes; ++k) {
        int64_t i = rng.randint(0, t.numel() - 1);
        float keep = t[i];
        t[i] = keep + float(eps);
        double lp = loss();
        t[i] = keep - float(eps);
        double lm = loss();
        t[i] = keep;
        double fd = (lp - lm) / (2.0 * eps);
        double an = double(analytic[i]);
        double err = std::abs(fd - an) / std::max({1.0, std::abs(fd), std::abs(an)});
        INFO("elem ", i, " fd ", fd, " analytic ", an);
        CHECK(err < tol);
    }
}

Tensor randn_like(const std::vector<int>& shape, Rng& rng) {
    return Tensor::randn(shape, rng);
}

}  // namespace

TEST_CASE("conv3d shapes") {
    Conv3d c;
    int s1[3] = {1, 1, 1}, s2[3] = {2, 2, 2};
    c.configure("c", 3, 8, 3, s1);
    CHECK(c.out_shape({2, 3, 8, 16, 16}) == std::vector<int>{2, 8, 8, 16, 16});
    Conv3d d;
    d.configure("d", 4, 6, 3, s2);
    CHECK(d.out_shape({1, 4, 32, 64, 64}) == std::vector<int>{1, 6, 16, 32, 32});
    Conv3d e;
    e.configure("e", 4, 6, 1, s1);
    CHECK(e.out_shape({1, 4, 5, 5, 5}) == std::vector<int>{1, 6, 5, 5, 5});
    CHECK_THROWS_AS(c.out_shape({2, 5, 8, 16, 16}), Error);  // channel mismatch
}

TEST_CASE("conv2d matches a direct 2d convolution oracle") {
    Rng rng(101);
    Conv2d c;
    c.configure("c", 2, 3, 3, 1);
    c.init(rng);
    Tensor x = randn_like({1, 2, 5, 6}, rng);
    Tensor y = c.forward(x);
    REQUIRE(y.shape == std::vector<int>{1, 3, 5, 6});

    // independent direct loop; weight layout (co, ci, 1, ky, kx)
    for (int co = 0; co < 3; ++co)
        for (int yo = 0; yo < 5; ++yo)
            for (int xo = 0; xo < 6; ++xo) {
                double acc = double(c.core.bias.w[co]);
                for (int ci = 0; ci < 2; ++ci)
                    for (int ky = 0; ky < 3; ++ky)
                        for (int kx = 0; kx < 3; ++kx) {
                            int yi = yo + ky - 1, xi = xo + kx - 1;
                            if (yi < 0 || yi >= 5 || xi < 0 || xi >= 6) continue;
                            acc += double(c.core.weight.w[((int64_t(co) * 2 + ci) * 9) +
                                                          ky * 3 + kx]) *
                                   double(x[(int64_t(ci) * 5 + yi) * 6 + xi]);
                        }
                CHECK(double(y[(int64_t(co) * 5 + yo) * 6 + xo]) ==
                      doctest::Approx(acc).epsilon(1e-4));
            }
}

TEST_CASE("conv3d gradients match finite differences") {
    for (int stride : {1, 2}) {
        Rng rng(200 + stride);
        Conv3d c;
        int s[3] = {stride, stride, stride};
        c.configure("c", 3, 4, 3, s);
        c.init(rng);
        Tensor x = randn_like({2, 3, 5, 6, 7}, rng);
        Tensor y = c.forward(x);
        Tensor p = randn_like(y.shape, rng);

        ParamList params;
        c.collect(params);
        zero_grads(params);
        Tensor gin = c.backward(p);

        auto loss = [&]() { return proj_loss(c.forward(x, false), p); };
        fd_check(x, gin, loss, rng);
        fd_check(c.weight.w, c.weight.g, loss, rng);
        fd_check(c.bias.w, c.bias.g, loss, rng, 4);
    }
}

TEST_CASE("conv2d gradients match finite differences") {
    Rng rng(321);
    Conv2d c;
    c.configure("c", 2, 4, 3, 2);
    c.init(rng);
    Tensor x = randn_like({2, 2, 8, 9}, rng);
    Tensor y = c.forward(x);
    Tensor p = randn_like(y.shape, rng);
    ParamList params;
    c.collect(params);
    zero_grads(params);
    Tensor gin = c.backward(p);
    auto loss = [&]() { return proj_loss(c.forward(x, false), p); };
    fd_check(x, gin, loss, rng);
    fd_check(c.core.weight.w, c.core.weight.g, loss, rng);
}

TEST_CASE("groupnorm normalizes per group and gradients check out") {
    Rng rng(77);
    GroupNorm gn;
    gn.configure("gn", 6, 3);
    gn.init();
    Tensor x = randn_like({2, 6, 4, 5}, rng);
    for (auto& v : x.v) v = v * 3.0f + 1.5f;  // non-trivial scale/shift
    Tensor y = gn.forward(x);

    // per-(n, group) statistics of the output with unit gamma, zero beta
    const int64_t S = 20, cpg = 2;
    for (int n = 0; n < 2; ++n)
        for (int g = 0; g < 3; ++g) {
            double s = 0.0, sq = 0.0;
            for (int c = 0; c < cpg; ++c)
                for (int64_t i = 0; i < S; ++i) {
                    double v = y[((int64_t(n) * 6 + g * cpg + c) * S) + i];
                    s += v;
                    sq += v * v;
                }
            double mean = s / double(cpg * S);
            double var = sq / double(cpg * S) - mean * mean;
            CHECK(mean == doctest::Approx(0.0).epsilon(1e-4));
            CHECK(std::abs(var - 1.0) < 1e-3);
        }

    for (int64_t i = 0; i < 6; ++i) {
        gn.gamma.w[i] = float(0.5 + 0.2 * double(i));
        gn.beta.w[i] = float(0.1 * double(i) - 0.2);
    }
    Tensor p = randn_like(x.shape, rng);
    ParamList params;
    gn.collect(params);
    zero_grads(params);
    gn.forward(x);
    Tensor gin = gn.backward(p);
    auto loss = [&]() { return proj_loss(gn.forward(x, false), p); };
    fd_check(x, gin, loss, rng, 12, 1e-2, 3e-2);
    fd_check(gn.gamma.w, gn.gamma.g, loss, rng, 6, 1e-2, 3e-2);
    fd_check(gn.beta.w, gn.beta.g, loss, rng, 6, 1e-2, 3e-2);
}

TEST_CASE("linear gradients and shapes") {
    Rng rng(55);
    Linear l;
    l.configure("l", 7, 4);
    l.init(rng);
    Tensor x = randn_like({3, 7}, rng);
    Tensor y = l.forward(x);
    REQUIRE(y.shape == std::vector<int>{3, 4});
    Tensor p = randn_like(y.shape, rng);
    ParamList params;
    l.collect(params);
    zero_grads(params);
    Tensor gin = l.backward(p);
    auto loss = [&]() { return proj_loss(l.forward(x, false), p); };
    fd_check(x, gin, loss, rng);
    fd_check(l.weight.w, l.weight.g, loss, rng);
    fd_check(l.bias.w, l.bias.g, loss, rng, 4);
}

TEST_CASE("activation gradients") {
    Rng rng(88);
    Tensor x = randn_like({2, 3, 4}, rng);
    Tensor p = randn_like(x.shape, rng);

    SiLU silu;
    silu.forward(x);
    Tensor g1 = silu.backward(p);
    auto loss1 = [&]() { return proj_loss(silu.forward(x, false), p); };
    fd_check(x, g1, loss1, rng);

    Softplus sp;
    Tensor y = sp.forward(x);
    for (int64_t i = 0; i < y.numel(); ++i) CHECK(y[i] > 0.0f);  // nonnegative output
    Tensor g2 = sp.backward(p);
    auto loss2 = [&]() { return proj_loss(sp.forward(x, false), p); };
    fd_check(x, g2, loss2, rng);

    ReLU relu;
    // keep probe points away from the kink
    for (auto& v : x.v)
        if (std::abs(v) < 0.05f) v = 0.5f;
    Tensor yr = relu.forward(x);
    for (int64_t i = 0; i < x.numel(); ++i)
        CHECK(yr[i] == (x[i] > 0.0f ? x[i] : 0.0f));
    Tensor g3 = relu.backward(p);
    auto loss3 = [&]() { return proj_loss(relu.forward(x, false), p); };
    fd_check(x, g3, loss3, rng, 12, 1e-3);
}

TEST_CASE("global average pool forward and backward") {
    Tensor x({1, 2, 2, 2});
    for (int64_t i = 0; i < 8; ++i) x[i] = float(i + 1);
    Tensor y = global_avg_pool(x);
    REQUIRE(y.shape == std::vector<int>{1, 2});
    CHECK(y[0] == doctest::Approx(2.5f));   // mean of 1..4
    CHECK(y[1] == doctest::Approx(6.5f));   // mean of 5..8
    Tensor g({1, 2});
    g[0] = 4.0f;
    g[1] = 8.0f;
    Tensor gin = global_avg_pool_backward(g, x.shape);
    CHECK(gin[0] == doctest::Approx(1.0f));
    CHECK(gin[7] == doctest::Approx(2.0f));
}

TEST_CASE("avg_pool3d block means") {
    Tensor x({1, 1, 2, 2, 2});
    for (int64_t i = 0; i < 8; ++i) x[i] = float(i + 1);
    Tensor y = avg_pool3d(x, 2, 2, 2);
    REQUIRE(y.shape == std::vector<int>{1, 1, 1, 1, 1});
    CHECK(y[0] == doctest::Approx(4.5f));
    CHECK_THROWS_AS(avg_pool3d(x, 3, 2, 2), Error);  // 2 % 3 != 0
}

TEST_CASE("trilinear upsample is corner-aligned and exact on ramps") {
    Tensor x({1, 2, 2});
    x[0] = 0.0f;
    x[1] = 3.0f;
    x[2] = 10.0f;
    x[3] = 13.0f;
    Tensor y = upsample_trilinear(x, 1, 2, 4);
    CHECK(y[0] == doctest::Approx(0.0f));
    CHECK(y[1] == doctest::Approx(1.0f));
    CHECK(y[2] == doctest::Approx(2.0f));
    CHECK(y[3] == doctest::Approx(3.0f));
    CHECK(y[4] == doctest::Approx(10.0f));
    CHECK(y[7] == doctest::Approx(13.0f));

    Tensor c = Tensor::full({3, 3, 3}, 0.7f);
    Tensor cu = upsample_trilinear(c, 7, 5, 9);
    CHECK(cu.min_value() == doctest::Approx(0.7f));
    CHECK(cu.max_value() == doctest::Approx(0.7f));

    // batched form matches bare form
    Tensor xb = x;
    xb.shape = {1, 1, 1, 2, 2};
    Tensor yb = upsample_trilinear(xb, 1, 2, 4);
    for (int64_t i = 0; i < y.numel(); ++i) CHECK(yb[i] == y[i]);
}

TEST_CASE("nearest 2x upsample round trip") {
    Rng rng(3);
    Tensor x = randn_like({2, 3, 4, 5}, rng);
    Tensor y = upsample_nearest2x(x);
    REQUIRE(y.shape == std::vector<int>{2, 3, 8, 10});
    CHECK(y[0] == x[0]);
    CHECK(y[1] == x[0]);
    CHECK(y[10] == x[0]);  // (1, 0) of first plane

    Tensor ones = Tensor::full(y.shape, 1.0f);
    Tensor g = upsample_nearest2x_backward(ones);
    CHECK(g.min_value() == doctest::Approx(4.0f));
    CHECK(g.max_value() == doctest::Approx(4.0f));
}

TEST_CASE("channel concat/split round trip") {
    Rng rng(9);
    Tensor a = randn_like({2, 3, 4, 4}, rng);
    Tensor b = randn_like({2, 5, 4, 4}, rng);
    Tensor y = concat_channels(a, b);
    REQUIRE(y.shape == std::vector<int>{2, 8, 4, 4});
    Tensor ga, gb;
    split_channels(y, 3, ga, gb);
    CHECK(ga.v == a.v);
    CHECK(gb.v == b.v);
    Tensor bad = randn_like({2, 5, 3, 4}, rng);
    CHECK_THROWS_AS(concat_channels(a, bad), Error);
}

TEST_CASE("timestep embedding values") {
    Tensor e = timestep_embedding({0.0f, 2.0f}, 4);
    REQUIRE(e.shape == std::vector<int>{2, 4});
    CHECK(e[0] == doctest::Approx(0.0f));            // sin(0)
    CHECK(e[1] == doctest::Approx(0.0f));
    CHECK(e[2] == doctest::Approx(1.0f));            // cos(0)
    CHECK(e[3] == doctest::Approx(1.0f));
    CHECK(e[4] == doctest::Approx(std::sin(2.0)));   // f_0 = 1
    CHECK(e[5] == doctest::Approx(std::sin(2e-4)));  // f_1 = 1e-4
    CHECK(e[6] == doctest::Approx(std::cos(2.0)));
    CHECK(e[7] == doctest::Approx(std::cos(2e-4)));
    CHECK_THROWS_AS(timestep_embedding({1.0f}, 3), Error);
}

TEST_CASE("adam single step matches the hand-computed update") {
    Param p;
    p.init_shape("w", {1});
    p.w[0] = 1.0f;
    p.g[0] = 0.5f;
    Adam opt(0.1);
    opt.step({&p});
    // mhat = g, vhat = g^2 after bias correction at t = 1
    CHECK(p.w[0] == doctest::Approx(1.0 - 0.1 * 0.5 / (0.5 + 1e-8)).epsilon(1e-7));
    p.g[0] = 0.5f;
    opt.step({&p});
    CHECK(p.w[0] == doctest::Approx(0.8).epsilon(1e-4));
}

TEST_CASE("adam minimizes a quadratic") {
    Param p;
    p.init_shape("w", {2});
    p.w[0] = -4.0f;
    p.w[1] = 6.0f;
    Adam opt(0.05);
    for (int i = 0; i < 1000; ++i) {
        p.g[0] = 2.0f * (p.w[0] - 3.0f);
        p.g[1] = 2.0f * (p.w[1] + 1.0f);
        opt.step({&p});
    }
    CHECK(p.w[0] == doctest::Approx(3.0f).epsilon(1e-3));
    CHECK(p.w[1] == doctest::Approx(-1.0f).epsilon(1e-3));
}

TEST_CASE("gradient utilities") {
    Param a, b;
    a.init_shape("a", {2});
    b.init_shape("b", {1});
    a.g[0] = 3.0f;
    a.g[1] = 0.0f;
    b.g[0] = 4.0f;
    ParamList ps{&a, &b};
    CHECK(param_count(ps) == 3);
    CHECK(grad_norm(ps) == doctest::Approx(5.0));
    clip_grad_norm(ps, 2.5);
    CHECK(grad_norm(ps) == doctest::Approx(2.5));
    clip_grad_norm(ps, 100.0);  // no-op below the cap
    CHECK(grad_norm(ps) == doctest::Approx(2.5));
    zero_grads(ps);
    CHECK(grad_norm(ps) == doctest::Approx(0.0));
}

TEST_CASE("checkpoint save/load round trip and corruption") {
    Rng rng(31);
    Linear l1, l2;
    l1.configure("enc", 4, 3);
    l1.init(rng);
    l2.configure("enc", 4, 3);
    l2.init(rng);
    ParamList p1, p2;
    l1.collect(p1);
    l2.collect(p2);

    auto dir = fs::temp_directory_path() / "due_nn_ckpt";
    fs::create_directories(dir);
    auto path = (dir / "p.bin").string();
    save_params(path, p1);
    load_params(path, p2);
    CHECK(l2.weight.w.v == l1.weight.w.v);
    CHECK(l2.bias.w.v == l1.bias.w.v);

    Linear other;
    other.configure("dec", 4, 3);  // same shapes, different names
    ParamList p3;
    other.collect(p3);
    try {
        load_params(path, p3);
        CHECK(false);
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::corrupt_file);
    }

    // truncation
    auto bytes_path = (dir / "t.bin").string();
    {
        FILE* in = fopen(path.c_str(), "rb");
        FILE* out = fopen(bytes_path.c_str(), "wb");
        char buf[64];
        size_t n = fread(buf, 1, sizeof(buf), in);
        fwrite(buf, 1, n / 2, out);
        fclose(in);
        fclose(out);
    }
    CHECK_THROWS_AS(load_params(bytes_path, p2), Error);
    fs::remove_all(dir);
}

TEST_CASE("backward accumulates gradients across calls") {
    Rng rng(17);
    Linear l;
    l.configure("l", 3, 2);
    l.init(rng);
    Tensor x = randn_like({1, 3}, rng);
    Tensor p = randn_like({1, 2}, rng);
    ParamList ps;
    l.collect(ps);
    zero_grads(ps);
    l.forward(x);
    l.backward(p);
    Tensor once = l.weight.g;
    l.forward(x);
    l.backward(p);
    for (int64_t i = 0; i < once.numel(); ++i)
        CHECK(l.weight.g[i] == doctest::Approx(2.0f * once[i]));
}
