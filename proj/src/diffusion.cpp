#include "due/diffusion.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

namespace due {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

// ---------------------------------------------------------------- schedule

const char* to_string(ScheduleKind kind) {
    return kind == ScheduleKind::linear ? "linear" : "cosine";
}

ScheduleKind schedule_kind_from_string(const std::string& s) {
    if (s == "linear") return ScheduleKind::linear;
    if (s == "cosine") return ScheduleKind::cosine;
    fail(ErrorKind::configuration, "unknown schedule kind: " + s);
}

void DiffusionSchedule::validate() const {
    require(n_steps >= 2, ErrorKind::configuration, "schedule: n_steps must be >= 2");
    require(betas.size() == size_t(n_steps) && alpha_bars.size() == size_t(n_steps),
            ErrorKind::configuration, "schedule: array sizes disagree with n_steps");
    double prev = 1.0;
    for (int t = 1; t <= n_steps; ++t) {
        double b = betas[size_t(t - 1)];
        double ab = alpha_bars[size_t(t - 1)];
        require(b > 0.0 && b < 1.0, ErrorKind::configuration, "schedule: beta outside (0, 1)");
        require(ab > 0.0 && ab < prev, ErrorKind::configuration,
                "schedule: alpha_bar must decrease strictly from 1");
        prev = ab;
    }
}

DiffusionSchedule make_schedule(int n_steps, double beta_min, double beta_max,
                                ScheduleKind kind) {
    require(n_steps >= 2, ErrorKind::configuration, "schedule: n_steps must be >= 2");
    require(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0, ErrorKind::configuration,
            "schedule: need 0 < beta_min <= beta_max < 1");

    DiffusionSchedule s;
    s.n_steps = n_steps;
    s.betas.resize(size_t(n_steps));

    if (kind == ScheduleKind::linear) {
        for (int t = 1; t <= n_steps; ++t)
            s.betas[size_t(t - 1)] =
                beta_min + (beta_max - beta_min) * double(t - 1) / double(n_steps - 1);
    } else {
        // cosine alpha_bar curve; betas derived then clamped into the
        // configured range so early/late steps stay numerically tame.
        const double off = 0.008;
        auto f = [&](double t) {
            double u = (t / double(n_steps) + off) / (1.0 + off) * (M_PI / 2.0);
            double c = std::cos(u);
            return c * c;
        };
        double f0 = f(0.0);
        double ab_prev = 1.0;
        for (int t = 1; t <= n_steps; ++t) {
            double ab = f(double(t)) / f0;
            double b = 1.0 - ab / ab_prev;
            s.betas[size_t(t - 1)] = std::min(std::max(b, beta_min), beta_max);
            ab_prev = ab;
        }
    }

    s.alpha_bars.resize(size_t(n_steps));
    double prod = 1.0;
    for (int t = 1; t <= n_steps; ++t) {
        prod *= 1.0 - s.betas[size_t(t - 1)];
        s.alpha_bars[size_t(t - 1)] = prod;
    }
    s.validate();
    return s;
}

Tensor forward_noise(const Tensor& x0, int t, const Tensor& eps, const DiffusionSchedule& sched) {
    require(t >= 1 && t <= sched.n_steps, ErrorKind::validation,
            "forward_noise: t outside [1, n_steps]");
    check_same_shape(x0, eps, "forward_noise");
    double ab = sched.alpha_bar(t);
    float sa = float(std::sqrt(ab));
    float sb = float(std::sqrt(1.0 - ab));
    Tensor out(x0.shape);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = sa * x0[i] + sb * eps[i];
    return out;
}

// ---------------------------------------------------------------- denoiser

void UNetConfig::validate() const {
    require(w0 > 0 && w1 > 0 && w2 > 0, ErrorKind::configuration, "unet: widths must be positive");
    require(groups > 0 && w0 % groups == 0 && w1 % groups == 0 && w2 % groups == 0,
            ErrorKind::configuration, "unet: groups must divide every width");
    require(temb_dim >= 2 && temb_dim % 2 == 0, ErrorKind::configuration,
            "unet: temb_dim must be even and >= 2");
}

void ResBlock2d::configure(const std::string& name, int cin_, int cout_, int temb_dim,
                           int groups) {
    cin = cin_;
    cout = cout_;
    gn1.configure(name + ".gn1", cin, groups);
    conv1.configure(name + ".conv1", cin, cout, 3, 1);
    tproj.configure(name + ".tproj", temb_dim, cout);
    gn2.configure(name + ".gn2", cout, groups);
    conv2.configure(name + ".conv2", cout, cout, 3, 1);
    has_skip = cin != cout;
    if (has_skip) skip.configure(name + ".skip", cin, cout, 1, 1);
}

void ResBlock2d::init(Rng& rng) {
    gn1.init();
    conv1.init(rng);
    tproj.init(rng);
    gn2.init();
    conv2.init(rng);
    if (has_skip) skip.init(rng);
}

void ResBlock2d::collect(nn::ParamList& out) {
    gn1.collect(out);
    conv1.collect(out);
    tproj.collect(out);
    gn2.collect(out);
    conv2.collect(out);
    if (has_skip) skip.collect(out);
}

Tensor ResBlock2d::forward(const Tensor& x, const Tensor& temb, bool keep_cache) {
    Tensor h = conv1.forward(a1.forward(gn1.forward(x, keep_cache), keep_cache), keep_cache);
    Tensor tp = tproj.forward(ta.forward(temb, keep_cache), keep_cache);  // (N, cout)

    const int N = h.dim(0), C = h.dim(1);
    const int64_t S = int64_t(h.dim(2)) * h.dim(3);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            float add = tp[int64_t(n) * C + c];
            float* hp = h.data() + (int64_t(n) * C + c) * S;
            for (int64_t i = 0; i < S; ++i) hp[i] += add;
        }

    Tensor out = conv2.forward(a2.forward(gn2.forward(h, keep_cache), keep_cache), keep_cache);
    if (has_skip) {
        Tensor sk = skip.forward(x, keep_cache);
        axpy(1.0f, sk, out);
    } else {
        axpy(1.0f, x, out);
    }
    return out;
}

Tensor ResBlock2d::backward(const Tensor& gout) {
    Tensor gh = gn2.backward(a2.backward(conv2.backward(gout)));

    // h was formed by broadcasting tproj output over spatial positions
    const int N = gh.dim(0), C = gh.dim(1);
    const int64_t S = int64_t(gh.dim(2)) * gh.dim(3);
    Tensor gtp({N, C});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const float* gp = gh.data() + (int64_t(n) * C + c) * S;
            double acc = 0.0;
            for (int64_t i = 0; i < S; ++i) acc += gp[i];
            gtp[int64_t(n) * C + c] = float(acc);
        }
    gtemb = ta.backward(tproj.backward(gtp));

    Tensor gx = gn1.backward(a1.backward(conv1.backward(gh)));
    if (has_skip) {
        Tensor gsk = skip.backward(gout);
        axpy(1.0f, gsk, gx);
    } else {
        axpy(1.0f, gout, gx);
    }
    return gx;
}

void UNet2d::configure(const UNetConfig& cfg_) {
    cfg_.validate();
    cfg = cfg_;
    conv_in.configure("conv_in", 4, cfg.w0, 3, 1);
    enc0.configure("enc0", cfg.w0, cfg.w0, cfg.temb_dim, cfg.groups);
    down1.configure("down1", cfg.w0, cfg.w1, 3, 2);
    enc1.configure("enc1", cfg.w1, cfg.w1, cfg.temb_dim, cfg.groups);
    down2.configure("down2", cfg.w1, cfg.w2, 3, 2);
    enc2.configure("enc2", cfg.w2, cfg.w2, cfg.temb_dim, cfg.groups);
    mid.configure("mid", cfg.w2, cfg.w2, cfg.temb_dim, cfg.groups);
    upc1.configure("upc1", cfg.w2, cfg.w1, 3, 1);
    dec1.configure("dec1", 2 * cfg.w1, cfg.w1, cfg.temb_dim, cfg.groups);
    upc2.configure("upc2", cfg.w1, cfg.w0, 3, 1);
    dec0.configure("dec0", 2 * cfg.w0, cfg.w0, cfg.temb_dim, cfg.groups);
    gn_out.configure("gn_out", cfg.w0, cfg.groups);
    conv_out.configure("conv_out", cfg.w0, 1, 3, 1);
    t1.configure("temb.fc1", cfg.temb_dim, cfg.temb_dim);
    t2.configure("temb.fc2", cfg.temb_dim, cfg.temb_dim);
}

void UNet2d::init(Rng& rng) {
    conv_in.init(rng);
    enc0.init(rng);
    down1.init(rng);
    enc1.init(rng);
    down2.init(rng);
    enc2.init(rng);
    mid.init(rng);
    upc1.init(rng);
    dec1.init(rng);
    upc2.init(rng);
    dec0.init(rng);
    gn_out.init();
    conv_out.init(rng, /*zero_weights=*/true);  // start from the identity drift
    t1.init(rng);
    t2.init(rng);
}

nn::ParamList UNet2d::params() {
    nn::ParamList out;
    conv_in.collect(out);
    enc0.collect(out);
    down1.collect(out);
    enc1.collect(out);
    down2.collect(out);
    enc2.collect(out);
    mid.collect(out);
    upc1.collect(out);
    dec1.collect(out);
    upc2.collect(out);
    dec0.collect(out);
    gn_out.collect(out);
    conv_out.collect(out);
    t1.collect(out);
    t2.collect(out);
    return out;
}

Tensor UNet2d::forward(const Tensor& x, const std::vector<float>& t_steps, bool keep_cache) {
    require(x.rank() == 4 && x.dim(1) == 4, ErrorKind::validation,
            "unet: input must be (N, 4, H, W)");
    require(x.dim(2) % 4 == 0 && x.dim(3) % 4 == 0, ErrorKind::validation,
            "unet: H and W must be divisible by 4");
    require(int(t_steps.size()) == x.dim(0), ErrorKind::validation,
            "unet: one timestep per batch element");

    Tensor te = nn::timestep_embedding(t_steps, cfg.temb_dim);
    Tensor temb = t2.forward(t_act.forward(t1.forward(te, keep_cache), keep_cache), keep_cache);

    Tensor h0 = enc0.forward(conv_in.forward(x, keep_cache), temb, keep_cache);
    Tensor h1 = enc1.forward(down1.forward(h0, keep_cache), temb, keep_cache);
    Tensor h2 = enc2.forward(down2.forward(h1, keep_cache), temb, keep_cache);
    Tensor m = mid.forward(h2, temb, keep_cache);

    Tensor u1 = upc1.forward(nn::upsample_nearest2x(m), keep_cache);
    Tensor d1 = dec1.forward(nn::concat_channels(u1, h1), temb, keep_cache);
    Tensor u0 = upc2.forward(nn::upsample_nearest2x(d1), keep_cache);
    Tensor d0 = dec0.forward(nn::concat_channels(u0, h0), temb, keep_cache);

    return conv_out.forward(a_out.forward(gn_out.forward(d0, keep_cache), keep_cache),
                            keep_cache);
}

Tensor UNet2d::backward(const Tensor& gout) {
    Tensor gd0 = gn_out.backward(a_out.backward(conv_out.backward(gout)));

    Tensor gcat0 = dec0.backward(gd0);
    Tensor gu0, gh0;
    nn::split_channels(gcat0, cfg.w0, gu0, gh0);
    Tensor gd1 = nn::upsample_nearest2x_backward(upc2.backward(gu0));

    Tensor gcat1 = dec1.backward(gd1);
    Tensor gu1, gh1;
    nn::split_channels(gcat1, cfg.w1, gu1, gh1);
    Tensor gm = nn::upsample_nearest2x_backward(upc1.backward(gu1));

    Tensor gh2 = mid.backward(gm);
    axpy(1.0f, down2.backward(enc2.backward(gh2)), gh1);
    axpy(1.0f, down1.backward(enc1.backward(gh1)), gh0);
    Tensor gx = conv_in.backward(enc0.backward(gh0));

    Tensor gtemb = enc0.gtemb;
    axpy(1.0f, enc1.gtemb, gtemb);
    axpy(1.0f, enc2.gtemb, gtemb);
    axpy(1.0f, mid.gtemb, gtemb);
    axpy(1.0f, dec1.gtemb, gtemb);
    axpy(1.0f, dec0.gtemb, gtemb);
    t1.backward(t_act.backward(t2.backward(gtemb)));  // embedding itself has no params

    return gx;
}

// ---------------------------------------------------------------- training

TrainingExample make_training_example(const SliceTriple& triple, const DiffusionSchedule& sched,
                                      double p_mask, Rng& rng) {
    require(triple.past.rank() == 2 && triple.target.rank() == 2 && triple.future.rank() == 2,
            ErrorKind::validation, "training example: slices must be rank 2");
    check_same_shape(triple.past, triple.target, "training example");
    check_same_shape(triple.future, triple.target, "training example");
    require(triple.position > 0.0f && triple.position < 1.0f, ErrorKind::validation,
            "training example: position must lie strictly inside (0, 1)");
    require(p_mask >= 0.0 && p_mask <= 1.0, ErrorKind::validation,
            "training example: p_mask must be in [0, 1]");

    const int H = triple.target.dim(0), W = triple.target.dim(1);
    const int64_t S = int64_t(H) * W;

    // fixed draw order: timestep, noise, past mask, future mask
    int t = int(rng.randint(1, sched.n_steps));
    Tensor eps = Tensor::randn({1, H, W}, rng);
    float m_p = rng.bernoulli(p_mask) ? 0.0f : 1.0f;
    float m_f = rng.bernoulli(p_mask) ? 0.0f : 1.0f;

    Tensor x0({1, H, W});
    std::memcpy(x0.data(), triple.target.data(), size_t(S) * sizeof(float));
    Tensor xt = forward_noise(x0, t, eps, sched);

    TrainingExample ex;
    ex.t = t;
    ex.eps = std::move(eps);
    ex.input = Tensor({4, H, W});
    std::memcpy(ex.input.data(), xt.data(), size_t(S) * sizeof(float));
    for (int64_t i = 0; i < S; ++i) ex.input[S + i] = m_p * triple.past[i];
    for (int64_t i = 0; i < S; ++i) ex.input[2 * S + i] = m_f * triple.future[i];
    for (int64_t i = 0; i < S; ++i) ex.input[3 * S + i] = triple.position;
    return ex;
}

double example_loss(const Tensor& eps_pred, const Tensor& eps) {
    check_same_shape(eps_pred, eps, "example_loss");
    require(eps.numel() > 0, ErrorKind::validation, "example_loss: empty tensors");
    double acc = 0.0;
    for (int64_t i = 0; i < eps.numel(); ++i) {
        double d = double(eps_pred[i]) - double(eps[i]);
        acc += d * d;
    }
    return acc / double(eps.numel());
}

EpochHistory train_denoiser(DenoiserModel& model, const std::vector<SliceTriple>& triples) {
    require(!triples.empty(), ErrorKind::training, "train_denoiser: no training triples");
    const int H = triples[0].target.dim(0), W = triples[0].target.dim(1);
    for (const auto& tr : triples) {
        require(tr.target.rank() == 2 && tr.target.dim(0) == H && tr.target.dim(1) == W,
                ErrorKind::validation, "train_denoiser: inconsistent slice shapes");
    }
    const auto& cfg = model.cfg;
    require(cfg.epochs >= 1 && cfg.batch_size >= 1, ErrorKind::configuration,
            "train_denoiser: epochs and batch_size must be positive");

    model.schedule =
        make_schedule(cfg.diffusion.n_steps, cfg.diffusion.beta_min, cfg.diffusion.beta_max,
                      cfg.diffusion.kind);
    model.net.configure(cfg.arch);
    Rng init_rng(derive_seed(cfg.seed, "init"));
    model.net.init(init_rng);

    nn::ParamList params = model.net.params();
    nn::Adam opt(cfg.lr);

    const int64_t S = int64_t(H) * W;
    const size_t n = triples.size();
    std::vector<size_t> order(n);
    EpochHistory history;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng rng(derive_seed(cfg.seed, "epoch", uint64_t(epoch)));
        for (size_t i = 0; i < n; ++i) order[i] = i;
        rng.shuffle(order);

        double loss_sum = 0.0;
        for (size_t start = 0; start < n; start += size_t(cfg.batch_size)) {
            size_t nb = std::min(size_t(cfg.batch_size), n - start);
            Tensor batch_in({int(nb), 4, H, W});
            Tensor batch_eps({int(nb), 1, H, W});
            std::vector<float> ts(nb);
            for (size_t b = 0; b < nb; ++b) {
                TrainingExample ex =
                    make_training_example(triples[order[start + b]], model.schedule, cfg.p_mask,
                                          rng);
                std::memcpy(batch_in.data() + int64_t(b) * 4 * S, ex.input.data(),
                            size_t(4 * S) * sizeof(float));
                std::memcpy(batch_eps.data() + int64_t(b) * S, ex.eps.data(),
                            size_t(S) * sizeof(float));
                ts[b] = float(ex.t);
            }

            Tensor pred = model.net.forward(batch_in, ts);
            double loss = example_loss(pred, batch_eps);
            loss_sum += loss * double(nb);

            Tensor g(pred.shape);
            float scale = 2.0f / float(pred.numel());
            for (int64_t i = 0; i < pred.numel(); ++i)
                g[i] = scale * (pred[i] - batch_eps[i]);

            nn::zero_grads(params);
            model.net.backward(g);
            nn::clip_grad_norm(params, cfg.clip_norm);
            opt.step(params);
        }
        history.epoch_loss.push_back(loss_sum / double(n));
    }
    return history;
}

// ---------------------------------------------------------------- sampling

std::vector<Tensor> sample_block(UNet2d& net, const DiffusionSchedule& sched, const Tensor& past,
                                 const Tensor& future, const std::vector<float>& positions,
                                 Rng& rng) {
    require(!positions.empty(), ErrorKind::validation, "sample_block: no positions");
    for (size_t i = 0; i < positions.size(); ++i) {
        require(positions[i] > 0.0f && positions[i] < 1.0f, ErrorKind::validation,
                "sample_block: positions must lie strictly inside (0, 1)");
        require(i == 0 || positions[i] > positions[i - 1], ErrorKind::validation,
                "sample_block: positions must be strictly increasing");
    }
    require(past.rank() == 2, ErrorKind::validation, "sample_block: past must be rank 2");
    check_same_shape(past, future, "sample_block");

    const int B = int(positions.size());
    const int H = past.dim(0), W = past.dim(1);
    const int64_t S = int64_t(H) * W;

    Tensor x = Tensor::randn({B, 1, H, W}, rng);
    Tensor input({B, 4, H, W});
    std::vector<float> ts(static_cast<size_t>(B));

    for (int t = sched.n_steps; t >= 1; --t) {
        for (int b = 0; b < B; ++b) {
            float* in = input.data() + int64_t(b) * 4 * S;
            std::memcpy(in, x.data() + int64_t(b) * S, size_t(S) * sizeof(float));
            std::memcpy(in + S, past.data(), size_t(S) * sizeof(float));
            std::memcpy(in + 2 * S, future.data(), size_t(S) * sizeof(float));
            for (int64_t i = 0; i < S; ++i) in[3 * S + i] = positions[size_t(b)];
        }
        std::fill(ts.begin(), ts.end(), float(t));
        Tensor eps_hat = net.forward(input, ts, /*keep_cache=*/false);

        const double ab_t = sched.alpha_bar(t);
        const double ab_prev = sched.alpha_bar(t - 1);
        const double beta_t = sched.beta(t);
        const double alpha_t = 1.0 - beta_t;
        const double inv_sab = 1.0 / std::sqrt(ab_t);
        const double s1mab = std::sqrt(1.0 - ab_t);

        if (t > 1) {
            const double c0 = std::sqrt(ab_prev) * beta_t / (1.0 - ab_t);
            const double cx = std::sqrt(alpha_t) * (1.0 - ab_prev) / (1.0 - ab_t);
            const double sd = std::sqrt(beta_t * (1.0 - ab_prev) / (1.0 - ab_t));
            Tensor z = Tensor::randn({B, 1, H, W}, rng);
            for (int64_t i = 0; i < x.numel(); ++i) {
                double x0 = (double(x[i]) - s1mab * double(eps_hat[i])) * inv_sab;
                x0 = std::min(std::max(x0, 0.0), 1.0);
                x[i] = float(c0 * x0 + cx * double(x[i]) + sd * double(z[i]));
            }
        } else {
            for (int64_t i = 0; i < x.numel(); ++i) {
                double x0 = (double(x[i]) - s1mab * double(eps_hat[i])) * inv_sab;
                x[i] = float(std::min(std::max(x0, 0.0), 1.0));
            }
        }
    }

    std::vector<Tensor> out;
    out.reserve(size_t(B));
    for (int b = 0; b < B; ++b) {
        Tensor slice({H, W});
        std::memcpy(slice.data(), x.data() + int64_t(b) * S, size_t(S) * sizeof(float));
        out.push_back(std::move(slice));
    }
    return out;
}

std::vector<Tensor> interpolate_interval(UNet2d& net, const DiffusionSchedule& sched,
                                         const IntervalRequest& request) {
    require(request.gap >= 1, ErrorKind::validation, "interpolate_interval: gap must be >= 1");
    require(request.block >= 1, ErrorKind::validation,
            "interpolate_interval: block size must be >= 1");
    if (request.gap == 1) return {};

    const int d = request.gap;
    Rng rng(request.seed);
    Tensor past = request.past;
    std::vector<Tensor> out;
    out.reserve(size_t(d - 1));

    int j = 1;
    while (j <= d - 1) {
        int take = std::min(request.block, d - j);
        std::vector<float> positions(static_cast<size_t>(take));
        for (int b = 0; b < take; ++b)
            positions[size_t(b)] = float(j + b) / float(d);  // fraction of the original interval
        std::vector<Tensor> block = sample_block(net, sched, past, request.future, positions, rng);
        past = block.back();  // autoregression: condition the next block on the newest slice
        for (auto& s : block) out.push_back(std::move(s));
        j += take;
    }
    return out;
}

DenseAnnotation interpolate_volume(UNet2d& net, const DiffusionSchedule& sched,
                                   const SparseAnnotation& sparse, int depth, uint64_t seed,
                                   int block) {
    sparse.validate();
    require(sparse.slices.size() >= 2, ErrorKind::interpolation,
            "interpolate_volume: need at least 2 annotated slices");
    require(depth > sparse.extent.second, ErrorKind::validation,
            "interpolate_volume: volume depth does not cover the annotated extent");

    const int H = sparse.slices[0].mask.dim(0);
    const int W = sparse.slices[0].mask.dim(1);
    const int64_t S = int64_t(H) * W;

    DenseAnnotation out;
    out.mask = Tensor({depth, H, W});
    out.provenance = MaskProvenance::interpolated;

    for (const auto& s : sparse.slices)
        std::memcpy(out.mask.data() + int64_t(s.depth_index) * S, s.mask.data(),
                    size_t(S) * sizeof(float));

    for (size_t i = 0; i + 1 < sparse.slices.size(); ++i) {
        const auto& lo = sparse.slices[i];
        const auto& hi = sparse.slices[i + 1];
        IntervalRequest req;
        req.past = lo.mask;
        req.future = hi.mask;
        req.gap = hi.depth_index - lo.depth_index;
        req.block = block;
        req.seed = derive_seed(seed, "interval", uint64_t(i));
        std::vector<Tensor> filled = interpolate_interval(net, sched, req);
        for (size_t j = 0; j < filled.size(); ++j)
            std::memcpy(out.mask.data() + int64_t(lo.depth_index + 1 + int(j)) * S,
                        filled[j].data(), size_t(S) * sizeof(float));
    }
    return out;
}

// ---------------------------------------------------------------- storage

void save_denoiser(const std::string& dir, DenoiserModel& model, const EpochHistory& history) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    require(!ec, ErrorKind::io, "cannot create checkpoint directory: " + dir);

    nn::ParamList params = model.net.params();
    nn::save_params(dir + "/params.bin", params);

    const auto& cfg = model.cfg;
    json meta;
    meta["format_version"] = 1;
    meta["arch"] = {{"w0", cfg.arch.w0},
                    {"w1", cfg.arch.w1},
                    {"w2", cfg.arch.w2},
                    {"temb_dim", cfg.arch.temb_dim},
                    {"groups", cfg.arch.groups}};
    meta["schedule"] = {{"n_steps", cfg.diffusion.n_steps},
                        {"beta_min", cfg.diffusion.beta_min},
                        {"beta_max", cfg.diffusion.beta_max},
                        {"kind", to_string(cfg.diffusion.kind)}};
    meta["train"] = {{"epochs", cfg.epochs},
                     {"batch_size", cfg.batch_size},
                     {"lr", cfg.lr},
                     {"p_mask", cfg.p_mask},
                     {"clip_norm", cfg.clip_norm},
                     {"seed", cfg.seed}};
    meta["history"] = {{"epoch_loss", history.epoch_loss}};

    std::ofstream out(dir + "/meta.json", std::ios::binary);
    require(bool(out), ErrorKind::io, "cannot write " + dir + "/meta.json");
    out << meta.dump(2) << "\n";
    require(bool(out), ErrorKind::io, "failed writing " + dir + "/meta.json");
}

DenoiserModel load_denoiser(const std::string& dir) {
    std::ifstream in(dir + "/meta.json", std::ios::binary);
    require(bool(in), ErrorKind::io, "cannot open " + dir + "/meta.json");
    json meta;
    try {
        in >> meta;
    } catch (const json::exception& e) {
        fail(ErrorKind::corrupt_file, std::string("bad denoiser meta.json: ") + e.what());
    }

    DenoiserModel model;
    try {
        const auto& a = meta.at("arch");
        model.cfg.arch.w0 = a.at("w0").get<int>();
        model.cfg.arch.w1 = a.at("w1").get<int>();
        model.cfg.arch.w2 = a.at("w2").get<int>();
        model.cfg.arch.temb_dim = a.at("temb_dim").get<int>();
        model.cfg.arch.groups = a.at("groups").get<int>();
        const auto& s = meta.at("schedule");
        model.cfg.diffusion.n_steps = s.at("n_steps").get<int>();
        model.cfg.diffusion.beta_min = s.at("beta_min").get<double>();
        model.cfg.diffusion.beta_max = s.at("beta_max").get<double>();
        model.cfg.diffusion.kind = schedule_kind_from_string(s.at("kind").get<std::string>());
        const auto& t = meta.at("train");
        model.cfg.epochs = t.at("epochs").get<int>();
        model.cfg.batch_size = t.at("batch_size").get<int>();
        model.cfg.lr = t.at("lr").get<double>();
        model.cfg.p_mask = t.at("p_mask").get<double>();
        model.cfg.clip_norm = t.at("clip_norm").get<double>();
        model.cfg.seed = t.at("seed").get<uint64_t>();
    } catch (const json::exception& e) {
        fail(ErrorKind::corrupt_file, std::string("incomplete denoiser meta.json: ") + e.what());
    }

    model.schedule = make_schedule(model.cfg.diffusion.n_steps, model.cfg.diffusion.beta_min,
                                   model.cfg.diffusion.beta_max, model.cfg.diffusion.kind);
    model.net.configure(model.cfg.arch);
    nn::ParamList params = model.net.params();
    nn::load_params(dir + "/params.bin", params);
    return model;
}

}  // namespace due
