#include <cmath>
#include <cstdio>
#include <cstring>

#include "due/nn.hpp"

namespace due::nn {

namespace {

int div_ceil(int a, int b) { return a >= 0 ? (a + b - 1) / b : -((-a) / b); }
int div_floor(int a, int b) { return a >= 0 ? a / b : -((-a + b - 1) / b); }

int64_t spatial_size(const std::vector<int>& shape) {
    int64_t s = 1;
    for (size_t i = 2; i < shape.size(); ++i) s *= shape[i];
    return s;
}

}  // namespace

void zero_grads(const ParamList& params) {
    for (Param* p : params) p->g.zero();
}

int64_t param_count(const ParamList& params) {
    int64_t n = 0;
    for (Param* p : params) n += p->w.numel();
    return n;
}

double grad_norm(const ParamList& params) {
    double sq = 0.0;
    for (Param* p : params)
        for (float g : p->g.v) sq += double(g) * double(g);
    return std::sqrt(sq);
}

void clip_grad_norm(const ParamList& params, double max_norm) {
    double norm = grad_norm(params);
    if (norm <= max_norm || norm == 0.0) return;
    float scale = float(max_norm / norm);
    for (Param* p : params)
        for (float& g : p->g.v) g *= scale;
}

// ---------------------------------------------------------------- Conv3d

void Conv3d::configure(const std::string& name, int cin_, int cout_, int k_, int stride_dhw[3],
                       int kz) {
    require(k_ == 1 || k_ == 3, ErrorKind::configuration, "conv kernel must be 1 or 3");
    cin = cin_;
    cout = cout_;
    k = k_;
    kdims[0] = kz < 0 ? k_ : kz;
    kdims[1] = k_;
    kdims[2] = k_;
    for (int i = 0; i < 3; ++i) {
        require(stride_dhw[i] == 1 || stride_dhw[i] == 2, ErrorKind::configuration,
                "conv stride must be 1 or 2");
        stride[i] = stride_dhw[i];
    }
    weight.init_shape(name + ".weight", {cout, cin, kdims[0], kdims[1], kdims[2]});
    bias.init_shape(name + ".bias", {cout});
}

void Conv3d::init(Rng& rng, bool zero_weights) {
    if (zero_weights) {
        weight.w.zero();
        bias.w.zero();
        return;
    }
    double fan_in = double(cin) * kdims[0] * kdims[1] * kdims[2];
    double std_dev = std::sqrt(2.0 / fan_in);
    for (auto& x : weight.w.v) x = float(rng.normal() * std_dev);
    bias.w.zero();
}

void Conv3d::collect(ParamList& out) {
    out.push_back(&weight);
    out.push_back(&bias);
}

std::vector<int> Conv3d::out_shape(const std::vector<int>& in_shape) const {
    require(in_shape.size() == 5, ErrorKind::validation, "conv3d expects (N, C, D, H, W)");
    require(in_shape[1] == cin, ErrorKind::validation, "conv3d channel mismatch");
    std::vector<int> os{in_shape[0], cout, 0, 0, 0};
    for (int a = 0; a < 3; ++a) {
        int pad = kdims[a] / 2;
        int span = in_shape[size_t(2 + a)] + 2 * pad - kdims[a];
        require(span >= 0, ErrorKind::configuration, "conv3d input smaller than kernel");
        os[size_t(2 + a)] = span / stride[a] + 1;
    }
    return os;
}

Tensor Conv3d::forward(const Tensor& x, bool keep_cache) {
    auto os = out_shape(x.shape);
    const int N = x.dim(0), D = x.dim(2), H = x.dim(3), W = x.dim(4);
    const int Do = os[2], Ho = os[3], Wo = os[4];
    const int pz = kdims[0] / 2, py = kdims[1] / 2, px = kdims[2] / 2;
    const int sz = stride[0], sy = stride[1], sx = stride[2];
    const int64_t in_ch = int64_t(D) * H * W, out_ch = int64_t(Do) * Ho * Wo;
    Tensor y(os);

#pragma omp parallel for collapse(2) schedule(static)
    for (int n = 0; n < N; ++n) {
        for (int co = 0; co < cout; ++co) {
            float* outp = y.data() + (int64_t(n) * cout + co) * out_ch;
            const float bv = bias.w[co];
            for (int64_t i = 0; i < out_ch; ++i) outp[i] = bv;
            for (int ci = 0; ci < cin; ++ci) {
                const float* inp = x.data() + (int64_t(n) * cin + ci) * in_ch;
                const float* wrow =
                    weight.w.data() + (int64_t(co) * cin + ci) * kdims[0] * kdims[1] * kdims[2];
                for (int kz = 0; kz < kdims[0]; ++kz) {
                    for (int ky = 0; ky < kdims[1]; ++ky) {
                        for (int kx = 0; kx < kdims[2]; ++kx) {
                            const float wv = wrow[(kz * kdims[1] + ky) * kdims[2] + kx];
                            const int dz = kz - pz, dy = ky - py, dx = kx - px;
                            const int xo_lo = std::max(0, div_ceil(-dx, sx));
                            const int xo_hi = std::min(Wo - 1, div_floor(W - 1 - dx, sx));
                            for (int zo = 0; zo < Do; ++zo) {
                                const int zi = zo * sz + dz;
                                if (zi < 0 || zi >= D) continue;
                                for (int yo = 0; yo < Ho; ++yo) {
                                    const int yi = yo * sy + dy;
                                    if (yi < 0 || yi >= H) continue;
                                    const float* irow = inp + (int64_t(zi) * H + yi) * W + dx;
                                    float* orow = outp + (int64_t(zo) * Ho + yo) * Wo;
                                    if (sx == 1) {
                                        for (int xo = xo_lo; xo <= xo_hi; ++xo)
                                            orow[xo] += wv * irow[xo];
                                    } else {
                                        for (int xo = xo_lo; xo <= xo_hi; ++xo)
                                            orow[xo] += wv * irow[xo * sx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    if (keep_cache) x_cache = x;
    return y;
}

Tensor Conv3d::backward(const Tensor& gout) {
    require(x_cache.numel() > 0, ErrorKind::validation, "conv3d backward without cached input");
    const Tensor& x = x_cache;
    const int N = x.dim(0), D = x.dim(2), H = x.dim(3), W = x.dim(4);
    const int Do = gout.dim(2), Ho = gout.dim(3), Wo = gout.dim(4);
    const int pz = kdims[0] / 2, py = kdims[1] / 2, px = kdims[2] / 2;
    const int sz = stride[0], sy = stride[1], sx = stride[2];
    const int64_t in_ch = int64_t(D) * H * W, out_ch = int64_t(Do) * Ho * Wo;

    Tensor gin(x.shape);

    // dL/dx: each (n, ci) owns one input channel
#pragma omp parallel for collapse(2) schedule(static)
    for (int n = 0; n < N; ++n) {
        for (int ci = 0; ci < cin; ++ci) {
            float* gip = gin.data() + (int64_t(n) * cin + ci) * in_ch;
            for (int co = 0; co < cout; ++co) {
                const float* gop = gout.data() + (int64_t(n) * cout + co) * out_ch;
                const float* wrow =
                    weight.w.data() + (int64_t(co) * cin + ci) * kdims[0] * kdims[1] * kdims[2];
                for (int kz = 0; kz < kdims[0]; ++kz) {
                    for (int ky = 0; ky < kdims[1]; ++ky) {
                        for (int kx = 0; kx < kdims[2]; ++kx) {
                            const float wv = wrow[(kz * kdims[1] + ky) * kdims[2] + kx];
                            const int dz = kz - pz, dy = ky - py, dx = kx - px;
                            const int xo_lo = std::max(0, div_ceil(-dx, sx));
                            const int xo_hi = std::min(Wo - 1, div_floor(W - 1 - dx, sx));
                            for (int zo = 0; zo < Do; ++zo) {
                                const int zi = zo * sz + dz;
                                if (zi < 0 || zi >= D) continue;
                                for (int yo = 0; yo < Ho; ++yo) {
                                    const int yi = yo * sy + dy;
                                    if (yi < 0 || yi >= H) continue;
                                    float* grow = gip + (int64_t(zi) * H + yi) * W + dx;
                                    const float* gorow = gop + (int64_t(zo) * Ho + yo) * Wo;
                                    if (sx == 1) {
                                        for (int xo = xo_lo; xo <= xo_hi; ++xo)
                                            grow[xo] += wv * gorow[xo];
                                    } else {
                                        for (int xo = xo_lo; xo <= xo_hi; ++xo)
                                            grow[xo * sx] += wv * gorow[xo];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    // dL/dW and dL/db: each co owns its filter slice
#pragma omp parallel for schedule(static)
    for (int co = 0; co < cout; ++co) {
        double bacc = 0.0;
        for (int n = 0; n < N; ++n) {
            const float* gop = gout.data() + (int64_t(n) * cout + co) * out_ch;
            for (int64_t i = 0; i < out_ch; ++i) bacc += gop[i];
        }
        bias.g[co] += float(bacc);

        for (int ci = 0; ci < cin; ++ci) {
            float* wg =
                weight.g.data() + (int64_t(co) * cin + ci) * kdims[0] * kdims[1] * kdims[2];
            for (int kz = 0; kz < kdims[0]; ++kz) {
                for (int ky = 0; ky < kdims[1]; ++ky) {
                    for (int kx = 0; kx < kdims[2]; ++kx) {
                        const int dz = kz - pz, dy = ky - py, dx = kx - px;
                        const int xo_lo = std::max(0, div_ceil(-dx, sx));
                        const int xo_hi = std::min(Wo - 1, div_floor(W - 1 - dx, sx));
                        double acc = 0.0;
                        for (int n = 0; n < N; ++n) {
                            const float* inp = x.data() + (int64_t(n) * cin + ci) * in_ch;
                            const float* gop = gout.data() + (int64_t(n) * cout + co) * out_ch;
                            for (int zo = 0; zo < Do; ++zo) {
                                const int zi = zo * sz + dz;
                                if (zi < 0 || zi >= D) continue;
                                for (int yo = 0; yo < Ho; ++yo) {
                                    const int yi = yo * sy + dy;
                                    if (yi < 0 || yi >= H) continue;
                                    const float* irow = inp + (int64_t(zi) * H + yi) * W + dx;
                                    const float* gorow = gop + (int64_t(zo) * Ho + yo) * Wo;
                                    float racc = 0.0f;
                                    if (sx == 1) {
                                        racc = dot_f32(irow + xo_lo, gorow + xo_lo,
                                                       xo_hi - xo_lo + 1);
                                    } else {
                                        for (int xo = xo_lo; xo <= xo_hi; ++xo)
                                            racc += irow[xo * sx] * gorow[xo];
                                    }
                                    acc += double(racc);
                                }
                            }
                        }
                        wg[(kz * kdims[1] + ky) * kdims[2] + kx] += float(acc);
                    }
                }
            }
        }
    }
    return gin;
}

// ---------------------------------------------------------------- Conv2d

void Conv2d::configure(const std::string& name, int cin, int cout, int k, int stride) {
    int s[3] = {1, stride, stride};
    core.configure(name, cin, cout, k, s, /*kz=*/1);
}

Tensor Conv2d::forward(const Tensor& x, bool keep_cache) {
    require(x.rank() == 4, ErrorKind::validation, "conv2d expects (N, C, H, W)");
    Tensor x5 = x;
    x5.shape = {x.dim(0), x.dim(1), 1, x.dim(2), x.dim(3)};
    Tensor y = core.forward(x5, keep_cache);
    y.shape = {y.dim(0), y.dim(1), y.dim(3), y.dim(4)};
    return y;
}

Tensor Conv2d::backward(const Tensor& gout) {
    Tensor g5 = gout;
    g5.shape = {gout.dim(0), gout.dim(1), 1, gout.dim(2), gout.dim(3)};
    Tensor gin = core.backward(g5);
    gin.shape = {gin.dim(0), gin.dim(1), gin.dim(3), gin.dim(4)};
    return gin;
}

// -------------------------------------------------------------- GroupNorm

void GroupNorm::configure(const std::string& name, int channels_, int groups_) {
    require(groups_ >= 1 && channels_ % groups_ == 0, ErrorKind::configuration,
            "groupnorm: groups must divide channels");
    channels = channels_;
    groups = groups_;
    gamma.init_shape(name + ".gamma", {channels});
    beta.init_shape(name + ".beta", {channels});
}

void GroupNorm::init() {
    gamma.w.fill(1.0f);
    beta.w.zero();
}

void GroupNorm::collect(ParamList& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
}

Tensor GroupNorm::forward(const Tensor& x, bool keep_cache) {
    require(x.rank() >= 3 && x.dim(1) == channels, ErrorKind::validation,
            "groupnorm: bad input shape");
    const int N = x.dim(0);
    const int64_t S = spatial_size(x.shape);
    const int cpg = channels / groups;
    const int64_t M = int64_t(cpg) * S;

    Tensor y(x.shape), xhat(x.shape);
    std::vector<double> istd(size_t(N) * size_t(groups));

#pragma omp parallel for collapse(2) schedule(static)
    for (int n = 0; n < N; ++n) {
        for (int g = 0; g < groups; ++g) {
            const float* xp = x.data() + (int64_t(n) * channels + int64_t(g) * cpg) * S;
            double s = 0.0, sq = 0.0;
            for (int64_t i = 0; i < M; ++i) {
                s += xp[i];
                sq += double(xp[i]) * double(xp[i]);
            }
            double mean = s / double(M);
            double var = sq / double(M) - mean * mean;
            double inv = 1.0 / std::sqrt(std::max(var, 0.0) + eps);
            istd[size_t(n) * size_t(groups) + size_t(g)] = inv;

            float* xh = xhat.data() + (int64_t(n) * channels + int64_t(g) * cpg) * S;
            float* yp = y.data() + (int64_t(n) * channels + int64_t(g) * cpg) * S;
            for (int c = 0; c < cpg; ++c) {
                const float gm = gamma.w[int64_t(g) * cpg + c];
                const float bt = beta.w[int64_t(g) * cpg + c];
                for (int64_t i = 0; i < S; ++i) {
                    float h = float((double(xp[c * S + i]) - mean) * inv);
                    xh[c * S + i] = h;
                    yp[c * S + i] = gm * h + bt;
                }
            }
        }
    }
    if (keep_cache) {
        xhat_cache = std::move(xhat);
        inv_std_cache = std::move(istd);
        in_shape_cache = x.shape;
    }
    return y;
}

Tensor GroupNorm::backward(const Tensor& gout) {
    require(!in_shape_cache.empty(), ErrorKind::validation, "groupnorm backward without cache");
    const int N = in_shape_cache[0];
    const int64_t S = spatial_size(in_shape_cache);
    const int cpg = channels / groups;
    const int64_t M = int64_t(cpg) * S;
    Tensor gin(in_shape_cache);

#pragma omp parallel for collapse(2) schedule(static)
    for (int n = 0; n < N; ++n) {
        for (int g = 0; g < groups; ++g) {
            const int64_t base = (int64_t(n) * channels + int64_t(g) * cpg) * S;
            const float* go = gout.data() + base;
            const float* xh = xhat_cache.data() + base;
            float* gi = gin.data() + base;
            const double inv = inv_std_cache[size_t(n) * size_t(groups) + size_t(g)];

            double s1 = 0.0, s2 = 0.0;
            for (int c = 0; c < cpg; ++c) {
                const double gm = gamma.w[int64_t(g) * cpg + c];
                for (int64_t i = 0; i < S; ++i) {
                    double dxh = double(go[c * S + i]) * gm;
                    s1 += dxh;
                    s2 += dxh * double(xh[c * S + i]);
                }
            }
            for (int c = 0; c < cpg; ++c) {
                const double gm = gamma.w[int64_t(g) * cpg + c];
                for (int64_t i = 0; i < S; ++i) {
                    double dxh = double(go[c * S + i]) * gm;
                    gi[c * S + i] = float(
                        inv * (dxh - s1 / double(M) - double(xh[c * S + i]) * s2 / double(M)));
                }
            }
        }
    }

    // per-channel parameter grads, fixed order
    for (int c = 0; c < channels; ++c) {
        const int g = c / cpg;
        double dg = 0.0, db = 0.0;
        for (int n = 0; n < N; ++n) {
            const int64_t base = (int64_t(n) * channels + int64_t(g) * cpg + (c % cpg)) * S;
            const float* go = gout.data() + base;
            const float* xh = xhat_cache.data() + base;
            for (int64_t i = 0; i < S; ++i) {
                dg += double(go[i]) * double(xh[i]);
                db += double(go[i]);
            }
        }
        gamma.g[c] += float(dg);
        beta.g[c] += float(db);
    }
    return gin;
}

// ----------------------------------------------------------------- Linear

void Linear::configure(const std::string& name, int in_, int out_) {
    in = in_;
    out = out_;
    weight.init_shape(name + ".weight", {out, in});
    bias.init_shape(name + ".bias", {out});
}

void Linear::init(Rng& rng, double scale) {
    double std_dev = scale * std::sqrt(2.0 / double(in));
    for (auto& x : weight.w.v) x = float(rng.normal() * std_dev);
    bias.w.zero();
}

void Linear::collect(ParamList& out_list) {
    out_list.push_back(&weight);
    out_list.push_back(&bias);
}

Tensor Linear::forward(const Tensor& x, bool keep_cache) {
    require(x.rank() == 2 && x.dim(1) == in, ErrorKind::validation, "linear: bad input shape");
    const int N = x.dim(0);
    Tensor y({N, out});
#pragma omp parallel for collapse(2) schedule(static)
    for (int n = 0; n < N; ++n)
        for (int o = 0; o < out; ++o)
            y[int64_t(n) * out + o] =
                dot_f32(x.data() + int64_t(n) * in, weight.w.data() + int64_t(o) * in, in) +
                bias.w[o];
    if (keep_cache) x_cache = x;
    return y;
}

Tensor Linear::backward(const Tensor& gout) {
    require(x_cache.numel() > 0, ErrorKind::validation, "linear backward without cached input");
    const int N = x_cache.dim(0);
    Tensor gin({N, in});
#pragma omp parallel for schedule(static)
    for (int n = 0; n < N; ++n) {
        float* gi = gin.data() + int64_t(n) * in;
        for (int o = 0; o < out; ++o) {
            const float g = gout[int64_t(n) * out + o];
            const float* wrow = weight.w.data() + int64_t(o) * in;
            for (int i = 0; i < in; ++i) gi[i] += g * wrow[i];
        }
    }
    for (int o = 0; o < out; ++o) {
        float* wg = weight.g.data() + int64_t(o) * in;
        double db = 0.0;
        for (int n = 0; n < N; ++n) {
            const float g = gout[int64_t(n) * out + o];
            const float* xr = x_cache.data() + int64_t(n) * in;
            for (int i = 0; i < in; ++i) wg[i] += g * xr[i];
            db += g;
        }
        bias.g[o] += float(db);
    }
    return gin;
}

// ------------------------------------------------------------ activations

Tensor ReLU::forward(const Tensor& x, bool keep_cache) {
    Tensor y(x.shape);
    const int64_t n = x.numel();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) y[i] = x[i] > 0.0f ? x[i] : 0.0f;
    if (keep_cache) x_cache = x;
    return y;
}

Tensor ReLU::backward(const Tensor& gout) {
    Tensor gin(gout.shape);
    const int64_t n = gout.numel();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) gin[i] = x_cache[i] > 0.0f ? gout[i] : 0.0f;
    return gin;
}

namespace {
inline float sigmoidf(float x) { return 1.0f / (1.0f + std::exp(-x)); }
}  // namespace

Tensor SiLU::forward(const Tensor& x, bool keep_cache) {
    Tensor y(x.shape);
    const int64_t n = x.numel();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) y[i] = x[i] * sigmoidf(x[i]);
    if (keep_cache) x_cache = x;
    return y;
}

Tensor SiLU::backward(const Tensor& gout) {
    Tensor gin(gout.shape);
    const int64_t n = gout.numel();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) {
        float s = sigmoidf(x_cache[i]);
        gin[i] = gout[i] * s * (1.0f + x_cache[i] * (1.0f - s));
    }
    return gin;
}

Tensor Softplus::forward(const Tensor& x, bool keep_cache) {
    Tensor y(x.shape);
    const int64_t n = x.numel();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i)
        y[i] = x[i] > 30.0f ? x[i] : std::log1p(std::exp(x[i]));
    if (keep_cache) x_cache = x;
    return y;
}

Tensor Softplus::backward(const Tensor& gout) {
    Tensor gin(gout.shape);
    const int64_t n = gout.numel();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) gin[i] = gout[i] * sigmoidf(x_cache[i]);
    return gin;
}

// ---------------------------------------------------------------- pooling

Tensor global_avg_pool(const Tensor& x) {
    require(x.rank() >= 3, ErrorKind::validation, "global_avg_pool expects (N, C, spatial...)");
    const int N = x.dim(0), C = x.dim(1);
    const int64_t S = spatial_size(x.shape);
    Tensor y({N, C});
#pragma omp parallel for collapse(2) schedule(static)
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const float* p = x.data() + (int64_t(n) * C + c) * S;
            double acc = 0.0;
            for (int64_t i = 0; i < S; ++i) acc += p[i];
            y[int64_t(n) * C + c] = float(acc / double(S));
        }
    }
    return y;
}

Tensor global_avg_pool_backward(const Tensor& gout, const std::vector<int>& in_shape) {
    Tensor gin(in_shape);
    const int N = in_shape[0], C = in_shape[1];
    const int64_t S = spatial_size(in_shape);
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const float g = gout[int64_t(n) * C + c] / float(S);
            float* p = gin.data() + (int64_t(n) * C + c) * S;
            for (int64_t i = 0; i < S; ++i) p[i] = g;
        }
    }
    return gin;
}

Tensor avg_pool3d(const Tensor& x, int fz, int fy, int fx) {
    require(x.rank() == 5, ErrorKind::validation, "avg_pool3d expects (N, C, D, H, W)");
    const int N = x.dim(0), C = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
    require(fz > 0 && fy > 0 && fx > 0 && D % fz == 0 && H % fy == 0 && W % fx == 0,
            ErrorKind::validation, "avg_pool3d: factors must divide dims");
    const int Do = D / fz, Ho = H / fy, Wo = W / fx;
    Tensor y({N, C, Do, Ho, Wo});
    const double inv = 1.0 / (double(fz) * fy * fx);
#pragma omp parallel for collapse(2) schedule(static)
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const float* inp = x.data() + (int64_t(n) * C + c) * D * H * W;
            float* outp = y.data() + (int64_t(n) * C + c) * Do * Ho * Wo;
            for (int zo = 0; zo < Do; ++zo)
                for (int yo = 0; yo < Ho; ++yo)
                    for (int xo = 0; xo < Wo; ++xo) {
                        double acc = 0.0;
                        for (int a = 0; a < fz; ++a)
                            for (int b = 0; b < fy; ++b)
                                for (int d = 0; d < fx; ++d)
                                    acc += inp[(int64_t(zo * fz + a) * H + (yo * fy + b)) * W +
                                               (xo * fx + d)];
                        outp[(int64_t(zo) * Ho + yo) * Wo + xo] = float(acc * inv);
                    }
        }
    }
    return y;
}

Tensor upsample_trilinear(const Tensor& x, int Do, int Ho, int Wo) {
    require(x.rank() == 3 || x.rank() == 5, ErrorKind::validation,
            "upsample_trilinear expects (D, H, W) or (N, C, D, H, W)");
    const bool bare = x.rank() == 3;
    const int N = bare ? 1 : x.dim(0), C = bare ? 1 : x.dim(1);
    const int D = x.dim(bare ? 0 : 2), H = x.dim(bare ? 1 : 3), W = x.dim(bare ? 2 : 4);
    require(Do > 0 && Ho > 0 && Wo > 0, ErrorKind::validation, "upsample_trilinear: bad target");

    auto src = [](int out_i, int out_n, int in_n) {
        return out_n > 1 ? double(out_i) * double(in_n - 1) / double(out_n - 1) : 0.0;
    };
    Tensor y(bare ? std::vector<int>{Do, Ho, Wo} : std::vector<int>{N, C, Do, Ho, Wo});
#pragma omp parallel for schedule(static)
    for (int zo = 0; zo < Do; ++zo) {
        double fz = src(zo, Do, D);
        int z0 = int(fz), z1 = std::min(z0 + 1, D - 1);
        double tz = fz - z0;
        for (int nc = 0; nc < N * C; ++nc) {
            const float* inp = x.data() + int64_t(nc) * D * H * W;
            float* outp = y.data() + int64_t(nc) * Do * Ho * Wo;
            for (int yo = 0; yo < Ho; ++yo) {
                double fy = src(yo, Ho, H);
                int y0 = int(fy), y1 = std::min(y0 + 1, H - 1);
                double ty = fy - y0;
                for (int xo = 0; xo < Wo; ++xo) {
                    double fx = src(xo, Wo, W);
                    int x0 = int(fx), x1 = std::min(x0 + 1, W - 1);
                    double tx = fx - x0;
                    auto at = [&](int z, int yy, int xx) {
                        return double(inp[(int64_t(z) * H + yy) * W + xx]);
                    };
                    double c00 = at(z0, y0, x0) * (1 - tx) + at(z0, y0, x1) * tx;
                    double c01 = at(z0, y1, x0) * (1 - tx) + at(z0, y1, x1) * tx;
                    double c10 = at(z1, y0, x0) * (1 - tx) + at(z1, y0, x1) * tx;
                    double c11 = at(z1, y1, x0) * (1 - tx) + at(z1, y1, x1) * tx;
                    double c0 = c00 * (1 - ty) + c01 * ty;
                    double c1 = c10 * (1 - ty) + c11 * ty;
                    outp[(int64_t(zo) * Ho + yo) * Wo + xo] = float(c0 * (1 - tz) + c1 * tz);
                }
            }
        }
    }
    return y;
}

Tensor upsample_nearest2x(const Tensor& x) {
    require(x.rank() == 4, ErrorKind::validation, "upsample_nearest2x expects (N, C, H, W)");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor y({N, C, 2 * H, 2 * W});
#pragma omp parallel for schedule(static)
    for (int nc = 0; nc < N * C; ++nc) {
        const float* inp = x.data() + int64_t(nc) * H * W;
        float* outp = y.data() + int64_t(nc) * 4 * H * W;
        for (int i = 0; i < H; ++i)
            for (int j = 0; j < W; ++j) {
                const float v = inp[int64_t(i) * W + j];
                float* o = outp + (int64_t(2 * i) * 2 * W + 2 * j);
                o[0] = v;
                o[1] = v;
                o[2 * W] = v;
                o[2 * W + 1] = v;
            }
    }
    return y;
}

Tensor upsample_nearest2x_backward(const Tensor& gout) {
    require(gout.rank() == 4 && gout.dim(2) % 2 == 0 && gout.dim(3) % 2 == 0,
            ErrorKind::validation, "upsample_nearest2x_backward: bad shape");
    const int N = gout.dim(0), C = gout.dim(1), H = gout.dim(2) / 2, W = gout.dim(3) / 2;
    Tensor gin({N, C, H, W});
#pragma omp parallel for schedule(static)
    for (int nc = 0; nc < N * C; ++nc) {
        const float* gp = gout.data() + int64_t(nc) * 4 * H * W;
        float* gi = gin.data() + int64_t(nc) * H * W;
        for (int i = 0; i < H; ++i)
            for (int j = 0; j < W; ++j) {
                const float* o = gp + (int64_t(2 * i) * 2 * W + 2 * j);
                gi[int64_t(i) * W + j] = o[0] + o[1] + o[2 * W] + o[2 * W + 1];
            }
    }
    return gin;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    require(a.rank() == b.rank() && a.rank() >= 3 && a.dim(0) == b.dim(0), ErrorKind::validation,
            "concat_channels: rank/batch mismatch");
    for (int i = 2; i < a.rank(); ++i)
        require(a.dim(i) == b.dim(i), ErrorKind::validation, "concat_channels: spatial mismatch");
    const int N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1);
    const int64_t S = spatial_size(a.shape);
    std::vector<int> os = a.shape;
    os[1] = Ca + Cb;
    Tensor y(os);
    for (int n = 0; n < N; ++n) {
        std::memcpy(y.data() + int64_t(n) * (Ca + Cb) * S, a.data() + int64_t(n) * Ca * S,
                    size_t(Ca * S) * sizeof(float));
        std::memcpy(y.data() + (int64_t(n) * (Ca + Cb) + Ca) * S, b.data() + int64_t(n) * Cb * S,
                    size_t(Cb * S) * sizeof(float));
    }
    return y;
}

void split_channels(const Tensor& g, int ca, Tensor& ga, Tensor& gb) {
    require(g.rank() >= 3 && ca > 0 && ca < g.dim(1), ErrorKind::validation,
            "split_channels: bad split point");
    const int N = g.dim(0), C = g.dim(1), cb = C - ca;
    const int64_t S = spatial_size(g.shape);
    std::vector<int> sa = g.shape, sb = g.shape;
    sa[1] = ca;
    sb[1] = cb;
    ga = Tensor(sa);
    gb = Tensor(sb);
    for (int n = 0; n < N; ++n) {
        std::memcpy(ga.data() + int64_t(n) * ca * S, g.data() + int64_t(n) * C * S,
                    size_t(ca * S) * sizeof(float));
        std::memcpy(gb.data() + int64_t(n) * cb * S, g.data() + (int64_t(n) * C + ca) * S,
                    size_t(cb * S) * sizeof(float));
    }
}

Tensor timestep_embedding(const std::vector<float>& t, int dim) {
    require(dim >= 2 && dim % 2 == 0, ErrorKind::configuration,
            "timestep_embedding: dim must be even and >= 2");
    const int N = int(t.size()), half = dim / 2;
    Tensor y({N, dim});
    for (int n = 0; n < N; ++n) {
        for (int i = 0; i < half; ++i) {
            double f = half > 1 ? std::exp(-std::log(10000.0) * double(i) / double(half - 1))
                                : 1.0;
            double a = double(t[size_t(n)]) * f;
            y[int64_t(n) * dim + i] = float(std::sin(a));
            y[int64_t(n) * dim + half + i] = float(std::cos(a));
        }
    }
    return y;
}

// ------------------------------------------------------------------- Adam

void Adam::step(const ParamList& params) {
    if (m.empty()) {
        for (Param* p : params) {
            m.push_back(Tensor(p->w.shape));
            v.push_back(Tensor(p->w.shape));
        }
    }
    require(m.size() == params.size(), ErrorKind::training, "adam: parameter list changed");
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, double(t));
    const double bc2 = 1.0 - std::pow(beta2, double(t));
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Param* p = params[pi];
        require(m[pi].numel() == p->w.numel(), ErrorKind::training, "adam: shape changed");
        const int64_t n = p->w.numel();
        float* w = p->w.data();
        const float* g = p->g.data();
        float* mp = m[pi].data();
        float* vp = v[pi].data();
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < n; ++i) {
            double gi = g[i];
            double mi = beta1 * double(mp[i]) + (1.0 - beta1) * gi;
            double vi = beta2 * double(vp[i]) + (1.0 - beta2) * gi * gi;
            mp[i] = float(mi);
            vp[i] = float(vi);
            w[i] -= float(lr * (mi / bc1) / (std::sqrt(vi / bc2) + eps));
        }
    }
}

// ------------------------------------------------------------ checkpoints

namespace {
constexpr char kParamMagic[4] = {'D', 'U', 'E', 'P'};
}

void save_params(const std::string& path, const ParamList& params) {
    FILE* f = std::fopen(path.c_str(), "wb");
    require(f != nullptr, ErrorKind::io, "cannot open for write: " + path);
    bool ok = std::fwrite(kParamMagic, 1, 4, f) == 4;
    uint32_t version = 1, count = uint32_t(params.size());
    ok = ok && std::fwrite(&version, 4, 1, f) == 1 && std::fwrite(&count, 4, 1, f) == 1;
    for (Param* p : params) {
        uint32_t nlen = uint32_t(p->name.size());
        uint32_t rank = uint32_t(p->w.shape.size());
        ok = ok && std::fwrite(&nlen, 4, 1, f) == 1;
        ok = ok && std::fwrite(p->name.data(), 1, nlen, f) == nlen;
        ok = ok && std::fwrite(&rank, 4, 1, f) == 1;
        for (int d : p->w.shape) {
            int32_t v32 = d;
            ok = ok && std::fwrite(&v32, 4, 1, f) == 1;
        }
        ok = ok && std::fwrite(p->w.data(), 4, size_t(p->w.numel()), f) == size_t(p->w.numel());
    }
    std::fclose(f);
    require(ok, ErrorKind::io, "short write: " + path);
}

void load_params(const std::string& path, const ParamList& params) {
    FILE* f = std::fopen(path.c_str(), "rb");
    require(f != nullptr, ErrorKind::io, "cannot open: " + path);
    auto bail = [&](const std::string& msg) {
        std::fclose(f);
        fail(ErrorKind::corrupt_file, msg + ": " + path);
    };
    char magic[4];
    uint32_t version = 0, count = 0;
    if (std::fread(magic, 1, 4, f) != 4 || std::memcmp(magic, kParamMagic, 4) != 0)
        bail("bad checkpoint magic");
    if (std::fread(&version, 4, 1, f) != 1 || version != 1) bail("bad checkpoint version");
    if (std::fread(&count, 4, 1, f) != 1 || count != params.size())
        bail("checkpoint parameter count mismatch");
    for (Param* p : params) {
        uint32_t nlen = 0, rank = 0;
        if (std::fread(&nlen, 4, 1, f) != 1 || nlen > 4096) bail("bad checkpoint entry");
        std::string name(nlen, '\0');
        if (std::fread(name.data(), 1, nlen, f) != nlen) bail("bad checkpoint entry");
        if (name != p->name) bail("checkpoint parameter name mismatch (" + name + ")");
        if (std::fread(&rank, 4, 1, f) != 1 || rank != p->w.shape.size())
            bail("checkpoint rank mismatch");
        for (int d : p->w.shape) {
            int32_t v32 = 0;
            if (std::fread(&v32, 4, 1, f) != 1 || v32 != d) bail("checkpoint shape mismatch");
        }
        if (std::fread(p->w.data(), 4, size_t(p->w.numel()), f) != size_t(p->w.numel()))
            bail("truncated checkpoint payload");
    }
    long pos = std::ftell(f);
    std::fseek(f, 0, SEEK_END);
    if (std::ftell(f) != pos) bail("trailing bytes in checkpoint");
    std::fclose(f);
}

}  // namespace due::nn
