#include <filesystem>

#include "due/dataset.hpp"

namespace due {

void SyntheticConfig::validate() const {
    require(depth >= 4 && height >= 4 && width >= 4, ErrorKind::validation,
            "synthetic shape dims must all be >= 4");
    require(n_pos >= 1 && n_neg >= 1, ErrorKind::validation, "need n_pos >= 1 and n_neg >= 1");
    require(lesion_r_min > 0 && lesion_r_min <= lesion_r_max, ErrorKind::configuration,
            "lesion radius range invalid");
    require(lesion_depth_frac_min > 0 && lesion_depth_frac_min <= lesion_depth_frac_max &&
                lesion_depth_frac_max <= 0.9f,
            ErrorKind::configuration, "lesion depth extent fraction invalid");
    // worst-case in-plane footprint: radius, drift and radius modulation
    float reach = lesion_r_max * (1.0f + drift_frac + 0.2f) + 2.0f;
    require(2.0f * reach < float(std::min(height, width)), ErrorKind::configuration,
            "lesion does not fit inside the volume cross-section");
    require(lesion_depth_frac_max * float(depth) >= 4.0f, ErrorKind::configuration,
            "lesion depth extent too small for the configured depth");
    require(bg_level >= 0.0f && bg_level + bg_amplitude + lesion_brightness <= 1.2f,
            ErrorKind::configuration, "background/lesion intensity budget exceeds [0, 1]");
    require(noise_sigma >= 0.0f && edge_softness > 0.0f, ErrorKind::configuration,
            "noise/edge parameters must be nonnegative");
    require(sparsify_spacing >= 2, ErrorKind::configuration, "sparsify spacing k must be >= 2");
}

namespace {

struct Wave {
    float fd, fh, fw, phase, amp;
};

// low-frequency cosine mixture, one set per sample
std::vector<Wave> make_bg_waves(const SyntheticConfig& cfg, Rng& rng) {
    std::vector<Wave> waves;
    for (int i = 0; i < cfg.bg_waves; ++i) {
        Wave w;
        w.fd = float(rng.uniform(0.5, 2.0)) / float(cfg.depth);
        w.fh = float(rng.uniform(0.5, 2.5)) / float(cfg.height);
        w.fw = float(rng.uniform(0.5, 2.5)) / float(cfg.width);
        w.phase = float(rng.uniform(0.0, 6.283185307179586));
        w.amp = cfg.bg_amplitude / float(cfg.bg_waves) * float(rng.uniform(0.6, 1.4));
        waves.push_back(w);
    }
    return waves;
}

struct LesionShape {
    float cz, half_depth;
    float cy0, cx0;
    float ry, rx;
    float drift_y, drift_x;      // drift amplitudes
    float wy, wx, py, px;        // drift frequencies/phases
    float mod_amp, mod_w, mod_p; // radius modulation along depth

    // in-plane ellipse parameters at depth z; returns false outside the cap
    bool at(int z, float& cy, float& cx, float& ay, float& ax) const {
        float u = (float(z) - cz) / half_depth;
        if (u < -1.0f || u > 1.0f) return false;
        float s = std::sqrt(std::sqrt(std::max(0.0f, 1.0f - u * u)));  // fat-ended cap
        float mod = 1.0f + mod_amp * std::sin(mod_w * u + mod_p);
        cy = cy0 + drift_y * std::sin(wy * u + py);
        cx = cx0 + drift_x * std::cos(wx * u + px);
        ay = ry * s * mod;
        ax = rx * s * mod;
        return ay >= 0.5f && ax >= 0.5f;
    }
};

LesionShape make_lesion(const SyntheticConfig& cfg, Rng& rng) {
    LesionShape L;
    L.half_depth =
        0.5f * float(cfg.depth) *
        float(rng.uniform(cfg.lesion_depth_frac_min, cfg.lesion_depth_frac_max));
    L.cz = float(rng.uniform(L.half_depth * 0.9 + 1.0, cfg.depth - 1 - (L.half_depth * 0.9 + 1.0)));
    L.ry = float(rng.uniform(cfg.lesion_r_min, cfg.lesion_r_max));
    L.rx = float(rng.uniform(cfg.lesion_r_min, cfg.lesion_r_max));
    float reach_y = L.ry * (1.0f + cfg.drift_frac + 0.2f) + 2.0f;
    float reach_x = L.rx * (1.0f + cfg.drift_frac + 0.2f) + 2.0f;
    L.cy0 = float(rng.uniform(reach_y, cfg.height - 1 - reach_y));
    L.cx0 = float(rng.uniform(reach_x, cfg.width - 1 - reach_x));
    L.drift_y = L.ry * cfg.drift_frac * float(rng.uniform(0.5, 1.0));
    L.drift_x = L.rx * cfg.drift_frac * float(rng.uniform(0.5, 1.0));
    L.wy = float(rng.uniform(1.5, 3.0));
    L.wx = float(rng.uniform(1.5, 3.0));
    L.py = float(rng.uniform(0.0, 6.28));
    L.px = float(rng.uniform(0.0, 6.28));
    L.mod_amp = 0.15f * float(rng.uniform(0.3, 1.0));
    L.mod_w = float(rng.uniform(1.0, 2.5));
    L.mod_p = float(rng.uniform(0.0, 6.28));
    return L;
}

}  // namespace

void synthesize_sample(const SyntheticConfig& cfg, uint64_t sample_seed, bool positive,
                       Volume& volume_out, DenseAnnotation& mask_out) {
    cfg.validate();
    const int D = cfg.depth, H = cfg.height, W = cfg.width;

    for (uint64_t attempt = 0;; ++attempt) {
        require(attempt < 64, ErrorKind::configuration,
                "could not synthesize a valid lesion for this configuration");
        Rng rng(derive_seed(sample_seed, "synth", attempt));

        auto waves = make_bg_waves(cfg, rng);
        LesionShape lesion{};
        if (positive) lesion = make_lesion(cfg, rng);

        Tensor vol({D, H, W});
        Tensor msk({D, H, W});
        for (int z = 0; z < D; ++z) {
            float cy = 0, cx = 0, ay = 0, ax = 0;
            bool has = positive && lesion.at(z, cy, cx, ay, ax);
            for (int y = 0; y < H; ++y) {
                for (int x = 0; x < W; ++x) {
                    float v = cfg.bg_level;
                    for (const auto& w : waves)
                        v += w.amp * std::cos(6.2831853f * (w.fd * z + w.fh * y + w.fw * x) +
                                              w.phase);
                    int64_t idx = (int64_t(z) * H + y) * W + x;
                    if (has) {
                        float dy = (float(y) - cy) / ay;
                        float dx = (float(x) - cx) / ax;
                        float phi = dy * dy + dx * dx;
                        if (phi <= 1.0f) msk[idx] = 1.0f;
                        float soft = 1.0f / (1.0f + std::exp((phi - 1.0f) / cfg.edge_softness));
                        v += cfg.lesion_brightness * soft;
                    }
                    v += float(rng.normal()) * cfg.noise_sigma;
                    vol[idx] = std::min(1.0f, std::max(0.0f, v));
                }
            }
        }

        if (positive) {
            // need a usable depth extent for sparsification and interpolation
            int zmin = -1, zmax = -1;
            for (int z = 0; z < D; ++z) {
                bool any = false;
                for (int64_t i = int64_t(z) * H * W; i < int64_t(z + 1) * H * W; ++i)
                    if (msk[i] >= 0.5f) { any = true; break; }
                if (any) {
                    if (zmin < 0) zmin = z;
                    zmax = z;
                }
            }
            if (zmin < 0 || zmax - zmin < 3) continue;  // degenerate, retry with next sub-seed
        }

        volume_out.data = std::move(vol);
        for (int i = 0; i < 3; ++i) volume_out.spacing[i] = cfg.spacing[i];
        mask_out.mask = std::move(msk);
        mask_out.provenance = MaskProvenance::ground_truth;
        return;
    }
}

std::pair<int, int> foreground_extent(const DenseAnnotation& dense) {
    const int D = dense.depth();
    const int64_t plane = int64_t(dense.height()) * dense.width();
    int zmin = -1, zmax = -1;
    for (int z = 0; z < D; ++z) {
        const float* p = dense.mask.data() + int64_t(z) * plane;
        for (int64_t i = 0; i < plane; ++i) {
            if (p[i] >= 0.5f) {
                if (zmin < 0) zmin = z;
                zmax = z;
                break;
            }
        }
    }
    require(zmin >= 0, ErrorKind::annotation, "annotation has empty foreground");
    return {zmin, zmax};
}

namespace {

SparseAnnotation take_slices(const DenseAnnotation& dense, const std::vector<int>& indices) {
    const int H = dense.height(), W = dense.width();
    const int64_t plane = int64_t(H) * W;
    SparseAnnotation sa;
    for (int z : indices) {
        require(z >= 0 && z < dense.depth(), ErrorKind::validation,
                "sparse slice index out of volume depth range");
        SparseSlice s;
        s.depth_index = z;
        s.mask = Tensor({H, W});
        std::memcpy(s.mask.data(), dense.mask.data() + int64_t(z) * plane,
                    size_t(plane) * sizeof(float));
        sa.slices.push_back(std::move(s));
    }
    sa.extent = {indices.front(), indices.back()};
    sa.validate();
    return sa;
}

}  // namespace

SparseAnnotation sparsify_annotation(const DenseAnnotation& dense, int spacing_k) {
    require(spacing_k >= 2, ErrorKind::validation, "sparsify spacing k must be >= 2");
    auto [zmin, zmax] = foreground_extent(dense);
    require(zmax > zmin, ErrorKind::annotation,
            "foreground depth extent too thin to sparsify (z_max must exceed z_min)");
    std::vector<int> keep;
    for (int z = zmin; z < zmax; z += spacing_k) keep.push_back(z);
    keep.push_back(zmax);  // bounding slices are always kept
    return take_slices(dense, keep);
}

SparseAnnotation sparsify_annotation(const DenseAnnotation& dense,
                                     const std::vector<int>& explicit_indices) {
    foreground_extent(dense);  // negatives are never sparsified
    require(explicit_indices.size() >= 2, ErrorKind::validation,
            "explicit sparsify index list needs at least 2 slices");
    for (size_t i = 1; i < explicit_indices.size(); ++i)
        require(explicit_indices[i] > explicit_indices[i - 1], ErrorKind::validation,
                "explicit sparsify indices must be strictly increasing");
    return take_slices(dense, explicit_indices);
}

}  // namespace due
