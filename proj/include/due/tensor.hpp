#pragma once

#include <cstring>
#include <initializer_list>
#include <numeric>

#include "due/common.hpp"

namespace due {

// Dense row-major float tensor. Rank <= 5 in practice
// (N, C, D, H, W for volumes; N, C, H, W for slices).
struct Tensor {
    std::vector<int> shape;
    std::vector<float> v;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
        v.assign(size_t(numel()), 0.0f);
    }
    Tensor(std::initializer_list<int> s) : Tensor(std::vector<int>(s)) {}

    int64_t numel() const {
        int64_t n = 1;
        for (int d : shape) n *= d;
        return shape.empty() ? 0 : n;
    }
    int rank() const { return int(shape.size()); }
    int dim(int i) const { return shape[size_t(i)]; }

    float* data() { return v.data(); }
    const float* data() const { return v.data(); }

    float& operator[](int64_t i) { return v[size_t(i)]; }
    float operator[](int64_t i) const { return v[size_t(i)]; }

    void fill(float x) { std::fill(v.begin(), v.end(), x); }
    void zero() { fill(0.0f); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

    static Tensor full(std::vector<int> s, float x) {
        Tensor t(std::move(s));
        t.fill(x);
        return t;
    }

    static Tensor randn(std::vector<int> s, Rng& rng, float std_dev = 1.0f) {
        Tensor t(std::move(s));
        for (auto& x : t.v) x = float(rng.normal() * std_dev);
        return t;
    }

    double sum() const {
        double acc = 0.0;
        for (float x : v) acc += x;
        return acc;
    }
    double mean() const { return numel() > 0 ? sum() / double(numel()) : 0.0; }

    float min_value() const {
        float m = v.empty() ? 0.0f : v[0];
        for (float x : v) m = std::min(m, x);
        return m;
    }
    float max_value() const {
        float m = v.empty() ? 0.0f : v[0];
        for (float x : v) m = std::max(m, x);
        return m;
    }

    bool all_finite() const {
        for (float x : v)
            if (!std::isfinite(x)) return false;
        return true;
    }
};

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    require(a.shape == b.shape, ErrorKind::validation, std::string(what) + ": shape mismatch");
}

// y += a * x, elementwise
inline void axpy(float a, const Tensor& x, Tensor& y) {
    check_same_shape(x, y, "axpy");
    const float* xp = x.data();
    float* yp = y.data();
    int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) yp[i] += a * xp[i];
}

// Deterministic vectorizable dot product: fixed 8-lane accumulation tree.
inline float dot_f32(const float* a, const float* b, int n) {
    float acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
    int i = 0;
    for (; i + 8 <= n; i += 8)
        for (int l = 0; l < 8; ++l) acc[l] += a[i + l] * b[i + l];
    float tail = 0.0f;
    for (; i < n; ++i) tail += a[i] * b[i];
    float s01 = acc[0] + acc[1], s23 = acc[2] + acc[3];
    float s45 = acc[4] + acc[5], s67 = acc[6] + acc[7];
    return ((s01 + s23) + (s45 + s67)) + tail;
}

}  // namespace due
