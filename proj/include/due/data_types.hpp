#pragma once

#include <utility>

#include "due/tensor.hpp"

namespace due {

// Rank-3 intensity grid, values in [0, 1], shape (D, H, W).
struct Volume {
    Tensor data;               // shape {D, H, W}
    float spacing[3] = {1.0f, 1.0f, 1.0f};

    int depth() const { return data.dim(0); }
    int height() const { return data.dim(1); }
    int width() const { return data.dim(2); }

    void validate() const;
};

enum class MaskProvenance { ground_truth, interpolated };

// Full rank-3 annotation mask, values in [0, 1].
// ground_truth provenance implies strictly binary values.
struct DenseAnnotation {
    Tensor mask;               // shape {D, H, W}
    MaskProvenance provenance = MaskProvenance::ground_truth;

    int depth() const { return mask.dim(0); }
    int height() const { return mask.dim(1); }
    int width() const { return mask.dim(2); }

    void validate() const;
    int64_t foreground_count(float thresh = 0.5f) const;
};

// Human-labeled slices at known depth indices.
struct SparseSlice {
    int depth_index = 0;
    Tensor mask;               // shape {H, W}, binary
};

struct SparseAnnotation {
    std::vector<SparseSlice> slices;   // strictly increasing depth_index
    std::pair<int, int> extent{0, 0};  // (first_index, last_index)

    size_t count() const { return slices.size(); }
    void validate() const;
    bool has_depth(int z) const {
        for (const auto& s : slices)
            if (s.depth_index == z) return true;
        return false;
    }
};

// ---- grid file IO -------------------------------------------------------
// All rank-3 grids share one container: 36-byte header (magic "DUEG",
// dtype, flags, dims, spacing) followed by the raw little-endian payload in
// row-major (D, H, W) order. dtype 0 = float32, dtype 1 = uint8.

void save_volume(const std::string& path, const Volume& vol);
Volume load_volume(const std::string& path);

void save_annotation(const std::string& path, const DenseAnnotation& ann);
DenseAnnotation load_annotation(const std::string& path);

// f32 grid without the [0,1] constraint (uncertainty / weight maps).
void save_f32_grid(const std::string& path, const Tensor& grid);
Tensor load_f32_grid(const std::string& path);

// single binary 2D slice, stored as a (1, H, W) u8 grid
void save_slice_mask(const std::string& path, const Tensor& slice);
Tensor load_slice_mask(const std::string& path);

uint64_t hash_file(const std::string& path);

}  // namespace due
