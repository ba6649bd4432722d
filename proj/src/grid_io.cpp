#include "due/data_types.hpp"

#include <cstdio>
#include <filesystem>

namespace due {

void Volume::validate() const {
    require(data.rank() == 3, ErrorKind::validation, "volume must be rank 3");
    require(depth() >= 4 && height() >= 4 && width() >= 4, ErrorKind::validation,
            "volume dims must all be >= 4");
    require(spacing[0] > 0 && spacing[1] > 0 && spacing[2] > 0, ErrorKind::validation,
            "voxel spacing must be positive");
    for (float x : data.v)
        require(std::isfinite(x) && x >= 0.0f && x <= 1.0f, ErrorKind::validation,
                "volume intensities must be finite and within [0, 1]");
}

void DenseAnnotation::validate() const {
    require(mask.rank() == 3, ErrorKind::validation, "annotation must be rank 3");
    for (float x : mask.v) {
        require(std::isfinite(x) && x >= 0.0f && x <= 1.0f, ErrorKind::validation,
                "annotation values must be within [0, 1]");
        if (provenance == MaskProvenance::ground_truth)
            require(x == 0.0f || x == 1.0f, ErrorKind::validation,
                    "ground-truth annotation must be binary");
    }
}

int64_t DenseAnnotation::foreground_count(float thresh) const {
    int64_t n = 0;
    for (float x : mask.v) n += (x >= thresh);
    return n;
}

void SparseAnnotation::validate() const {
    require(!slices.empty(), ErrorKind::validation, "sparse annotation has no slices");
    int prev = -1;
    for (const auto& s : slices) {
        require(s.depth_index > prev, ErrorKind::validation,
                "sparse slice depth indices must be strictly increasing");
        require(s.mask.rank() == 2, ErrorKind::validation, "sparse slice mask must be rank 2");
        require(s.mask.shape == slices.front().mask.shape, ErrorKind::validation,
                "sparse slice masks must share one shape");
        prev = s.depth_index;
    }
    require(extent.first == slices.front().depth_index &&
                extent.second == slices.back().depth_index,
            ErrorKind::validation, "sparse extent must match first/last slice index");
}

namespace {

constexpr char kMagic[4] = {'D', 'U', 'E', 'G'};

struct GridHeader {
    char magic[4];
    uint32_t dtype;    // 0 = f32, 1 = u8
    uint32_t flags;    // provenance for annotations
    uint32_t dims[3];  // D, H, W
    float spacing[3];
};
static_assert(sizeof(GridHeader) == 36);

void write_grid(const std::string& path, uint32_t dtype, uint32_t flags, const Tensor& grid,
                const float spacing[3]) {
    require(grid.rank() == 3, ErrorKind::io, "grid files are rank 3");
    GridHeader h{};
    std::memcpy(h.magic, kMagic, 4);
    h.dtype = dtype;
    h.flags = flags;
    for (int i = 0; i < 3; ++i) {
        h.dims[i] = uint32_t(grid.dim(i));
        h.spacing[i] = spacing ? spacing[i] : 1.0f;
    }
    FILE* f = std::fopen(path.c_str(), "wb");
    require(f != nullptr, ErrorKind::io, "cannot open for write: " + path);
    bool ok = std::fwrite(&h, sizeof(h), 1, f) == 1;
    int64_t n = grid.numel();
    if (ok) {
        if (dtype == 0) {
            ok = std::fwrite(grid.data(), sizeof(float), size_t(n), f) == size_t(n);
        } else {
            std::vector<uint8_t> bytes(static_cast<size_t>(n));
            for (int64_t i = 0; i < n; ++i) bytes[size_t(i)] = grid[i] >= 0.5f ? 1 : 0;
            ok = std::fwrite(bytes.data(), 1, size_t(n), f) == size_t(n);
        }
    }
    std::fclose(f);
    require(ok, ErrorKind::io, "short write: " + path);
}

Tensor read_grid(const std::string& path, uint32_t* dtype_out, uint32_t* flags_out,
                 float spacing_out[3]) {
    FILE* f = std::fopen(path.c_str(), "rb");
    require(f != nullptr, ErrorKind::io, "cannot open: " + path);
    GridHeader h{};
    if (std::fread(&h, sizeof(h), 1, f) != 1) {
        std::fclose(f);
        fail(ErrorKind::corrupt_file, "truncated header: " + path);
    }
    if (std::memcmp(h.magic, kMagic, 4) != 0 || h.dtype > 1) {
        std::fclose(f);
        fail(ErrorKind::corrupt_file, "bad magic or dtype: " + path);
    }
    int64_t n = int64_t(h.dims[0]) * h.dims[1] * h.dims[2];
    size_t elem = h.dtype == 0 ? sizeof(float) : 1;
    std::fseek(f, 0, SEEK_END);
    int64_t payload = std::ftell(f) - int64_t(sizeof(h));
    if (payload != n * int64_t(elem)) {
        std::fclose(f);
        fail(ErrorKind::corrupt_file, "header/payload size mismatch: " + path);
    }
    std::fseek(f, sizeof(h), SEEK_SET);

    Tensor grid({int(h.dims[0]), int(h.dims[1]), int(h.dims[2])});
    bool ok;
    if (h.dtype == 0) {
        ok = std::fread(grid.data(), sizeof(float), size_t(n), f) == size_t(n);
    } else {
        std::vector<uint8_t> bytes(static_cast<size_t>(n));
        ok = std::fread(bytes.data(), 1, size_t(n), f) == size_t(n);
        for (int64_t i = 0; i < n; ++i) grid[i] = float(bytes[size_t(i)]);
    }
    std::fclose(f);
    require(ok, ErrorKind::corrupt_file, "short read: " + path);

    if (dtype_out) *dtype_out = h.dtype;
    if (flags_out) *flags_out = h.flags;
    if (spacing_out)
        for (int i = 0; i < 3; ++i) spacing_out[i] = h.spacing[i];
    return grid;
}

}  // namespace

void save_volume(const std::string& path, const Volume& vol) {
    write_grid(path, 0, 0, vol.data, vol.spacing);
}

Volume load_volume(const std::string& path) {
    Volume v;
    v.data = read_grid(path, nullptr, nullptr, v.spacing);
    return v;
}

void save_annotation(const std::string& path, const DenseAnnotation& ann) {
    uint32_t flags = ann.provenance == MaskProvenance::interpolated ? 1 : 0;
    // ground truth is strictly binary and stored as u8; interpolated masks are soft
    uint32_t dtype = ann.provenance == MaskProvenance::ground_truth ? 1 : 0;
    write_grid(path, dtype, flags, ann.mask, nullptr);
}

DenseAnnotation load_annotation(const std::string& path) {
    DenseAnnotation ann;
    uint32_t flags = 0;
    ann.mask = read_grid(path, nullptr, &flags, nullptr);
    ann.provenance = flags == 1 ? MaskProvenance::interpolated : MaskProvenance::ground_truth;
    return ann;
}

void save_f32_grid(const std::string& path, const Tensor& grid) {
    write_grid(path, 0, 0, grid, nullptr);
}

Tensor load_f32_grid(const std::string& path) { return read_grid(path, nullptr, nullptr, nullptr); }

void save_slice_mask(const std::string& path, const Tensor& slice) {
    require(slice.rank() == 2, ErrorKind::io, "slice mask must be rank 2");
    Tensor grid({1, slice.dim(0), slice.dim(1)});
    grid.v = slice.v;
    write_grid(path, 1, 0, grid, nullptr);
}

Tensor load_slice_mask(const std::string& path) {
    Tensor grid = read_grid(path, nullptr, nullptr, nullptr);
    require(grid.dim(0) == 1, ErrorKind::corrupt_file, "slice mask file must have depth 1");
    Tensor slice({grid.dim(1), grid.dim(2)});
    slice.v = grid.v;
    return slice;
}

uint64_t hash_file(const std::string& path) {
    FILE* f = std::fopen(path.c_str(), "rb");
    require(f != nullptr, ErrorKind::io, "cannot open for hashing: " + path);
    uint64_t h = 0xcbf29ce484222325ULL;
    char buf[1 << 16];
    size_t got;
    while ((got = std::fread(buf, 1, sizeof(buf), f)) > 0) h = fnv1a64(buf, got, h);
    std::fclose(f);
    return h;
}

}  // namespace due
