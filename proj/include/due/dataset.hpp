#pragma once

#include "due/data_types.hpp"

namespace due {

// Synthetic volumetric phantoms: textured background, positives carry one
// bright blobby lesion whose cross-section drifts smoothly along depth.
struct SyntheticConfig {
    int n_pos = 10;
    int n_neg = 10;
    int depth = 32, height = 64, width = 64;

    float lesion_r_min = 7.0f;   // in-plane radius range, voxels
    float lesion_r_max = 12.0f;
    float lesion_depth_frac_min = 0.55f;  // foreground depth extent as fraction of D
    float lesion_depth_frac_max = 0.80f;
    float lesion_brightness = 0.35f;
    float drift_frac = 0.35f;    // slice-to-slice center drift amplitude, fraction of radius
    float edge_softness = 0.15f;

    float bg_level = 0.30f;
    float bg_amplitude = 0.12f;
    int bg_waves = 3;
    float noise_sigma = 0.02f;

    int sparsify_spacing = 4;    // k; gaps between kept annotation slices
    bool sparsify_random = false;

    float spacing[3] = {1.0f, 1.0f, 1.0f};

    void validate() const;
};

struct SampleEntry {
    std::string id;
    int label = 0;
    std::string volume_path;   // relative to dataset root
    std::string mask_path;     // ground-truth dense mask
    std::string sparse_dir;    // empty for negatives
    std::string split;         // "", "train", "val", "test"
    int shape[3] = {0, 0, 0};
    float spacing[3] = {1.0f, 1.0f, 1.0f};
};

struct DatasetManifest {
    int format_version = 1;
    uint64_t seed = 0;
    SyntheticConfig config;
    std::vector<SampleEntry> samples;
    std::string root_dir;  // not serialized; set when loaded/created

    const SampleEntry& find(const std::string& id) const;
    std::vector<const SampleEntry*> in_split(const std::string& split) const;
    std::string resolve(const std::string& rel_path) const;
    void validate_paths() const;
};

// Deterministic in (config, seed): same call twice yields byte-identical
// dataset directories.
DatasetManifest generate_synthetic_dataset(const SyntheticConfig& config, uint64_t seed,
                                           const std::string& out_dir);

// One sample's volume + ground-truth mask, without touching the filesystem.
void synthesize_sample(const SyntheticConfig& config, uint64_t sample_seed, bool positive,
                       Volume& volume_out, DenseAnnotation& mask_out);

// Keeps {z_min, z_min+k, ...} plus z_max; slices are bit-exact copies.
SparseAnnotation sparsify_annotation(const DenseAnnotation& dense, int spacing_k);
SparseAnnotation sparsify_annotation(const DenseAnnotation& dense,
                                     const std::vector<int>& explicit_indices);

// foreground depth extent [z_min, z_max]; annotation error if empty
std::pair<int, int> foreground_extent(const DenseAnnotation& dense);

struct SplitRatios {
    double train = 0.6, val = 0.2, test = 0.2;
};

// Stratified split; with balance_train the train split holds equal
// positive/negative counts and val/test keep the global class ratio.
DatasetManifest split_dataset(DatasetManifest manifest, const SplitRatios& ratios, uint64_t seed,
                              bool balance_train);

void save_manifest(const DatasetManifest& manifest);  // writes <root_dir>/manifest.json
DatasetManifest load_manifest(const std::string& dataset_dir);

void save_sparse_annotation(const std::string& dir, const SparseAnnotation& sa);
SparseAnnotation load_sparse_annotation(const std::string& dir);

}  // namespace due
