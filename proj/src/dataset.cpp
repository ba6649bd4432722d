#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include <json.hpp>

#include "due/dataset.hpp"

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace due {

namespace {

std::string sample_file_id(const char* prefix, int i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s_%04d", prefix, i);
    return buf;
}

ordered_json config_to_json(const SyntheticConfig& c) {
    ordered_json j;
    j["n_pos"] = c.n_pos;
    j["n_neg"] = c.n_neg;
    j["shape"] = {c.depth, c.height, c.width};
    j["lesion_r_min"] = c.lesion_r_min;
    j["lesion_r_max"] = c.lesion_r_max;
    j["lesion_depth_frac_min"] = c.lesion_depth_frac_min;
    j["lesion_depth_frac_max"] = c.lesion_depth_frac_max;
    j["lesion_brightness"] = c.lesion_brightness;
    j["drift_frac"] = c.drift_frac;
    j["edge_softness"] = c.edge_softness;
    j["bg_level"] = c.bg_level;
    j["bg_amplitude"] = c.bg_amplitude;
    j["bg_waves"] = c.bg_waves;
    j["noise_sigma"] = c.noise_sigma;
    j["sparsify_spacing"] = c.sparsify_spacing;
    j["sparsify_random"] = c.sparsify_random;
    j["spacing"] = {c.spacing[0], c.spacing[1], c.spacing[2]};
    return j;
}

SyntheticConfig config_from_json(const ordered_json& j) {
    SyntheticConfig c;
    c.n_pos = j.at("n_pos").get<int>();
    c.n_neg = j.at("n_neg").get<int>();
    c.depth = j.at("shape").at(0).get<int>();
    c.height = j.at("shape").at(1).get<int>();
    c.width = j.at("shape").at(2).get<int>();
    c.lesion_r_min = j.at("lesion_r_min").get<float>();
    c.lesion_r_max = j.at("lesion_r_max").get<float>();
    c.lesion_depth_frac_min = j.at("lesion_depth_frac_min").get<float>();
    c.lesion_depth_frac_max = j.at("lesion_depth_frac_max").get<float>();
    c.lesion_brightness = j.at("lesion_brightness").get<float>();
    c.drift_frac = j.at("drift_frac").get<float>();
    c.edge_softness = j.at("edge_softness").get<float>();
    c.bg_level = j.at("bg_level").get<float>();
    c.bg_amplitude = j.at("bg_amplitude").get<float>();
    c.bg_waves = j.at("bg_waves").get<int>();
    c.noise_sigma = j.at("noise_sigma").get<float>();
    c.sparsify_spacing = j.at("sparsify_spacing").get<int>();
    c.sparsify_random = j.at("sparsify_random").get<bool>();
    for (int i = 0; i < 3; ++i) c.spacing[i] = j.at("spacing").at(size_t(i)).get<float>();
    return c;
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    require(out.good(), ErrorKind::io, "cannot open for write: " + path);
    out << text;
    require(out.good(), ErrorKind::io, "short write: " + path);
}

ordered_json read_json_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), ErrorKind::io, "cannot open: " + path);
    ordered_json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        fail(ErrorKind::corrupt_file, std::string("bad JSON in ") + path + ": " + e.what());
    }
    return j;
}

// random spacing with mean ~k, bounding slices always kept
std::vector<int> random_keep_indices(int zmin, int zmax, int k, Rng& rng) {
    std::vector<int> keep{zmin};
    int z = zmin;
    while (z < zmax) {
        int step = int(rng.randint(std::max<int64_t>(2, k - 2), k + 2));
        z = std::min(z + step, zmax);
        keep.push_back(z);
    }
    if (keep.size() < 2) keep.push_back(zmax);
    return keep;
}

// largest-remainder apportionment of `total` items proportional to weights
std::vector<int> apportion(int total, const std::vector<double>& weights) {
    double wsum = 0.0;
    for (double w : weights) wsum += w;
    std::vector<int> counts(weights.size(), 0);
    std::vector<std::pair<double, size_t>> fracs;
    int assigned = 0;
    for (size_t i = 0; i < weights.size(); ++i) {
        double exact = double(total) * weights[i] / wsum;
        counts[i] = int(std::floor(exact));
        assigned += counts[i];
        fracs.push_back({exact - std::floor(exact), i});
    }
    std::stable_sort(fracs.begin(), fracs.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (int r = 0; r < total - assigned; ++r) counts[fracs[size_t(r)].second]++;
    return counts;
}

}  // namespace

const SampleEntry& DatasetManifest::find(const std::string& id) const {
    for (const auto& s : samples)
        if (s.id == id) return s;
    fail(ErrorKind::validation, "sample id not in manifest: " + id);
}

std::vector<const SampleEntry*> DatasetManifest::in_split(const std::string& split) const {
    std::vector<const SampleEntry*> out;
    for (const auto& s : samples)
        if (s.split == split) out.push_back(&s);
    return out;
}

std::string DatasetManifest::resolve(const std::string& rel_path) const {
    return (fs::path(root_dir) / rel_path).string();
}

void DatasetManifest::validate_paths() const {
    std::set<std::string> ids;
    for (const auto& s : samples) {
        require(ids.insert(s.id).second, ErrorKind::validation, "duplicate sample id: " + s.id);
        require(fs::exists(resolve(s.volume_path)), ErrorKind::validation,
                "manifest references missing volume: " + s.volume_path);
        require(fs::exists(resolve(s.mask_path)), ErrorKind::validation,
                "manifest references missing mask: " + s.mask_path);
        if (!s.sparse_dir.empty())
            require(fs::exists(resolve(s.sparse_dir)), ErrorKind::validation,
                    "manifest references missing sparse dir: " + s.sparse_dir);
        require(s.split.empty() || s.split == "train" || s.split == "val" || s.split == "test",
                ErrorKind::validation, "bad split tag on sample " + s.id);
    }
}

void save_sparse_annotation(const std::string& dir, const SparseAnnotation& sa) {
    sa.validate();
    fs::create_directories(dir);
    ordered_json idx;
    idx["extent"] = {sa.extent.first, sa.extent.second};
    idx["height"] = sa.slices.front().mask.dim(0);
    idx["width"] = sa.slices.front().mask.dim(1);
    ordered_json indices = ordered_json::array();
    ordered_json files = ordered_json::array();
    for (const auto& s : sa.slices) {
        char name[32];
        std::snprintf(name, sizeof(name), "slice_%04d.msk", s.depth_index);
        save_slice_mask((fs::path(dir) / name).string(), s.mask);
        indices.push_back(s.depth_index);
        files.push_back(name);
    }
    idx["depth_indices"] = indices;
    idx["files"] = files;
    write_text_file((fs::path(dir) / "index.json").string(), idx.dump(2) + "\n");
}

SparseAnnotation load_sparse_annotation(const std::string& dir) {
    ordered_json idx = read_json_file((fs::path(dir) / "index.json").string());
    SparseAnnotation sa;
    auto indices = idx.at("depth_indices");
    auto files = idx.at("files");
    require(indices.size() == files.size() && !indices.empty(), ErrorKind::corrupt_file,
            "sparse index.json: depth_indices/files mismatch");
    for (size_t i = 0; i < indices.size(); ++i) {
        SparseSlice s;
        s.depth_index = indices.at(i).get<int>();
        s.mask = load_slice_mask((fs::path(dir) / files.at(i).get<std::string>()).string());
        sa.slices.push_back(std::move(s));
    }
    sa.extent = {idx.at("extent").at(0).get<int>(), idx.at("extent").at(1).get<int>()};
    sa.validate();
    return sa;
}

void save_manifest(const DatasetManifest& manifest) {
    ordered_json j;
    j["format_version"] = manifest.format_version;
    j["seed"] = manifest.seed;
    j["config"] = config_to_json(manifest.config);
    ordered_json samples = ordered_json::array();
    for (const auto& s : manifest.samples) {
        ordered_json e;
        e["id"] = s.id;
        e["label"] = s.label;
        e["volume"] = s.volume_path;
        e["mask"] = s.mask_path;
        if (s.sparse_dir.empty())
            e["sparse"] = nullptr;
        else
            e["sparse"] = s.sparse_dir;
        e["split"] = s.split;
        e["shape"] = {s.shape[0], s.shape[1], s.shape[2]};
        e["spacing"] = {s.spacing[0], s.spacing[1], s.spacing[2]};
        samples.push_back(e);
    }
    j["samples"] = samples;
    write_text_file((fs::path(manifest.root_dir) / "manifest.json").string(), j.dump(2) + "\n");
}

DatasetManifest load_manifest(const std::string& dataset_dir) {
    ordered_json j = read_json_file((fs::path(dataset_dir) / "manifest.json").string());
    DatasetManifest m;
    m.root_dir = dataset_dir;
    m.format_version = j.at("format_version").get<int>();
    require(m.format_version == 1, ErrorKind::corrupt_file, "unsupported manifest format_version");
    m.seed = j.at("seed").get<uint64_t>();
    m.config = config_from_json(j.at("config"));
    for (const auto& e : j.at("samples")) {
        SampleEntry s;
        s.id = e.at("id").get<std::string>();
        s.label = e.at("label").get<int>();
        s.volume_path = e.at("volume").get<std::string>();
        s.mask_path = e.at("mask").get<std::string>();
        if (!e.at("sparse").is_null()) s.sparse_dir = e.at("sparse").get<std::string>();
        s.split = e.at("split").get<std::string>();
        for (int i = 0; i < 3; ++i) s.shape[i] = e.at("shape").at(size_t(i)).get<int>();
        for (int i = 0; i < 3; ++i) s.spacing[i] = e.at("spacing").at(size_t(i)).get<float>();
        m.samples.push_back(std::move(s));
    }
    m.validate_paths();
    return m;
}

DatasetManifest generate_synthetic_dataset(const SyntheticConfig& config, uint64_t seed,
                                           const std::string& out_dir) {
    config.validate();
    fs::create_directories(fs::path(out_dir) / "volumes");
    fs::create_directories(fs::path(out_dir) / "masks");
    fs::create_directories(fs::path(out_dir) / "sparse");

    DatasetManifest m;
    m.seed = seed;
    m.config = config;
    m.root_dir = out_dir;

    int total = config.n_pos + config.n_neg;
    for (int i = 0; i < total; ++i) {
        bool positive = i < config.n_pos;
        std::string id = positive ? sample_file_id("pos", i) : sample_file_id("neg", i - config.n_pos);
        uint64_t sample_seed = derive_seed(seed, "gen-sample", uint64_t(i));

        Volume vol;
        DenseAnnotation msk;
        synthesize_sample(config, sample_seed, positive, vol, msk);

        SampleEntry e;
        e.id = id;
        e.label = positive ? 1 : 0;
        e.volume_path = "volumes/" + id + ".vol";
        e.mask_path = "masks/" + id + ".msk";
        e.shape[0] = config.depth;
        e.shape[1] = config.height;
        e.shape[2] = config.width;
        for (int k = 0; k < 3; ++k) e.spacing[k] = config.spacing[k];
        save_volume((fs::path(out_dir) / e.volume_path).string(), vol);
        save_annotation((fs::path(out_dir) / e.mask_path).string(), msk);

        if (positive) {
            SparseAnnotation sa;
            if (config.sparsify_random) {
                auto [zmin, zmax] = foreground_extent(msk);
                Rng srng(derive_seed(sample_seed, "sparsify"));
                sa = sparsify_annotation(msk,
                                         random_keep_indices(zmin, zmax, config.sparsify_spacing,
                                                             srng));
            } else {
                sa = sparsify_annotation(msk, config.sparsify_spacing);
            }
            e.sparse_dir = "sparse/" + id;
            save_sparse_annotation((fs::path(out_dir) / e.sparse_dir).string(), sa);
        }
        m.samples.push_back(std::move(e));
    }

    save_manifest(m);
    return m;
}

DatasetManifest split_dataset(DatasetManifest manifest, const SplitRatios& ratios, uint64_t seed,
                              bool balance_train) {
    double rsum = ratios.train + ratios.val + ratios.test;
    require(ratios.train > 0 && ratios.val > 0 && ratios.test > 0, ErrorKind::validation,
            "split ratios must be positive");
    require(std::abs(rsum - 1.0) < 1e-9, ErrorKind::validation, "split ratios must sum to 1");

    std::vector<std::string> pos_ids, neg_ids;
    for (const auto& s : manifest.samples) (s.label == 1 ? pos_ids : neg_ids).push_back(s.id);
    Rng pos_rng(derive_seed(seed, "split-pos"));
    Rng neg_rng(derive_seed(seed, "split-neg"));
    pos_rng.shuffle(pos_ids);
    neg_rng.shuffle(neg_ids);

    int n = int(manifest.samples.size());
    int n_pos = int(pos_ids.size()), n_neg = int(neg_ids.size());
    auto sizes = apportion(n, {ratios.train, ratios.val, ratios.test});
    int n_train = sizes[0], n_val = sizes[1], n_test = sizes[2];

    int train_pos, train_neg;
    if (balance_train) {
        int c = n_train / 2;
        if (n_train % 2 != 0) n_test += 1;  // odd balanced quota: leftover ticket goes to test
        require(n_pos >= c && n_neg >= c, ErrorKind::split,
                "cannot balance train split: need " + std::to_string(c) +
                    " per class, have pos=" + std::to_string(n_pos) +
                    " neg=" + std::to_string(n_neg));
        train_pos = train_neg = c;
    } else {
        auto pos_counts = apportion(n_pos, {double(n_train), double(n_val), double(n_test)});
        train_pos = pos_counts[0];
        train_neg = n_train - train_pos;
    }

    // val/test keep the global class ratio
    double p_global = double(n_pos) / double(n);
    int rem_pos = n_pos - train_pos;
    int rem_neg = n_neg - train_neg;
    require(rem_pos >= 0 && rem_neg >= 0, ErrorKind::split, "train split exceeds class pools");
    int val_pos = int(std::lround(double(n_val) * p_global));
    int lo = std::max({0, rem_pos - n_test, n_val - rem_neg});
    int hi = std::min(n_val, rem_pos);
    require(lo <= hi, ErrorKind::split, "cannot satisfy split quotas with available classes");
    val_pos = std::min(std::max(val_pos, lo), hi);
    int test_pos = rem_pos - val_pos;
    int val_neg = n_val - val_pos;
    int test_neg = n_test - test_pos;
    require(test_pos >= 0 && val_neg >= 0 && test_neg >= 0 && test_neg == rem_neg - val_neg,
            ErrorKind::split, "split accounting failure");

    std::vector<std::pair<std::string, std::string>> assignment;  // (id, split)
    size_t pi = 0, ni = 0;
    auto take = [&](std::vector<std::string>& pool, size_t& cursor, int count,
                    const char* split) {
        for (int k = 0; k < count; ++k) assignment.push_back({pool[cursor++], split});
    };
    take(pos_ids, pi, train_pos, "train");
    take(neg_ids, ni, train_neg, "train");
    take(pos_ids, pi, val_pos, "val");
    take(neg_ids, ni, val_neg, "val");
    take(pos_ids, pi, test_pos, "test");
    take(neg_ids, ni, test_neg, "test");
    require(pi == pos_ids.size() && ni == neg_ids.size(), ErrorKind::split,
            "split did not exhaust the sample pool");

    for (auto& s : manifest.samples) {
        s.split.clear();
        for (const auto& [id, split] : assignment)
            if (id == s.id) s.split = split;
        require(!s.split.empty(), ErrorKind::split, "sample left unassigned: " + s.id);
    }
    if (!manifest.root_dir.empty()) save_manifest(manifest);
    return manifest;
}

}  // namespace due
