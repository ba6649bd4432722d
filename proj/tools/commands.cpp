#include "commands.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <set>

#include "due/report.hpp"

namespace fs = std::filesystem;

namespace due::cli {

// ---- strict config parsing ----------------------------------------------

namespace {

// Wraps one json object; every key must be consumed or done() rejects it.
class StrictView {
public:
    StrictView(const json* j, std::string where) : j_(j), where_(std::move(where)) {
        if (j_ && !j_->is_object())
            fail(ErrorKind::configuration, where_ + " must be a json object");
    }

    template <typename T>
    void get(const char* key, T& slot) {
        if (!j_) return;
        auto it = j_->find(key);
        if (it == j_->end()) return;
        seen_.insert(key);
        try {
            slot = it->get<T>();
        } catch (const json::exception&) {
            fail(ErrorKind::configuration, "bad value for " + where_ + "." + key);
        }
    }

    void get_enum(const char* key, std::string& slot) { get(key, slot); }

    const json* child(const char* key) {
        if (!j_) return nullptr;
        auto it = j_->find(key);
        if (it == j_->end()) return nullptr;
        seen_.insert(key);
        return &*it;
    }

    void done() {
        if (!j_) return;
        for (auto it = j_->begin(); it != j_->end(); ++it)
            require(seen_.count(it.key()) != 0, ErrorKind::configuration,
                    "unknown config key '" + it.key() + "' in " + where_);
    }

private:
    const json* j_;
    std::string where_;
    std::set<std::string> seen_;
};

}  // namespace

RunConfig parse_run_config(const json& j) {
    RunConfig cfg;
    StrictView root(&j, "config");
    root.get("seed", cfg.seed);
    root.get("run_dir", cfg.run_dir);

    {
        StrictView v(root.child("data"), "data");
        auto& s = cfg.data.synth;
        v.get("n_pos", s.n_pos);
        v.get("n_neg", s.n_neg);
        v.get("depth", s.depth);
        v.get("height", s.height);
        v.get("width", s.width);
        v.get("lesion_r_min", s.lesion_r_min);
        v.get("lesion_r_max", s.lesion_r_max);
        v.get("lesion_brightness", s.lesion_brightness);
        v.get("noise_sigma", s.noise_sigma);
        v.get("sparsify_spacing", s.sparsify_spacing);
        {
            StrictView sp(v.child("split"), "data.split");
            sp.get("train", cfg.data.ratios.train);
            sp.get("val", cfg.data.ratios.val);
            sp.get("test", cfg.data.ratios.test);
            sp.done();
        }
        v.done();
    }
    {
        StrictView v(root.child("diffusion"), "diffusion");
        auto& t = cfg.interp.train;
        v.get("n_steps", t.diffusion.n_steps);
        v.get("beta_min", t.diffusion.beta_min);
        v.get("beta_max", t.diffusion.beta_max);
        std::string sched = to_string(t.diffusion.kind);
        v.get("schedule", sched);
        t.diffusion.kind = schedule_kind_from_string(sched);
        v.get("epochs", t.epochs);
        v.get("batch_size", t.batch_size);
        v.get("lr", t.lr);
        v.get("p_mask", t.p_mask);
        v.get("clip_norm", t.clip_norm);
        v.get("block", cfg.interp.block);
        v.get("max_gap", cfg.interp.max_gap);
        v.get("max_triples", cfg.interp.max_triples);
        {
            StrictView a(v.child("arch"), "diffusion.arch");
            a.get("w0", t.arch.w0);
            a.get("w1", t.arch.w1);
            a.get("w2", t.arch.w2);
            a.get("temb_dim", t.arch.temb_dim);
            a.get("groups", t.arch.groups);
            a.done();
        }
        v.done();
    }
    {
        StrictView v(root.child("uncertainty"), "uncertainty");
        v.get("t_runs", cfg.uncertainty.t_runs);
        auto& t = cfg.uncertainty.train;
        v.get("epochs", t.epochs);
        v.get("batch_size", t.batch_size);
        v.get("lr", t.lr);
        v.get("clip_norm", t.clip_norm);
        {
            StrictView a(v.child("arch"), "uncertainty.arch");
            a.get("width", t.arch.width);
            a.get("latent", t.arch.latent);
            a.get("groups", t.arch.groups);
            a.get("kl_weight", t.arch.kl_weight);
            a.done();
        }
        v.done();
    }
    {
        StrictView v(root.child("train"), "train");
        auto& t = cfg.train;
        t.mode = TrainMode::due;  // the pipeline's default path
        std::string mode = to_string(t.mode);
        v.get("mode", mode);
        t.mode = train_mode_from_string(mode);
        v.get("lambda", t.lambda_exp);
        std::string loss = to_string(t.loss_kind);
        v.get("loss", loss);
        t.loss_kind = exp_loss_kind_from_string(loss);
        v.get("epochs", t.epochs);
        v.get("batch_size", t.batch_size);
        v.get("lr", t.lr);
        v.get("clip_norm", t.clip_norm);
        {
            StrictView a(v.child("arch"), "train.arch");
            a.get("widths", t.arch.widths);
            a.get("blocks_per_stage", t.arch.blocks_per_stage);
            a.get("groups", t.arch.groups);
            a.done();
        }
        v.done();
    }
    {
        StrictView v(root.child("evaluate"), "evaluate");
        v.get("split", cfg.eval.split);
        v.get("threshold", cfg.eval.threshold);
        v.get("max_overlays", cfg.eval.max_overlays);
        v.done();
    }
    {
        StrictView v(root.child("sweep"), "sweep");
        v.get("parameter", cfg.sweep.parameter);
        v.get("values", cfg.sweep.values);
        v.done();
    }
    root.done();
    return cfg;
}

json dump_run_config(const RunConfig& cfg) {
    json j;
    j["seed"] = cfg.seed;
    j["run_dir"] = cfg.run_dir;
    {
        const auto& s = cfg.data.synth;
        json d;
        d["n_pos"] = s.n_pos;
        d["n_neg"] = s.n_neg;
        d["depth"] = s.depth;
        d["height"] = s.height;
        d["width"] = s.width;
        d["lesion_r_min"] = s.lesion_r_min;
        d["lesion_r_max"] = s.lesion_r_max;
        d["lesion_brightness"] = s.lesion_brightness;
        d["noise_sigma"] = s.noise_sigma;
        d["sparsify_spacing"] = s.sparsify_spacing;
        d["split"] = json{{"train", cfg.data.ratios.train},
                          {"val", cfg.data.ratios.val},
                          {"test", cfg.data.ratios.test}};
        j["data"] = std::move(d);
    }
    {
        const auto& t = cfg.interp.train;
        json d;
        d["n_steps"] = t.diffusion.n_steps;
        d["beta_min"] = t.diffusion.beta_min;
        d["beta_max"] = t.diffusion.beta_max;
        d["schedule"] = to_string(t.diffusion.kind);
        d["epochs"] = t.epochs;
        d["batch_size"] = t.batch_size;
        d["lr"] = t.lr;
        d["p_mask"] = t.p_mask;
        d["clip_norm"] = t.clip_norm;
        d["block"] = cfg.interp.block;
        d["max_gap"] = cfg.interp.max_gap;
        d["max_triples"] = cfg.interp.max_triples;
        d["arch"] = json{{"w0", t.arch.w0}, {"w1", t.arch.w1}, {"w2", t.arch.w2},
                         {"temb_dim", t.arch.temb_dim}, {"groups", t.arch.groups}};
        j["diffusion"] = std::move(d);
    }
    {
        const auto& t = cfg.uncertainty.train;
        json d;
        d["t_runs"] = cfg.uncertainty.t_runs;
        d["epochs"] = t.epochs;
        d["batch_size"] = t.batch_size;
        d["lr"] = t.lr;
        d["clip_norm"] = t.clip_norm;
        d["arch"] = json{{"width", t.arch.width}, {"latent", t.arch.latent},
                         {"groups", t.arch.groups}, {"kl_weight", t.arch.kl_weight}};
        j["uncertainty"] = std::move(d);
    }
    {
        const auto& t = cfg.train;
        json d;
        d["mode"] = to_string(t.mode);
        d["lambda"] = t.lambda_exp;
        d["loss"] = to_string(t.loss_kind);
        d["epochs"] = t.epochs;
        d["batch_size"] = t.batch_size;
        d["lr"] = t.lr;
        d["clip_norm"] = t.clip_norm;
        d["arch"] = json{{"widths", t.arch.widths},
                         {"blocks_per_stage", t.arch.blocks_per_stage},
                         {"groups", t.arch.groups}};
        j["train"] = std::move(d);
    }
    j["evaluate"] = json{{"split", cfg.eval.split},
                         {"threshold", cfg.eval.threshold},
                         {"max_overlays", cfg.eval.max_overlays}};
    j["sweep"] = json{{"parameter", cfg.sweep.parameter}, {"values", cfg.sweep.values}};
    return j;
}

void apply_overrides(json& config, const std::vector<std::string>& overrides) {
    for (const std::string& ov : overrides) {
        size_t eq = ov.find('=');
        require(eq != std::string::npos && eq > 0, ErrorKind::validation,
                "override must look like key=value: " + ov);
        std::string value_text = ov.substr(eq + 1);
        json value;
        try {
            value = json::parse(value_text);
        } catch (const json::exception&) {
            value = value_text;  // bare strings pass through
        }
        json* node = &config;
        std::string path = ov.substr(0, eq);
        size_t start = 0;
        try {
            while (true) {
                size_t dot = path.find('.', start);
                std::string key = path.substr(start, dot - start);
                require(!key.empty(), ErrorKind::validation, "empty key in override: " + ov);
                if (dot == std::string::npos) {
                    (*node)[key] = std::move(value);
                    break;
                }
                node = &(*node)[key];
                start = dot + 1;
            }
        } catch (const json::exception&) {
            fail(ErrorKind::validation, "override path conflicts with config structure: " + ov);
        }
    }
}

// ---- manifest ----------------------------------------------------------

RunManifest load_run_manifest(const std::string& run_dir) {
    RunManifest m;
    fs::path p = fs::path(run_dir) / "manifest.json";
    if (!fs::exists(p)) return m;
    std::ifstream f(p);
    require(f.good(), ErrorKind::io, "cannot read " + p.string());
    try {
        json j = json::parse(f);
        m.format_version = j.at("format_version").get<int>();
        m.root_seed = j.at("root_seed").get<uint64_t>();
        for (const auto& [name, r] : j.at("stages").items()) {
            StageRecord rec;
            rec.seed = r.at("seed").get<uint64_t>();
            for (const auto& [k, v] : r.at("inputs").items())
                rec.inputs[k] = v.get<std::string>();
            rec.outputs = r.at("outputs").get<std::vector<std::string>>();
            rec.wall_seconds = r.at("wall_seconds").get<double>();
            m.stages[name] = std::move(rec);
        }
    } catch (const json::exception& e) {
        fail(ErrorKind::corrupt_file, std::string("malformed manifest: ") + e.what());
    }
    return m;
}

void save_run_manifest(const std::string& run_dir, const RunManifest& m) {
    json j;
    j["format_version"] = m.format_version;
    j["root_seed"] = m.root_seed;
    json stages = json::object();
    for (const auto& [name, rec] : m.stages) {
        json r;
        r["seed"] = rec.seed;
        r["inputs"] = rec.inputs;
        r["outputs"] = rec.outputs;
        r["wall_seconds"] = rec.wall_seconds;
        stages[name] = std::move(r);
    }
    j["stages"] = std::move(stages);
    std::ofstream f(fs::path(run_dir) / "manifest.json");
    require(f.good(), ErrorKind::io, "cannot write manifest in " + run_dir);
    f << j.dump(2) << "\n";
}

// ---- lock ----------------------------------------------------------------

RunLock::RunLock(const std::string& run_dir) {
    fs::create_directories(run_dir);
    path = fs::path(run_dir) / ".lock";
    std::FILE* f = std::fopen(path.c_str(), "wx");
    require(f != nullptr, ErrorKind::io,
            "run directory is locked (another command is active?): " + path.string());
    std::fclose(f);
}

RunLock::~RunLock() {
    std::error_code ec;
    fs::remove(path, ec);
}

// ---- stage helpers ---------------------------------------------------------

namespace {

std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::string hash_of_json(const json& j) { return hex64(fnv1a64(j.dump())); }

std::string hash_of_file(const fs::path& p) { return hex64(hash_file(p.string())); }

fs::path rp(const RunContext& ctx, const std::string& rel) { return fs::path(ctx.run_dir) / rel; }

void write_resolved_config(const RunContext& ctx) {
    fs::create_directories(ctx.run_dir);
    RunConfig c = ctx.cfg;
    c.run_dir = ctx.run_dir;
    std::ofstream f(rp(ctx, "config.resolved.json"));
    require(f.good(), ErrorKind::io, "cannot write resolved config in " + ctx.run_dir);
    f << dump_run_config(c).dump(2) << "\n";
}

void require_artifact(const RunContext& ctx, const std::string& rel, const std::string& stage) {
    require(fs::exists(rp(ctx, rel)), ErrorKind::dependency,
            "missing " + rel + " — run the " + stage + " stage first");
}

bool stage_up_to_date(const RunContext& ctx, const RunManifest& man, const std::string& name,
                      uint64_t seed, const std::map<std::string, std::string>& inputs) {
    auto it = man.stages.find(name);
    if (it == man.stages.end()) return false;
    const StageRecord& rec = it->second;
    if (rec.seed != seed || rec.inputs != inputs) return false;
    for (const std::string& out : rec.outputs)
        if (!fs::exists(rp(ctx, out))) return false;
    return true;
}

void record_stage(const RunContext& ctx, const std::string& name, uint64_t seed,
                  std::map<std::string, std::string> inputs, std::vector<std::string> outputs,
                  double wall_seconds) {
    RunManifest man = load_run_manifest(ctx.run_dir);
    man.root_seed = ctx.cfg.seed;
    StageRecord rec;
    rec.seed = seed;
    rec.inputs = std::move(inputs);
    rec.outputs = std::move(outputs);
    rec.wall_seconds = wall_seconds;
    man.stages[name] = std::move(rec);  // one record per stage
    save_run_manifest(ctx.run_dir, man);
}

struct StageTimer {
    std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
};

void reset_dir(const fs::path& p) {
    fs::remove_all(p);
    fs::create_directories(p);
}

Tensor mask_slice(const Tensor& mask, int z) {
    int H = mask.dim(1), W = mask.dim(2);
    Tensor s({H, W});
    const float* src = mask.v.data() + static_cast<size_t>(z) * H * W;
    std::copy(src, src + static_cast<size_t>(H) * W, s.v.begin());
    return s;
}

std::vector<const SampleEntry*> train_positives(const DatasetManifest& dman) {
    std::vector<const SampleEntry*> out;
    for (const SampleEntry* e : dman.in_split("train"))
        if (e->label == 1) out.push_back(e);
    return out;
}

// Candidate (past, target, future) planes from the dense masks of the train
// positives: every interior slice of every interval up to max_gap, shuffled
// deterministically, capped at max_triples.
std::vector<SliceTriple> collect_triples(const DatasetManifest& dman, const RunConfig& cfg) {
    struct Cand {
        size_t sample;
        int a, j, b;
    };
    std::vector<Tensor> masks;
    std::vector<Cand> cands;
    for (const SampleEntry* e : train_positives(dman)) {
        DenseAnnotation ann = load_annotation(dman.resolve(e->mask_path));
        auto [z0, z1] = foreground_extent(ann);
        size_t mi = masks.size();
        masks.push_back(std::move(ann.mask));
        for (int gap = 2; gap <= cfg.interp.max_gap; ++gap)
            for (int a = z0; a + gap <= z1; ++a)
                for (int j = a + 1; j < a + gap; ++j)
                    cands.push_back({mi, a, j, a + gap});
    }
    Rng rng(derive_seed(cfg.seed, "interp-triples"));
    rng.shuffle(cands);
    if (static_cast<int>(cands.size()) > cfg.interp.max_triples)
        cands.resize(static_cast<size_t>(cfg.interp.max_triples));
    std::vector<SliceTriple> out;
    out.reserve(cands.size());
    for (const Cand& c : cands) {
        SliceTriple t;
        t.past = mask_slice(masks[c.sample], c.a);
        t.target = mask_slice(masks[c.sample], c.j);
        t.future = mask_slice(masks[c.sample], c.b);
        t.position = float(c.j - c.a) / float(c.b - c.a);
        out.push_back(std::move(t));
    }
    return out;
}

json load_index(const fs::path& p) {
    std::ifstream f(p);
    require(f.good(), ErrorKind::io, "cannot read " + p.string());
    try {
        return json::parse(f);
    } catch (const json::exception& e) {
        fail(ErrorKind::corrupt_file, "malformed index " + p.string() + ": " + e.what());
    }
}

void write_index(const fs::path& p, const json& j) {
    std::ofstream f(p);
    require(f.good(), ErrorKind::io, "cannot write " + p.string());
    f << j.dump(2) << "\n";
}

std::string format_value(const std::string& parameter, double v) {
    char buf[32];
    if (parameter == "train_size")
        std::snprintf(buf, sizeof buf, "n_%d", static_cast<int>(v));
    else
        std::snprintf(buf, sizeof buf, "lam_%g", v);
    return buf;
}

}  // namespace

// ---- commands ---------------------------------------------------------

bool cmd_gen_data(const RunContext& ctx) {
    write_resolved_config(ctx);
    uint64_t seed = derive_seed(ctx.cfg.seed, "gen-data");
    std::map<std::string, std::string> inputs{
        {"config", hash_of_json(dump_run_config(ctx.cfg)["data"])}};
    RunManifest man = load_run_manifest(ctx.run_dir);
    if (stage_up_to_date(ctx, man, "gen-data", seed, inputs)) {
        std::cout << "gen-data: up to date\n";
        return false;
    }
    StageTimer timer;
    fs::remove_all(rp(ctx, "data"));
    DatasetManifest dman =
        generate_synthetic_dataset(ctx.cfg.data.synth, seed, rp(ctx, "data").string());
    dman = split_dataset(std::move(dman), ctx.cfg.data.ratios,
                         derive_seed(ctx.cfg.seed, "split"), /*balance_train=*/true);
    save_manifest(dman);
    record_stage(ctx, "gen-data", seed, inputs, {"data/manifest.json"}, timer.seconds());
    std::cout << "gen-data: wrote " << dman.samples.size() << " samples\n";
    return true;
}

bool cmd_train_interp(const RunContext& ctx) {
    write_resolved_config(ctx);
    require_artifact(ctx, "data/manifest.json", "gen-data");
    uint64_t seed = derive_seed(ctx.cfg.seed, "train-interp");
    std::map<std::string, std::string> inputs{
        {"config", hash_of_json(dump_run_config(ctx.cfg)["diffusion"])},
        {"data/manifest.json", hash_of_file(rp(ctx, "data/manifest.json"))}};
    RunManifest man = load_run_manifest(ctx.run_dir);
    if (stage_up_to_date(ctx, man, "train-interp", seed, inputs)) {
        std::cout << "train-interp: up to date\n";
        return false;
    }
    StageTimer timer;
    DatasetManifest dman = load_manifest(rp(ctx, "data").string());
    std::vector<SliceTriple> triples = collect_triples(dman, ctx.cfg);
    require(!triples.empty(), ErrorKind::training,
            "no interpolation training triples in the train split");
    DenoiserModel model;
    model.cfg = ctx.cfg.interp.train;
    model.cfg.seed = seed;
    EpochHistory hist = train_denoiser(model, triples);
    reset_dir(rp(ctx, "interp"));
    save_denoiser(rp(ctx, "interp").string(), model, hist);
    record_stage(ctx, "train-interp", seed, inputs, {"interp/meta.json", "interp/params.bin"},
                 timer.seconds());
    std::cout << "train-interp: trained on " << triples.size() << " triples, final loss "
              << hist.epoch_loss.back() << "\n";
    return true;
}

bool cmd_mc_variance(const RunContext& ctx) {
    write_resolved_config(ctx);
    require_artifact(ctx, "data/manifest.json", "gen-data");
    require_artifact(ctx, "interp/meta.json", "train-interp");
    require_artifact(ctx, "interp/params.bin", "train-interp");
    uint64_t seed = derive_seed(ctx.cfg.seed, "mc-variance");
    std::map<std::string, std::string> inputs{
        {"config", hash_of_json(json{{"t_runs", ctx.cfg.uncertainty.t_runs},
                                     {"block", ctx.cfg.interp.block}})},
        {"data/manifest.json", hash_of_file(rp(ctx, "data/manifest.json"))},
        {"interp/meta.json", hash_of_file(rp(ctx, "interp/meta.json"))},
        {"interp/params.bin", hash_of_file(rp(ctx, "interp/params.bin"))}};
    RunManifest man = load_run_manifest(ctx.run_dir);
    if (stage_up_to_date(ctx, man, "mc-variance", seed, inputs)) {
        std::cout << "mc-variance: up to date\n";
        return false;
    }
    StageTimer timer;
    DenoiserModel model = load_denoiser(rp(ctx, "interp").string());
    DatasetManifest dman = load_manifest(rp(ctx, "data").string());
    reset_dir(rp(ctx, "uncertainty/mc"));
    json index;
    index["format_version"] = 1;
    index["samples"] = json::array();
    for (const SampleEntry* e : train_positives(dman)) {
        SparseAnnotation sparse = load_sparse_annotation(dman.resolve(e->sparse_dir));
        UncertaintyMap map = mc_variance(model.net, model.schedule, sparse, e->shape[0],
                                         ctx.cfg.uncertainty.t_runs,
                                         derive_seed(ctx.cfg.seed, "mc-variance", fnv1a64(e->id)),
                                         ctx.cfg.interp.block);
        std::string rel = "uncertainty/mc/" + e->id + ".var";
        save_f32_grid(rp(ctx, rel).string(), map.values);
        index["samples"].push_back(json{{"id", e->id},
                                        {"path", rel},
                                        {"hash", hash_of_file(rp(ctx, rel))}});
    }
    require(!index["samples"].empty(), ErrorKind::training,
            "no positive train samples to estimate uncertainty on");
    write_index(rp(ctx, "uncertainty/mc/index.json"), index);
    record_stage(ctx, "mc-variance", seed, inputs, {"uncertainty/mc/index.json"},
                 timer.seconds());
    std::cout << "mc-variance: wrote " << index["samples"].size() << " variance maps\n";
    return true;
}

bool cmd_train_uq(const RunContext& ctx) {
    write_resolved_config(ctx);
    require_artifact(ctx, "data/manifest.json", "gen-data");
    require_artifact(ctx, "uncertainty/mc/index.json", "mc-variance");
    uint64_t seed = derive_seed(ctx.cfg.seed, "train-uq");
    std::map<std::string, std::string> inputs{
        {"config", hash_of_json(dump_run_config(ctx.cfg)["uncertainty"])},
        {"data/manifest.json", hash_of_file(rp(ctx, "data/manifest.json"))},
        {"uncertainty/mc/index.json", hash_of_file(rp(ctx, "uncertainty/mc/index.json"))}};
    RunManifest man = load_run_manifest(ctx.run_dir);
    if (stage_up_to_date(ctx, man, "train-uq", seed, inputs)) {
        std::cout << "train-uq: up to date\n";
        return false;
    }
    StageTimer timer;
    DatasetManifest dman = load_manifest(rp(ctx, "data").string());
    json index = load_index(rp(ctx, "uncertainty/mc/index.json"));
    std::vector<UQExample> examples;
    for (const auto& entry : index.at("samples")) {
        const SampleEntry& e = dman.find(entry.at("id").get<std::string>());
        SparseAnnotation sparse = load_sparse_annotation(dman.resolve(e.sparse_dir));
        Tensor mc = load_f32_grid(rp(ctx, entry.at("path").get<std::string>()).string());
        int H = mc.dim(1), W = mc.dim(2);
        for (size_t k = 0; k + 1 < sparse.slices.size(); ++k) {
            int za = sparse.slices[k].depth_index, zb = sparse.slices[k + 1].depth_index;
            int gap = zb - za;
            if (gap < 2) continue;
            UQExample ex;
            ex.context.past = sparse.slices[k].mask;
            ex.context.future = sparse.slices[k + 1].mask;
            ex.context.past_depth = za;
            ex.context.future_depth = zb;
            Tensor stack({gap - 1, H, W});
            for (int z = za + 1; z < zb; ++z) {
                ex.context.targets.push_back(float(z - za) / float(gap));
                const float* src = mc.v.data() + static_cast<size_t>(z) * H * W;
                std::copy(src, src + static_cast<size_t>(H) * W,
                          stack.v.begin() + static_cast<size_t>(z - za - 1) * H * W);
            }
            ex.targets = std::move(stack);
            examples.push_back(std::move(ex));
        }
    }
    require(!examples.empty(), ErrorKind::training,
            "no intervals with interior slices; nothing to train the uncertainty predictor on");
    UQTrainConfig tc = ctx.cfg.uncertainty.train;
    tc.seed = seed;
    UQPredictor pred;
    EpochHistory hist = train_uq_predictor(pred, examples, tc);
    reset_dir(rp(ctx, "uq"));
    save_uq_predictor(rp(ctx, "uq").string(), pred, tc, hist);
    record_stage(ctx, "train-uq", seed, inputs, {"uq/meta.json", "uq/params.bin"},
                 timer.seconds());
    std::cout << "train-uq: trained on " << examples.size() << " intervals, final loss "
              << hist.epoch_loss.back() << "\n";
    return true;
}

bool cmd_build_targets(const RunContext& ctx) {
    write_resolved_config(ctx);
    require_artifact(ctx, "data/manifest.json", "gen-data");
    require_artifact(ctx, "interp/meta.json", "train-interp");
    require_artifact(ctx, "interp/params.bin", "train-interp");
    require_artifact(ctx, "uq/meta.json", "train-uq");
    require_artifact(ctx, "uq/params.bin", "train-uq");
    uint64_t seed = derive_seed(ctx.cfg.seed, "build-targets");
    std::map<std::string, std::string> inputs{
        {"config", hash_of_json(json{{"block", ctx.cfg.interp.block}})},
        {"data/manifest.json", hash_of_file(rp(ctx, "data/manifest.json"))},
        {"interp/meta.json", hash_of_file(rp(ctx, "interp/meta.json"))},
        {"interp/params.bin", hash_of_file(rp(ctx, "interp/params.bin"))},
        {"uq/meta.json", hash_of_file(rp(ctx, "uq/meta.json"))},
        {"uq/params.bin", hash_of_file(rp(ctx, "uq/params.bin"))}};
    RunManifest man = load_run_manifest(ctx.run_dir);
    if (stage_up_to_date(ctx, man, "build-targets", seed, inputs)) {
        std::cout << "build-targets: up to date\n";
        return false;
    }
    StageTimer timer;
    DenoiserModel model = load_denoiser(rp(ctx, "interp").string());
    UQPredictor uq = load_uq_predictor(rp(ctx, "uq").string());
    DatasetManifest dman = load_manifest(rp(ctx, "data").string());
    reset_dir(rp(ctx, "targets"));
    json index;
    index["format_version"] = 1;
    index["samples"] = json::array();
    for (const SampleEntry* e : train_positives(dman)) {
        SparseAnnotation sparse = load_sparse_annotation(dman.resolve(e->sparse_dir));
        DenseAnnotation interp = interpolate_volume(
            model.net, model.schedule, sparse, e->shape[0],
            derive_seed(ctx.cfg.seed, "build-targets", fnv1a64(e->id)), ctx.cfg.interp.block);
        UncertaintyMap u = predict_uncertainty_volume(uq, sparse, e->shape[0]);
        std::vector<int> known;
        for (const auto& s : sparse.slices) known.push_back(s.depth_index);
        WeightMap w = uncertainty_to_weights(u, known);
        DenseAnnotation target = build_supervision_target(interp, w, sparse);
        std::string trel = "targets/" + e->id + ".tgt";
        std::string irel = "targets/" + e->id + ".interp.msk";
        save_annotation(rp(ctx, trel).string(), target);
        save_annotation(rp(ctx, irel).string(), interp);
        index["samples"].push_back(json{{"id", e->id},
                                        {"target", trel},
                                        {"interpolated", irel},
                                        {"hash_target", hash_of_file(rp(ctx, trel))},
                                        {"hash_interpolated", hash_of_file(rp(ctx, irel))}});
    }
    require(!index["samples"].empty(), ErrorKind::training,
            "no positive train samples to build supervision targets for");
    write_index(rp(ctx, "targets/index.json"), index);
    record_stage(ctx, "build-targets", seed, inputs, {"targets/index.json"}, timer.seconds());
    std::cout << "build-targets: wrote " << index["samples"].size() << " weighted targets\n";
    return true;
}

bool cmd_train(const RunContext& ctx) {
    write_resolved_config(ctx);
    require_artifact(ctx, "data/manifest.json", "gen-data");
    bool needs_targets = ctx.cfg.train.mode != TrainMode::baseline;
    if (needs_targets) require_artifact(ctx, "targets/index.json", "build-targets");
    uint64_t seed = derive_seed(ctx.cfg.seed, "train-cls");
    std::map<std::string, std::string> inputs{
        {"config", hash_of_json(dump_run_config(ctx.cfg)["train"])},
        {"data/manifest.json", hash_of_file(rp(ctx, "data/manifest.json"))}};
    if (needs_targets)
        inputs["targets/index.json"] = hash_of_file(rp(ctx, "targets/index.json"));
    RunManifest man = load_run_manifest(ctx.run_dir);
    if (stage_up_to_date(ctx, man, "train", seed, inputs)) {
        std::cout << "train: up to date\n";
        return false;
    }
    StageTimer timer;
    DatasetManifest dman = load_manifest(rp(ctx, "data").string());
    json tindex;
    std::map<std::string, std::string> target_rel;  // id -> path for this mode
    if (needs_targets) {
        tindex = load_index(rp(ctx, "targets/index.json"));
        const char* key = ctx.cfg.train.mode == TrainMode::due ? "target" : "interpolated";
        for (const auto& entry : tindex.at("samples"))
            target_rel[entry.at("id").get<std::string>()] = entry.at(key).get<std::string>();
    }
    auto build_set = [&](const std::string& split, bool with_targets) {
        std::vector<TrainSample> out;
        for (const SampleEntry* e : dman.in_split(split)) {
            TrainSample s;
            s.volume = load_volume(dman.resolve(e->volume_path)).data;
            s.label = e->label;
            if (with_targets && e->label == 1) {
                auto it = target_rel.find(e->id);
                require(it != target_rel.end(), ErrorKind::dependency,
                        "no supervision target for train sample " + e->id +
                            " — run the build-targets stage first");
                s.target = load_annotation(rp(ctx, it->second).string()).mask;
            }
            out.push_back(std::move(s));
        }
        return out;
    };
    std::vector<TrainSample> train_set = build_set("train", needs_targets);
    std::vector<TrainSample> val_set = build_set("val", false);
    require(!train_set.empty(), ErrorKind::training, "train split is empty");
    TrainConfig tc = ctx.cfg.train;
    tc.seed = seed;
    ResNet3d net;
    ClassifierHistory hist =
        train_classifier(net, train_set, tc, val_set.empty() ? nullptr : &val_set);
    reset_dir(rp(ctx, "classifier"));
    save_classifier(rp(ctx, "classifier").string(), net, tc);
    save_history(rp(ctx, "classifier/history.json").string(), hist);
    record_stage(ctx, "train", seed, inputs,
                 {"classifier/meta.json", "classifier/params.bin", "classifier/history.json"},
                 timer.seconds());
    std::cout << "train: " << to_string(tc.mode) << " mode, " << train_set.size()
              << " samples, final prediction loss " << hist.pred_loss.back() << "\n";
    return true;
}

bool cmd_evaluate(const RunContext& ctx) {
    write_resolved_config(ctx);
    require_artifact(ctx, "data/manifest.json", "gen-data");
    require_artifact(ctx, "classifier/meta.json", "train");
    require_artifact(ctx, "classifier/params.bin", "train");
    uint64_t seed = derive_seed(ctx.cfg.seed, "evaluate");
    std::map<std::string, std::string> inputs{
        {"config", hash_of_json(dump_run_config(ctx.cfg)["evaluate"])},
        {"data/manifest.json", hash_of_file(rp(ctx, "data/manifest.json"))},
        {"classifier/meta.json", hash_of_file(rp(ctx, "classifier/meta.json"))},
        {"classifier/params.bin", hash_of_file(rp(ctx, "classifier/params.bin"))}};
    RunManifest man = load_run_manifest(ctx.run_dir);
    if (stage_up_to_date(ctx, man, "evaluate", seed, inputs)) {
        std::cout << "evaluate: up to date\n";
        return false;
    }
    StageTimer timer;
    fs::remove_all(rp(ctx, "report"));
    ReportInputs rin;
    rin.classifier_dir = rp(ctx, "classifier").string();
    rin.dataset_dir = rp(ctx, "data").string();
    rin.split = ctx.cfg.eval.split;
    rin.out_dir = rp(ctx, "report").string();
    RunConfig snap = ctx.cfg;
    snap.run_dir = ctx.run_dir;
    rin.config_json = dump_run_config(snap).dump();
    rin.threshold = ctx.cfg.eval.threshold;
    rin.max_overlays = ctx.cfg.eval.max_overlays;
    EvaluationResult res = emit_report(rin);
    record_stage(ctx, "evaluate", seed, inputs, {"report/report.json"}, timer.seconds());
    std::cout << "evaluate: " << res.per_sample.size() << " samples";
    if (res.aggregates.count("iou"))
        std::cout << ", mean iou " << res.aggregates.at("iou").mean;
    if (res.aggregates.count("roc_auc"))
        std::cout << ", roc auc " << res.aggregates.at("roc_auc").mean;
    std::cout << "\n";
    return true;
}

void run_full_pipeline(const RunContext& ctx) {
    cmd_gen_data(ctx);
    cmd_train_interp(ctx);
    cmd_mc_variance(ctx);
    cmd_train_uq(ctx);
    cmd_build_targets(ctx);
    cmd_train(ctx);
    cmd_evaluate(ctx);
}

bool cmd_sweep(const RunContext& ctx) {
    write_resolved_config(ctx);
    const std::string& param = ctx.cfg.sweep.parameter;
    require(param == "lambda" || param == "train_size", ErrorKind::configuration,
            "sweep parameter must be 'lambda' or 'train_size', got '" + param + "'");
    std::vector<double> values = ctx.cfg.sweep.values;
    if (values.empty())
        values = param == "lambda" ? std::vector<double>{0.001, 0.01, 0.1, 1.0}
                                   : std::vector<double>{20, 50, 100};
    for (double v : values) {
        if (param == "lambda")
            require(v >= 0.0, ErrorKind::configuration, "lambda values must be >= 0");
        else
            require(v > 0 && v == std::floor(v) && static_cast<int>(v) % 2 == 0,
                    ErrorKind::configuration,
                    "train_size values must be positive even integers");
    }

    std::string sweep_rel = "sweep_" + param;
    uint64_t seed = derive_seed(ctx.cfg.seed, "sweep");
    std::map<std::string, std::string> inputs{
        {"config", hash_of_json(dump_run_config(ctx.cfg))}};
    RunManifest man = load_run_manifest(ctx.run_dir);
    std::vector<std::string> outputs{sweep_rel + "/sweep.json", sweep_rel + "/comparison.md"};
    if (stage_up_to_date(ctx, man, "sweep", seed, inputs)) {
        std::cout << "sweep: up to date\n";
        return false;
    }
    StageTimer timer;

    json runs = json::array();
    std::vector<double> xs, iou_means, f1_means;
    for (double v : values) {
        std::string tag = format_value(param, v);
        fs::path sub_dir = rp(ctx, sweep_rel) / tag;
        RunConfig sub = ctx.cfg;
        sub.run_dir = sub_dir.string();
        if (param == "lambda") {
            sub.train.lambda_exp = v;
        } else {
            int n = static_cast<int>(v);
            // train split gets exactly n volumes: generate 2n, split 1/2 : 1/4 : 1/4
            sub.data.synth.n_pos = n;
            sub.data.synth.n_neg = n;
            sub.data.ratios = SplitRatios{0.5, 0.25, 0.25};
        }
        std::cout << "sweep: sub-run " << tag << "\n";
        RunContext sctx{sub, sub_dir.string()};
        RunLock sub_lock(sctx.run_dir);
        run_full_pipeline(sctx);
        EvaluationResult rep = load_report((sub_dir / "report" / "report.json").string());
        json agg = json::object();
        for (const auto& [name, ms] : rep.aggregates)
            agg[name] = json{{"mean", ms.mean}, {"std", ms.std_dev}};
        runs.push_back(json{{"value", v},
                            {"run_dir", sweep_rel + "/" + tag},
                            {"aggregates", std::move(agg)}});
        xs.push_back(v);
        iou_means.push_back(rep.aggregates.count("iou") ? rep.aggregates.at("iou").mean : 0.0);
        f1_means.push_back(rep.aggregates.count("f1") ? rep.aggregates.at("f1").mean : 0.0);
    }

    fs::create_directories(rp(ctx, sweep_rel));
    json sj;
    sj["format_version"] = 1;
    sj["parameter"] = param;
    sj["values"] = values;
    sj["runs"] = std::move(runs);
    write_index(rp(ctx, sweep_rel + "/sweep.json"), sj);

    // one comparison table over all sub-runs
    std::ofstream md(rp(ctx, sweep_rel + "/comparison.md"));
    require(md.good(), ErrorKind::io, "cannot write comparison table");
    md << "| " << param << " | iou | f1 | accuracy | roc_auc | pr_auc |\n";
    md << "|---|---|---|---|---|---|\n";
    for (const auto& r : sj["runs"]) {
        auto cell = [&](const char* name) -> std::string {
            if (!r.at("aggregates").contains(name)) return "-";
            char buf[32];
            std::snprintf(buf, sizeof buf, "%.4f",
                          r.at("aggregates").at(name).at("mean").get<double>());
            return buf;
        };
        md << "| " << r.at("value").get<double>() << " | " << cell("iou") << " | " << cell("f1")
           << " | " << cell("accuracy") << " | " << cell("roc_auc") << " | " << cell("pr_auc")
           << " |\n";
    }
    md.close();

    bool log_axis = param == "lambda";
    bool positive_x = true;
    for (double x : xs) positive_x = positive_x && x > 0.0;
    PlotSeries si{"iou", xs, iou_means, {220, 90, 40}};
    PlotSeries sf{"f1", xs, f1_means, {60, 110, 220}};
    render_line_plot(rp(ctx, sweep_rel + "/sensitivity.png").string(),
                     param + " sensitivity", {si, sf}, log_axis && positive_x);

    record_stage(ctx, "sweep", seed, inputs, outputs, timer.seconds());
    std::cout << "sweep: " << values.size() << " sub-runs compared in " << sweep_rel << "\n";
    return true;
}

bool run_command(const std::string& command, const RunContext& ctx) {
    if (command == "gen-data") return cmd_gen_data(ctx);
    if (command == "train-interp") return cmd_train_interp(ctx);
    if (command == "mc-variance") return cmd_mc_variance(ctx);
    if (command == "train-uq") return cmd_train_uq(ctx);
    if (command == "build-targets") return cmd_build_targets(ctx);
    if (command == "train") return cmd_train(ctx);
    if (command == "evaluate") return cmd_evaluate(ctx);
    if (command == "sweep") return cmd_sweep(ctx);
    fail(ErrorKind::validation, "unknown command: " + command);
}

int exit_code_for(ErrorKind kind) { return 2 + static_cast<int>(kind); }

int cli_main(const std::string& command, const std::string& config_path,
             const std::optional<uint64_t>& seed_flag,
             const std::optional<std::string>& run_dir_flag,
             const std::vector<std::string>& overrides) {
    require(fs::exists(config_path), ErrorKind::io, "config file not found: " + config_path);
    std::ifstream f(config_path);
    require(f.good(), ErrorKind::io, "cannot read config: " + config_path);
    json raw;
    try {
        raw = json::parse(f);
    } catch (const json::exception& e) {
        fail(ErrorKind::corrupt_file, std::string("config is not valid json: ") + e.what());
    }
    apply_overrides(raw, overrides);
    RunConfig cfg = parse_run_config(raw);
    if (seed_flag) cfg.seed = *seed_flag;

    std::string run_dir;
    if (run_dir_flag) {
        run_dir = *run_dir_flag;
    } else if (const char* env = std::getenv("DUE_RUN_DIR"); env && *env) {
        run_dir = env;
    } else {
        run_dir = cfg.run_dir;
    }
    require(!run_dir.empty(), ErrorKind::configuration,
            "no run directory: pass --run-dir, set DUE_RUN_DIR, or set run_dir in the config");
    cfg.run_dir = run_dir;

    RunLock lock(run_dir);
    run_command(command, RunContext{std::move(cfg), run_dir});
    return 0;
}

}  // namespace due::cli
