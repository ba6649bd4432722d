#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <unistd.h>
#include <vector>

#include "../tools/commands.hpp"
#include "due/report.hpp"

using namespace due;
namespace fs = std::filesystem;
using cli::json;

namespace {

struct TempDir {
    fs::path path;
    TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("due_cli_" + tag + "_" + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str() const { return path.string(); }
    std::string sub(const std::string& name) const { return (path / name).string(); }
};

template <typename Fn>
std::string expect_kind(ErrorKind kind, Fn&& fn) {
    try {
        fn();
    } catch (const Error& e) {
        CHECK(e.kind() == kind);
        return e.what();
    }
    FAIL_CHECK("expected an error of kind " << error_kind_name(kind));
    return {};
}

// Small enough that the seven-stage pipeline finishes in about a second.
cli::RunConfig micro_cfg(uint64_t seed) {
    cli::RunConfig c;
    c.seed = seed;
    c.data.synth.n_pos = 4;
    c.data.synth.n_neg = 4;
    c.data.synth.depth = 12;
    c.data.synth.height = 16;
    c.data.synth.width = 16;
    c.data.synth.lesion_r_min = 2.0f;
    c.data.synth.lesion_r_max = 3.0f;
    c.data.synth.sparsify_spacing = 3;
    c.data.ratios = SplitRatios{0.5, 0.25, 0.25};
    c.interp.train.epochs = 2;
    c.interp.train.batch_size = 4;
    c.interp.train.diffusion.n_steps = 40;
    c.interp.train.arch = UNetConfig{8, 8, 8, 16, 4};
    c.interp.max_gap = 4;
    c.interp.max_triples = 40;
    c.uncertainty.t_runs = 2;
    c.uncertainty.train.epochs = 3;
    c.uncertainty.train.arch.width = 4;
    c.uncertainty.train.arch.latent = 8;
    c.uncertainty.train.arch.groups = 2;
    c.train.mode = TrainMode::due;
    c.train.epochs = 2;
    c.train.batch_size = 2;
    c.train.arch.widths = {4, 6};
    c.train.arch.blocks_per_stage = 1;
    c.train.arch.groups = 2;
    return c;
}

json report_json(const std::string& run_dir) {
    std::ifstream f(fs::path(run_dir) / "report" / "report.json");
    REQUIRE(f.good());
    return json::parse(f);
}

// run the installed binary; returns its exit code
int run_bin(const std::string& args) {
    std::string cmd = std::string(DUE_CLI_BIN) + " " + args + " > /dev/null 2>&1";
    int rc = std::system(cmd.c_str());
    return WEXITSTATUS(rc);
}

std::string run_bin_capture(const std::string& args) {
    std::string cmd = std::string(DUE_CLI_BIN) + " " + args + " 2>&1";
    std::FILE* p = popen(cmd.c_str(), "r");
    REQUIRE(p != nullptr);
    std::string out;
    char buf[256];
    while (std::fgets(buf, sizeof buf, p)) out += buf;
    pclose(p);
    return out;
}

}  // namespace

TEST_CASE("run config: defaults, strict keys, round trip") {
    cli::RunConfig d = cli::parse_run_config(json::object());
    CHECK(d.seed == 0);
    CHECK(d.train.lambda_exp == 1.0);
    CHECK(d.train.lr == 1e-3);
    CHECK(d.train.epochs == 50);
    CHECK(d.train.mode == TrainMode::due);
    CHECK(d.interp.train.p_mask == 0.5);
    CHECK(d.interp.train.diffusion.n_steps == 200);
    CHECK(d.uncertainty.t_runs == 8);
    CHECK(d.eval.threshold == 0.5);
    CHECK(d.eval.split == "test");
    CHECK(d.sweep.parameter == "lambda");
    CHECK(d.train.arch.widths == std::vector<int>{16, 32, 64});

    // dump -> parse -> dump is a fixed point
    cli::RunConfig c = micro_cfg(42);
    json dumped = cli::dump_run_config(c);
    cli::RunConfig back = cli::parse_run_config(dumped);
    CHECK(cli::dump_run_config(back) == dumped);
    CHECK(back.seed == 42);
    CHECK(back.train.arch.widths == std::vector<int>{4, 6});
    CHECK(back.uncertainty.t_runs == 2);

    // unknown keys rejected at every level
    auto msg = expect_kind(ErrorKind::configuration,
                           [&] { cli::parse_run_config(json{{"bogus", 1}}); });
    CHECK(msg.find("bogus") != std::string::npos);
    expect_kind(ErrorKind::configuration,
                [&] { cli::parse_run_config(json{{"data", {{"frobnicate", 1}}}}); });
    expect_kind(ErrorKind::configuration,
                [&] { cli::parse_run_config(json{{"train", {{"arch", {{"nope", 1}}}}}}); });
    expect_kind(ErrorKind::configuration,
                [&] { cli::parse_run_config(json{{"data", {{"split", {{"frac", 0.5}}}}}}); });
    // wrong value types rejected
    expect_kind(ErrorKind::configuration,
                [&] { cli::parse_run_config(json{{"train", {{"epochs", "ten"}}}}); });
    expect_kind(ErrorKind::configuration, [&] { cli::parse_run_config(json{{"train", 3}}); });
}

TEST_CASE("config overrides") {
    json cfg = json::object();
    cli::apply_overrides(cfg, {"train.lambda=0.5", "train.mode=baseline", "seed=9",
                               "sweep.values=[0.1,1]", "data.split.train=0.7"});
    cli::RunConfig c = cli::parse_run_config(cfg);
    CHECK(c.train.lambda_exp == 0.5);
    CHECK(c.train.mode == TrainMode::baseline);
    CHECK(c.seed == 9);
    CHECK(c.sweep.values == std::vector<double>{0.1, 1.0});
    CHECK(c.data.ratios.train == 0.7);

    json cfg2 = json::object();
    expect_kind(ErrorKind::validation, [&] { cli::apply_overrides(cfg2, {"no_equals_here"}); });
    expect_kind(ErrorKind::validation, [&] { cli::apply_overrides(cfg2, {"=5"}); });
    json cfg3 = json{{"seed", 3}};
    expect_kind(ErrorKind::validation, [&] { cli::apply_overrides(cfg3, {"seed.sub=1"}); });
    // overrides create paths that strict parsing still vets
    json cfg4 = json::object();
    cli::apply_overrides(cfg4, {"train.bogus=1"});
    expect_kind(ErrorKind::configuration, [&] { cli::parse_run_config(cfg4); });
}

TEST_CASE("run manifest round trip") {
    TempDir td("manifest");
    cli::RunManifest m;
    m.root_seed = 77;
    cli::StageRecord r;
    r.seed = 123;
    r.inputs = {{"config", "00ff"}, {"data/manifest.json", "abcd"}};
    r.outputs = {"interp/meta.json", "interp/params.bin"};
    r.wall_seconds = 1.5;
    m.stages["train-interp"] = r;
    cli::save_run_manifest(td.str(), m);

    cli::RunManifest back = cli::load_run_manifest(td.str());
    CHECK(back.root_seed == 77);
    REQUIRE(back.stages.size() == 1);
    const auto& br = back.stages.at("train-interp");
    CHECK(br.seed == 123);
    CHECK(br.inputs == r.inputs);
    CHECK(br.outputs == r.outputs);
    CHECK(br.wall_seconds == 1.5);

    // replacing a stage keeps one record
    m.stages["train-interp"].seed = 124;
    cli::save_run_manifest(td.str(), m);
    CHECK(cli::load_run_manifest(td.str()).stages.size() == 1);
    CHECK(cli::load_run_manifest(td.str()).stages.at("train-interp").seed == 124);

    // absent file -> empty manifest; corrupt file -> corrupt_file
    CHECK(cli::load_run_manifest(td.sub("nowhere")).stages.empty());
    std::ofstream(td.path / "manifest.json") << "{ nope";
    expect_kind(ErrorKind::corrupt_file, [&] { cli::load_run_manifest(td.str()); });
}

TEST_CASE("run lock excludes concurrent commands") {
    TempDir td("lock");
    {
        cli::RunLock lock(td.str());
        CHECK(fs::exists(td.path / ".lock"));
        expect_kind(ErrorKind::io, [&] { cli::RunLock second(td.str()); });
    }
    CHECK(!fs::exists(td.path / ".lock"));
    cli::RunLock again(td.str());  // released lock can be retaken
}

TEST_CASE("pipeline: artifacts, idempotence, determinism, modes") {
    TempDir td("pipe");
    cli::RunConfig cfg = micro_cfg(11);
    cli::RunContext ctx{cfg, td.sub("run")};
    cli::run_full_pipeline(ctx);

    for (const char* rel :
         {"config.resolved.json", "manifest.json", "data/manifest.json", "interp/meta.json",
          "interp/params.bin", "uncertainty/mc/index.json", "uq/meta.json", "uq/params.bin",
          "targets/index.json", "classifier/meta.json", "classifier/params.bin",
          "classifier/history.json", "report/report.json"})
        CHECK(fs::exists(td.path / "run" / rel));

    cli::RunManifest man = cli::load_run_manifest(ctx.run_dir);
    CHECK(man.stages.size() == 7);
    CHECK(man.root_seed == 11);
    for (const auto& [name, rec] : man.stages) {
        CHECK(rec.inputs.count("config") == 1);
        CHECK(!rec.outputs.empty());
        CHECK(rec.wall_seconds >= 0.0);
    }

    // resolved config reparses to the same resolved dump
    {
        std::ifstream f(td.path / "run" / "config.resolved.json");
        json resolved = json::parse(f);
        CHECK(cli::dump_run_config(cli::parse_run_config(resolved)) == resolved);
    }

    // test split carries both classes so the report has explanation metrics
    json rep = report_json(ctx.run_dir);
    CHECK(rep.at("aggregates").contains("iou"));
    CHECK(rep.at("aggregates").contains("roc_auc"));
    CHECK(rep.at("per_sample").size() == 2);

    SUBCASE("re-running any stage is an up-to-date no-op") {
        CHECK(cli::cmd_gen_data(ctx) == false);
        CHECK(cli::cmd_train_interp(ctx) == false);
        CHECK(cli::cmd_mc_variance(ctx) == false);
        CHECK(cli::cmd_train_uq(ctx) == false);
        CHECK(cli::cmd_build_targets(ctx) == false);
        CHECK(cli::cmd_train(ctx) == false);
        CHECK(cli::cmd_evaluate(ctx) == false);
    }

    SUBCASE("config changes re-run only downstream-of-config stages") {
        cli::RunContext changed{cfg, ctx.run_dir};
        changed.cfg.eval.threshold = 0.4;
        CHECK(cli::cmd_gen_data(changed) == false);   // data config untouched
        CHECK(cli::cmd_evaluate(changed) == true);    // eval config moved
        CHECK(cli::cmd_evaluate(changed) == false);   // settles
        // restore
        CHECK(cli::cmd_evaluate(ctx) == true);
    }

    SUBCASE("same root seed reproduces the report exactly") {
        cli::RunContext twin{cfg, td.sub("run_twin")};
        cli::run_full_pipeline(twin);
        json a = report_json(ctx.run_dir);
        json b = report_json(twin.run_dir);
        CHECK(a.at("aggregates") == b.at("aggregates"));
        CHECK(a.at("per_sample") == b.at("per_sample"));
        CHECK(a.at("sweep") == b.at("sweep"));
    }

    SUBCASE("a different seed changes the stage identity") {
        cli::RunContext other{cfg, ctx.run_dir};
        other.cfg.seed = 12;
        CHECK(cli::cmd_gen_data(other) == true);  // not up to date under a new seed
    }

    SUBCASE("baseline mode trains without targets") {
        cli::RunConfig base = micro_cfg(11);
        base.train.mode = TrainMode::baseline;
        cli::RunContext bctx{base, td.sub("run_base")};
        CHECK(cli::cmd_gen_data(bctx) == true);
        CHECK(cli::cmd_train(bctx) == true);  // no build-targets needed
        CHECK(fs::exists(td.path / "run_base" / "classifier" / "meta.json"));
    }

    SUBCASE("dependency errors name the stage to run") {
        cli::RunContext fresh{cfg, td.sub("run_fresh")};
        auto msg = expect_kind(ErrorKind::dependency, [&] { cli::cmd_train(fresh); });
        CHECK(msg.find("gen-data") != std::string::npos);
        cli::cmd_gen_data(fresh);
        msg = expect_kind(ErrorKind::dependency, [&] { cli::cmd_train(fresh); });
        CHECK(msg.find("build-targets") != std::string::npos);
        msg = expect_kind(ErrorKind::dependency, [&] { cli::cmd_mc_variance(fresh); });
        CHECK(msg.find("train-interp") != std::string::npos);
        msg = expect_kind(ErrorKind::dependency, [&] { cli::cmd_build_targets(fresh); });
        CHECK(msg.find("train-interp") != std::string::npos);
        msg = expect_kind(ErrorKind::dependency, [&] { cli::cmd_evaluate(fresh); });
        CHECK(msg.find("train") != std::string::npos);
    }
}

TEST_CASE("sweep produces sub-runs and a comparison") {
    TempDir td("sweep");

    SUBCASE("lambda sweep") {
        cli::RunConfig cfg = micro_cfg(5);
        cfg.sweep.parameter = "lambda";
        cfg.sweep.values = {0.01, 1.0};
        cli::RunContext ctx{cfg, td.sub("run")};
        CHECK(cli::cmd_sweep(ctx) == true);

        fs::path sl = td.path / "run" / "sweep_lambda";
        CHECK(fs::exists(sl / "lam_0.01" / "report" / "report.json"));
        CHECK(fs::exists(sl / "lam_1" / "report" / "report.json"));
        CHECK(fs::exists(sl / "comparison.md"));
        CHECK(fs::exists(sl / "sensitivity.png"));

        std::ifstream f(sl / "sweep.json");
        json sj = json::parse(f);
        CHECK(sj.at("parameter") == "lambda");
        REQUIRE(sj.at("runs").size() == 2);
        CHECK(sj.at("runs")[0].at("value") == 0.01);
        CHECK(sj.at("runs")[0].at("aggregates").contains("accuracy"));

        // sub-run config carries its own lambda
        std::ifstream rf(sl / "lam_0.01" / "config.resolved.json");
        json rc = json::parse(rf);
        CHECK(rc.at("train").at("lambda") == 0.01);

        CHECK(cli::cmd_sweep(ctx) == false);  // up to date
    }

    SUBCASE("train_size sweep sizes the train split exactly") {
        cli::RunConfig cfg = micro_cfg(5);
        cfg.sweep.parameter = "train_size";
        cfg.sweep.values = {4, 6};
        cli::RunContext ctx{cfg, td.sub("runts")};
        CHECK(cli::cmd_sweep(ctx) == true);
        for (int n : {4, 6}) {
            fs::path sub = td.path / "runts" / "sweep_train_size" / ("n_" + std::to_string(n));
            REQUIRE(fs::exists(sub / "data" / "manifest.json"));
            DatasetManifest dman = load_manifest((sub / "data").string());
            CHECK(static_cast<int>(dman.in_split("train").size()) == n);
        }
    }

    SUBCASE("sweep validation") {
        cli::RunConfig cfg = micro_cfg(5);
        cfg.sweep.parameter = "gamma";
        expect_kind(ErrorKind::configuration,
                    [&] { cli::cmd_sweep({cfg, td.sub("bad1")}); });
        cfg.sweep.parameter = "train_size";
        cfg.sweep.values = {5};
        expect_kind(ErrorKind::configuration,
                    [&] { cli::cmd_sweep({cfg, td.sub("bad2")}); });
        cfg.sweep.parameter = "lambda";
        cfg.sweep.values = {-0.5};
        expect_kind(ErrorKind::configuration,
                    [&] { cli::cmd_sweep({cfg, td.sub("bad3")}); });
    }
}

TEST_CASE("binary: exit codes, env default, up-to-date notice") {
    TempDir td("bin");
    {
        std::ofstream f(td.path / "cfg.json");
        f << cli::dump_run_config(micro_cfg(3)).dump(2);
    }
    std::string cfg = " --config " + td.sub("cfg.json");

    CHECK(run_bin("--help") == 0);
    CHECK(run_bin("gen-data --config " + td.sub("missing.json") + " --run-dir " + td.sub("r0")) ==
          cli::exit_code_for(ErrorKind::io));
    CHECK(run_bin("gen-data" + cfg + " --run-dir " + td.sub("r1") + " data.frobnicate=1") ==
          cli::exit_code_for(ErrorKind::configuration));
    CHECK(run_bin("evaluate" + cfg + " --run-dir " + td.sub("r2")) ==
          cli::exit_code_for(ErrorKind::dependency));
    {
        std::ofstream f(td.path / "broken.json");
        f << "{ nope";
    }
    CHECK(run_bin("gen-data --config " + td.sub("broken.json") + " --run-dir " + td.sub("r3")) ==
          cli::exit_code_for(ErrorKind::corrupt_file));

    // no run dir anywhere -> configuration error
    ::unsetenv("DUE_RUN_DIR");
    CHECK(run_bin("gen-data" + cfg) == cli::exit_code_for(ErrorKind::configuration));

    // success, then an up-to-date notice on the rerun
    CHECK(run_bin("gen-data" + cfg + " --run-dir " + td.sub("r4")) == 0);
    CHECK(fs::exists(td.path / "r4" / "data" / "manifest.json"));
    CHECK(fs::exists(td.path / "r4" / "config.resolved.json"));
    CHECK(fs::exists(td.path / "r4" / "manifest.json"));
    std::string out = run_bin_capture("gen-data" + cfg + " --run-dir " + td.sub("r4"));
    CHECK(out.find("up to date") != std::string::npos);
    // --seed overrides the config seed and invalidates the stage
    out = run_bin_capture("gen-data" + cfg + " --run-dir " + td.sub("r4") + " --seed 99");
    CHECK(out.find("up to date") == std::string::npos);

    // DUE_RUN_DIR provides the default run dir
    ::setenv("DUE_RUN_DIR", td.sub("renv").c_str(), 1);
    CHECK(run_bin("gen-data" + cfg) == 0);
    CHECK(fs::exists(td.path / "renv" / "data" / "manifest.json"));
    ::unsetenv("DUE_RUN_DIR");

    // a held lock turns commands away
    fs::create_directories(td.sub("r5"));
    std::ofstream(td.path / "r5" / ".lock") << "";
    CHECK(run_bin("gen-data" + cfg + " --run-dir " + td.sub("r5")) ==
          cli::exit_code_for(ErrorKind::io));
}
