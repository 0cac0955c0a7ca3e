/*
   Copyright 2026 The longmem Authors

   Licensed under the Apache License, Version 2.0 (the "License");
   you may not use this file except in compliance with the License.
   You may obtain a copy of the License at

       http://www.apache.org/licenses/LICENSE-2.0

   Unless required by applicable law or agreed to in writing, software
   distributed under the License is distributed on an "AS IS" BASIS,
   WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
   See the License for the specific language governing permissions and
   limitations under the License.
*/

#include "longmem/error.hpp"
#include "longmem/hashing.hpp"
#include "longmem/pipeline.hpp"
#include "longmem/volume_io.hpp"
#include "support.hpp"

#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <map>
#include <sys/wait.h>

using namespace longmem;
using nlohmann::json;
using testing::TempDir;
namespace fs = std::filesystem;

namespace {

json tiny_config(const fs::path& out)
{
    json j = json::parse(R"({
      "seed": 11,
      "volume_format": "nii",
      "simulate": {"grid": [6, 6, 6], "n_subjects": 16, "T": 64,
                   "effects": [{"covariate": "age", "roi": 2, "effect_size": 0.02}]},
      "estimate": {"n_iter": 120, "n_burn": 40, "thin": 1, "diagnostic_voxels": 3},
      "group": {"n_iter": 620, "n_burn": 100, "trace_components": 2},
      "infer": {"min_cluster": 3}
    })");
    j["output_dir"] = out.string();
    return j;
}

// Every output file hash except the manifest, keyed by path relative to the run.
std::map<std::string, std::string> output_hashes(const fs::path& root)
{
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file() && e.path().filename() != "manifest.json")
            out[fs::relative(e.path(), root).string()] = sha256_file(e.path());
    return out;
}

int cli(const std::string& args)
{
    const int rc = std::system((std::string(LONGMEM_CLI) + " " + args + " >/dev/null 2>&1").c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

void write_text(const fs::path& p, const std::string& s)
{
    std::ofstream(p, std::ios::trunc) << s;
}

} // namespace

TEST_SUITE("pipeline") {

TEST_CASE("config schema validation and defaults")
{
    const json r = resolve_config(json::object());
    CHECK(r["estimate"]["n_iter"] == 5000);
    CHECK(r["infer"]["zeta"] == 0.05);
    CHECK(r["infer"]["min_cluster"] == 50);
    CHECK(r["infer"]["connectivity"] == 26);
    CHECK(r["basis"]["local_threshold"] == 0.99);
    CHECK_THROWS_AS(resolve_config(json{{"bogus", 1}}), UsageError);
    CHECK_THROWS_AS(resolve_config(json{{"estimate", {{"n_iter", "many"}}}}), UsageError);
    CHECK_THROWS_AS(resolve_config(json{{"infer", {{"zeta", 0.7}}}}), UsageError);
    CHECK_THROWS_AS(resolve_config(json{{"infer", {{"connectivity", 8}}}}), UsageError);
    try {
        resolve_config(json{{"group", {{"nope", true}}}});
        FAIL("expected a usage error");
    } catch (const UsageError& e) {
        CHECK(std::string(e.what()).find("/group") != std::string::npos);
    }
    CHECK(config_schema().contains("properties"));
}

TEST_CASE("stage lists")
{
    CHECK(stage_names().size() == 6);
    CHECK(parse_stage_list("infer,build-basis") == std::vector<std::string>{"build-basis", "infer"});
    CHECK_THROWS_AS(parse_stage_list("estimate,infer"), UsageError);
    auto c = PipelineConfig::from_json(json::object());
    CHECK(default_stages(c).size() == 6);
    auto ext = PipelineConfig::from_json(
        json{{"data", {{"subjects_csv", "s.csv"}, {"parcellation", "p.nii"}, {"covariates", "c.csv"}}}});
    CHECK(default_stages(ext).front() == "estimate-subject");
}

TEST_CASE("no-cluster message")
{
    CHECK(no_cluster_message(0.05, 50) == "no clusters at ζ=0.05, min 50 voxels");
}

TEST_CASE("full run, resume, integrity re-run and reproducibility")
{
    TempDir dir("pipe");
    const auto cfg = PipelineConfig::from_json(tiny_config(dir / "a"));
    const auto first = run_pipeline(cfg, default_stages(cfg));
    REQUIRE(first.stages.size() == 6);
    for (const auto& s : first.stages)
        CHECK_FALSE(s.skipped);
    CHECK(first.manifest["stages"].size() == 6);
    for (const auto& [name, entry] : first.manifest["stages"].items()) {
        CHECK(entry["status"] == "complete");
        CHECK(entry.contains("inputs"));
        CHECK_FALSE(entry["outputs"].empty());
    }
    CHECK(first.manifest["seeds"].contains("simulate"));
    CHECK(first.manifest["config"]["estimate"]["n_iter"] == 120);
    CHECK(fs::exists(dir / "a" / "manifest.json"));

    const auto again = run_pipeline(cfg, default_stages(cfg));
    for (const auto& s : again.stages)
        CHECK(s.skipped);

    // Damage an intermediate: its producer re-runs, identical outputs let later stages skip.
    const fs::path stack = dir / "a" / "estimate-subject" / "alpha_stack.bin";
    {
        std::fstream io(stack, std::ios::in | std::ios::out | std::ios::binary);
        io.seekp(64);
        io.put('\x7f');
    }
    const auto repaired = run_pipeline(cfg, default_stages(cfg));
    std::map<std::string, bool> skipped;
    for (const auto& s : repaired.stages)
        skipped[s.name] = s.skipped;
    CHECK(skipped["simulate"]);
    CHECK_FALSE(skipped["estimate-subject"]);
    CHECK(skipped["build-basis"]);
    CHECK(skipped["report"]);

    // Same config elsewhere with more workers: byte-identical outputs.
    auto other = PipelineConfig::from_json(tiny_config(dir / "b"));
    other.set_threads(4);
    run_pipeline(other, default_stages(other));
    const auto ha = output_hashes(dir / "a"), hb = output_hashes(dir / "b");
    CHECK(ha.size() == hb.size());
    for (const auto& [rel, h] : ha) {
        INFO(rel);
        CHECK(hb.count(rel) == 1);
        if (hb.count(rel))
            CHECK(hb.at(rel) == h);
    }

    // A changed seed changes the inputs of every stage.
    auto reseeded = PipelineConfig::from_json(tiny_config(dir / "a"));
    reseeded.set_seed(12);
    for (const auto& s : run_pipeline(reseeded, default_stages(reseeded)).stages)
        CHECK_FALSE(s.skipped);
}

TEST_CASE("report tables and ground-truth metrics")
{
    TempDir dir("report");
    const auto cfg = PipelineConfig::from_json(tiny_config(dir / "r"));
    run_pipeline(cfg, default_stages(cfg));
    const fs::path rep = dir / "r" / "report";
    for (const char* f : {"results.json", "report.txt", "metrics.csv", "clusters.csv", "scale_variances.csv",
                          "subject_traces.csv", "subject_acf.csv", "group_traces.csv", "group_acf.csv"})
        CHECK_MESSAGE(fs::exists(rep / f), f);
    std::ifstream m(rep / "metrics.csv");
    std::string header;
    std::getline(m, header);
    CHECK(header.find("sensitivity") != std::string::npos);
    CHECK(header.find("false_positive_voxels") != std::string::npos);
    const json results = json::parse(std::ifstream(rep / "results.json"));
    CHECK(results.contains("covariates"));
    std::ifstream t(rep / "report.txt");
    const std::string text((std::istreambuf_iterator<char>(t)), std::istreambuf_iterator<char>());
    CHECK(text.find("age") != std::string::npos);
}

TEST_CASE("report lists missing inputs by name")
{
    TempDir dir("missing");
    const auto cfg = PipelineConfig::from_json(tiny_config(dir / "m"));
    run_pipeline(cfg, default_stages(cfg));
    fs::remove(dir / "m" / "infer" / "band.csv");
    try {
        run_pipeline(cfg, {"report"});
        FAIL("expected the report stage to fail");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("band.csv") != std::string::npos);
        CHECK(std::string(e.what()).find("stage report failed") != std::string::npos);
    }
    CHECK(fs::exists(dir / "m" / "report.failed"));
}

TEST_CASE("external data path and failing stage quarantine")
{
    TempDir dir("external");
    json j = tiny_config(dir / "out");
    write_text(dir / "subjects.csv", "subject_id,path\nsub-001,garbage.nii\nsub-002,garbage.nii\n");
    write_text(dir / "garbage.nii", "not a volume");
    write_text(dir / "cov.csv", "subject_id,age\nsub-001,10\nsub-002,12\n");
    const auto grid = VolumeGrid::make({2, 2, 2});
    write_volume(dir / "parc.nii", grid, std::vector<double>(8, 1.0), BrainMask::full(grid), DataType::int32);
    j["data"] = {{"subjects_csv", (dir / "subjects.csv").string()},
                 {"parcellation", (dir / "parc.nii").string()},
                 {"covariates", (dir / "cov.csv").string()}};
    const auto cfg = PipelineConfig::from_json(j);
    CHECK_THROWS_AS(run_pipeline(cfg, {"estimate-subject"}), DataError);
    CHECK(fs::exists(dir / "out" / "estimate-subject.failed"));
    CHECK_FALSE(fs::exists(dir / "out" / "estimate-subject"));

    write_text(dir / "subjects.csv", "subject_id,path\nsub-001,nowhere.nii\nsub-002,nowhere.nii\n");
    try {
        run_pipeline(cfg, {"estimate-subject"});
        FAIL("expected a missing-input error");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("stage estimate-subject failed") != std::string::npos);
        CHECK(std::string(e.what()).find("nowhere.nii") != std::string::npos);
    }
}

TEST_CASE("standalone single-volume estimation")
{
    TempDir dir("single");
    const auto grid = VolumeGrid::make({3, 2, 2});
    Dataset4D ds;
    ds.grid = grid;
    ds.T = 64;
    Philox rng(4);
    ds.data.resize(12 * 64);
    for (double& v : ds.data)
        v = rng.normal();
    write_dataset(dir / "bold.nii", ds, BrainMask::full(grid));
    const auto cfg = PipelineConfig::from_json(json::parse(R"({"estimate": {"n_iter": 100, "n_burn": 20}})"));
    estimate_volume(cfg, dir / "bold.nii", "", dir / "est");
    CHECK(fs::exists(dir / "est" / "bold_alpha_mean.nii.gz"));
    CHECK(fs::exists(dir / "est" / "diagnostics.csv"));
}

TEST_CASE("command-line exit codes")
{
    TempDir dir("cli");
    CHECK(cli("schema") == 0);
    CHECK(cli("--no-such-flag") == 1);
    CHECK(cli("run --config " + (dir / "absent.json").string()) == 1);
    write_text(dir / "bad.json", R"({"bogus": 1})");
    CHECK(cli("run --config " + (dir / "bad.json").string()) == 1);
    CHECK(cli("run --config " + (dir / "bad.json").string() + " --stage estimate") == 1);

    json j = tiny_config(dir / "out");
    j["data"] = {{"subjects_csv", (dir / "none.csv").string()},
                 {"parcellation", (dir / "none.nii").string()},
                 {"covariates", (dir / "none.csv").string()}};
    write_text(dir / "data.json", j.dump());
    CHECK(cli("estimate-subject --config " + (dir / "data.json").string()) == 2);

    write_text(dir / "ok.json", tiny_config(dir / "ok").dump());
    CHECK(cli("run --config " + (dir / "ok.json").string() + " --threads 2 --seed 5") == 0);
    CHECK(fs::exists(dir / "ok" / "report" / "report.txt"));
    CHECK(cli("config --config " + (dir / "ok.json").string()) == 0);
}

}
