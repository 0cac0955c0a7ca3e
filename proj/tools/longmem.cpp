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

#include "longmem/config.hpp"
#include "longmem/error.hpp"
#include "longmem/log.hpp"
#include "longmem/pipeline.hpp"
#include "longmem/wavelet.hpp"

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>

namespace fs = std::filesystem;

namespace {

struct CommonFlags {
    std::string config_path;
    std::string stages;
    std::optional<std::uint64_t> seed;
    std::optional<unsigned> threads;
    bool verbose = false;
};

void add_common(CLI::App* cmd, CommonFlags& f, bool with_stage)
{
    cmd->add_option("--config", f.config_path, "pipeline configuration (JSON)")->check(CLI::ExistingFile);
    if (with_stage)
        cmd->add_option("--stage", f.stages, "comma-separated subset of stages to run");
    cmd->add_option("--seed", f.seed, "override the top-level seed");
    cmd->add_option("--threads", f.threads, "worker threads (0 = all cores)");
    cmd->add_flag("--verbose", f.verbose, "progress messages");
}

longmem::PipelineConfig load_config(const CommonFlags& f)
{
    longmem::PipelineConfig c = f.config_path.empty() ? longmem::PipelineConfig::from_json(nlohmann::json::object())
                                                      : longmem::PipelineConfig::load(f.config_path);
    if (f.seed)
        c.set_seed(*f.seed);
    if (f.threads)
        c.set_threads(*f.threads);
    return c;
}

void print_result(const longmem::RunResult& r)
{
    for (const auto& s : r.stages)
        std::cout << s.name << ": " << (s.skipped ? "skipped (up to date)" : "done") << "\n";
}

int run(int argc, char** argv)
{
    CLI::App app{"Voxel-wise long-memory estimation and group inference for fMRI"};
    app.require_subcommand(1);
    app.set_version_flag("--version", longmem::kToolVersion);

    CommonFlags f;
    const std::vector<std::string> stage_cmds = longmem::stage_names();
    std::vector<CLI::App*> stage_apps;
    std::string est_input, est_mask, est_output;
    for (const auto& name : stage_cmds) {
        CLI::App* cmd = app.add_subcommand(name, "run the " + name + " stage");
        add_common(cmd, f, false);
        if (name == "estimate-subject") {
            cmd->add_option("--input", est_input, "estimate a single 4-D volume instead of the study")
                ->check(CLI::ExistingFile);
            cmd->add_option("--mask", est_mask, "mask for --input")->check(CLI::ExistingFile);
            cmd->add_option("--output", est_output, "output directory for --input");
        }
        stage_apps.push_back(cmd);
    }
    CLI::App* run_cmd = app.add_subcommand("run", "run all stages (or --stage LIST) in dependency order");
    add_common(run_cmd, f, true);

    CLI::App* schema_cmd = app.add_subcommand("schema", "print the configuration JSON schema");
    CLI::App* config_cmd = app.add_subcommand("config", "print the resolved configuration");
    add_common(config_cmd, f, false);

    std::size_t w_T = 16;
    std::string w_bank = "db2";
    int w_J = 0;
    CLI::App* w_cmd = app.add_subcommand("dump-w", "print the explicit wavelet transform matrix as CSV");
    w_cmd->add_option("--T", w_T, "dyadic series length")->required();
    w_cmd->add_option("--bank", w_bank, "haar, db2 or db4");
    w_cmd->add_option("--J", w_J, "levels (0 = default)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }
    longmem::log::set_level(f.verbose ? longmem::log::Level::info : longmem::log::Level::warn);

    if (schema_cmd->parsed()) {
        std::cout << longmem::config_schema().dump(2) << "\n";
        return 0;
    }
    if (w_cmd->parsed()) {
        const auto bank = longmem::FilterBank::by_name(w_bank);
        if (longmem::dyadic_length(w_T) != w_T)
            throw longmem::UsageError("--T must be a power of two");
        const int J = w_J > 0 ? w_J : longmem::default_levels(w_T);
        const Eigen::MatrixXd W = longmem::build_w_matrix(w_T, bank, J);
        std::cout << std::setprecision(17);
        for (Eigen::Index i = 0; i < W.rows(); ++i) {
            for (Eigen::Index j = 0; j < W.cols(); ++j)
                std::cout << (j ? "," : "") << W(i, j);
            std::cout << "\n";
        }
        return 0;
    }

    const longmem::PipelineConfig config = load_config(f);
    if (config_cmd->parsed()) {
        std::cout << config.resolved.dump(2) << "\n";
        return 0;
    }
    if (run_cmd->parsed()) {
        const auto stages = f.stages.empty() ? longmem::default_stages(config) : longmem::parse_stage_list(f.stages);
        print_result(longmem::run_pipeline(config, stages));
        return 0;
    }
    for (std::size_t i = 0; i < stage_apps.size(); ++i) {
        if (!stage_apps[i]->parsed())
            continue;
        if (!est_input.empty()) {
            const fs::path out = est_output.empty() ? config.output_dir() / "estimate-volume" : fs::path(est_output);
            longmem::estimate_volume(config, est_input, est_mask, out);
            std::cout << "estimate-subject: wrote " << out.string() << "\n";
            return 0;
        }
        print_result(longmem::run_pipeline(config, {stage_cmds[i]}));
        return 0;
    }
    return 1;
}

} // namespace

int main(int argc, char** argv)
{
    try {
        return run(argc, argv);
    } catch (const longmem::UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const longmem::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const longmem::NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
