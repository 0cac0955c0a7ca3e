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

#pragma once

#include "longmem/config.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace longmem {

inline constexpr const char* kToolVersion = "0.1.0";

/// Stage names in dependency order.
const std::vector<std::string>& stage_names();

/// Comma-separated stage list, validated and sorted into dependency order.
std::vector<std::string> parse_stage_list(const std::string& csv);

struct StageOutcome {
    std::string name;
    bool skipped = false;
};

struct RunResult {
    std::vector<StageOutcome> stages;
    nlohmann::json manifest;
};

/**
 * Run the requested stages in dependency order. A stage is skipped when the
 * manifest records identical input hashes and its outputs still hash to the
 * recorded values. Stage output is built in "<stage>.partial" and renamed on
 * success; on failure it is moved to "<stage>.failed" and the error is
 * rethrown (same exception type) prefixed with the stage name.
 */
RunResult run_pipeline(const PipelineConfig& config, const std::vector<std::string>& stages);

/// All stages that apply to the config ("simulate" is dropped when external data is configured).
std::vector<std::string> default_stages(const PipelineConfig& config);

/**
 * Standalone single-volume estimation: four 3-D maps (alpha mean, alpha sd,
 * nu mean, acceptance) and diagnostics.csv for the configured voxel sample.
 */
void estimate_volume(const PipelineConfig& config, const std::filesystem::path& input,
                     const std::filesystem::path& mask_path, const std::filesystem::path& output_dir);

/// Stage-level report text used when no cluster survives.
std::string no_cluster_message(double zeta, std::int64_t min_cluster);

} // namespace longmem
