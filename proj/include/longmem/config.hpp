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

#include "longmem/group_regression.hpp"
#include "longmem/subject_estimator.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>

namespace longmem {

/// JSON Schema (draft-07 subset) every pipeline config is checked against.
const nlohmann::json& config_schema();

/**
 * Validate `user` against the schema and fill in every default. Unknown
 * keys, wrong types and out-of-range values raise UsageError naming the
 * offending JSON pointer.
 */
nlohmann::json resolve_config(const nlohmann::json& user);

/// Validated configuration with typed accessors over the resolved JSON.
struct PipelineConfig {
    nlohmann::json resolved;
    std::filesystem::path base_dir;  // relative paths resolve against this

    static PipelineConfig from_json(const nlohmann::json& user, std::filesystem::path base_dir = ".");
    static PipelineConfig load(const std::filesystem::path& path);

    std::filesystem::path output_dir() const;
    std::filesystem::path manifest_path() const;
    std::filesystem::path path_at(const std::string& pointer) const;
    unsigned threads() const;

    /// Seed of a stage: its own "seed" entry, else the top-level seed.
    std::uint64_t stage_seed(const std::string& section) const;

    SubjectPriors subject_priors() const;
    ChainConfig chain_config() const;
    GroupConfig group_config() const;
    GroupPriors group_priors(const Eigen::MatrixXd& Z_standardized) const;

    /// Override the top-level seed or thread count (CLI flags).
    void set_seed(std::uint64_t seed);
    void set_threads(unsigned threads);
};

} // namespace longmem
