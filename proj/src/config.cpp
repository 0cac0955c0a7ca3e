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
#include "longmem/parallel.hpp"

#include <fstream>

namespace longmem {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kSchemaText = R"json({
  "$schema": "http://json-schema.org/draft-07/schema#",
  "title": "longmem pipeline configuration",
  "type": "object",
  "additionalProperties": false,
  "properties": {
    "output_dir": {"type": "string", "default": "longmem_out"},
    "manifest": {"type": "string", "default": "manifest.json",
                 "description": "relative to output_dir"},
    "seed": {"type": "integer", "minimum": 0, "default": 20260101},
    "threads": {"type": "integer", "minimum": 0, "default": 1,
                "description": "0 uses every hardware thread"},
    "volume_format": {"type": "string", "enum": ["nii", "nii.gz"], "default": "nii.gz"},
    "data": {
      "type": "object", "additionalProperties": false,
      "description": "external inputs; when subjects_csv is null the simulate stage provides them",
      "properties": {
        "subjects_csv": {"type": ["string", "null"], "default": null,
                         "description": "columns subject_id,path (4-D volumes)"},
        "mask": {"type": ["string", "null"], "default": null},
        "parcellation": {"type": ["string", "null"], "default": null},
        "covariates": {"type": ["string", "null"], "default": null}
      }
    },
    "simulate": {
      "type": "object", "additionalProperties": false,
      "properties": {
        "grid": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 3, "maxItems": 3,
                 "default": [16, 16, 16]},
        "voxel_size": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 3,
                       "maxItems": 3, "default": [3.0, 3.0, 3.0]},
        "n_subjects": {"type": "integer", "minimum": 3, "default": 40},
        "T": {"type": "integer", "minimum": 16, "maximum": 65536, "default": 256},
        "J": {"type": "integer", "minimum": 0, "maximum": 16, "default": 0},
        "bank": {"type": "string", "enum": ["haar", "db1", "db2", "db4"], "default": "db2"},
        "baseline_alpha": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1, "default": 0.5},
        "nu": {"type": "number", "exclusiveMinimum": 0, "default": 1.0},
        "parcellation": {"type": "string", "enum": ["octant", "voronoi"], "default": "octant"},
        "n_rois": {"type": "integer", "minimum": 1, "default": 8},
        "covariates": {
          "type": "object", "additionalProperties": false,
          "properties": {
            "age_range": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2,
                          "default": [7.0, 18.0]},
            "medication_rate": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1, "default": 0.4},
            "adhd_index_mean": {"type": "number", "default": 55.0},
            "adhd_index_sd": {"type": "number", "exclusiveMinimum": 0, "default": 15.0}
          }
        },
        "effects": {
          "type": "array",
          "items": {
            "type": "object", "additionalProperties": false,
            "required": ["covariate", "roi", "effect_size"],
            "properties": {
              "covariate": {"type": "string"},
              "roi": {"type": "integer", "minimum": 1},
              "effect_size": {"type": "number"}
            }
          },
          "default": [{"covariate": "age", "roi": 1, "effect_size": 0.01}]
        },
        "seed": {"type": ["integer", "null"], "minimum": 0, "default": null}
      }
    },
    "estimate": {
      "type": "object", "additionalProperties": false,
      "properties": {
        "bank": {"type": "string", "enum": ["haar", "db1", "db2", "db4"], "default": "db2"},
        "J": {"type": "integer", "minimum": 0, "maximum": 16, "default": 0,
              "description": "0 picks the default for the series length"},
        "priors": {
          "type": "object", "additionalProperties": false,
          "properties": {
            "a": {"type": "number", "exclusiveMinimum": 0, "default": 3.0},
            "b": {"type": "number", "exclusiveMinimum": 0, "default": 3.0},
            "p": {"type": "number", "exclusiveMinimum": 0, "default": 2.0},
            "s": {"type": "number", "exclusiveMinimum": 0, "default": 2.0}
          }
        },
        "n_iter": {"type": "integer", "minimum": 2, "default": 5000},
        "n_burn": {"type": "integer", "minimum": 0, "default": 1000},
        "thin": {"type": "integer", "minimum": 1, "default": 2},
        "proposal_sd": {"type": "number", "exclusiveMinimum": 0, "default": 0.05},
        "adapt": {"type": "boolean", "default": true},
        "diagnostic_voxels": {"type": "integer", "minimum": 0, "default": 8},
        "trace_subjects": {"type": "integer", "minimum": 0, "default": 1},
        "seed": {"type": ["integer", "null"], "minimum": 0, "default": null}
      }
    },
    "basis": {
      "type": "object", "additionalProperties": false,
      "properties": {
        "local_threshold": {"type": "number", "exclusiveMinimum": 0, "maximum": 1, "default": 0.99},
        "global_threshold": {"type": "number", "exclusiveMinimum": 0, "maximum": 1, "default": 0.99}
      }
    },
    "group": {
      "type": "object", "additionalProperties": false,
      "properties": {
        "covariates": {"type": "array", "items": {"type": "string"}, "minItems": 1,
                       "default": ["age", "medication", "adhd_index", "adhd_x_medication"]},
        "prior": {"type": "string", "enum": ["isotropic", "g"], "default": "isotropic"},
        "lambda_scale": {"type": "number", "exclusiveMinimum": 0, "default": 0.5},
        "g": {"type": "number", "exclusiveMinimum": 0, "default": 100.0},
        "mu0": {"type": ["array", "null"], "items": {"type": "number"}, "default": null},
        "k": {"type": "number", "exclusiveMinimum": 0, "default": 0.1},
        "l": {"type": "number", "exclusiveMinimum": 0, "default": 0.5},
        "n_iter": {"type": "integer", "minimum": 2, "default": 4000},
        "n_burn": {"type": "integer", "minimum": 0, "default": 1000},
        "thin": {"type": "integer", "minimum": 1, "default": 1},
        "standardize": {"type": "boolean", "default": true},
        "trace_components": {"type": "integer", "minimum": 0, "default": 3},
        "seed": {"type": ["integer", "null"], "minimum": 0, "default": null}
      }
    },
    "infer": {
      "type": "object", "additionalProperties": false,
      "properties": {
        "zeta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 0.5, "default": 0.05},
        "fdr_q": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1, "default": 0.05},
        "connectivity": {"type": "integer", "enum": [6, 18, 26], "default": 26},
        "min_cluster": {"type": "integer", "minimum": 1, "default": 50},
        "covariates": {"type": ["array", "null"], "items": {"type": "string"}, "default": null,
                       "description": "null means every non-intercept column"}
      }
    },
    "report": {
      "type": "object", "additionalProperties": false,
      "properties": {
        "ground_truth": {"type": ["string", "null"], "default": null,
                         "description": "voxel,covariate,beta sidecar; the simulate output is used when null"}
      }
    }
  }
})json";

bool has_type(const json& value, const std::string& type)
{
    if (type == "object")
        return value.is_object();
    if (type == "array")
        return value.is_array();
    if (type == "string")
        return value.is_string();
    if (type == "boolean")
        return value.is_boolean();
    if (type == "null")
        return value.is_null();
    if (type == "integer")
        return value.is_number_integer();
    if (type == "number")
        return value.is_number();
    return false;
}

std::string where(const std::string& pointer) { return pointer.empty() ? "/" : pointer; }

void validate(const json& schema, const json& value, const std::string& pointer)
{
    if (schema.contains("type")) {
        const json& t = schema["type"];
        bool ok = false;
        if (t.is_string())
            ok = has_type(value, t.get<std::string>());
        else
            for (const auto& alt : t)
                ok = ok || has_type(value, alt.get<std::string>());
        if (!ok)
            throw UsageError("config " + where(pointer) + ": expected type " + t.dump() + ", got " + value.dump());
    }
    if (value.is_null())
        return;
    if (schema.contains("enum")) {
        bool found = false;
        for (const auto& e : schema["enum"])
            found = found || e == value;
        if (!found)
            throw UsageError("config " + where(pointer) + ": " + value.dump() + " is not one of " +
                             schema["enum"].dump());
    }
    if (value.is_number()) {
        const double x = value.get<double>();
        if (schema.contains("minimum") && x < schema["minimum"].get<double>())
            throw UsageError("config " + where(pointer) + ": must be >= " + schema["minimum"].dump());
        if (schema.contains("maximum") && x > schema["maximum"].get<double>())
            throw UsageError("config " + where(pointer) + ": must be <= " + schema["maximum"].dump());
        if (schema.contains("exclusiveMinimum") && x <= schema["exclusiveMinimum"].get<double>())
            throw UsageError("config " + where(pointer) + ": must be > " + schema["exclusiveMinimum"].dump());
        if (schema.contains("exclusiveMaximum") && x >= schema["exclusiveMaximum"].get<double>())
            throw UsageError("config " + where(pointer) + ": must be < " + schema["exclusiveMaximum"].dump());
    }
    if (value.is_array()) {
        if (schema.contains("minItems") && value.size() < schema["minItems"].get<std::size_t>())
            throw UsageError("config " + where(pointer) + ": needs at least " + schema["minItems"].dump() +
                             " items");
        if (schema.contains("maxItems") && value.size() > schema["maxItems"].get<std::size_t>())
            throw UsageError("config " + where(pointer) + ": allows at most " + schema["maxItems"].dump() +
                             " items");
        if (schema.contains("items"))
            for (std::size_t i = 0; i < value.size(); ++i)
                validate(schema["items"], value[i], pointer + "/" + std::to_string(i));
    }
    if (value.is_object()) {
        const json props = schema.value("properties", json::object());
        if (!schema.value("additionalProperties", true))
            for (const auto& [key, _] : value.items())
                if (!props.contains(key))
                    throw UsageError("config " + where(pointer) + ": unknown key '" + key + "'");
        if (schema.contains("required"))
            for (const auto& r : schema["required"])
                if (!value.contains(r.get<std::string>()))
                    throw UsageError("config " + where(pointer) + ": missing required key '" +
                                     r.get<std::string>() + "'");
        for (const auto& [key, sub] : props.items())
            if (value.contains(key))
                validate(sub, value[key], pointer + "/" + key);
    }
}

void fill_defaults(const json& schema, json& value)
{
    if (!value.is_object() || !schema.contains("properties"))
        return;
    for (const auto& [key, sub] : schema["properties"].items()) {
        if (!value.contains(key)) {
            if (sub.contains("default"))
                value[key] = sub["default"];
            else if (sub.value("type", json()) == "object")
                value[key] = json::object();
            else
                continue;
        }
        fill_defaults(sub, value[key]);
    }
}

} // namespace

const json& config_schema()
{
    static const json schema = json::parse(kSchemaText);
    return schema;
}

json resolve_config(const json& user)
{
    if (!user.is_object())
        throw UsageError("config must be a JSON object");
    validate(config_schema(), user, "");
    json out = user;
    fill_defaults(config_schema(), out);
    validate(config_schema(), out, "");

    for (const char* section : {"estimate", "group"})
        if (out[section]["n_burn"].get<int>() >= out[section]["n_iter"].get<int>())
            throw UsageError(std::string("config /") + section + ": n_burn must be smaller than n_iter");
    const auto& ages = out["simulate"]["covariates"]["age_range"];
    if (!(ages[0].get<double>() < ages[1].get<double>()))
        throw UsageError("config /simulate/covariates/age_range: lower bound must be below upper bound");
    return out;
}

PipelineConfig PipelineConfig::from_json(const json& user, fs::path base_dir)
{
    PipelineConfig c;
    c.resolved = resolve_config(user);
    c.base_dir = std::move(base_dir);
    return c;
}

PipelineConfig PipelineConfig::load(const fs::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw UsageError("cannot open config " + path.string());
    json user;
    try {
        user = json::parse(in);
    } catch (const json::parse_error& e) {
        throw UsageError("config " + path.string() + " is not valid JSON: " + e.what());
    }
    return from_json(user, path.parent_path().empty() ? fs::path(".") : path.parent_path());
}

fs::path PipelineConfig::path_at(const std::string& pointer) const
{
    const json& v = resolved.at(json::json_pointer(pointer));
    if (v.is_null())
        return {};
    fs::path p = v.get<std::string>();
    return p.is_absolute() ? p : base_dir / p;
}

fs::path PipelineConfig::output_dir() const { return path_at("/output_dir"); }

fs::path PipelineConfig::manifest_path() const
{
    fs::path m = resolved["manifest"].get<std::string>();
    return m.is_absolute() ? m : output_dir() / m;
}

unsigned PipelineConfig::threads() const
{
    const unsigned t = resolved["threads"].get<unsigned>();
    return t == 0 ? default_threads() : t;
}

std::uint64_t PipelineConfig::stage_seed(const std::string& section) const
{
    const json& s = resolved[section]["seed"];
    return s.is_null() ? resolved["seed"].get<std::uint64_t>() : s.get<std::uint64_t>();
}

SubjectPriors PipelineConfig::subject_priors() const
{
    const json& p = resolved["estimate"]["priors"];
    SubjectPriors out;
    out.a = p["a"].get<double>();
    out.b = p["b"].get<double>();
    out.p = p["p"].get<double>();
    out.s = p["s"].get<double>();
    return out;
}

ChainConfig PipelineConfig::chain_config() const
{
    const json& e = resolved["estimate"];
    ChainConfig c;
    c.n_iter = e["n_iter"].get<int>();
    c.n_burn = e["n_burn"].get<int>();
    c.thin = e["thin"].get<int>();
    c.proposal_sd = e["proposal_sd"].get<double>();
    c.adapt = e["adapt"].get<bool>();
    c.seed = stage_seed("estimate");
    return c;
}

GroupConfig PipelineConfig::group_config() const
{
    const json& g = resolved["group"];
    GroupConfig c;
    c.n_iter = g["n_iter"].get<int>();
    c.n_burn = g["n_burn"].get<int>();
    c.thin = g["thin"].get<int>();
    c.seed = stage_seed("group");
    return c;
}

GroupPriors PipelineConfig::group_priors(const Eigen::MatrixXd& Z_standardized) const
{
    const json& g = resolved["group"];
    const Eigen::Index Q = Z_standardized.cols();
    GroupPriors p = g["prior"] == "g" ? GroupPriors::g_prior(Z_standardized, g["g"].get<double>())
                                      : GroupPriors::isotropic(Q, g["lambda_scale"].get<double>());
    p.k = g["k"].get<double>();
    p.l = g["l"].get<double>();
    if (!g["mu0"].is_null()) {
        const auto mu = g["mu0"].get<std::vector<double>>();
        if (static_cast<Eigen::Index>(mu.size()) != Q)
            throw UsageError("config /group/mu0 needs " + std::to_string(Q) + " entries (intercept first)");
        p.mu0 = Eigen::Map<const Eigen::VectorXd>(mu.data(), Q);
    }
    return p;
}

void PipelineConfig::set_seed(std::uint64_t seed) { resolved["seed"] = seed; }

void PipelineConfig::set_threads(unsigned threads) { resolved["threads"] = threads; }

} // namespace longmem
