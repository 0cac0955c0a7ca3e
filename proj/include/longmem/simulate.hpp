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

#include "longmem/lm_model.hpp"
#include "longmem/rng.hpp"
#include "longmem/volume_io.hpp"
#include "longmem/wavelet.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <vector>

namespace longmem {

/**
 * Draw a series whose wavelet coefficients are independent N(0, var[m])
 * (scaling coefficients N(0, scaling_var)) and invert the transform. nu = 0
 * yields the zero series. Coefficients are drawn scale by scale, finest
 * first, then the scaling coefficients.
 */
std::vector<double> simulate_wavelet_domain(const LongMemoryParams& params, std::size_t T_dyadic, int J, Philox& rng,
                                            const FilterBank& bank = FilterBank::db2());
std::vector<double> simulate_wavelet_domain(const LongMemoryParams& params, std::size_t T_dyadic, int J,
                                            std::uint64_t seed, const FilterBank& bank = FilterBank::db2());

enum class EmbeddingMethod { automatic, circulant, dense };

struct PowerlawDraw {
    std::vector<double> series;
    double nugget_used = 0.0;  // may exceed spec.nugget after escalation
    bool used_dense = false;
};

/**
 * Exact stationary Gaussian draw with autocovariance autocov(spec, h) via
 * circulant embedding. If the embedding spectrum has negative entries the
 * nugget is doubled up to three times, then dense Cholesky is used.
 * Throws NumericError if the covariance is still not positive definite.
 */
PowerlawDraw simulate_powerlaw_time(const AutocovSpec& spec, std::size_t T, Philox& rng,
                                    EmbeddingMethod method = EmbeddingMethod::automatic);

/// Subject template for synthetic studies. Fields are per masked voxel.
struct SyntheticSubjectSpec {
    VolumeGrid grid;
    BrainMask mask;
    MaskedParcellation parcellation;
    std::size_t T = 256;
    int J = 0;  // 0 = default_levels(T)
    std::vector<double> alpha_field;
    std::vector<double> nu_field;
    std::string bank = "db2";
};

/// Covariate effect confined to one ROI, in units of alpha per covariate unit.
struct GroupEffectSpec {
    std::string covariate_name;
    std::int32_t target_roi = 0;
    double effect_size = 0.0;
};

struct GroundTruth {
    Eigen::MatrixXd beta;  // N_v x Q, columns follow the covariate table
    std::vector<std::string> column_names;
    std::int64_t clamp_events = 0;
};

/// Per-subject alpha fields (N x N_v) after adding effects and clamping
/// to [0.02, 0.98]. Throws DataError if more than 5% of entries clamp.
Eigen::MatrixXd subject_alpha_fields(const SyntheticSubjectSpec& spec, const std::vector<GroupEffectSpec>& effects,
                                     const CovariateTable& covariates, std::int64_t* clamp_events = nullptr);

GroundTruth ground_truth(const SyntheticSubjectSpec& spec, const std::vector<GroupEffectSpec>& effects,
                         const CovariateTable& covariates);

/**
 * Generate subject i of a study. Each voxel uses its own stream
 * Philox(derive_seed(seed, kSimulateStreamTag), i, v), so output does not
 * depend on the worker count.
 */
Dataset4D simulate_subject(const SyntheticSubjectSpec& spec, const Eigen::MatrixXd& alpha_fields, std::size_t subject,
                           const std::string& subject_id, std::uint64_t seed, unsigned threads = 1);

struct GroupStudy {
    std::vector<Dataset4D> subjects;
    GroundTruth truth;
};

/// All subjects at once; prefer simulate_subject for large studies.
GroupStudy simulate_group_study(const SyntheticSubjectSpec& spec, const std::vector<GroupEffectSpec>& effects,
                                const CovariateTable& covariates, std::uint64_t seed, unsigned threads = 1);

/// Synthetic design mirroring a developmental ADHD cohort.
struct CovariateSimSpec {
    double age_min = 7.0;
    double age_max = 18.0;
    double medication_rate = 0.4;
    double adhd_index_mean = 55.0;
    double adhd_index_sd = 15.0;
};

/**
 * Columns intercept, age ~ U(age_min, age_max), medication ~ Bernoulli,
 * adhd_index ~ N(mean, sd) clamped to [19, 90], adhd_x_medication. Subject
 * ids are sub-001, sub-002, ... Redraws until no column is constant.
 */
CovariateTable simulate_covariates(std::size_t n_subjects, const CovariateSimSpec& spec, std::uint64_t seed);

/// Write "voxel,covariate,beta" rows (masked voxel index) for scoring.
void write_ground_truth(const std::filesystem::path& path, const GroundTruth& truth);
GroundTruth read_ground_truth(const std::filesystem::path& path);

/// Random parcellation of a grid into `n_rois` contiguous slabs-of-blocks
/// via nearest seed voxel (Voronoi cells of seeds drawn from rng).
Parcellation voronoi_parcellation(const VolumeGrid& grid, int n_rois, std::uint64_t seed);

/// Parcellation of a grid into 2x2x2 octants (8 ROIs) when every dim is even.
Parcellation octant_parcellation(const VolumeGrid& grid);

} // namespace longmem
