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

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace longmem {

/// alpha ~ Beta(a, b), nu ~ Inv-Gamma(p, s).
struct SubjectPriors {
    double a = 3.0;
    double b = 3.0;
    double p = 2.0;
    double s = 2.0;

    void validate() const;
};

struct ChainConfig {
    int n_iter = 5000;
    int n_burn = 1000;
    int thin = 2;
    double proposal_sd = 0.05;
    bool adapt = true;  // batch-tune proposal_sd during the first half of burn-in
    std::uint64_t seed = 0;

    void validate() const;
    int n_retained() const { return (n_iter - n_burn + thin - 1) / thin; }
};

/// Draw nu | alpha ~ Inv-Gamma(p + N/2, s + 0.5 * sum_m sumsq[m] 2^(alpha m)).
double sample_nu(const SufficientStats& stats, double alpha, const SubjectPriors& priors, Philox& rng);

struct AlphaStep {
    double alpha;
    bool accepted;
};

/**
 * One truncated-normal random-walk Metropolis-Hastings update of alpha
 * targeting wavelet likelihood x Beta(a, b), with the (0,1) truncation
 * normalizers entering the Hastings ratio.
 */
AlphaStep sample_alpha(const SufficientStats& stats, double alpha, double nu, const SubjectPriors& priors,
                       double proposal_sd, Philox& rng);

/// Retained draws and sampler bookkeeping for one voxel.
struct VoxelChain {
    std::vector<double> alpha;
    std::vector<double> nu;
    double acceptance = 0.0;     // over post-adaptation iterations
    double proposal_sd = 0.0;    // frozen value after adaptation
};

VoxelChain run_voxel_chain(const SufficientStats& stats, const SubjectPriors& priors, const ChainConfig& config,
                           Philox& rng);

struct VoxelEstimate {
    double alpha_mean = 0.0;
    double alpha_median = 0.0;
    double alpha_sd = 0.0;
    double alpha_q05 = 0.0;
    double alpha_q95 = 0.0;
    double nu_mean = 0.0;
    double acceptance = 0.0;
    double ess = 0.0;
    bool degenerate = false;
};

/// Center, transform and sample one series. Zero-variance input is
/// reported as degenerate with NaN summaries.
VoxelEstimate estimate_voxel(std::span<const double> y, const FilterBank& bank, int J, const SubjectPriors& priors,
                             const ChainConfig& config, Philox& rng, VoxelChain* chain_out = nullptr);

/// Per-voxel posterior summaries for one subject, indexed by masked voxel.
struct LongMemoryMap {
    std::string subject_id;
    std::vector<double> alpha_mean;
    std::vector<double> alpha_median;
    std::vector<double> alpha_sd;
    std::vector<double> nu_mean;
    std::vector<double> acceptance;
    std::vector<double> ess;
    std::vector<std::int64_t> degenerate;  // masked indices skipped
};

/**
 * Estimate every voxel of a dataset. Voxel v of subject `subject_index`
 * draws from Philox(derive_seed(config.seed, kEstimateStreamTag),
 * subject_index, v), so results are independent of `threads`. When
 * `chains` is given, the full retained chains of the listed voxels are
 * returned in the same order.
 */
LongMemoryMap estimate_subject(const Dataset4D& dataset, const FilterBank& bank, int J, const SubjectPriors& priors,
                               const ChainConfig& config, std::uint32_t subject_index, unsigned threads = 1,
                               const std::vector<std::int64_t>* sample_voxels = nullptr,
                               std::vector<VoxelChain>* chains = nullptr);

struct SlopeFit {
    double slope = 0.0;
    double intercept = 0.0;
    double r2 = 0.0;
    int n_freq = 0;
};

/// Periodogram at Fourier frequencies k/T, k = 1..floor(T/2), as (log10 f, log10 I).
std::vector<std::pair<double, double>> log_periodogram(std::span<const double> y);

/**
 * OLS slope of log10 periodogram against log10 frequency (cycles/sample)
 * over [band_lo, band_hi]. The default band is the upper half of the
 * resolvable log-frequency range. Requires length >= 64 and at least 8
 * frequencies in the band.
 */
SlopeFit spectral_slope_screen(std::span<const double> y, std::optional<std::pair<double, double>> band = std::nullopt);

struct ChainDiagnostics {
    std::vector<double> trace;
    std::vector<double> acf;            // lags 0..max_lag
    double ess = 0.0;
    std::vector<double> density_edges;  // bins + 1 edges
    std::vector<std::int64_t> density_counts;
    bool degenerate = false;            // constant chain
};

/// ACF of the centered chain and ESS = n / (1 + 2 sum of the initial positive
/// sequence of paired autocorrelations). Requires >= 100 draws.
ChainDiagnostics chain_diagnostics(std::span<const double> draws, int max_lag = 50, int bins = 50);

/// Effective sample size alone (same estimator as chain_diagnostics).
double effective_sample_size(std::span<const double> draws);

} // namespace longmem
