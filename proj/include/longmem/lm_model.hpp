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

#include "longmem/wavelet.hpp"

#include <cstdint>
#include <vector>

namespace longmem {

/// Long-memory exponent and innovation variance of one voxel.
struct LongMemoryParams {
    double alpha = 0.5;  // in (0, 1)
    double nu = 1.0;     // > 0

    /// Throws DataError unless 0 < alpha < 1 and nu > 0.
    void validate() const;
    /// Hurst exponent H with alpha = 2 - 2H.
    double hurst() const { return 1.0 - alpha / 2.0; }
};

/// Time-domain power-law autocovariance c * h^-alpha, with a lag-0 nugget.
struct AutocovSpec {
    double alpha = 0.5;
    double scale_c = 1.0;
    double nugget = 0.2;  // ratio: gamma(0) = scale_c * (1 + nugget)
};

double autocov(const AutocovSpec& spec, std::int64_t h);

/// Wavelet-domain variances nu * 2^(-alpha m), m = 1..J.
struct ScaleVariances {
    int J = 0;
    std::vector<double> var;  // var[m-1]
    double scaling_var = 0.0;  // used only when simulating; never enters the likelihood
};

ScaleVariances scale_variances(const LongMemoryParams& params, int J);

/// Per-scale coefficient counts and sums of squares of the detail coefficients.
struct SufficientStats {
    std::vector<double> count;  // count[m-1]
    std::vector<double> sumsq;  // sumsq[m-1]

    int J() const { return static_cast<int>(count.size()); }
    double total_count() const;
};

SufficientStats sufficient_stats(const WaveletDecomposition& d);

/// Gaussian log-likelihood of the detail coefficients under diag(var[m]).
double wavelet_loglik(const WaveletDecomposition& d, const LongMemoryParams& params);

/// Same value computed from sufficient statistics only.
double wavelet_loglik(const SufficientStats& stats, const LongMemoryParams& params);

/// Neumaier-compensated accumulator.
class CompensatedSum {
public:
    void add(double x);
    double value() const { return sum_ + comp_; }

private:
    double sum_ = 0.0;
    double comp_ = 0.0;
};

} // namespace longmem
