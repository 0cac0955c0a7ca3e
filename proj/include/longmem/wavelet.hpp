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

#include <Eigen/Dense>

#include <span>
#include <string>
#include <vector>

namespace longmem {

/// Orthogonal quadrature-mirror filter pair.
struct FilterBank {
    std::string name;
    std::vector<double> lowpass;
    std::vector<double> highpass;  // highpass[k] = (-1)^k lowpass[L-1-k]
    int vanishing_moments = 1;

    std::size_t length() const { return lowpass.size(); }

    static FilterBank haar();
    static FilterBank db2();
    static FilterBank db4();
    /// "haar", "db1", "db2" or "db4"; throws UsageError otherwise.
    static FilterBank by_name(const std::string& name);
};

/**
 * Dyadic decomposition. detail[0] holds scale m = 1 (finest), detail[J-1]
 * scale m = J (coarsest); `scaling` holds the level-J approximation.
 */
struct WaveletDecomposition {
    int J = 0;
    std::size_t T_dyadic = 0;
    std::vector<std::vector<double>> detail;
    std::vector<double> scaling;

    const std::vector<double>& at_scale(int m) const { return detail[static_cast<std::size_t>(m - 1)]; }
};

/// Largest power of two not exceeding n (n >= 1).
std::size_t dyadic_length(std::size_t n);

/// Default number of levels: clamp(log2(T_dyadic) - 3, 3, 8).
int default_levels(std::size_t T);

/**
 * Periodic-boundary pyramid transform of the leading dyadic prefix of y.
 * Throws DataError if 2^J exceeds the dyadic length, the filter is longer
 * than the series, or y contains non-finite values.
 */
WaveletDecomposition dwt_forward(std::span<const double> y, const FilterBank& bank, int J);

/// Exact inverse of dwt_forward for the same bank.
std::vector<double> dwt_inverse(const WaveletDecomposition& d, const FilterBank& bank);

/**
 * Explicit T x T transform matrix, rows ordered finest detail scale first
 * (translation ascending within a scale) followed by the scaling rows.
 * Built from dense per-level filter operators; intended for tests and
 * inspection only, so T above 2^16 is refused.
 */
Eigen::MatrixXd build_w_matrix(std::size_t T_dyadic, const FilterBank& bank, int J);

/// Concatenate a decomposition in build_w_matrix row order.
Eigen::VectorXd flatten(const WaveletDecomposition& d);

/// Inverse of flatten for a given (T_dyadic, J).
WaveletDecomposition unflatten(const Eigen::VectorXd& v, std::size_t T_dyadic, int J);

} // namespace longmem
