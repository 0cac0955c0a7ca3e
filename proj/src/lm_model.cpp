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

#include "longmem/lm_model.hpp"

#include "longmem/error.hpp"

#include <cmath>
#include <numbers>

namespace longmem {

void LongMemoryParams::validate() const
{
    if (!(alpha > 0.0 && alpha < 1.0))
        throw DataError("long-memory alpha must lie in (0, 1)");
    if (!(nu > 0.0) || !std::isfinite(nu))
        throw DataError("innovation variance nu must be positive");
}

double autocov(const AutocovSpec& spec, std::int64_t h)
{
    if (h < 0)
        h = -h;
    if (h == 0)
        return spec.scale_c * (1.0 + spec.nugget);
    return spec.scale_c * std::pow(static_cast<double>(h), -spec.alpha);
}

ScaleVariances scale_variances(const LongMemoryParams& params, int J)
{
    ScaleVariances sv;
    sv.J = J;
    sv.var.resize(static_cast<std::size_t>(J));
    for (int m = 1; m <= J; ++m)
        sv.var[static_cast<std::size_t>(m - 1)] = params.nu * std::exp2(-params.alpha * m);
    sv.scaling_var = J > 0 ? sv.var.back() : params.nu;
    return sv;
}

void CompensatedSum::add(double x)
{
    const double t = sum_ + x;
    if (std::fabs(sum_) >= std::fabs(x))
        comp_ += (sum_ - t) + x;
    else
        comp_ += (x - t) + sum_;
    sum_ = t;
}

double SufficientStats::total_count() const
{
    double n = 0;
    for (double c : count)
        n += c;
    return n;
}

SufficientStats sufficient_stats(const WaveletDecomposition& d)
{
    SufficientStats s;
    s.count.resize(static_cast<std::size_t>(d.J));
    s.sumsq.resize(static_cast<std::size_t>(d.J));
    for (int m = 1; m <= d.J; ++m) {
        const auto& det = d.at_scale(m);
        CompensatedSum acc;
        for (double x : det)
            acc.add(x * x);
        s.count[static_cast<std::size_t>(m - 1)] = static_cast<double>(det.size());
        s.sumsq[static_cast<std::size_t>(m - 1)] = acc.value();
    }
    return s;
}

double wavelet_loglik(const WaveletDecomposition& d, const LongMemoryParams& params)
{
    const auto sv = scale_variances(params, d.J);
    const double log2pi = std::log(2.0 * std::numbers::pi);
    CompensatedSum acc;
    for (int m = 1; m <= d.J; ++m) {
        const double v = sv.var[static_cast<std::size_t>(m - 1)];
        const double logv = log2pi + std::log(v);
        for (double x : d.at_scale(m))
            acc.add(-0.5 * (logv + x * x / v));
    }
    return acc.value();
}

double wavelet_loglik(const SufficientStats& stats, const LongMemoryParams& params)
{
    const auto sv = scale_variances(params, stats.J());
    const double log2pi = std::log(2.0 * std::numbers::pi);
    CompensatedSum acc;
    for (int m = 1; m <= stats.J(); ++m) {
        const auto i = static_cast<std::size_t>(m - 1);
        acc.add(-0.5 * (stats.count[i] * (log2pi + std::log(sv.var[i])) + stats.sumsq[i] / sv.var[i]));
    }
    return acc.value();
}

} // namespace longmem
