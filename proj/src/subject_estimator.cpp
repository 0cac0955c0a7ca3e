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

#include "longmem/subject_estimator.hpp"

#include "fft_internal.hpp"

#include "longmem/error.hpp"
#include "longmem/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <numbers>

namespace longmem {

void SubjectPriors::validate() const
{
    if (!(a > 0 && b > 0 && p > 0 && s > 0))
        throw UsageError("subject priors a, b, p, s must all be positive");
}

void ChainConfig::validate() const
{
    if (n_iter < 1 || n_burn < 0 || n_burn >= n_iter)
        throw UsageError("chain requires 0 <= n_burn < n_iter");
    if (thin < 1)
        throw UsageError("chain thin must be >= 1");
    if (!(proposal_sd > 0))
        throw UsageError("proposal_sd must be positive");
}

namespace {

/// sum_m sumsq[m] * r^m with r = 2^alpha, by Horner from the coarsest scale.
double weighted_sumsq(const SufficientStats& stats, double alpha)
{
    const double r = std::exp2(alpha);
    double acc = 0.0;
    for (int m = stats.J(); m >= 1; --m)
        acc = (acc + stats.sumsq[static_cast<std::size_t>(m - 1)]) * r;
    return acc;
}

double weighted_count(const SufficientStats& stats)
{
    double acc = 0.0;
    for (int m = 1; m <= stats.J(); ++m)
        acc += stats.count[static_cast<std::size_t>(m - 1)] * m;
    return acc;
}

/// log target of alpha given nu, up to a constant.
double log_alpha_target(const SufficientStats& stats, double half_ln2_nm, double alpha, double nu,
                        const SubjectPriors& pr)
{
    return alpha * half_ln2_nm - 0.5 * weighted_sumsq(stats, alpha) / nu + (pr.a - 1.0) * std::log(alpha) +
           (pr.b - 1.0) * std::log1p(-alpha);
}

/// Probability mass of N(alpha, sd^2) inside (0, 1).
double trunc_mass(double alpha, double sd)
{
    return normal_cdf((1.0 - alpha) / sd) - normal_cdf(-alpha / sd);
}

struct CachedState {
    double alpha, wss, log_a, log_b, lo, hi;

    CachedState(const SufficientStats& stats, const SubjectPriors& pr, double a, double sd)
        : alpha(a), wss(weighted_sumsq(stats, a)), log_a((pr.a - 1.0) * std::log(a)),
          log_b((pr.b - 1.0) * std::log1p(-a))
    {
        set_sd(sd);
    }

    void set_sd(double sd)
    {
        lo = normal_cdf(-alpha / sd);
        hi = normal_cdf((1.0 - alpha) / sd);
    }

    double log_target(double half_ln2_nm, double nu) const
    {
        return alpha * half_ln2_nm - 0.5 * wss / nu + log_a + log_b;
    }
};

double quantile_sorted(const std::vector<double>& sorted, double q)
{
    if (sorted.empty())
        return std::numeric_limits<double>::quiet_NaN();
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    const double w = pos - static_cast<double>(lo);
    return sorted[lo] * (1.0 - w) + sorted[hi] * w;
}

} // namespace

double sample_nu(const SufficientStats& stats, double alpha, const SubjectPriors& priors, Philox& rng)
{
    const double shape = priors.p + 0.5 * stats.total_count();
    const double rate = priors.s + 0.5 * weighted_sumsq(stats, alpha);
    return rng.inv_gamma(shape, rate);
}

AlphaStep sample_alpha(const SufficientStats& stats, double alpha, double nu, const SubjectPriors& priors,
                       double proposal_sd, Philox& rng)
{
    const double lo = normal_cdf(-alpha / proposal_sd);
    const double hi = normal_cdf((1.0 - alpha) / proposal_sd);
    const double u = lo + (hi - lo) * rng.uniform();
    const double cand = alpha + proposal_sd * normal_quantile(u);
    const double accept_u = rng.uniform();
    if (!(cand > 0.0 && cand < 1.0))
        return {alpha, false};
    const double half_ln2_nm = 0.5 * std::numbers::ln2 * weighted_count(stats);
    const double log_ratio = log_alpha_target(stats, half_ln2_nm, cand, nu, priors) -
                             log_alpha_target(stats, half_ln2_nm, alpha, nu, priors) + std::log(hi - lo) -
                             std::log(trunc_mass(cand, proposal_sd));
    if (std::log(accept_u) < log_ratio)
        return {cand, true};
    return {alpha, false};
}

VoxelChain run_voxel_chain(const SufficientStats& stats, const SubjectPriors& priors, const ChainConfig& config,
                           Philox& rng)
{
    VoxelChain chain;
    const int retained = config.n_retained();
    chain.alpha.reserve(static_cast<std::size_t>(retained));
    chain.nu.reserve(static_cast<std::size_t>(retained));

    double sd = config.proposal_sd;
    const int adapt_until = config.adapt ? config.n_burn / 2 : 0;
    constexpr int kBatch = 50;
    int batch_accepts = 0, batch_len = 0;
    long accepts = 0, counted = 0;

    // Same arithmetic as sample_nu followed by sample_alpha, with the terms that depend
    // only on the current state carried between iterations.
    const double shape = priors.p + 0.5 * stats.total_count();
    const double half_ln2_nm = 0.5 * std::numbers::ln2 * weighted_count(stats);
    CachedState cur(stats, priors, 0.5, sd);

    for (int it = 0; it < config.n_iter; ++it) {
        const double nu = rng.inv_gamma(shape, priors.s + 0.5 * cur.wss);
        const double u = cur.lo + (cur.hi - cur.lo) * rng.uniform();
        const double cand = cur.alpha + sd * normal_quantile(u);
        const double accept_u = rng.uniform();
        bool accepted = false;
        if (cand > 0.0 && cand < 1.0) {
            CachedState next(stats, priors, cand, sd);
            const double log_ratio = next.log_target(half_ln2_nm, nu) -
                                     cur.log_target(half_ln2_nm, nu) + std::log(cur.hi - cur.lo) -
                                     std::log(next.hi - next.lo);
            if (std::log(accept_u) < log_ratio) {
                cur = next;
                accepted = true;
            }
        }
        if (it < adapt_until) {
            batch_accepts += accepted;
            if (++batch_len == kBatch) {
                const double rate = static_cast<double>(batch_accepts) / kBatch;
                const double old = sd;
                if (rate < 0.2)
                    sd = std::max(sd * 0.7, 1e-4);
                else if (rate > 0.5)
                    sd = std::min(sd * 1.4, 1.0);
                if (sd != old)
                    cur.set_sd(sd);
                batch_accepts = batch_len = 0;
            }
        } else {
            accepts += accepted;
            ++counted;
        }
        if (it >= config.n_burn && (it - config.n_burn) % config.thin == 0) {
            chain.alpha.push_back(cur.alpha);
            chain.nu.push_back(nu);
        }
    }
    chain.acceptance = counted > 0 ? static_cast<double>(accepts) / static_cast<double>(counted) : 0.0;
    chain.proposal_sd = sd;
    return chain;
}

VoxelEstimate estimate_voxel(std::span<const double> y, const FilterBank& bank, int J, const SubjectPriors& priors,
                             const ChainConfig& config, Philox& rng, VoxelChain* chain_out)
{
    const std::size_t T = dyadic_length(y.size());
    std::vector<double> centered(y.begin(), y.begin() + static_cast<std::ptrdiff_t>(T));
    CompensatedSum total;
    for (double v : centered)
        total.add(v);
    const double mean = total.value() / static_cast<double>(T);
    for (auto& v : centered)
        v -= mean;

    VoxelEstimate est;
    const auto d = dwt_forward(centered, bank, J);
    const auto stats = sufficient_stats(d);
    double energy = 0.0;
    for (double s : stats.sumsq)
        energy += s;
    if (!(energy > 0.0)) {
        const double nan = std::numeric_limits<double>::quiet_NaN();
        est = {nan, nan, nan, nan, nan, nan, 0.0, 0.0, true};
        return est;
    }

    VoxelChain chain = run_voxel_chain(stats, priors, config, rng);
    const auto n = static_cast<double>(chain.alpha.size());
    CompensatedSum sa, sn;
    for (std::size_t i = 0; i < chain.alpha.size(); ++i) {
        sa.add(chain.alpha[i]);
        sn.add(chain.nu[i]);
    }
    est.alpha_mean = sa.value() / n;
    est.nu_mean = sn.value() / n;
    CompensatedSum ss;
    for (double a : chain.alpha)
        ss.add((a - est.alpha_mean) * (a - est.alpha_mean));
    est.alpha_sd = chain.alpha.size() > 1 ? std::sqrt(ss.value() / (n - 1.0)) : 0.0;
    std::vector<double> sorted = chain.alpha;
    std::sort(sorted.begin(), sorted.end());
    est.alpha_median = quantile_sorted(sorted, 0.5);
    est.alpha_q05 = quantile_sorted(sorted, 0.05);
    est.alpha_q95 = quantile_sorted(sorted, 0.95);
    est.acceptance = chain.acceptance;
    est.ess = chain.alpha.size() >= 2 ? effective_sample_size(chain.alpha) : n;
    if (chain_out)
        *chain_out = std::move(chain);
    return est;
}

LongMemoryMap estimate_subject(const Dataset4D& dataset, const FilterBank& bank, int J, const SubjectPriors& priors,
                               const ChainConfig& config, std::uint32_t subject_index, unsigned threads,
                               const std::vector<std::int64_t>* sample_voxels, std::vector<VoxelChain>* chains)
{
    priors.validate();
    config.validate();
    if ((std::size_t{1} << J) > dyadic_length(static_cast<std::size_t>(dataset.T)))
        throw DataError("J too large for the series length of " + dataset.subject_id);
    const auto nv = static_cast<std::size_t>(dataset.n_voxels());
    LongMemoryMap map;
    map.subject_id = dataset.subject_id;
    map.alpha_mean.resize(nv);
    map.alpha_median.resize(nv);
    map.alpha_sd.resize(nv);
    map.nu_mean.resize(nv);
    map.acceptance.resize(nv);
    map.ess.resize(nv);
    std::vector<char> degenerate(nv, 0);

    std::vector<std::int64_t> wanted = sample_voxels ? *sample_voxels : std::vector<std::int64_t>{};
    if (chains)
        chains->assign(wanted.size(), VoxelChain{});

    const std::uint64_t key = derive_seed(config.seed, kEstimateStreamTag);
    parallel_for(nv, threads, [&](std::size_t v) {
        Philox rng(key, subject_index, static_cast<std::uint32_t>(v));
        VoxelChain chain;
        const bool keep = chains && std::find(wanted.begin(), wanted.end(), static_cast<std::int64_t>(v)) != wanted.end();
        const auto est =
            estimate_voxel(dataset.series(static_cast<std::int64_t>(v)), bank, J, priors, config, rng, keep ? &chain : nullptr);
        map.alpha_mean[v] = est.alpha_mean;
        map.alpha_median[v] = est.alpha_median;
        map.alpha_sd[v] = est.alpha_sd;
        map.nu_mean[v] = est.nu_mean;
        map.acceptance[v] = est.acceptance;
        map.ess[v] = est.ess;
        degenerate[v] = est.degenerate;
        if (keep) {
            for (std::size_t k = 0; k < wanted.size(); ++k)
                if (wanted[k] == static_cast<std::int64_t>(v))
                    (*chains)[k] = chain;
        }
    });
    for (std::size_t v = 0; v < nv; ++v)
        if (degenerate[v])
            map.degenerate.push_back(static_cast<std::int64_t>(v));
    return map;
}

std::vector<std::pair<double, double>> log_periodogram(std::span<const double> y)
{
    const std::size_t T = y.size();
    double mean = 0.0;
    for (double v : y)
        mean += v;
    mean /= static_cast<double>(T);
    std::vector<std::complex<double>> x(T);
    for (std::size_t t = 0; t < T; ++t)
        x[t] = y[t] - mean;
    detail::fft_inplace(x);
    std::vector<std::pair<double, double>> out;
    for (std::size_t k = 1; k <= T / 2; ++k) {
        const double power = std::norm(x[k]) / static_cast<double>(T);
        if (power <= 0.0)
            continue;
        out.emplace_back(std::log10(static_cast<double>(k) / static_cast<double>(T)), std::log10(power));
    }
    return out;
}

SlopeFit spectral_slope_screen(std::span<const double> y, std::optional<std::pair<double, double>> band)
{
    if (y.size() < 64)
        throw DataError("spectral slope screen needs at least 64 points");
    for (double v : y)
        if (!std::isfinite(v))
            throw DataError("non-finite value in spectral slope input");
    const double fmin = std::log10(1.0 / static_cast<double>(y.size()));
    const double fmax = std::log10(0.5);
    const auto [lo, hi] = band.value_or(std::make_pair(0.5 * (fmin + fmax), fmax));
    const auto pg = log_periodogram(y);
    double sx = 0, sy = 0, sxx = 0, sxy = 0, syy = 0;
    int n = 0;
    for (const auto& [lf, lp] : pg) {
        if (lf < lo - 1e-12 || lf > hi + 1e-12)
            continue;
        sx += lf;
        sy += lp;
        sxx += lf * lf;
        sxy += lf * lp;
        syy += lp * lp;
        ++n;
    }
    if (n < 8)
        throw DataError("spectral slope band contains fewer than 8 Fourier frequencies");
    SlopeFit fit;
    fit.n_freq = n;
    const double cxx = sxx - sx * sx / n;
    const double cxy = sxy - sx * sy / n;
    const double cyy = syy - sy * sy / n;
    fit.slope = cxy / cxx;
    fit.intercept = (sy - fit.slope * sx) / n;
    fit.r2 = cyy > 0 ? (cxy * cxy) / (cxx * cyy) : 0.0;
    return fit;
}

namespace {

struct AcfEngine {
    std::vector<double> centered;
    double c0 = 0.0;

    explicit AcfEngine(std::span<const double> draws)
    {
        const auto n = static_cast<double>(draws.size());
        CompensatedSum s;
        for (double d : draws)
            s.add(d);
        const double mean = s.value() / n;
        centered.resize(draws.size());
        for (std::size_t i = 0; i < draws.size(); ++i)
            centered[i] = draws[i] - mean;
        for (double c : centered)
            c0 += c * c;
        c0 /= n;
    }
    bool constant() const { return !(c0 > 0.0); }
    double rho(std::size_t lag) const
    {
        const std::size_t n = centered.size();
        double acc = 0.0;
        for (std::size_t i = 0; i + lag < n; ++i)
            acc += centered[i] * centered[i + lag];
        return acc / static_cast<double>(n) / c0;
    }
    double ess() const
    {
        const std::size_t n = centered.size();
        if (constant())
            return 1.0;
        double tau = -1.0;  // tau = -rho_0 + 2 sum_k Gamma_k, Gamma_k = rho_2k + rho_2k+1
        for (std::size_t k = 0; 2 * k + 1 < n; ++k) {
            const double gamma = rho(2 * k) + rho(2 * k + 1);
            if (gamma <= 0.0)
                break;
            tau += 2.0 * gamma;
        }
        tau = std::max(tau, 1.0 / static_cast<double>(n));
        return std::min(static_cast<double>(n), static_cast<double>(n) / tau);
    }
};

} // namespace

double effective_sample_size(std::span<const double> draws)
{
    if (draws.size() < 2)
        return static_cast<double>(draws.size());
    return AcfEngine(draws).ess();
}

ChainDiagnostics chain_diagnostics(std::span<const double> draws, int max_lag, int bins)
{
    if (draws.size() < 100)
        throw DataError("chain diagnostics need at least 100 retained draws");
    ChainDiagnostics out;
    out.trace.assign(draws.begin(), draws.end());
    const AcfEngine eng(draws);
    const auto L = std::min<std::size_t>(static_cast<std::size_t>(std::max(max_lag, 0)), draws.size() - 1);
    out.acf.resize(L + 1);
    out.degenerate = eng.constant();
    for (std::size_t k = 0; k <= L; ++k)
        out.acf[k] = out.degenerate ? 1.0 : eng.rho(k);
    out.ess = eng.ess();

    const auto [mn, mx] = std::minmax_element(draws.begin(), draws.end());
    const double lo = *mn;
    const double hi = *mx > *mn ? *mx : *mn + 1.0;
    out.density_edges.resize(static_cast<std::size_t>(bins) + 1);
    for (int i = 0; i <= bins; ++i)
        out.density_edges[static_cast<std::size_t>(i)] = lo + (hi - lo) * i / bins;
    out.density_counts.assign(static_cast<std::size_t>(bins), 0);
    for (double d : draws) {
        auto idx = static_cast<int>((d - lo) / (hi - lo) * bins);
        idx = std::clamp(idx, 0, bins - 1);
        ++out.density_counts[static_cast<std::size_t>(idx)];
    }
    return out;
}

} // namespace longmem
