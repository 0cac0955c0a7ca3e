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

#include "longmem/simulate.hpp"

#include "fft_internal.hpp"

#include "longmem/error.hpp"
#include "longmem/log.hpp"
#include "longmem/parallel.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <complex>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

namespace longmem {

namespace {

using detail::fft_inplace;

// Square-root eigenvalue scales of the circulant embedding, empty when it is
// not nonnegative definite. Subjects reuse a handful of specs, so the last
// few are kept per thread.
const std::vector<double>& embedding_scales(const AutocovSpec& spec, std::size_t T)
{
    struct Entry {
        double alpha, scale_c, nugget;
        std::size_t T;
        std::vector<double> scales;
    };
    thread_local std::vector<Entry> cache;
    for (const auto& e : cache)
        if (e.alpha == spec.alpha && e.scale_c == spec.scale_c && e.nugget == spec.nugget && e.T == T)
            return e.scales;

    const std::size_t M = std::max<std::size_t>(2, std::bit_ceil(2 * (T - 1)));
    std::vector<std::complex<double>> c(M);
    for (std::size_t k = 0; k < M; ++k)
        c[k] = autocov(spec, static_cast<std::int64_t>(std::min(k, M - k)));
    fft_inplace(c);
    double lmax = 0.0, lmin = 0.0;
    for (const auto& v : c) {
        lmax = std::max(lmax, v.real());
        lmin = std::min(lmin, v.real());
    }
    std::vector<double> scales;
    if (lmin >= -1e-10 * lmax) {
        scales.resize(M);
        for (std::size_t k = 0; k < M; ++k)
            scales[k] = std::sqrt(std::max(c[k].real(), 0.0) / static_cast<double>(M));
    }
    if (cache.size() >= 16)
        cache.erase(cache.begin());
    cache.push_back({spec.alpha, spec.scale_c, spec.nugget, T, std::move(scales)});
    return cache.back().scales;
}

bool circulant_draw(const AutocovSpec& spec, std::size_t T, Philox& rng, std::vector<double>& out)
{
    const std::vector<double>& scales = embedding_scales(spec, T);
    if (scales.empty())
        return false;
    const std::size_t M = scales.size();
    std::vector<std::complex<double>> z(M);
    for (std::size_t k = 0; k < M; ++k) {
        const double re = rng.normal();
        const double im = rng.normal();
        z[k] = scales[k] * std::complex<double>(re, im);
    }
    fft_inplace(z);
    out.resize(T);
    for (std::size_t t = 0; t < T; ++t)
        out[t] = z[t].real();
    return true;
}

bool dense_draw(const AutocovSpec& spec, std::size_t T, Philox& rng, std::vector<double>& out)
{
    const auto n = static_cast<Eigen::Index>(T);
    Eigen::MatrixXd cov(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j)
            cov(i, j) = autocov(spec, i - j);
    Eigen::LLT<Eigen::MatrixXd> llt(cov);
    if (llt.info() != Eigen::Success)
        return false;
    Eigen::VectorXd z(n);
    for (Eigen::Index i = 0; i < n; ++i)
        z(i) = rng.normal();
    const Eigen::VectorXd x = llt.matrixL() * z;
    out.assign(x.data(), x.data() + n);
    return true;
}

} // namespace

std::vector<double> simulate_wavelet_domain(const LongMemoryParams& params, std::size_t T_dyadic, int J, Philox& rng,
                                            const FilterBank& bank)
{
    if (std::bit_floor(T_dyadic) != T_dyadic)
        throw DataError("simulate_wavelet_domain: T must be a power of two");
    if (!(params.alpha > 0.0 && params.alpha < 1.0) || !(params.nu >= 0.0))
        throw DataError("simulate_wavelet_domain: invalid parameters");
    if (J < 1 || (std::size_t{1} << J) > T_dyadic)
        throw DataError("simulate_wavelet_domain: J too large for T");
    const auto sv = scale_variances(params, J);
    WaveletDecomposition d;
    d.J = J;
    d.T_dyadic = T_dyadic;
    d.detail.resize(static_cast<std::size_t>(J));
    for (int m = 1; m <= J; ++m) {
        const double sd = std::sqrt(sv.var[static_cast<std::size_t>(m - 1)]);
        auto& det = d.detail[static_cast<std::size_t>(m - 1)];
        det.resize(T_dyadic >> m);
        for (auto& x : det)
            x = sd * rng.normal();
    }
    const double sd = std::sqrt(sv.scaling_var);
    d.scaling.resize(T_dyadic >> J);
    for (auto& x : d.scaling)
        x = sd * rng.normal();
    return dwt_inverse(d, bank);
}

std::vector<double> simulate_wavelet_domain(const LongMemoryParams& params, std::size_t T_dyadic, int J,
                                            std::uint64_t seed, const FilterBank& bank)
{
    Philox rng(seed);
    return simulate_wavelet_domain(params, T_dyadic, J, rng, bank);
}

PowerlawDraw simulate_powerlaw_time(const AutocovSpec& spec, std::size_t T, Philox& rng, EmbeddingMethod method)
{
    if (T < 1 || T > (std::size_t{1} << 15))
        throw DataError("simulate_powerlaw_time: T must be in [1, 2^15]");
    if (!(spec.alpha > 0.0) || !(spec.scale_c > 0.0) || !(spec.nugget >= 0.0))
        throw DataError("simulate_powerlaw_time: invalid autocovariance spec");
    PowerlawDraw draw;
    draw.nugget_used = spec.nugget;
    if (T == 1) {
        draw.series = {std::sqrt(autocov(spec, 0)) * rng.normal()};
        return draw;
    }
    AutocovSpec s = spec;
    if (method != EmbeddingMethod::dense) {
        for (int attempt = 0; attempt <= 3; ++attempt) {
            if (circulant_draw(s, T, rng, draw.series)) {
                draw.nugget_used = s.nugget;
                return draw;
            }
            if (method == EmbeddingMethod::circulant)
                throw NumericError("circulant embedding is not nonnegative definite");
            if (attempt < 3)
                s.nugget = s.nugget > 0.0 ? 2.0 * s.nugget : 0.05;
        }
        log::debug("circulant embedding failed after nugget escalation; using dense factorization");
    }
    if (!dense_draw(s, T, rng, draw.series))
        throw NumericError("power-law covariance is not positive definite even after nugget escalation");
    draw.nugget_used = s.nugget;
    draw.used_dense = true;
    return draw;
}

Eigen::MatrixXd subject_alpha_fields(const SyntheticSubjectSpec& spec, const std::vector<GroupEffectSpec>& effects,
                                     const CovariateTable& covariates, std::int64_t* clamp_events)
{
    const auto nv = static_cast<Eigen::Index>(spec.mask.size());
    if (static_cast<Eigen::Index>(spec.alpha_field.size()) != nv)
        throw DataError("alpha_field length does not match the mask");
    for (double a : spec.alpha_field)
        if (!(a > 0.02 && a < 0.98))
            throw DataError("baseline alpha_field must lie within (0.02, 0.98)");
    const Eigen::Index n = covariates.N();
    Eigen::MatrixXd alpha(n, nv);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index v = 0; v < nv; ++v)
            alpha(i, v) = spec.alpha_field[static_cast<std::size_t>(v)];

    for (const auto& e : effects) {
        auto col = std::find(covariates.column_names.begin(), covariates.column_names.end(), e.covariate_name);
        if (col == covariates.column_names.end())
            throw DataError("effect refers to unknown covariate '" + e.covariate_name + "'");
        const auto j = static_cast<Eigen::Index>(col - covariates.column_names.begin());
        auto roi = std::find(spec.parcellation.roi_ids.begin(), spec.parcellation.roi_ids.end(), e.target_roi);
        if (roi == spec.parcellation.roi_ids.end())
            throw DataError("effect refers to unknown ROI " + std::to_string(e.target_roi));
        const auto& members = spec.parcellation.members[static_cast<std::size_t>(roi - spec.parcellation.roi_ids.begin())];
        for (Eigen::Index i = 0; i < n; ++i)
            for (auto v : members)
                alpha(i, v) += e.effect_size * covariates.Z(i, j);
    }

    std::int64_t clamped = 0;
    for (Eigen::Index k = 0; k < alpha.size(); ++k) {
        double& a = alpha.data()[k];
        if (a < 0.02 || a > 0.98) {
            a = std::clamp(a, 0.02, 0.98);
            ++clamped;
        }
    }
    if (clamp_events)
        *clamp_events = clamped;
    if (alpha.size() > 0 && static_cast<double>(clamped) > 0.05 * static_cast<double>(alpha.size()))
        throw DataError("more than 5% of simulated alpha values were clamped; rescale the effects");
    if (clamped > 0)
        log::warn("clamped " + std::to_string(clamped) + " simulated alpha value(s) into [0.02, 0.98]");
    return alpha;
}

GroundTruth ground_truth(const SyntheticSubjectSpec& spec, const std::vector<GroupEffectSpec>& effects,
                         const CovariateTable& covariates)
{
    GroundTruth gt;
    const auto nv = static_cast<Eigen::Index>(spec.mask.size());
    gt.beta = Eigen::MatrixXd::Zero(nv, covariates.Q());
    gt.column_names = covariates.column_names;
    for (Eigen::Index v = 0; v < nv; ++v)
        gt.beta(v, 0) = spec.alpha_field[static_cast<std::size_t>(v)];
    for (const auto& e : effects) {
        auto col = std::find(covariates.column_names.begin(), covariates.column_names.end(), e.covariate_name);
        if (col == covariates.column_names.end())
            throw DataError("effect refers to unknown covariate '" + e.covariate_name + "'");
        const auto j = static_cast<Eigen::Index>(col - covariates.column_names.begin());
        auto roi = std::find(spec.parcellation.roi_ids.begin(), spec.parcellation.roi_ids.end(), e.target_roi);
        if (roi == spec.parcellation.roi_ids.end())
            throw DataError("effect refers to unknown ROI " + std::to_string(e.target_roi));
        for (auto v : spec.parcellation.members[static_cast<std::size_t>(roi - spec.parcellation.roi_ids.begin())])
            gt.beta(v, j) += e.effect_size;
    }
    return gt;
}

Dataset4D simulate_subject(const SyntheticSubjectSpec& spec, const Eigen::MatrixXd& alpha_fields, std::size_t subject,
                           const std::string& subject_id, std::uint64_t seed, unsigned threads)
{
    const std::size_t T = dyadic_length(spec.T);
    if (T != spec.T)
        throw DataError("synthetic series length must be a power of two");
    const int J = spec.J > 0 ? spec.J : default_levels(T);
    const auto bank = FilterBank::by_name(spec.bank);
    const auto nv = static_cast<std::size_t>(spec.mask.size());
    if (spec.nu_field.size() != nv)
        throw DataError("nu_field length does not match the mask");
    Dataset4D ds;
    ds.grid = spec.grid;
    ds.T = static_cast<std::int64_t>(T);
    ds.subject_id = subject_id;
    ds.data.resize(nv * T);
    const std::uint64_t key = derive_seed(seed, kSimulateStreamTag);
    parallel_for(nv, threads, [&](std::size_t v) {
        Philox rng(key, static_cast<std::uint32_t>(subject), static_cast<std::uint32_t>(v));
        const LongMemoryParams p{alpha_fields(static_cast<Eigen::Index>(subject), static_cast<Eigen::Index>(v)),
                                 spec.nu_field[v]};
        const auto y = simulate_wavelet_domain(p, T, J, rng, bank);
        std::copy(y.begin(), y.end(), ds.data.begin() + static_cast<std::ptrdiff_t>(v * T));
    });
    return ds;
}

GroupStudy simulate_group_study(const SyntheticSubjectSpec& spec, const std::vector<GroupEffectSpec>& effects,
                                const CovariateTable& covariates, std::uint64_t seed, unsigned threads)
{
    GroupStudy study;
    study.truth = ground_truth(spec, effects, covariates);
    const Eigen::MatrixXd alpha = subject_alpha_fields(spec, effects, covariates, &study.truth.clamp_events);
    for (Eigen::Index i = 0; i < covariates.N(); ++i)
        study.subjects.push_back(simulate_subject(spec, alpha, static_cast<std::size_t>(i),
                                                  covariates.subject_ids[static_cast<std::size_t>(i)], seed, threads));
    return study;
}

CovariateTable simulate_covariates(std::size_t n_subjects, const CovariateSimSpec& spec, std::uint64_t seed)
{
    if (n_subjects < 3)
        throw UsageError("simulate_covariates needs at least 3 subjects");
    if (!(spec.age_min < spec.age_max) || !(spec.medication_rate > 0.0 && spec.medication_rate < 1.0) ||
        !(spec.adhd_index_sd > 0.0))
        throw UsageError("invalid covariate simulation settings");
    const auto n = static_cast<Eigen::Index>(n_subjects);
    CovariateTable t;
    t.column_names = {"intercept", "age", "medication", "adhd_index", "adhd_x_medication"};
    t.Z.resize(n, 5);
    Philox rng(derive_seed(seed, kCovariateStreamTag));
    for (int attempt = 0;; ++attempt) {
        for (Eigen::Index i = 0; i < n; ++i) {
            const double age = spec.age_min + (spec.age_max - spec.age_min) * rng.uniform();
            const double med = rng.uniform() < spec.medication_rate ? 1.0 : 0.0;
            const double adhd = std::clamp(spec.adhd_index_mean + spec.adhd_index_sd * rng.normal(), 19.0, 90.0);
            t.Z.row(i) << 1.0, age, med, adhd, adhd * med;
        }
        const Eigen::VectorXd med = t.Z.col(2);
        if (med.minCoeff() != med.maxCoeff())
            break;
        if (attempt > 100)
            throw DataError("could not draw a non-constant medication column");
    }
    for (Eigen::Index i = 0; i < n; ++i) {
        char id[32];
        std::snprintf(id, sizeof id, "sub-%03lld", static_cast<long long>(i + 1));
        t.subject_ids.emplace_back(id);
    }
    return t;
}

void write_ground_truth(const std::filesystem::path& path, const GroundTruth& truth)
{
    std::ofstream out(path, std::ios::trunc);
    if (!out)
        throw DataError("cannot write " + path.string());
    out.precision(17);
    out << "voxel,covariate,beta\n";
    for (Eigen::Index v = 0; v < truth.beta.rows(); ++v)
        for (Eigen::Index j = 0; j < truth.beta.cols(); ++j)
            out << v << ',' << truth.column_names[static_cast<std::size_t>(j)] << ',' << truth.beta(v, j) << '\n';
}

GroundTruth read_ground_truth(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw DataError("cannot open ground truth " + path.string());
    std::string line;
    std::getline(in, line);
    if (line != "voxel,covariate,beta")
        throw DataError("unexpected ground-truth header in " + path.string());
    std::vector<std::string> names;
    std::map<std::string, std::size_t> slot;
    std::vector<std::tuple<std::int64_t, std::size_t, double>> rows;
    std::int64_t max_v = -1;
    while (std::getline(in, line)) {
        if (line.empty())
            continue;
        std::istringstream ls(line);
        std::string v, c, b;
        if (!std::getline(ls, v, ',') || !std::getline(ls, c, ',') || !std::getline(ls, b))
            throw DataError("malformed ground-truth row: " + line);
        if (!slot.count(c)) {
            slot[c] = names.size();
            names.push_back(c);
        }
        const auto vi = static_cast<std::int64_t>(std::stoll(v));
        max_v = std::max(max_v, vi);
        rows.emplace_back(vi, slot[c], std::stod(b));
    }
    GroundTruth gt;
    gt.column_names = names;
    gt.beta = Eigen::MatrixXd::Zero(max_v + 1, static_cast<Eigen::Index>(names.size()));
    for (const auto& [v, j, b] : rows)
        gt.beta(v, static_cast<Eigen::Index>(j)) = b;
    return gt;
}

Parcellation voronoi_parcellation(const VolumeGrid& grid, int n_rois, std::uint64_t seed)
{
    if (n_rois < 1 || n_rois > grid.n_voxels())
        throw DataError("voronoi_parcellation: ROI count out of range");
    Philox rng(seed);
    std::vector<std::int64_t> seeds;
    while (static_cast<int>(seeds.size()) < n_rois) {
        const auto s = static_cast<std::int64_t>(rng.uniform() * static_cast<double>(grid.n_voxels()));
        if (std::find(seeds.begin(), seeds.end(), s) == seeds.end())
            seeds.push_back(s);
    }
    std::vector<Eigen::Vector3d> centers;
    for (auto s : seeds) {
        const auto c = grid.coords(s);
        centers.emplace_back(double(c[0]), double(c[1]), double(c[2]));
    }
    Parcellation p;
    p.grid = grid;
    p.label.resize(static_cast<std::size_t>(grid.n_voxels()));
    for (std::int64_t i = 0; i < grid.n_voxels(); ++i) {
        const auto c = grid.coords(i);
        const Eigen::Vector3d x{static_cast<double>(c[0]), static_cast<double>(c[1]), static_cast<double>(c[2])};
        int best = 0;
        double bd = std::numeric_limits<double>::infinity();
        for (int r = 0; r < n_rois; ++r) {
            const double d = (centers[static_cast<std::size_t>(r)] - x).squaredNorm();
            if (d < bd) {
                bd = d;
                best = r;
            }
        }
        p.label[static_cast<std::size_t>(i)] = best + 1;
    }
    for (int r = 1; r <= n_rois; ++r)
        p.roi_ids.push_back(r);
    return p;
}

Parcellation octant_parcellation(const VolumeGrid& grid)
{
    for (auto d : grid.dims)
        if (d % 2 != 0)
            throw DataError("octant_parcellation requires even grid dimensions");
    Parcellation p;
    p.grid = grid;
    p.label.resize(static_cast<std::size_t>(grid.n_voxels()));
    for (std::int64_t i = 0; i < grid.n_voxels(); ++i) {
        const auto c = grid.coords(i);
        const int oct = (c[0] >= grid.dims[0] / 2 ? 1 : 0) + (c[1] >= grid.dims[1] / 2 ? 2 : 0) +
                        (c[2] >= grid.dims[2] / 2 ? 4 : 0);
        p.label[static_cast<std::size_t>(i)] = oct + 1;
    }
    p.roi_ids = {1, 2, 3, 4, 5, 6, 7, 8};
    return p;
}

} // namespace longmem
