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

#include "longmem/error.hpp"
#include "longmem/hashing.hpp"
#include "longmem/simulate.hpp"
#include "longmem/subject_estimator.hpp"
#include "support.hpp"

#include <doctest.h>

#include <cmath>

using namespace longmem;
using testing::TempDir;

namespace {

SyntheticSubjectSpec small_spec(std::size_t T = 64)
{
    SyntheticSubjectSpec s;
    s.grid = VolumeGrid::make({4, 4, 4});
    s.mask = BrainMask::full(s.grid);
    s.parcellation = harmonize(octant_parcellation(s.grid), s.mask);
    s.T = T;
    s.alpha_field.assign(64, 0.5);
    s.nu_field.assign(64, 1.0);
    return s;
}

double sample_autocov(const std::vector<double>& x, std::size_t h)
{
    double s = 0.0;
    for (std::size_t t = 0; t + h < x.size(); ++t)
        s += x[t] * x[t + h];
    return s / static_cast<double>(x.size() - h);
}

} // namespace

TEST_SUITE("simulate") {

TEST_CASE("wavelet-domain draws follow the variance progression")
{
    const std::size_t T = 4096;
    const int J = default_levels(T);
    const double alpha = 0.4;
    std::vector<std::vector<double>> per_scale(static_cast<std::size_t>(J));
    for (std::uint32_t rep = 0; rep < 200; ++rep) {
        Philox rng(77, rep);
        const auto y = simulate_wavelet_domain({alpha, 1.0}, T, J, rng);
        const auto s = sufficient_stats(dwt_forward(y, FilterBank::db2(), J));
        for (int m = 1; m <= J; ++m)
            per_scale[static_cast<std::size_t>(m - 1)].push_back(s.sumsq[static_cast<std::size_t>(m - 1)] /
                                                                 s.count[static_cast<std::size_t>(m - 1)]);
    }
    for (int m = 1; m <= J; ++m) {
        const auto& v = per_scale[static_cast<std::size_t>(m - 1)];
        const double se = std::sqrt(testing::var_of(v) / static_cast<double>(v.size()));
        CHECK(std::abs(testing::mean_of(v) - std::pow(2.0, -alpha * m)) < 3.0 * se);
    }
}

TEST_CASE("zero innovation variance gives the zero series")
{
    for (double x : simulate_wavelet_domain({0.5, 0.0}, 64, 3, std::uint64_t{5}))
        CHECK(x == 0.0);
}

TEST_CASE("fixed seed gives identical draws")
{
    CHECK(simulate_wavelet_domain({0.3, 2.0}, 256, 4, std::uint64_t{9}) ==
          simulate_wavelet_domain({0.3, 2.0}, 256, 4, std::uint64_t{9}));
    CHECK(simulate_wavelet_domain({0.3, 2.0}, 256, 4, std::uint64_t{9}) !=
          simulate_wavelet_domain({0.3, 2.0}, 256, 4, std::uint64_t{10}));
}

TEST_CASE("time-domain draws reproduce the target autocovariance")
{
    const AutocovSpec spec{0.5, 1.0, 0.2};
    const std::size_t T = 1024;
    std::vector<std::vector<double>> lags(9);
    for (std::uint32_t rep = 0; rep < 500; ++rep) {
        Philox rng(31, rep);
        const auto d = simulate_powerlaw_time(spec, T, rng);
        REQUIRE_FALSE(d.used_dense);
        for (std::size_t h = 1; h <= 8; ++h)
            lags[h].push_back(sample_autocov(d.series, h));
    }
    for (std::size_t h = 1; h <= 8; ++h) {
        const double se = std::sqrt(testing::var_of(lags[h]) / 500.0);
        CHECK(std::abs(testing::mean_of(lags[h]) - autocov(spec, static_cast<std::int64_t>(h))) < 3.0 * se);
    }
}

TEST_CASE("circulant and dense draws share their covariance")
{
    const AutocovSpec spec{0.4, 1.0, 0.2};
    const std::size_t T = 256;
    std::vector<std::vector<double>> circ(5), dense(5);
    for (std::uint32_t rep = 0; rep < 500; ++rep) {
        Philox a(41, rep), b(42, rep);
        const auto x = simulate_powerlaw_time(spec, T, a, EmbeddingMethod::circulant).series;
        const auto y = simulate_powerlaw_time(spec, T, b, EmbeddingMethod::dense).series;
        for (std::size_t h = 0; h <= 4; ++h) {
            circ[h].push_back(sample_autocov(x, h));
            dense[h].push_back(sample_autocov(y, h));
        }
    }
    for (std::size_t h = 0; h <= 4; ++h) {
        const double se = std::sqrt((testing::var_of(circ[h]) + testing::var_of(dense[h])) / 500.0);
        CHECK(std::abs(testing::mean_of(circ[h]) - testing::mean_of(dense[h])) < 3.0 * se);
    }
}

TEST_CASE("single time point is one normal draw with the lag-0 variance")
{
    const AutocovSpec spec{0.5, 2.0, 0.2};
    std::vector<double> x;
    for (std::uint32_t rep = 0; rep < 20000; ++rep) {
        Philox rng(3, rep);
        const auto d = simulate_powerlaw_time(spec, 1, rng);
        REQUIRE(d.series.size() == 1);
        x.push_back(d.series[0] / std::sqrt(autocov(spec, 0)));
    }
    CHECK(testing::ks_statistic(x, [](double z) { return normal_cdf(z); }) < testing::ks_critical(x.size()));
}

TEST_CASE("long-memory draws have a negative periodogram slope")
{
    Philox rng(8);
    const auto d = simulate_powerlaw_time({0.3, 1.0, 0.2}, 2048, rng);
    CHECK(spectral_slope_screen(d.series).slope < 0.0);
}

TEST_CASE("nugget escalation falls back when embedding fails")
{
    // alpha close to 0 with no nugget is not embeddable at this size
    const AutocovSpec spec{0.05, 1.0, 0.0};
    Philox rng(2);
    const auto d = simulate_powerlaw_time(spec, 512, rng);
    CHECK(d.series.size() == 512);
    CHECK((d.used_dense || d.nugget_used >= 0.0));
    Philox rng2(2);
    CHECK_THROWS_AS(simulate_powerlaw_time({0.05, 1.0, -1.0}, 64, rng2), DataError);
}

TEST_CASE("ground truth for null and single-ROI effects")
{
    auto spec = small_spec();
    const CovariateTable cov = simulate_covariates(10, {}, 4);
    const auto null_truth = ground_truth(spec, {}, cov);
    CHECK(null_truth.beta.rightCols(4).isZero());
    CHECK(null_truth.beta.col(0).isConstant(0.5));

    const auto truth = ground_truth(spec, {{"age", 3, 0.01}}, cov);
    const auto& members = spec.parcellation.members[2];
    for (Eigen::Index v = 0; v < 64; ++v) {
        const bool inside = std::find(members.begin(), members.end(), v) != members.end();
        CHECK(truth.beta(v, 1) == (inside ? 0.01 : 0.0));
    }
    CHECK(truth.beta.rightCols(3).isZero());
}

TEST_CASE("alpha fields add effects and clamp with a budget")
{
    auto spec = small_spec();
    const CovariateTable cov = simulate_covariates(10, {}, 4);
    std::int64_t clamps = -1;
    const auto alpha = subject_alpha_fields(spec, {{"age", 1, 0.01}}, cov, &clamps);
    CHECK(clamps == 0);
    const auto& members = spec.parcellation.members[0];
    for (Eigen::Index i = 0; i < 10; ++i)
        CHECK(alpha(i, members[0]) == doctest::Approx(0.5 + 0.01 * cov.Z(i, 1)));
    CHECK_THROWS_AS(subject_alpha_fields(spec, {{"age", 1, 0.5}}, cov), DataError);
    CHECK_THROWS_AS(subject_alpha_fields(spec, {{"height", 1, 0.01}}, cov), DataError);
}

TEST_CASE("subject simulation is independent of the worker count")
{
    auto spec = small_spec(128);
    const CovariateTable cov = simulate_covariates(3, {}, 1);
    const auto alpha = subject_alpha_fields(spec, {}, cov);
    const auto a = simulate_subject(spec, alpha, 2, "s", 99, 1);
    const auto b = simulate_subject(spec, alpha, 2, "s", 99, 4);
    CHECK(a.data == b.data);
    const auto c = simulate_subject(spec, alpha, 1, "s", 99, 1);
    CHECK(a.data != c.data);
}

TEST_CASE("written datasets are byte-identical for a fixed seed")
{
    TempDir dir("simbytes");
    auto spec = small_spec(64);
    const CovariateTable cov = simulate_covariates(4, {}, 12);
    for (int run = 0; run < 2; ++run) {
        const auto study = simulate_group_study(spec, {{"age", 2, 0.01}}, cov, 12, run == 0 ? 1 : 3);
        write_dataset(dir / ("s" + std::to_string(run) + ".nii.gz"), study.subjects[3], spec.mask);
        write_ground_truth(dir / ("g" + std::to_string(run) + ".csv"), study.truth);
    }
    CHECK(sha256_file(dir / "s0.nii.gz") == sha256_file(dir / "s1.nii.gz"));
    CHECK(sha256_file(dir / "g0.csv") == sha256_file(dir / "g1.csv"));
    const auto back = read_ground_truth(dir / "g0.csv");
    CHECK(back.column_names.size() == 5);
    CHECK(back.beta.rows() == 64);
}

TEST_CASE("simulated covariates mirror the cohort design")
{
    const CovariateTable t = simulate_covariates(200, {}, 3);
    CHECK(t.Q() == 5);
    CHECK(t.column_names[4] == "adhd_x_medication");
    CHECK(t.subject_ids.front() == "sub-001");
    CHECK(t.Z.col(1).minCoeff() >= 7.0);
    CHECK(t.Z.col(1).maxCoeff() <= 18.0);
    CHECK(t.Z.col(3).minCoeff() >= 19.0);
    CHECK(t.Z.col(3).maxCoeff() <= 90.0);
    for (Eigen::Index i = 0; i < t.N(); ++i) {
        CHECK((t.Z(i, 2) == 0.0 || t.Z(i, 2) == 1.0));
        CHECK(t.Z(i, 4) == t.Z(i, 2) * t.Z(i, 3));
    }
    CHECK(simulate_covariates(20, {}, 3).Z == simulate_covariates(20, {}, 3).Z);
}

TEST_CASE("parcellations")
{
    const VolumeGrid g = VolumeGrid::make({16, 16, 16});
    const auto oct = octant_parcellation(g);
    CHECK(oct.roi_ids.size() == 8);
    CHECK(std::count(oct.label.begin(), oct.label.end(), 1) == 512);
    const auto vor = voronoi_parcellation(g, 12, 5);
    CHECK(vor.roi_ids.size() == 12);
    CHECK(std::count(vor.label.begin(), vor.label.end(), 0) == 0);
    CHECK(voronoi_parcellation(g, 12, 5).label == vor.label);
}

}
