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

#include "longmem/composite_basis.hpp"
#include "longmem/error.hpp"
#include "longmem/rng.hpp"
#include "support.hpp"

#include <doctest.h>

#include <fstream>
#include <map>

using namespace longmem;
using testing::TempDir;

namespace {

MaskedParcellation parcels(const std::vector<std::int32_t>& labels)
{
    MaskedParcellation p;
    std::map<std::int32_t, std::vector<std::int64_t>> by;
    for (std::size_t v = 0; v < labels.size(); ++v)
        by[labels[v]].push_back(static_cast<std::int64_t>(v));
    for (auto& [id, m] : by) {
        p.roi_ids.push_back(id);
        p.members.push_back(m);
    }
    p.label = labels;
    return p;
}

Eigen::MatrixXd random_matrix(Eigen::Index r, Eigen::Index c, std::uint64_t seed)
{
    Philox rng(seed);
    Eigen::MatrixXd m(r, c);
    for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index j = 0; j < c; ++j)
            m(i, j) = rng.normal();
    return m;
}

// Three ROIs of uneven size on 30 voxels, stack with low-rank structure plus noise.
struct Fixture {
    MaskedParcellation parc;
    Eigen::MatrixXd stack;
};

Fixture fixture(Eigen::Index N = 25, std::uint64_t seed = 1)
{
    std::vector<std::int32_t> labels(30);
    for (std::size_t v = 0; v < 30; ++v)
        labels[v] = v < 6 ? 3 : (v % 2 == 0 ? 1 : 7);
    Fixture f{parcels(labels), random_matrix(N, 3, seed) * random_matrix(3, 30, seed + 1)};
    f.stack += 0.05 * random_matrix(N, 30, seed + 2);
    f.stack.array() += 0.5;
    return f;
}

double rel_err(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) { return (a - b).norm() / std::max(1.0, b.norm()); }

std::vector<Eigen::Index> all_rows(Eigen::Index n)
{
    std::vector<Eigen::Index> r(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i)
        r[static_cast<std::size_t>(i)] = i;
    return r;
}

} // namespace

TEST_SUITE("composite_basis") {

TEST_CASE("variance threshold picks the smallest sufficient k")
{
    const Eigen::Vector4d sv(3, 2, 1, 0.1);
    double kept = 0.0;
    CHECK(retained_components(sv, 0.99, &kept) == 3);
    CHECK(kept == doctest::Approx(14.0 / 14.01));
    CHECK(retained_components(sv, 0.5) == 1);
    CHECK(retained_components(sv, 1.0) == 4);
    CHECK(retained_components(Eigen::Vector3d::Zero(), 0.99) == 1);
}

TEST_CASE("rank-one ROI keeps one component and reconstructs exactly")
{
    const Eigen::VectorXd u = random_matrix(10, 1, 3);
    const Eigen::RowVectorXd w = random_matrix(1, 5, 4);
    Eigen::MatrixXd stack = u * w;
    stack.array() += 0.7;
    const auto basis = fit_composite_basis(stack, parcels({1, 1, 1, 1, 1}), 0.99, 0.99);
    CHECK(basis.local[0].k == 1);
    CHECK(basis.n_components() == 1);
    const Eigen::MatrixXd back = backproject(project(stack, basis), basis, all_rows(10));
    CHECK(rel_err(back, stack) < 1e-12);
}

TEST_CASE("full thresholds on a tall stack reproduce the data")
{
    const Eigen::MatrixXd stack = random_matrix(40, 12, 5);
    const auto basis = fit_composite_basis(stack, parcels({1, 1, 1, 1, 2, 2, 2, 2, 2, 3, 3, 3}), 1.0, 1.0);
    const Eigen::MatrixXd back = backproject(project(stack, basis), basis, all_rows(40));
    CHECK(rel_err(back, stack) < 1e-10);
}

TEST_CASE("reconstruction error equals the discarded spectral energy")
{
    const auto f = fixture();
    for (double thr : {0.5, 0.9, 0.99}) {
        const auto basis = fit_composite_basis(f.stack, f.parc, thr, thr);
        const Eigen::MatrixXd back = backproject(project(f.stack, basis), basis, all_rows(f.stack.rows()));
        CHECK((back - f.stack).squaredNorm() == doctest::Approx(basis.discarded_energy()).epsilon(1e-8));
    }
}

TEST_CASE("truncated local bases are optimal among rank-k projections")
{
    const auto f = fixture();
    const auto local = fit_local_bases(f.stack, f.parc, 0.9);
    for (std::size_t r = 0; r < local.size(); ++r) {
        const auto& b = local[r];
        Eigen::MatrixXd block(f.stack.rows(), b.n_voxels());
        for (Eigen::Index j = 0; j < b.n_voxels(); ++j)
            block.col(j) = f.stack.col(b.voxels[static_cast<std::size_t>(j)]);
        block.rowwise() -= b.centering.transpose();
        const double best = (block - block * b.eigvecs * b.eigvecs.transpose()).squaredNorm();
        CHECK(best == doctest::Approx(b.singular_values.tail(b.singular_values.size() - b.k).squaredNorm()));
        for (std::uint64_t s = 0; s < 20; ++s) {
            const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(random_matrix(b.n_voxels(), b.k, 100 + s))
                                          .householderQ() *
                                      Eigen::MatrixXd::Identity(b.n_voxels(), b.k);
            CHECK((block - block * q * q.transpose()).squaredNorm() >= best - 1e-10);
        }
    }
}

TEST_CASE("composite matrix has orthonormal columns")
{
    const auto f = fixture();
    const auto basis = fit_composite_basis(f.stack, f.parc, 0.99, 0.99);
    const Eigen::MatrixXd B = composite_matrix(basis);
    CHECK(B.rows() == 30);
    const auto pc = basis.n_components();
    CHECK((B.transpose() * B - Eigen::MatrixXd::Identity(pc, pc)).cwiseAbs().maxCoeff() < 1e-12);
    for (const auto& b : basis.local)
        CHECK((b.eigvecs.transpose() * b.eigvecs - Eigen::MatrixXd::Identity(b.k, b.k)).cwiseAbs().maxCoeff() <
              1e-12);
}

TEST_CASE("back-projection without centering is an isometry and unit coefficients give columns")
{
    const auto f = fixture();
    const auto basis = fit_composite_basis(f.stack, f.parc, 0.99, 0.99);
    const Eigen::MatrixXd B = composite_matrix(basis);
    const Eigen::MatrixXd c = random_matrix(4, basis.n_components(), 9);
    const Eigen::MatrixXd maps = backproject(c, basis);
    for (Eigen::Index r = 0; r < 4; ++r)
        CHECK(maps.row(r).norm() == doctest::Approx(c.row(r).norm()).epsilon(1e-12));
    for (Eigen::Index j = 0; j < basis.n_components(); ++j) {
        Eigen::RowVectorXd e = Eigen::RowVectorXd::Zero(basis.n_components());
        e[j] = 1.0;
        CHECK((backproject(e, basis).transpose() - B.col(j)).cwiseAbs().maxCoeff() < 1e-14);
    }
    CHECK(backproject(Eigen::MatrixXd::Zero(2, basis.n_components()), basis).isZero());
    // Projection of a centered-basis map returns its coefficients.
    Eigen::MatrixXd with_center = backproject(c, basis, all_rows(4));
    CHECK(rel_err(project(with_center, basis), c) < 1e-12);
}

TEST_CASE("zero stack yields finite single-component bases")
{
    const auto basis = fit_composite_basis(Eigen::MatrixXd::Zero(6, 8), parcels({1, 1, 1, 1, 2, 2, 2, 2}), 0.99, 0.99);
    for (const auto& b : basis.local)
        CHECK(b.k == 1);
    const Eigen::MatrixXd s = project(Eigen::MatrixXd::Zero(6, 8), basis);
    CHECK(s.allFinite());
    CHECK(s.isZero());
}

TEST_CASE("subject order permutes the scores and leaves the basis alone")
{
    const auto f = fixture(20, 11);
    Eigen::VectorXi perm(20);
    for (int i = 0; i < 20; ++i)
        perm[i] = (7 * i + 3) % 20;
    const Eigen::PermutationMatrix<Eigen::Dynamic> P(perm);
    const Eigen::MatrixXd permuted = P * f.stack;
    const auto a = fit_composite_basis(f.stack, f.parc, 0.99, 0.99);
    const auto b = fit_composite_basis(permuted, f.parc, 0.99, 0.99);
    REQUIRE(a.n_components() == b.n_components());
    CHECK((composite_matrix(a) - composite_matrix(b)).cwiseAbs().maxCoeff() < 1e-9);
    CHECK((P * project(f.stack, a) - project(permuted, b)).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("thread count does not change the basis")
{
    const auto f = fixture();
    const auto a = fit_composite_basis(f.stack, f.parc, 0.99, 0.99, 1);
    const auto b = fit_composite_basis(f.stack, f.parc, 0.99, 0.99, 4);
    CHECK(composite_matrix(a) == composite_matrix(b));
}

TEST_CASE("archive round trip and corruption detection")
{
    TempDir dir("basis");
    const auto f = fixture();
    const auto basis = fit_composite_basis(f.stack, f.parc, 0.95, 0.99);
    save_basis(dir / "b", basis);
    const auto back = load_basis(dir / "b");
    CHECK(back.n_voxels == 30);
    CHECK(back.local_threshold == 0.95);
    REQUIRE(back.local.size() == basis.local.size());
    for (std::size_t r = 0; r < back.local.size(); ++r) {
        CHECK(back.local[r].eigvecs == basis.local[r].eigvecs);
        CHECK(back.local[r].centering == basis.local[r].centering);
        CHECK(back.local[r].voxels == basis.local[r].voxels);
    }
    CHECK(back.global.centering == basis.global.centering);
    CHECK(project(f.stack, back) == project(f.stack, basis));

    {
        std::fstream io(dir / "b" / "roi_7.bin", std::ios::in | std::ios::out | std::ios::binary);
        io.seekp(40);
        io.put('\x5a');
    }
    CHECK_THROWS_AS(load_basis(dir / "b"), DataError);
    CHECK_THROWS_AS(load_basis(dir / "missing"), DataError);
}

TEST_CASE("invalid inputs")
{
    const auto f = fixture();
    CHECK_THROWS_AS(fit_composite_basis(f.stack.topRows(1), f.parc, 0.99, 0.99), DataError);
    CHECK_THROWS_AS(fit_composite_basis(f.stack, f.parc, 0.0, 0.99), UsageError);
    CHECK_THROWS_AS(fit_composite_basis(f.stack, f.parc, 0.99, 1.5), UsageError);
    CHECK_THROWS_AS(fit_composite_basis(f.stack.leftCols(29), f.parc, 0.99, 0.99), DataError);
    Eigen::MatrixXd bad = f.stack;
    bad(0, 0) = std::nan("");
    CHECK_THROWS_AS(fit_composite_basis(bad, f.parc, 0.99, 0.99), DataError);
    const auto basis = fit_composite_basis(f.stack, f.parc, 0.99, 0.99);
    CHECK_THROWS_AS(backproject(Eigen::MatrixXd::Zero(1, basis.n_components() + 1), basis), DataError);
}

}
