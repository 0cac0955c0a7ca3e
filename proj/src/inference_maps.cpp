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

#include "longmem/inference_maps.hpp"

#include "longmem/error.hpp"
#include "longmem/log.hpp"
#include "longmem/parallel.hpp"

#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace longmem {

bool VectorMapStream::next(Eigen::MatrixXd& map)
{
    if (next_ >= maps_.size())
        return false;
    map = maps_[next_++];
    return true;
}

bool BackprojectedStream::next(Eigen::MatrixXd& map)
{
    if (!source_.next(coef_))
        return false;
    map = backproject(coef_, basis_, intercept_rows_);
    return true;
}

double type1_quantile(std::vector<double> values, double p)
{
    if (values.empty())
        throw UsageError("quantile of an empty sample");
    const auto n = values.size();
    auto rank = static_cast<std::size_t>(std::ceil(p * static_cast<double>(n) - 1e-12));
    rank = std::clamp<std::size_t>(rank, 1, n);
    std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(rank - 1), values.end());
    return values[rank - 1];
}

JointBand joint_credible_band(VoxelMapStream& stream, double zeta)
{
    if (!(zeta > 0.0 && zeta < 0.5))
        throw UsageError("zeta must lie in (0, 0.5)");
    if (stream.count() < kMinBandDraws)
        throw UsageError("joint credible band needs at least " + std::to_string(kMinBandDraws) + " draws, got " +
                         std::to_string(stream.count()));

    JointBand band;
    band.zeta = zeta;

    // Pass 1: Welford mean and variance per entry.
    stream.rewind();
    Eigen::MatrixXd x, m2;
    Eigen::Index n = 0;
    while (stream.next(x)) {
        if (n == 0) {
            band.mean = Eigen::MatrixXd::Zero(x.rows(), x.cols());
            m2 = Eigen::MatrixXd::Zero(x.rows(), x.cols());
        } else if (x.rows() != band.mean.rows() || x.cols() != band.mean.cols()) {
            throw DataError("draw maps change shape within a stream");
        }
        ++n;
        const Eigen::MatrixXd delta = x - band.mean;
        band.mean += delta / static_cast<double>(n);
        m2.array() += delta.array() * (x - band.mean).array();
    }
    if (n < kMinBandDraws)
        throw DataError("draw stream ended after " + std::to_string(n) + " draws");
    band.n_draws = n;
    band.sd = (m2.array().max(0.0) / static_cast<double>(n - 1)).sqrt().matrix();

    const Eigen::Index R = band.mean.rows();
    Eigen::MatrixXd inv_sd = Eigen::MatrixXd::Zero(R, band.mean.cols());
    band.excluded.assign(static_cast<std::size_t>(R), 0);
    for (Eigen::Index r = 0; r < R; ++r) {
        for (Eigen::Index v = 0; v < band.mean.cols(); ++v) {
            // Relative floor so that rounding noise on a constant voxel counts as constant.
            const double s = band.sd(r, v);
            if (s > 1e-14 * std::max(1.0, std::abs(band.mean(r, v))))
                inv_sd(r, v) = 1.0 / s;
            else
                ++band.excluded[static_cast<std::size_t>(r)];
        }
        if (band.excluded[static_cast<std::size_t>(r)] > 0)
            log::warn("joint band row " + std::to_string(r) + ": " +
                      std::to_string(band.excluded[static_cast<std::size_t>(r)]) +
                      " voxels have zero posterior sd and are excluded");
    }

    // Pass 2: per-draw maximum standardized deviation.
    stream.rewind();
    band.max_dev.resize(n, R);
    Eigen::Index t = 0;
    while (t < n && stream.next(x)) {
        band.max_dev.row(t) =
            ((x - band.mean).cwiseAbs().cwiseProduct(inv_sd)).rowwise().maxCoeff().transpose();
        ++t;
    }
    if (t != n)
        throw DataError("draw stream returned fewer draws on the second pass");

    band.quantile.resize(R);
    band.flagged.assign(static_cast<std::size_t>(R), {});
    for (Eigen::Index r = 0; r < R; ++r) {
        std::vector<double> col(band.max_dev.col(r).data(), band.max_dev.col(r).data() + n);
        band.quantile[r] = type1_quantile(std::move(col), 1.0 - zeta);
        auto& f = band.flagged[static_cast<std::size_t>(r)];
        f.assign(static_cast<std::size_t>(band.mean.cols()), 0);
        for (Eigen::Index v = 0; v < band.mean.cols(); ++v)
            if (inv_sd(r, v) > 0.0 && std::abs(band.mean(r, v)) > band.quantile[r] * band.sd(r, v))
                f[static_cast<std::size_t>(v)] = 1;
    }
    return band;
}

Eigen::MatrixXd ols_t_stats(const Eigen::MatrixXd& Y, const Eigen::MatrixXd& Z, unsigned threads)
{
    const Eigen::Index N = Z.rows();
    const Eigen::Index Q = Z.cols();
    if (Y.rows() != N)
        throw DataError("OLS response rows do not match design rows");
    if (N <= Q)
        throw DataError("OLS needs more observations than covariates");
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(Z);
    if (qr.rank() < Q)
        throw DataError("OLS design matrix is rank-deficient");
    const Eigen::MatrixXd ztz_inv = (Z.transpose() * Z).llt().solve(Eigen::MatrixXd::Identity(Q, Q));
    const Eigen::VectorXd se_unit = ztz_inv.diagonal().cwiseSqrt();
    const Eigen::MatrixXd proj = ztz_inv * Z.transpose();  // Q x N
    const double df = static_cast<double>(N - Q);

    Eigen::MatrixXd t(Q, Y.cols());
    const std::size_t V = static_cast<std::size_t>(Y.cols());
    const std::size_t chunk = 1024;
    parallel_for((V + chunk - 1) / chunk, threads, [&](std::size_t c) {
        const auto lo = static_cast<Eigen::Index>(c * chunk);
        const auto len = std::min<Eigen::Index>(static_cast<Eigen::Index>(chunk), Y.cols() - lo);
        const Eigen::MatrixXd y = Y.middleCols(lo, len);
        const Eigen::MatrixXd beta = proj * y;
        const Eigen::RowVectorXd sigma2 = (y - Z * beta).colwise().squaredNorm() / df;
        for (Eigen::Index j = 0; j < len; ++j) {
            const double s = std::sqrt(sigma2[j]);
            for (Eigen::Index q = 0; q < Q; ++q)
                t(q, lo + j) = s > 0.0 ? beta(q, j) / (s * se_unit[q]) : std::numeric_limits<double>::quiet_NaN();
        }
    });
    return t;
}

std::vector<double> two_sided_p(std::span<const double> t, double df)
{
    if (!(df > 0.0))
        throw UsageError("t distribution needs positive degrees of freedom");
    const boost::math::students_t dist(df);
    std::vector<double> p(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (!std::isfinite(t[i]))
            throw DataError("non-finite test statistic at voxel " + std::to_string(i));
        p[i] = std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t[i]))));
    }
    return p;
}

std::vector<std::uint8_t> bh_reject(std::span<const double> p, double q)
{
    if (!(q > 0.0 && q < 1.0))
        throw UsageError("FDR level must lie in (0, 1)");
    const std::size_t m = p.size();
    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] < p[b]; });
    std::size_t cutoff = 0;  // number rejected
    for (std::size_t i = m; i > 0; --i) {
        const double threshold = q * static_cast<double>(i) / static_cast<double>(m);
        if (p[order[i - 1]] <= threshold) {
            cutoff = i;
            break;
        }
    }
    std::vector<std::uint8_t> reject(m, 0);
    for (std::size_t i = 0; i < cutoff; ++i)
        reject[order[i]] = 1;
    return reject;
}

std::vector<std::uint8_t> fdr_map(std::span<const double> t_stats, double df, double q)
{
    return bh_reject(two_sided_p(t_stats, df), q);
}

BinaryMap BinaryMap::from_masked(const VolumeGrid& grid, const BrainMask& mask, std::span<const std::uint8_t> values)
{
    if (static_cast<std::int64_t>(values.size()) != mask.size())
        throw DataError("masked map length does not match the mask");
    BinaryMap b;
    b.grid = grid;
    b.on.assign(static_cast<std::size_t>(grid.n_voxels()), 0);
    for (std::size_t i = 0; i < values.size(); ++i)
        b.on[static_cast<std::size_t>(mask.voxels[i])] = values[i] ? 1 : 0;
    return b;
}

std::int64_t BinaryMap::count() const
{
    return std::count_if(on.begin(), on.end(), [](std::uint8_t x) { return x != 0; });
}

ClusterMap cluster_threshold(const BinaryMap& map, int connectivity, std::int64_t min_cluster)
{
    if (connectivity != 6 && connectivity != 18 && connectivity != 26)
        throw UsageError("connectivity must be 6, 18 or 26");
    if (min_cluster < 1)
        throw UsageError("min_cluster must be at least 1");
    const auto& d = map.grid.dims;
    if (static_cast<std::int64_t>(map.on.size()) != map.grid.n_voxels())
        throw DataError("binary map size does not match its grid");

    std::vector<std::array<int, 3>> offsets;
    for (int dz = -1; dz <= 1; ++dz)
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
                const int manhattan = std::abs(dx) + std::abs(dy) + std::abs(dz);
                if (manhattan == 0)
                    continue;
                if (connectivity == 6 && manhattan > 1)
                    continue;
                if (connectivity == 18 && manhattan > 2)
                    continue;
                offsets.push_back({dx, dy, dz});
            }

    const std::int64_t n = map.grid.n_voxels();
    std::vector<std::int32_t> comp(static_cast<std::size_t>(n), 0);
    std::vector<std::vector<std::int64_t>> members;
    std::deque<std::int64_t> queue;
    for (std::int64_t start = 0; start < n; ++start) {
        if (!map.on[static_cast<std::size_t>(start)] || comp[static_cast<std::size_t>(start)])
            continue;
        members.emplace_back();
        const auto id = static_cast<std::int32_t>(members.size());
        comp[static_cast<std::size_t>(start)] = id;
        queue.push_back(start);
        while (!queue.empty()) {
            const std::int64_t cur = queue.front();
            queue.pop_front();
            members.back().push_back(cur);
            const auto c = map.grid.coords(cur);
            for (const auto& o : offsets) {
                const std::int64_t x = c[0] + o[0], y = c[1] + o[1], z = c[2] + o[2];
                if (x < 0 || y < 0 || z < 0 || x >= d[0] || y >= d[1] || z >= d[2])
                    continue;
                const std::int64_t nb = map.grid.linear(x, y, z);
                if (map.on[static_cast<std::size_t>(nb)] && !comp[static_cast<std::size_t>(nb)]) {
                    comp[static_cast<std::size_t>(nb)] = id;
                    queue.push_back(nb);
                }
            }
        }
    }

    // Scanning in linear order already visits components by minimum index.
    ClusterMap out;
    out.connectivity = connectivity;
    out.map.grid = map.grid;
    out.map.on.assign(static_cast<std::size_t>(n), 0);
    out.label.assign(static_cast<std::size_t>(n), 0);
    for (const auto& mem : members) {
        if (static_cast<std::int64_t>(mem.size()) < min_cluster)
            continue;
        out.sizes.push_back(static_cast<std::int64_t>(mem.size()));
        const auto id = static_cast<std::int32_t>(out.sizes.size());
        for (std::int64_t v : mem) {
            out.label[static_cast<std::size_t>(v)] = id;
            out.map.on[static_cast<std::size_t>(v)] = 1;
        }
    }
    return out;
}

BinaryMap intersect_maps(const BinaryMap& a, const BinaryMap& b)
{
    if (!a.grid.same_as(b.grid) || a.on.size() != b.on.size())
        throw DataError("cannot intersect maps on different grids");
    BinaryMap out;
    out.grid = a.grid;
    out.on.resize(a.on.size());
    for (std::size_t i = 0; i < a.on.size(); ++i)
        out.on[i] = (a.on[i] && b.on[i]) ? 1 : 0;
    return out;
}

std::vector<ClusterRow> cluster_table(const ClusterMap& clusters, std::span<const double> lattice_stat,
                                      const std::string& covariate, const std::string& method)
{
    if (lattice_stat.size() != clusters.label.size())
        throw DataError("statistic map size does not match the cluster map");
    std::vector<ClusterRow> rows(static_cast<std::size_t>(clusters.n_clusters()));
    std::vector<double> best(rows.size(), -1.0);
    for (std::size_t v = 0; v < clusters.label.size(); ++v) {
        const std::int32_t id = clusters.label[v];
        if (id == 0)
            continue;
        const auto i = static_cast<std::size_t>(id - 1);
        if (std::abs(lattice_stat[v]) > best[i]) {
            best[i] = std::abs(lattice_stat[v]);
            rows[i].peak_linear = static_cast<std::int64_t>(v);
            rows[i].peak_value = lattice_stat[v];
        }
    }
    for (std::size_t i = 0; i < rows.size(); ++i) {
        rows[i].covariate = covariate;
        rows[i].method = method;
        rows[i].id = static_cast<std::int32_t>(i + 1);
        rows[i].size = clusters.sizes[i];
        rows[i].peak_ijk = clusters.map.grid.coords(rows[i].peak_linear);
        rows[i].peak_world = clusters.map.grid.world(rows[i].peak_linear);
    }
    return rows;
}

void write_cluster_table(const std::filesystem::path& path, const std::vector<ClusterRow>& rows)
{
    std::ofstream out(path, std::ios::trunc);
    if (!out)
        throw DataError("cannot write " + path.string());
    out << std::setprecision(10);
    out << "covariate,method,cluster,size,peak_i,peak_j,peak_k,peak_x,peak_y,peak_z,peak_value\n";
    for (const auto& r : rows)
        out << r.covariate << ',' << r.method << ',' << r.id << ',' << r.size << ',' << r.peak_ijk[0] << ','
            << r.peak_ijk[1] << ',' << r.peak_ijk[2] << ',' << r.peak_world[0] << ',' << r.peak_world[1] << ','
            << r.peak_world[2] << ',' << r.peak_value << "\n";
}

std::vector<ClusterRow> read_cluster_table(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw DataError("cannot read " + path.string());
    std::string line;
    std::getline(in, line);
    std::vector<ClusterRow> rows;
    while (std::getline(in, line)) {
        if (line.empty())
            continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ','))
            f.push_back(cell);
        if (f.size() != 11)
            throw DataError("malformed cluster table row in " + path.string());
        ClusterRow r;
        r.covariate = f[0];
        r.method = f[1];
        r.id = std::stoi(f[2]);
        r.size = std::stoll(f[3]);
        r.peak_ijk = {std::stoll(f[4]), std::stoll(f[5]), std::stoll(f[6])};
        r.peak_world = Eigen::Vector3d(std::stod(f[7]), std::stod(f[8]), std::stod(f[9]));
        r.peak_value = std::stod(f[10]);
        rows.push_back(r);
    }
    return rows;
}

std::vector<double> to_lattice(const BrainMask& mask, std::span<const double> masked)
{
    if (static_cast<std::int64_t>(masked.size()) != mask.size())
        throw DataError("masked vector length does not match the mask");
    std::vector<double> out(static_cast<std::size_t>(mask.grid.n_voxels()), 0.0);
    for (std::size_t i = 0; i < masked.size(); ++i)
        out[static_cast<std::size_t>(mask.voxels[i])] = masked[i];
    return out;
}

} // namespace longmem
