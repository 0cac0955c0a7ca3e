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

#include "longmem/composite_basis.hpp"
#include "longmem/group_regression.hpp"
#include "longmem/volume_io.hpp"

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace longmem {

/// Sequential source of per-draw voxel maps (rows x N_v); read twice.
class VoxelMapStream {
public:
    virtual ~VoxelMapStream() = default;
    virtual Eigen::Index count() const = 0;
    virtual void rewind() = 0;
    virtual bool next(Eigen::MatrixXd& map) = 0;
};

/// In-memory draws, mainly for tests.
class VectorMapStream : public VoxelMapStream {
public:
    explicit VectorMapStream(const std::vector<Eigen::MatrixXd>& maps) : maps_(maps) {}
    Eigen::Index count() const override { return static_cast<Eigen::Index>(maps_.size()); }
    void rewind() override { next_ = 0; }
    bool next(Eigen::MatrixXd& map) override;

private:
    const std::vector<Eigen::MatrixXd>& maps_;
    std::size_t next_ = 0;
};

/// Component-space draws back-projected one at a time.
class BackprojectedStream : public VoxelMapStream {
public:
    BackprojectedStream(DrawSource& source, const CompositeBasis& basis, std::vector<Eigen::Index> intercept_rows = {})
        : source_(source), basis_(basis), intercept_rows_(std::move(intercept_rows))
    {
    }
    Eigen::Index count() const override { return source_.count(); }
    void rewind() override { source_.rewind(); }
    bool next(Eigen::MatrixXd& map) override;

private:
    DrawSource& source_;
    const CompositeBasis& basis_;
    std::vector<Eigen::Index> intercept_rows_;
    Eigen::MatrixXd coef_;
};

/// Simultaneous band per row (covariate): [mean - q * sd, mean + q * sd].
struct JointBand {
    double zeta = 0.05;
    Eigen::Index n_draws = 0;
    Eigen::MatrixXd mean;        // rows x N_v
    Eigen::MatrixXd sd;          // rows x N_v
    Eigen::VectorXd quantile;    // per row
    Eigen::MatrixXd max_dev;     // n_draws x rows, max standardized deviation per draw
    std::vector<std::vector<std::uint8_t>> flagged;  // per row, band excludes 0
    std::vector<std::int64_t> excluded;              // per row, voxels with sd == 0

    Eigen::Index rows() const { return mean.rows(); }
    Eigen::VectorXd half_width(Eigen::Index row) const { return quantile[row] * sd.row(row).transpose(); }
};

inline constexpr Eigen::Index kMinBandDraws = 500;

/**
 * Two passes over the stream: per-voxel posterior mean and sd, then the
 * per-draw maximum of |draw - mean| / sd over voxels with sd > 0. The band
 * quantile is the order statistic ceil((1 - zeta) n) of those maxima.
 */
JointBand joint_credible_band(VoxelMapStream& stream, double zeta);

/// Inclusive empirical quantile: order statistic ceil(p * n) (1-based).
double type1_quantile(std::vector<double> values, double p);

/// Per-voxel OLS t statistics (Q x N_v) of Y (N x N_v) on Z, df = N - Q.
Eigen::MatrixXd ols_t_stats(const Eigen::MatrixXd& Y, const Eigen::MatrixXd& Z, unsigned threads = 1);

/// Two-sided Student-t p-values.
std::vector<double> two_sided_p(std::span<const double> t, double df);

/// Benjamini-Hochberg step-up rejections at level q.
std::vector<std::uint8_t> bh_reject(std::span<const double> p, double q);

/// BH on two-sided p-values of the given statistics. Throws on non-finite input.
std::vector<std::uint8_t> fdr_map(std::span<const double> t_stats, double df, double q);

/// Binary map on the full lattice.
struct BinaryMap {
    VolumeGrid grid;
    std::vector<std::uint8_t> on;  // grid.n_voxels() entries

    static BinaryMap from_masked(const VolumeGrid& grid, const BrainMask& mask, std::span<const std::uint8_t> values);
    std::int64_t count() const;
};

struct ClusterMap {
    BinaryMap map;                     // voxels surviving the size threshold
    std::vector<std::int32_t> label;   // per lattice voxel, 0 = none, 1..n clusters
    std::vector<std::int64_t> sizes;   // sizes[i] is the size of label i + 1
    int connectivity = 26;

    std::int32_t n_clusters() const { return static_cast<std::int32_t>(sizes.size()); }
};

/**
 * Connected components on the 3-D lattice with 6, 18 or 26 neighbours.
 * Components smaller than min_cluster are removed; the rest are numbered
 * 1..n by ascending minimum linear index.
 */
ClusterMap cluster_threshold(const BinaryMap& map, int connectivity = 26, std::int64_t min_cluster = 50);

/// Voxelwise AND; throws DataError when grids differ.
BinaryMap intersect_maps(const BinaryMap& a, const BinaryMap& b);

struct ClusterRow {
    std::string covariate;
    std::string method;
    std::int32_t id = 0;
    std::int64_t size = 0;
    std::int64_t peak_linear = 0;
    std::array<std::int64_t, 3> peak_ijk{};
    Eigen::Vector3d peak_world = Eigen::Vector3d::Zero();
    double peak_value = 0.0;
};

/// One row per cluster; the peak is the voxel with the largest |stat|.
std::vector<ClusterRow> cluster_table(const ClusterMap& clusters, std::span<const double> lattice_stat,
                                      const std::string& covariate, const std::string& method);

void write_cluster_table(const std::filesystem::path& path, const std::vector<ClusterRow>& rows);
std::vector<ClusterRow> read_cluster_table(const std::filesystem::path& path);

/// Scatter masked values onto the lattice (zeros elsewhere).
std::vector<double> to_lattice(const BrainMask& mask, std::span<const double> masked);

} // namespace longmem
