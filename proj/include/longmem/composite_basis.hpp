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

#include "longmem/volume_io.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace longmem {

/// Orthonormal right singular vectors of one ROI's centered subject-by-voxel block.
struct LocalBasis {
    std::int32_t roi_id = 0;
    std::vector<std::int64_t> voxels;  // masked voxel indices, ascending
    Eigen::VectorXd centering;         // per-voxel mean across subjects
    Eigen::MatrixXd eigvecs;           // n_voxels x k_r, orthonormal columns
    Eigen::VectorXd singular_values;   // all singular values, descending
    int k = 0;
    double variance_kept = 1.0;

    std::int64_t n_voxels() const { return static_cast<std::int64_t>(voxels.size()); }
};

/// Second-level basis over the concatenated local features.
struct GlobalBasis {
    Eigen::VectorXd centering;        // per local feature
    Eigen::MatrixXd eigvecs;          // (sum k_r) x PC_f
    Eigen::VectorXd singular_values;  // all singular values, descending
    int pc = 0;
    double variance_kept = 1.0;
};

struct CompositeBasis {
    std::int64_t n_voxels = 0;
    double local_threshold = 0.99;
    double global_threshold = 0.99;
    std::vector<LocalBasis> local;
    GlobalBasis global;

    Eigen::Index n_local_features() const;
    Eigen::Index n_components() const { return global.eigvecs.cols(); }

    /// Squared singular values discarded at both levels (Eckart-Young budget).
    double discarded_energy() const;
};

/// N x PC_f matrix of maps expressed in the composite basis.
struct ProjectedMaps {
    Eigen::MatrixXd scores;
    std::vector<std::string> subject_ids;
};

/// Smallest k with cumulative squared singular values >= threshold * total (k >= 1).
int retained_components(const Eigen::VectorXd& singular_values, double threshold, double* kept = nullptr);

/**
 * Per-ROI thin SVD of the column-centered N x n_voxels(r) blocks of the
 * stack (N x N_v, rows are subjects). Throws on N < 2, empty ROIs, or a
 * threshold outside (0, 1].
 */
std::vector<LocalBasis> fit_local_bases(const Eigen::MatrixXd& alpha_stack, const MaskedParcellation& parcellation,
                                        double variance_threshold, unsigned threads = 1);

/// Local feature matrix N x (sum k_r): centered ROI blocks times their bases.
Eigen::MatrixXd project_local(const Eigen::MatrixXd& alpha_stack, const std::vector<LocalBasis>& local);

GlobalBasis fit_global_basis(const Eigen::MatrixXd& local_projected, double variance_threshold);

/// Both levels in one call.
CompositeBasis fit_composite_basis(const Eigen::MatrixXd& alpha_stack, const MaskedParcellation& parcellation,
                                   double local_threshold, double global_threshold, unsigned threads = 1);

/// (alpha - centering) Phi Psi, computed blockwise.
Eigen::MatrixXd project(const Eigen::MatrixXd& alpha_stack, const CompositeBasis& basis);

/**
 * coef (rows x PC_f) -> rows x N_v via Psi^T then blockwise Phi_r^T.
 * Centering is added back only to the rows listed in `add_centering_rows`
 * (intercept-style reconstructions); slope rows are left as is.
 */
Eigen::MatrixXd backproject(const Eigen::MatrixXd& coef, const CompositeBasis& basis,
                            const std::vector<Eigen::Index>& add_centering_rows = {});

/// Dense composite basis Phi Psi (N_v x PC_f); for tests and small problems.
Eigen::MatrixXd composite_matrix(const CompositeBasis& basis);

/**
 * Basis archive directory: roi_<id>.bin (eigvecs), roi_<id>.idx (voxels),
 * roi_<id>_sv.bin, global.bin, global_sv.bin, and manifest.txt with ROI
 * ids, k_r, thresholds, centering vectors and a SHA-256 content hash.
 */
void save_basis(const std::filesystem::path& dir, const CompositeBasis& basis);
CompositeBasis load_basis(const std::filesystem::path& dir);

/// Hash recorded in manifest.txt (over all binary members in fixed order).
std::string basis_content_hash(const std::filesystem::path& dir);

} // namespace longmem
