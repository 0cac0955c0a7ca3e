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

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace longmem {

/// Lattice geometry shared by every volume in an analysis.
struct VolumeGrid {
    std::array<std::int64_t, 3> dims{1, 1, 1};
    std::array<double, 3> voxel_size{1.0, 1.0, 1.0};
    Eigen::Matrix4d affine = Eigen::Matrix4d::Identity();

    /// Grid with a diagonal affine built from the voxel sizes.
    static VolumeGrid make(std::array<std::int64_t, 3> dims, std::array<double, 3> voxel_size = {1.0, 1.0, 1.0});

    std::int64_t n_voxels() const { return dims[0] * dims[1] * dims[2]; }
    std::int64_t linear(std::int64_t x, std::int64_t y, std::int64_t z) const
    {
        return x + dims[0] * (y + dims[1] * z);
    }
    std::array<std::int64_t, 3> coords(std::int64_t linear) const;
    Eigen::Vector3d world(std::int64_t linear) const;

    /// Throws DataError on nonpositive dims/sizes or a singular affine.
    void validate() const;
    bool same_as(const VolumeGrid& other, double tol = 1e-6) const;
};

/// Voxel datatypes accepted on disk; everything is float64 in memory.
enum class DataType { int16, int32, float32, float64 };

/// An image of up to four dimensions: x fastest, then y, z, t.
struct Volume {
    VolumeGrid grid;
    std::int64_t nt = 1;
    std::vector<double> data;
};

/// Included voxels and their dense 0..N_v-1 numbering (ascending linear index).
struct BrainMask {
    VolumeGrid grid;
    std::vector<std::int64_t> voxels;  // masked index -> linear index
    std::vector<std::int64_t> lookup;  // linear index -> masked index or -1

    static BrainMask from_values(const VolumeGrid& grid, std::span<const double> values);
    static BrainMask full(const VolumeGrid& grid);
    std::int64_t size() const { return static_cast<std::int64_t>(voxels.size()); }
};

/// Integer atlas labels on the full grid; 0 is background.
struct Parcellation {
    VolumeGrid grid;
    std::vector<std::int32_t> label;
    std::vector<std::int32_t> roi_ids;  // sorted distinct positive labels
};

/// Parcellation restricted to a mask: one positive label per masked voxel.
struct MaskedParcellation {
    std::vector<std::int32_t> roi_ids;
    std::vector<std::int32_t> label;                       // per masked voxel
    std::vector<std::vector<std::int64_t>> members;        // per ROI, masked indices ascending
    std::int64_t reassigned = 0;                           // masked voxels that had label 0
    std::vector<std::int32_t> dropped;                     // labels absent from the mask
};

/// Masked 4-D time series, voxel-major: data[v * T + t].
struct Dataset4D {
    VolumeGrid grid;
    std::int64_t T = 0;
    std::vector<double> data;
    std::string subject_id;

    std::int64_t n_voxels() const { return T == 0 ? 0 : static_cast<std::int64_t>(data.size()) / T; }
    std::span<const double> series(std::int64_t v) const
    {
        return {data.data() + v * T, static_cast<std::size_t>(T)};
    }
};

struct CovariateTable {
    Eigen::MatrixXd Z;  // N x Q, column 0 is the intercept
    std::vector<std::string> column_names;
    std::vector<std::string> subject_ids;

    Eigen::Index N() const { return Z.rows(); }
    Eigen::Index Q() const { return Z.cols(); }
};

// ---------------------------------------------------------------------------
// Generic volume I/O. Format chosen by extension: .nii, .nii.gz, or .raw
// (flat little-endian payload with a "<file>.hdr" text sidecar).

Volume read_volume(const std::filesystem::path& path);
void write_volume_full(const std::filesystem::path& path, const Volume& vol, DataType dtype = DataType::float32);

/// Write one value per masked voxel; unmasked voxels are 0.
void write_volume(const std::filesystem::path& path, const VolumeGrid& grid, std::span<const double> values,
                  const BrainMask& mask, DataType dtype = DataType::float32);

/// Read a 3-D volume and return its values at the masked voxels.
std::vector<double> read_masked_values(const std::filesystem::path& path, const BrainMask& mask);

BrainMask read_mask(const std::filesystem::path& path);
Parcellation read_parcellation(const std::filesystem::path& path);

/**
 * Restrict a parcellation to a mask. Labels with no masked voxel are
 * dropped; masked voxels labelled 0 take the label of the nearest labelled
 * masked voxel in millimetres, ties going to the smaller label.
 */
MaskedParcellation harmonize(const Parcellation& parc, const BrainMask& mask);

/// Read a 4-D series restricted to the mask (all voxels when none given).
Dataset4D read_dataset(const std::filesystem::path& path, const BrainMask* mask = nullptr);

/// Write a masked 4-D dataset; unmasked voxels are 0 at every time point.
void write_dataset(const std::filesystem::path& path, const Dataset4D& ds, const BrainMask& mask,
                   DataType dtype = DataType::float32);

/**
 * Read a comma-separated covariate table with a header row and a
 * `subject_id` column. The returned design starts with an all-ones
 * `intercept` column followed by `required_columns` in the given order.
 * When `subject_order` is supplied, rows are permuted to match it.
 */
CovariateTable read_covariates(const std::filesystem::path& path, const std::vector<std::string>& required_columns,
                               const std::vector<std::string>* subject_order = nullptr);

void write_covariates(const std::filesystem::path& path, const CovariateTable& table);

/// Minimum time series length accepted by read_dataset.
inline constexpr std::int64_t kMinSeriesLength = 16;

} // namespace longmem
