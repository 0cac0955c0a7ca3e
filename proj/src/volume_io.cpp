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

#include "longmem/volume_io.hpp"

#include "longmem/error.hpp"
#include "longmem/log.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

namespace longmem {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// VolumeGrid

VolumeGrid VolumeGrid::make(std::array<std::int64_t, 3> dims, std::array<double, 3> voxel_size)
{
    VolumeGrid g;
    g.dims = dims;
    g.voxel_size = voxel_size;
    g.affine.setIdentity();
    for (int i = 0; i < 3; ++i)
        g.affine(i, i) = voxel_size[i];
    return g;
}

std::array<std::int64_t, 3> VolumeGrid::coords(std::int64_t linear) const
{
    const std::int64_t x = linear % dims[0];
    const std::int64_t y = (linear / dims[0]) % dims[1];
    const std::int64_t z = linear / (dims[0] * dims[1]);
    return {x, y, z};
}

Eigen::Vector3d VolumeGrid::world(std::int64_t lin) const
{
    const auto c = coords(lin);
    const Eigen::Vector4d ijk{static_cast<double>(c[0]), static_cast<double>(c[1]), static_cast<double>(c[2]), 1.0};
    return (affine * ijk).head<3>();
}

void VolumeGrid::validate() const
{
    for (int i = 0; i < 3; ++i) {
        if (dims[i] < 1)
            throw DataError("grid dimension " + std::to_string(i) + " must be >= 1");
        if (!(voxel_size[i] > 0.0))
            throw DataError("voxel size " + std::to_string(i) + " must be > 0");
    }
    if (std::fabs(affine.topLeftCorner<3, 3>().determinant()) < 1e-12)
        throw DataError("grid affine is singular");
}

bool VolumeGrid::same_as(const VolumeGrid& other, double tol) const
{
    return dims == other.dims && (affine - other.affine).cwiseAbs().maxCoeff() <= tol;
}

// ---------------------------------------------------------------------------
// NIfTI-1

namespace {

struct NiftiHeader {
    std::int32_t sizeof_hdr;
    char data_type[10];
    char db_name[18];
    std::int32_t extents;
    std::int16_t session_error;
    char regular;
    char dim_info;
    std::int16_t dim[8];
    float intent_p1, intent_p2, intent_p3;
    std::int16_t intent_code;
    std::int16_t datatype;
    std::int16_t bitpix;
    std::int16_t slice_start;
    float pixdim[8];
    float vox_offset;
    float scl_slope, scl_inter;
    std::int16_t slice_end;
    char slice_code;
    char xyzt_units;
    float cal_max, cal_min;
    float slice_duration;
    float toffset;
    std::int32_t glmax, glmin;
    char descrip[80];
    char aux_file[24];
    std::int16_t qform_code, sform_code;
    float quatern_b, quatern_c, quatern_d;
    float qoffset_x, qoffset_y, qoffset_z;
    float srow_x[4], srow_y[4], srow_z[4];
    char intent_name[16];
    char magic[4];
};
static_assert(sizeof(NiftiHeader) == 348, "NIfTI-1 header must be 348 bytes");

constexpr std::int16_t kDtInt16 = 4;
constexpr std::int16_t kDtInt32 = 8;
constexpr std::int16_t kDtFloat32 = 16;
constexpr std::int16_t kDtFloat64 = 64;

template <typename T>
void swap_bytes(T& v)
{
    auto* p = reinterpret_cast<unsigned char*>(&v);
    std::reverse(p, p + sizeof(T));
}

void swap_header(NiftiHeader& h)
{
    swap_bytes(h.sizeof_hdr);
    swap_bytes(h.extents);
    swap_bytes(h.session_error);
    for (auto& d : h.dim)
        swap_bytes(d);
    swap_bytes(h.intent_p1);
    swap_bytes(h.intent_p2);
    swap_bytes(h.intent_p3);
    swap_bytes(h.intent_code);
    swap_bytes(h.datatype);
    swap_bytes(h.bitpix);
    swap_bytes(h.slice_start);
    for (auto& p : h.pixdim)
        swap_bytes(p);
    swap_bytes(h.vox_offset);
    swap_bytes(h.scl_slope);
    swap_bytes(h.scl_inter);
    swap_bytes(h.slice_end);
    swap_bytes(h.cal_max);
    swap_bytes(h.cal_min);
    swap_bytes(h.slice_duration);
    swap_bytes(h.toffset);
    swap_bytes(h.glmax);
    swap_bytes(h.glmin);
    swap_bytes(h.qform_code);
    swap_bytes(h.sform_code);
    swap_bytes(h.quatern_b);
    swap_bytes(h.quatern_c);
    swap_bytes(h.quatern_d);
    swap_bytes(h.qoffset_x);
    swap_bytes(h.qoffset_y);
    swap_bytes(h.qoffset_z);
    for (int i = 0; i < 4; ++i) {
        swap_bytes(h.srow_x[i]);
        swap_bytes(h.srow_y[i]);
        swap_bytes(h.srow_z[i]);
    }
}

bool ends_with(const std::string& s, const std::string& suffix)
{
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

enum class Format { nifti, nifti_gz, raw };

Format format_of(const fs::path& path)
{
    const std::string s = path.string();
    if (ends_with(s, ".nii.gz"))
        return Format::nifti_gz;
    if (ends_with(s, ".nii"))
        return Format::nifti;
    if (ends_with(s, ".raw"))
        return Format::raw;
    throw DataError("unsupported volume extension (expected .nii, .nii.gz or .raw): " + s);
}

std::int16_t nifti_code(DataType t)
{
    switch (t) {
    case DataType::int16: return kDtInt16;
    case DataType::int32: return kDtInt32;
    case DataType::float32: return kDtFloat32;
    case DataType::float64: return kDtFloat64;
    }
    return kDtFloat32;
}

std::size_t type_size(DataType t)
{
    switch (t) {
    case DataType::int16: return 2;
    case DataType::int32: return 4;
    case DataType::float32: return 4;
    case DataType::float64: return 8;
    }
    return 4;
}

DataType from_nifti_code(std::int16_t code)
{
    switch (code) {
    case kDtInt16: return DataType::int16;
    case kDtInt32: return DataType::int32;
    case kDtFloat32: return DataType::float32;
    case kDtFloat64: return DataType::float64;
    default: throw DataError("unsupported NIfTI datatype code " + std::to_string(code));
    }
}

const char* dtype_name(DataType t)
{
    switch (t) {
    case DataType::int16: return "int16";
    case DataType::int32: return "int32";
    case DataType::float32: return "float32";
    case DataType::float64: return "float64";
    }
    return "float32";
}

DataType dtype_from_name(const std::string& s)
{
    if (s == "int16") return DataType::int16;
    if (s == "int32") return DataType::int32;
    if (s == "float32") return DataType::float32;
    if (s == "float64") return DataType::float64;
    throw DataError("unsupported raw datatype '" + s + "'");
}

template <typename T>
void decode_as(const unsigned char* src, std::size_t n, bool swap, std::vector<double>& out)
{
    out.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        T v;
        std::memcpy(&v, src + i * sizeof(T), sizeof(T));
        if (swap)
            swap_bytes(v);
        out[i] = static_cast<double>(v);
    }
}

void decode(const unsigned char* bytes, DataType t, std::size_t n, bool swap, std::vector<double>& out)
{
    switch (t) {
    case DataType::int16: decode_as<std::int16_t>(bytes, n, swap, out); break;
    case DataType::int32: decode_as<std::int32_t>(bytes, n, swap, out); break;
    case DataType::float32: decode_as<float>(bytes, n, swap, out); break;
    case DataType::float64: decode_as<double>(bytes, n, swap, out); break;
    }
}

template <typename T>
void encode_as(const std::vector<double>& src, std::vector<unsigned char>& out)
{
    out.resize(src.size() * sizeof(T));
    for (std::size_t i = 0; i < src.size(); ++i) {
        T v;
        if constexpr (std::is_integral_v<T>) {
            const double r = std::nearbyint(src[i]);
            if (!(r >= double(std::numeric_limits<T>::min()) && r <= double(std::numeric_limits<T>::max())))
                throw DataError("value out of range for integer datatype");
            v = static_cast<T>(r);
        } else {
            v = static_cast<T>(src[i]);
        }
        std::memcpy(out.data() + i * sizeof(T), &v, sizeof(T));
    }
}

std::vector<unsigned char> encode(const std::vector<double>& src, DataType t)
{
    std::vector<unsigned char> out;
    switch (t) {
    case DataType::int16: encode_as<std::int16_t>(src, out); break;
    case DataType::int32: encode_as<std::int32_t>(src, out); break;
    case DataType::float32: encode_as<float>(src, out); break;
    case DataType::float64: encode_as<double>(src, out); break;
    }
    return out;
}

/// Reads a whole file; gzread passes uncompressed files through unchanged.
std::vector<unsigned char> slurp(const fs::path& path)
{
    gzFile f = gzopen(path.string().c_str(), "rb");
    if (!f)
        throw DataError("cannot open " + path.string());
    std::vector<unsigned char> out;
    std::error_code ec;
    if (const auto size = fs::file_size(path, ec); !ec)
        out.reserve(static_cast<std::size_t>(size));
    std::vector<unsigned char> buf(1 << 20);
    for (;;) {
        const int n = gzread(f, buf.data(), static_cast<unsigned>(buf.size()));
        if (n < 0) {
            gzclose(f);
            throw DataError("decompression failed for " + path.string());
        }
        if (n == 0)
            break;
        out.insert(out.end(), buf.begin(), buf.begin() + n);
    }
    gzclose(f);
    return out;
}

Eigen::Matrix4d qform_affine(const NiftiHeader& h)
{
    double b = h.quatern_b, c = h.quatern_c, d = h.quatern_d;
    double a = 1.0 - (b * b + c * c + d * d);
    if (a < 1e-7) {
        a = 1.0 / std::sqrt(b * b + c * c + d * d);
        b *= a;
        c *= a;
        d *= a;
        a = 0.0;
    } else {
        a = std::sqrt(a);
    }
    const double qfac = h.pixdim[0] < 0 ? -1.0 : 1.0;
    const double dx = h.pixdim[1] > 0 ? h.pixdim[1] : 1.0;
    const double dy = h.pixdim[2] > 0 ? h.pixdim[2] : 1.0;
    const double dz = (h.pixdim[3] > 0 ? h.pixdim[3] : 1.0) * qfac;
    Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
    m(0, 0) = (a * a + b * b - c * c - d * d) * dx;
    m(0, 1) = 2 * (b * c - a * d) * dy;
    m(0, 2) = 2 * (b * d + a * c) * dz;
    m(1, 0) = 2 * (b * c + a * d) * dx;
    m(1, 1) = (a * a + c * c - b * b - d * d) * dy;
    m(1, 2) = 2 * (c * d - a * b) * dz;
    m(2, 0) = 2 * (b * d - a * c) * dx;
    m(2, 1) = 2 * (c * d + a * b) * dy;
    m(2, 2) = (a * a + d * d - c * c - b * b) * dz;
    m(0, 3) = h.qoffset_x;
    m(1, 3) = h.qoffset_y;
    m(2, 3) = h.qoffset_z;
    return m;
}

Volume read_nifti(const fs::path& path)
{
    const auto bytes = slurp(path);
    if (bytes.size() < sizeof(NiftiHeader))
        throw DataError("malformed NIfTI header (file too short): " + path.string());
    NiftiHeader h;
    std::memcpy(&h, bytes.data(), sizeof h);
    bool swap = false;
    if (h.dim[0] < 1 || h.dim[0] > 7) {
        swap_header(h);
        swap = true;
        if (h.dim[0] < 1 || h.dim[0] > 7)
            throw DataError("malformed NIfTI header (dim[0] out of range): " + path.string());
    }
    if (h.sizeof_hdr != 348)
        throw DataError("malformed NIfTI header (sizeof_hdr != 348): " + path.string());
    if (std::memcmp(h.magic, "n+1", 4) != 0)
        throw DataError("not a single-file NIfTI-1 image (magic != n+1): " + path.string());
    if (h.dim[0] > 4)
        for (int i = 5; i <= h.dim[0]; ++i)
            if (h.dim[i] > 1)
                throw DataError("volumes with more than 4 dimensions are not supported: " + path.string());

    const DataType dt = from_nifti_code(h.datatype);
    if (h.bitpix != static_cast<std::int16_t>(8 * type_size(dt)))
        throw DataError("bitpix does not match datatype in " + path.string());

    Volume vol;
    std::array<std::int64_t, 3> dims{1, 1, 1};
    for (int i = 0; i < 3; ++i)
        dims[i] = i < h.dim[0] ? std::max<std::int64_t>(h.dim[i + 1], 0) : 1;
    vol.nt = h.dim[0] >= 4 ? h.dim[4] : 1;
    if (vol.nt < 1 || dims[0] < 1 || dims[1] < 1 || dims[2] < 1)
        throw DataError("malformed NIfTI header (nonpositive dimension): " + path.string());
    std::array<double, 3> vs;
    for (int i = 0; i < 3; ++i)
        vs[i] = h.pixdim[i + 1] > 0 ? h.pixdim[i + 1] : 1.0;
    vol.grid = VolumeGrid::make(dims, vs);
    if (h.sform_code > 0) {
        for (int j = 0; j < 4; ++j) {
            vol.grid.affine(0, j) = h.srow_x[j];
            vol.grid.affine(1, j) = h.srow_y[j];
            vol.grid.affine(2, j) = h.srow_z[j];
        }
    } else if (h.qform_code > 0) {
        vol.grid.affine = qform_affine(h);
    }

    const auto offset = static_cast<std::size_t>(h.vox_offset);
    if (offset < sizeof(NiftiHeader))
        throw DataError("malformed NIfTI header (vox_offset < 348): " + path.string());
    const std::size_t n = static_cast<std::size_t>(vol.grid.n_voxels() * vol.nt);
    const std::size_t need = offset + n * type_size(dt);
    if (bytes.size() < need)
        throw DataError("NIfTI payload truncated: " + path.string());
    decode(bytes.data() + offset, dt, n, swap, vol.data);
    if (h.scl_slope != 0.0f && std::isfinite(h.scl_slope) && (h.scl_slope != 1.0f || h.scl_inter != 0.0f)) {
        for (auto& v : vol.data)
            v = v * h.scl_slope + h.scl_inter;
    }
    return vol;
}

void write_nifti(const fs::path& path, const Volume& vol, DataType dt, bool gz)
{
    NiftiHeader h;
    std::memset(&h, 0, sizeof h);
    h.sizeof_hdr = 348;
    h.regular = 'r';
    h.dim[0] = vol.nt > 1 ? 4 : 3;
    for (int i = 0; i < 3; ++i) {
        if (vol.grid.dims[i] > std::numeric_limits<std::int16_t>::max())
            throw DataError("grid dimension too large for NIfTI-1");
        h.dim[i + 1] = static_cast<std::int16_t>(vol.grid.dims[i]);
    }
    h.dim[4] = static_cast<std::int16_t>(vol.nt);
    for (int i = 5; i < 8; ++i)
        h.dim[i] = 1;
    h.datatype = nifti_code(dt);
    h.bitpix = static_cast<std::int16_t>(8 * type_size(dt));
    h.pixdim[0] = 1.0f;
    for (int i = 0; i < 3; ++i)
        h.pixdim[i + 1] = static_cast<float>(vol.grid.voxel_size[i]);
    h.pixdim[4] = 1.0f;
    h.vox_offset = 352.0f;
    h.scl_slope = 1.0f;
    h.xyzt_units = 2 | 8;  // mm, seconds
    h.sform_code = 2;
    h.qform_code = 0;
    for (int j = 0; j < 4; ++j) {
        h.srow_x[j] = static_cast<float>(vol.grid.affine(0, j));
        h.srow_y[j] = static_cast<float>(vol.grid.affine(1, j));
        h.srow_z[j] = static_cast<float>(vol.grid.affine(2, j));
    }
    std::memcpy(h.magic, "n+1", 4);

    const auto payload = encode(vol.data, dt);
    const char ext[4] = {0, 0, 0, 0};

    if (gz) {
        gzFile f = gzopen(path.string().c_str(), "wb6");
        if (!f)
            throw DataError("cannot write " + path.string());
        bool ok = gzwrite(f, &h, sizeof h) == static_cast<int>(sizeof h);
        ok = ok && gzwrite(f, ext, 4) == 4;
        std::size_t done = 0;
        while (ok && done < payload.size()) {
            const auto chunk = static_cast<unsigned>(std::min<std::size_t>(payload.size() - done, 1u << 30));
            ok = gzwrite(f, payload.data() + done, chunk) == static_cast<int>(chunk);
            done += chunk;
        }
        if (gzclose(f) != Z_OK || !ok)
            throw DataError("write failed: " + path.string());
    } else {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out)
            throw DataError("cannot write " + path.string());
        out.write(reinterpret_cast<const char*>(&h), sizeof h);
        out.write(ext, 4);
        out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
        if (!out)
            throw DataError("write failed: " + path.string());
    }
}

// ---------------------------------------------------------------------------
// Raw fallback: "<file>.raw" payload plus "<file>.raw.hdr" text sidecar:
//   dims nx ny nz [nt]
//   dtype float32
//   voxel_size dx dy dz

fs::path sidecar(const fs::path& path)
{
    return fs::path(path.string() + ".hdr");
}

Volume read_raw(const fs::path& path)
{
    std::ifstream hdr(sidecar(path));
    if (!hdr)
        throw DataError("missing raw sidecar header " + sidecar(path).string());
    Volume vol;
    std::array<std::int64_t, 3> dims{0, 0, 0};
    std::array<double, 3> vs{1, 1, 1};
    DataType dt = DataType::float32;
    bool have_dims = false;
    std::string line;
    while (std::getline(hdr, line)) {
        std::istringstream ls(line);
        std::string key;
        if (!(ls >> key) || key[0] == '#')
            continue;
        if (key == "dims") {
            ls >> dims[0] >> dims[1] >> dims[2];
            if (!ls)
                throw DataError("malformed raw header dims line");
            std::int64_t nt = 1;
            if (ls >> nt)
                vol.nt = nt;
            have_dims = true;
        } else if (key == "dtype") {
            std::string name;
            ls >> name;
            dt = dtype_from_name(name);
        } else if (key == "voxel_size") {
            ls >> vs[0] >> vs[1] >> vs[2];
            if (!ls)
                throw DataError("malformed raw header voxel_size line");
        } else {
            throw DataError("unknown raw header key '" + key + "'");
        }
    }
    if (!have_dims)
        throw DataError("raw header lacks dims");
    vol.grid = VolumeGrid::make(dims, vs);
    vol.grid.validate();
    if (vol.nt < 1)
        throw DataError("raw header has nonpositive time dimension");
    const auto bytes = slurp(path);
    const std::size_t n = static_cast<std::size_t>(vol.grid.n_voxels() * vol.nt);
    if (bytes.size() != n * type_size(dt))
        throw DataError("raw payload size does not match header: " + path.string());
    decode(bytes.data(), dt, n, false, vol.data);
    return vol;
}

void write_raw(const fs::path& path, const Volume& vol, DataType dt)
{
    {
        std::ofstream hdr(sidecar(path), std::ios::trunc);
        if (!hdr)
            throw DataError("cannot write " + sidecar(path).string());
        hdr.precision(17);
        hdr << "dims " << vol.grid.dims[0] << ' ' << vol.grid.dims[1] << ' ' << vol.grid.dims[2];
        if (vol.nt > 1)
            hdr << ' ' << vol.nt;
        hdr << "\ndtype " << dtype_name(dt) << "\nvoxel_size " << vol.grid.voxel_size[0] << ' '
            << vol.grid.voxel_size[1] << ' ' << vol.grid.voxel_size[2] << '\n';
    }
    const auto payload = encode(vol.data, dt);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw DataError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
    if (!out)
        throw DataError("write failed: " + path.string());
}

} // namespace

Volume read_volume(const fs::path& path)
{
    switch (format_of(path)) {
    case Format::nifti:
    case Format::nifti_gz: return read_nifti(path);
    case Format::raw: return read_raw(path);
    }
    throw DataError("unreachable");
}

void write_volume_full(const fs::path& path, const Volume& vol, DataType dtype)
{
    if (vol.data.size() != static_cast<std::size_t>(vol.grid.n_voxels() * vol.nt))
        throw DataError("volume payload length does not match its grid");
    switch (format_of(path)) {
    case Format::nifti: write_nifti(path, vol, dtype, false); break;
    case Format::nifti_gz: write_nifti(path, vol, dtype, true); break;
    case Format::raw: write_raw(path, vol, dtype); break;
    }
}

// ---------------------------------------------------------------------------
// Masks and parcellations

BrainMask BrainMask::from_values(const VolumeGrid& grid, std::span<const double> values)
{
    if (static_cast<std::int64_t>(values.size()) != grid.n_voxels())
        throw DataError("mask length does not match grid");
    BrainMask m;
    m.grid = grid;
    m.lookup.assign(values.size(), -1);
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (values[i] != 0.0) {
            m.lookup[i] = static_cast<std::int64_t>(m.voxels.size());
            m.voxels.push_back(static_cast<std::int64_t>(i));
        }
    }
    if (m.voxels.empty())
        throw DataError("mask contains no voxels");
    return m;
}

BrainMask BrainMask::full(const VolumeGrid& grid)
{
    std::vector<double> ones(static_cast<std::size_t>(grid.n_voxels()), 1.0);
    return from_values(grid, ones);
}

BrainMask read_mask(const fs::path& path)
{
    const Volume v = read_volume(path);
    if (v.nt != 1)
        throw DataError("mask must be a 3-D volume: " + path.string());
    v.grid.validate();
    return BrainMask::from_values(v.grid, v.data);
}

Parcellation read_parcellation(const fs::path& path)
{
    const Volume v = read_volume(path);
    if (v.nt != 1)
        throw DataError("parcellation must be a 3-D volume: " + path.string());
    v.grid.validate();
    Parcellation p;
    p.grid = v.grid;
    p.label.resize(v.data.size());
    std::set<std::int32_t> ids;
    for (std::size_t i = 0; i < v.data.size(); ++i) {
        const double x = v.data[i];
        if (!std::isfinite(x) || x < 0 || x != std::floor(x) || x > std::numeric_limits<std::int32_t>::max())
            throw DataError("parcellation labels must be nonnegative integers: " + path.string());
        p.label[i] = static_cast<std::int32_t>(x);
        if (p.label[i] > 0)
            ids.insert(p.label[i]);
    }
    if (ids.empty())
        throw DataError("parcellation has no labelled voxels: " + path.string());
    p.roi_ids.assign(ids.begin(), ids.end());
    return p;
}

MaskedParcellation harmonize(const Parcellation& parc, const BrainMask& mask)
{
    if (!parc.grid.same_as(mask.grid))
        throw DataError("parcellation and mask grids differ (dims or affine)");
    MaskedParcellation out;
    const auto nv = static_cast<std::size_t>(mask.size());
    out.label.resize(nv);
    std::set<std::int32_t> present;
    std::vector<std::size_t> unlabeled;
    for (std::size_t v = 0; v < nv; ++v) {
        out.label[v] = parc.label[static_cast<std::size_t>(mask.voxels[v])];
        if (out.label[v] > 0)
            present.insert(out.label[v]);
        else
            unlabeled.push_back(v);
    }
    if (present.empty())
        throw DataError("no masked voxel carries a parcellation label");
    for (auto id : parc.roi_ids)
        if (!present.count(id))
            out.dropped.push_back(id);
    if (!out.dropped.empty())
        log::warn("dropped " + std::to_string(out.dropped.size()) + " parcellation label(s) absent from the mask");

    if (!unlabeled.empty()) {
        std::vector<Eigen::Vector3d> pos(nv);
        for (std::size_t v = 0; v < nv; ++v) {
            const auto c = mask.grid.coords(mask.voxels[v]);
            pos[v] = Eigen::Vector3d(c[0] * mask.grid.voxel_size[0], c[1] * mask.grid.voxel_size[1],
                                     c[2] * mask.grid.voxel_size[2]);
        }
        std::vector<std::int32_t> assigned(unlabeled.size());
        for (std::size_t u = 0; u < unlabeled.size(); ++u) {
            double best = std::numeric_limits<double>::infinity();
            std::int32_t best_label = 0;
            for (std::size_t v = 0; v < nv; ++v) {
                if (out.label[v] <= 0)
                    continue;
                const double d2 = (pos[v] - pos[unlabeled[u]]).squaredNorm();
                if (d2 < best - 1e-9 || (std::fabs(d2 - best) <= 1e-9 && out.label[v] < best_label)) {
                    best = d2;
                    best_label = out.label[v];
                }
            }
            assigned[u] = best_label;
        }
        for (std::size_t u = 0; u < unlabeled.size(); ++u)
            out.label[unlabeled[u]] = assigned[u];
        out.reassigned = static_cast<std::int64_t>(unlabeled.size());
        log::warn("reassigned " + std::to_string(unlabeled.size()) + " unlabelled masked voxel(s) to the nearest ROI");
    }

    out.roi_ids.assign(present.begin(), present.end());
    std::map<std::int32_t, std::size_t> slot;
    for (std::size_t r = 0; r < out.roi_ids.size(); ++r)
        slot[out.roi_ids[r]] = r;
    out.members.resize(out.roi_ids.size());
    for (std::size_t v = 0; v < nv; ++v)
        out.members[slot[out.label[v]]].push_back(static_cast<std::int64_t>(v));
    return out;
}

// ---------------------------------------------------------------------------
// Masked volumes

void write_volume(const fs::path& path, const VolumeGrid& grid, std::span<const double> values, const BrainMask& mask,
                  DataType dtype)
{
    if (static_cast<std::int64_t>(values.size()) != mask.size())
        throw DataError("value count " + std::to_string(values.size()) + " does not match mask size " +
                        std::to_string(mask.size()));
    if (!grid.same_as(mask.grid))
        throw DataError("grid does not match mask grid");
    Volume vol;
    vol.grid = grid;
    vol.data.assign(static_cast<std::size_t>(grid.n_voxels()), 0.0);
    for (std::size_t v = 0; v < values.size(); ++v)
        vol.data[static_cast<std::size_t>(mask.voxels[v])] = values[v];
    write_volume_full(path, vol, dtype);
}

std::vector<double> read_masked_values(const fs::path& path, const BrainMask& mask)
{
    const Volume v = read_volume(path);
    if (v.nt != 1)
        throw DataError("expected a 3-D volume: " + path.string());
    if (!v.grid.same_as(mask.grid))
        throw DataError("volume grid does not match mask: " + path.string());
    std::vector<double> out(static_cast<std::size_t>(mask.size()));
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = v.data[static_cast<std::size_t>(mask.voxels[i])];
    return out;
}

Dataset4D read_dataset(const fs::path& path, const BrainMask* mask)
{
    Volume v = read_volume(path);
    v.grid.validate();
    if (v.nt <= 1)
        throw DataError("not a time series volume: " + path.string());
    if (v.nt < kMinSeriesLength)
        throw DataError("time series has " + std::to_string(v.nt) + " points; at least " +
                        std::to_string(kMinSeriesLength) + " required: " + path.string());
    BrainMask full;
    if (mask) {
        if (!v.grid.same_as(mask->grid))
            throw DataError("dataset dimensions do not match the mask: " + path.string());
    } else {
        full = BrainMask::full(v.grid);
        mask = &full;
    }
    Dataset4D ds;
    ds.grid = v.grid;
    ds.T = v.nt;
    ds.subject_id = path.filename().string();
    const auto nvox = static_cast<std::size_t>(v.grid.n_voxels());
    ds.data.resize(static_cast<std::size_t>(mask->size() * v.nt));
    // Tiled transpose from time-major to voxel-major.
    constexpr std::int64_t kTile = 64;
    for (std::int64_t m0 = 0; m0 < mask->size(); m0 += kTile)
        for (std::int64_t t0 = 0; t0 < v.nt; t0 += kTile)
            for (std::int64_t m = m0; m < std::min(m0 + kTile, mask->size()); ++m) {
                const auto lin = static_cast<std::size_t>(mask->voxels[static_cast<std::size_t>(m)]);
                for (std::int64_t t = t0; t < std::min(t0 + kTile, v.nt); ++t) {
                    const double x = v.data[lin + nvox * static_cast<std::size_t>(t)];
                    if (!std::isfinite(x))
                        throw DataError("non-finite value in " + path.string());
                    ds.data[static_cast<std::size_t>(m * v.nt + t)] = x;
                }
            }
    return ds;
}

void write_dataset(const fs::path& path, const Dataset4D& ds, const BrainMask& mask, DataType dtype)
{
    if (ds.n_voxels() != mask.size())
        throw DataError("dataset voxel count does not match mask");
    Volume vol;
    vol.grid = ds.grid;
    vol.nt = ds.T;
    const auto nvox = static_cast<std::size_t>(ds.grid.n_voxels());
    vol.data.assign(nvox * static_cast<std::size_t>(ds.T), 0.0);
    constexpr std::int64_t kTile = 64;
    for (std::int64_t m0 = 0; m0 < mask.size(); m0 += kTile)
        for (std::int64_t t0 = 0; t0 < ds.T; t0 += kTile)
            for (std::int64_t m = m0; m < std::min(m0 + kTile, mask.size()); ++m) {
                const auto lin = static_cast<std::size_t>(mask.voxels[static_cast<std::size_t>(m)]);
                for (std::int64_t t = t0; t < std::min(t0 + kTile, ds.T); ++t)
                    vol.data[lin + nvox * static_cast<std::size_t>(t)] =
                        ds.data[static_cast<std::size_t>(m * ds.T + t)];
            }
    write_volume_full(path, vol, dtype);
}

// ---------------------------------------------------------------------------
// Covariates

namespace {

std::string trim(const std::string& s)
{
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos)
        return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_csv(const std::string& line)
{
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cur.push_back('"');
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                cur.push_back(c);
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.push_back(trim(cur));
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    out.push_back(trim(cur));
    return out;
}

} // namespace

CovariateTable read_covariates(const fs::path& path, const std::vector<std::string>& required_columns,
                               const std::vector<std::string>* subject_order)
{
    std::ifstream in(path);
    if (!in)
        throw DataError("cannot open covariate table " + path.string());
    std::string line;
    if (!std::getline(in, line))
        throw DataError("covariate table is empty: " + path.string());
    if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF)
        line = line.substr(3);  // UTF-8 byte order mark
    const auto header = split_csv(line);
    std::map<std::string, std::size_t> col;
    for (std::size_t i = 0; i < header.size(); ++i)
        col[header[i]] = i;
    if (!col.count("subject_id"))
        throw DataError("covariate table lacks a subject_id column");

    std::vector<std::string> wanted;
    for (const auto& name : required_columns) {
        if (name == "intercept")
            continue;
        if (!col.count(name))
            throw DataError("missing required column '" + name + "'");
        wanted.push_back(name);
    }

    std::vector<std::string> ids;
    std::vector<std::vector<double>> rows;
    std::set<std::string> seen;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty())
            continue;
        const auto cells = split_csv(line);
        if (cells.size() != header.size())
            throw DataError("row " + std::to_string(line_no) + " has " + std::to_string(cells.size()) +
                            " cells, header has " + std::to_string(header.size()));
        const auto& id = cells[col["subject_id"]];
        if (id.empty())
            throw DataError("empty subject id on row " + std::to_string(line_no));
        if (!seen.insert(id).second)
            throw DataError("duplicate subject id '" + id + "'");
        std::vector<double> row;
        for (const auto& name : wanted) {
            const auto& cell = cells[col[name]];
            double v = 0;
            std::size_t used = 0;
            try {
                v = std::stod(cell, &used);
            } catch (...) {
                used = 0;
            }
            if (cell.empty() || used != cell.size() || !std::isfinite(v))
                throw DataError("non-numeric cell '" + cell + "' in column '" + name + "' row " +
                                std::to_string(line_no));
            row.push_back(v);
        }
        ids.push_back(id);
        rows.push_back(std::move(row));
    }
    if (ids.empty())
        throw DataError("covariate table has no rows: " + path.string());

    std::vector<std::size_t> order(ids.size());
    for (std::size_t i = 0; i < order.size(); ++i)
        order[i] = i;
    if (subject_order) {
        std::map<std::string, std::size_t> where;
        for (std::size_t i = 0; i < ids.size(); ++i)
            where[ids[i]] = i;
        order.clear();
        for (const auto& s : *subject_order) {
            auto it = where.find(s);
            if (it == where.end())
                throw DataError("subject '" + s + "' from the manifest is missing in the covariate table");
            order.push_back(it->second);
        }
    }

    CovariateTable t;
    const auto n = static_cast<Eigen::Index>(order.size());
    t.Z.resize(n, static_cast<Eigen::Index>(wanted.size() + 1));
    t.column_names.push_back("intercept");
    for (const auto& w : wanted)
        t.column_names.push_back(w);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto src = order[static_cast<std::size_t>(i)];
        t.subject_ids.push_back(ids[src]);
        t.Z(i, 0) = 1.0;
        for (std::size_t j = 0; j < wanted.size(); ++j)
            t.Z(i, static_cast<Eigen::Index>(j + 1)) = rows[src][j];
    }
    for (Eigen::Index j = 1; j < t.Z.cols(); ++j) {
        const auto c = t.Z.col(j);
        if ((c.array() - c.mean()).abs().maxCoeff() == 0.0)
            throw DataError("zero-variance covariate '" + t.column_names[static_cast<std::size_t>(j)] + "'");
    }
    return t;
}

void write_covariates(const fs::path& path, const CovariateTable& table)
{
    std::ofstream out(path, std::ios::trunc);
    if (!out)
        throw DataError("cannot write " + path.string());
    out.precision(17);
    out << "subject_id";
    for (std::size_t j = 1; j < table.column_names.size(); ++j)
        out << ',' << table.column_names[j];
    out << '\n';
    for (Eigen::Index i = 0; i < table.N(); ++i) {
        out << table.subject_ids[static_cast<std::size_t>(i)];
        for (Eigen::Index j = 1; j < table.Q(); ++j)
            out << ',' << table.Z(i, j);
        out << '\n';
    }
}

} // namespace longmem
