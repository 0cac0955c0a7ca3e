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

#include "longmem/matrix_io.hpp"

#include "longmem/error.hpp"

#include <bit>
#include <cstring>

namespace longmem {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

namespace {

constexpr char kMatMagic[9] = "LMMAT001";
constexpr char kIdxMagic[9] = "LMIDX001";
constexpr char kSeqMagic[9] = "LMSEQ001";

void write_u64(std::ostream& out, std::uint64_t v)
{
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint64_t read_u64(std::istream& in)
{
    std::uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    return v;
}

void expect_magic(std::istream& in, const char* magic, const std::filesystem::path& path)
{
    char buf[8];
    in.read(buf, 8);
    if (!in || std::memcmp(buf, magic, 8) != 0)
        throw DataError("bad binary header in " + path.string());
}

void write_rowmajor(std::ostream& out, const Eigen::MatrixXd& m)
{
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = m;
    out.write(reinterpret_cast<const char*>(rm.data()),
              static_cast<std::streamsize>(sizeof(double) * rm.size()));
}

bool read_rowmajor(std::istream& in, Eigen::MatrixXd& m, Eigen::Index rows, Eigen::Index cols)
{
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm(rows, cols);
    in.read(reinterpret_cast<char*>(rm.data()),
            static_cast<std::streamsize>(sizeof(double) * rm.size()));
    if (!in)
        return false;
    m = rm;
    return true;
}

} // namespace

void write_matrix(const std::filesystem::path& path, const Eigen::MatrixXd& m)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw DataError("cannot write " + path.string());
    out.write(kMatMagic, 8);
    write_u64(out, static_cast<std::uint64_t>(m.rows()));
    write_u64(out, static_cast<std::uint64_t>(m.cols()));
    write_rowmajor(out, m);
    if (!out)
        throw DataError("write failed: " + path.string());
}

Eigen::MatrixXd read_matrix(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw DataError("cannot open " + path.string());
    expect_magic(in, kMatMagic, path);
    const auto rows = static_cast<Eigen::Index>(read_u64(in));
    const auto cols = static_cast<Eigen::Index>(read_u64(in));
    if (!in || rows < 0 || cols < 0 || (rows > 0 && cols > (Eigen::Index{1} << 40) / rows))
        throw DataError("implausible matrix shape in " + path.string());
    Eigen::MatrixXd m;
    if (!read_rowmajor(in, m, rows, cols))
        throw DataError("truncated matrix payload in " + path.string());
    return m;
}

void write_index(const std::filesystem::path& path, const std::vector<std::int64_t>& idx)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw DataError("cannot write " + path.string());
    out.write(kIdxMagic, 8);
    write_u64(out, idx.size());
    write_u64(out, 1);
    out.write(reinterpret_cast<const char*>(idx.data()),
              static_cast<std::streamsize>(sizeof(std::int64_t) * idx.size()));
    if (!out)
        throw DataError("write failed: " + path.string());
}

std::vector<std::int64_t> read_index(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw DataError("cannot open " + path.string());
    expect_magic(in, kIdxMagic, path);
    const auto n = read_u64(in);
    read_u64(in);
    if (!in || n > (std::uint64_t{1} << 36))
        throw DataError("implausible index length in " + path.string());
    std::vector<std::int64_t> idx(n);
    in.read(reinterpret_cast<char*>(idx.data()), static_cast<std::streamsize>(sizeof(std::int64_t) * n));
    if (!in)
        throw DataError("truncated index payload in " + path.string());
    return idx;
}

MatrixSequenceWriter::MatrixSequenceWriter(const std::filesystem::path& path, Eigen::Index rows,
                                           Eigen::Index cols)
    : out_(path, std::ios::binary | std::ios::trunc), rows_(rows), cols_(cols)
{
    if (!out_)
        throw DataError("cannot write " + path.string());
    out_.write(kSeqMagic, 8);
    write_u64(out_, 0);
    write_u64(out_, static_cast<std::uint64_t>(rows));
    write_u64(out_, static_cast<std::uint64_t>(cols));
}

MatrixSequenceWriter::~MatrixSequenceWriter()
{
    if (!closed_) {
        try {
            close();
        } catch (...) {
        }
    }
}

void MatrixSequenceWriter::append(const Eigen::MatrixXd& m)
{
    if (m.rows() != rows_ || m.cols() != cols_)
        throw DataError("matrix sequence: shape mismatch on append");
    write_rowmajor(out_, m);
    ++count_;
}

void MatrixSequenceWriter::close()
{
    if (closed_)
        return;
    closed_ = true;
    out_.seekp(8);
    write_u64(out_, count_);
    out_.close();
    if (out_.fail())
        throw DataError("matrix sequence: write failed");
}

MatrixSequenceReader::MatrixSequenceReader(const std::filesystem::path& path)
    : in_(path, std::ios::binary), path_(path)
{
    if (!in_)
        throw DataError("cannot open " + path.string());
    expect_magic(in_, kSeqMagic, path);
    count_ = read_u64(in_);
    rows_ = static_cast<Eigen::Index>(read_u64(in_));
    cols_ = static_cast<Eigen::Index>(read_u64(in_));
    if (!in_)
        throw DataError("truncated sequence header in " + path.string());
    const auto expected = 32 + count_ * static_cast<std::uint64_t>(rows_ * cols_) * sizeof(double);
    if (std::filesystem::file_size(path) != expected)
        throw DataError("sequence payload size mismatch in " + path.string());
}

void MatrixSequenceReader::rewind()
{
    in_.clear();
    in_.seekg(32);
    read_ = 0;
}

bool MatrixSequenceReader::next(Eigen::MatrixXd& m)
{
    if (read_ >= count_)
        return false;
    if (!read_rowmajor(in_, m, rows_, cols_))
        throw DataError("truncated sequence payload in " + path_.string());
    ++read_;
    return true;
}

} // namespace longmem
