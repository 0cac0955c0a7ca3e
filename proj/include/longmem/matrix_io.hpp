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

#include <filesystem>
#include <cstdint>
#include <fstream>
#include <vector>

namespace longmem {

/**
 * Binary matrix file: 8-byte magic "LMMAT001", uint64 rows, uint64 cols,
 * then rows*cols little-endian float64 values in row-major order.
 */
void write_matrix(const std::filesystem::path& path, const Eigen::MatrixXd& m);
Eigen::MatrixXd read_matrix(const std::filesystem::path& path);

/// Same layout for integer index vectors with magic "LMIDX001" (cols = 1).
void write_index(const std::filesystem::path& path, const std::vector<std::int64_t>& idx);
std::vector<std::int64_t> read_index(const std::filesystem::path& path);

/**
 * Append-only writer for a sequence of equally-shaped matrices (a draw
 * archive). Header "LMSEQ001", uint64 count, rows, cols; count is patched
 * on close().
 */
class MatrixSequenceWriter {
public:
    MatrixSequenceWriter(const std::filesystem::path& path, Eigen::Index rows, Eigen::Index cols);
    ~MatrixSequenceWriter();
    void append(const Eigen::MatrixXd& m);
    void close();

private:
    std::ofstream out_;
    Eigen::Index rows_, cols_;
    std::uint64_t count_ = 0;
    bool closed_ = false;
};

class MatrixSequenceReader {
public:
    explicit MatrixSequenceReader(const std::filesystem::path& path);
    std::uint64_t count() const { return count_; }
    Eigen::Index rows() const { return rows_; }
    Eigen::Index cols() const { return cols_; }
    /// Position at the first matrix again.
    void rewind();
    /// Returns false at end of sequence.
    bool next(Eigen::MatrixXd& m);

private:
    std::ifstream in_;
    std::filesystem::path path_;
    std::uint64_t count_ = 0, read_ = 0;
    Eigen::Index rows_ = 0, cols_ = 0;
};

} // namespace longmem
