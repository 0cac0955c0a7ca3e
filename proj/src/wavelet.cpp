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

#include "longmem/wavelet.hpp"

#include "longmem/error.hpp"

#include <algorithm>
#include <bit>
#include <cmath>

namespace longmem {

namespace {

FilterBank make_bank(std::string name, std::vector<double> low, int moments)
{
    FilterBank b;
    b.name = std::move(name);
    b.lowpass = std::move(low);
    const std::size_t L = b.lowpass.size();
    b.highpass.resize(L);
    for (std::size_t k = 0; k < L; ++k)
        b.highpass[k] = (k % 2 == 0 ? 1.0 : -1.0) * b.lowpass[L - 1 - k];
    b.vanishing_moments = moments;
    return b;
}

bool is_pow2(std::size_t n)
{
    return n != 0 && (n & (n - 1)) == 0;
}

void check_levels(std::size_t T, const FilterBank& bank, int J)
{
    if (J < 1)
        throw DataError("number of wavelet levels must be >= 1");
    if (J >= 63 || (std::size_t{1} << J) > T)
        throw DataError("J=" + std::to_string(J) + " too large for series length " + std::to_string(T));
    if (bank.length() > T)
        throw DataError("filter longer than the series");
}

} // namespace

FilterBank FilterBank::haar()
{
    const double r = 1.0 / std::sqrt(2.0);
    return make_bank("haar", {r, r}, 1);
}

FilterBank FilterBank::db2()
{
    const double s3 = std::sqrt(3.0);
    const double n = 4.0 * std::sqrt(2.0);
    return make_bank("db2", {(1 + s3) / n, (3 + s3) / n, (3 - s3) / n, (1 - s3) / n}, 2);
}

FilterBank FilterBank::db4()
{
    return make_bank("db4",
                     {0.23037781330889650, 0.71484657055291565, 0.63088076792985891, -0.027983769416859854,
                      -0.18703481171909308, 0.030841381835560764, 0.032883011666885200, -0.010597401785069032},
                     4);
}

FilterBank FilterBank::by_name(const std::string& name)
{
    if (name == "haar" || name == "db1")
        return haar();
    if (name == "db2")
        return db2();
    if (name == "db4")
        return db4();
    throw UsageError("unknown wavelet '" + name + "' (expected haar, db2 or db4)");
}

std::size_t dyadic_length(std::size_t n)
{
    return n == 0 ? 0 : std::bit_floor(n);
}

int default_levels(std::size_t T)
{
    const std::size_t td = dyadic_length(T);
    const int log2 = std::bit_width(td) - 1;
    return std::clamp(log2 - 3, 3, 8);
}

WaveletDecomposition dwt_forward(std::span<const double> y, const FilterBank& bank, int J)
{
    const std::size_t T = dyadic_length(y.size());
    check_levels(T, bank, J);
    const std::size_t L = bank.length();
    WaveletDecomposition d;
    d.J = J;
    d.T_dyadic = T;
    d.detail.resize(static_cast<std::size_t>(J));

    std::vector<double> approx(y.begin(), y.begin() + static_cast<std::ptrdiff_t>(T));
    for (double v : approx)
        if (!std::isfinite(v))
            throw DataError("non-finite value in wavelet input");
    std::vector<double> next;
    for (int level = 0; level < J; ++level) {
        const std::size_t n = approx.size();
        const std::size_t half = n / 2;
        next.assign(half, 0.0);
        auto& det = d.detail[static_cast<std::size_t>(level)];
        det.assign(half, 0.0);
        for (std::size_t i = 0; i < half; ++i) {
            double a = 0.0, g = 0.0;
            std::size_t idx = 2 * i;
            for (std::size_t k = 0; k < L; ++k) {
                if (idx >= n)
                    idx -= n;
                a += bank.lowpass[k] * approx[idx];
                g += bank.highpass[k] * approx[idx];
                ++idx;
            }
            next[i] = a;
            det[i] = g;
        }
        approx.swap(next);
    }
    d.scaling = std::move(approx);
    return d;
}

std::vector<double> dwt_inverse(const WaveletDecomposition& d, const FilterBank& bank)
{
    if (d.J < 1 || d.detail.size() != static_cast<std::size_t>(d.J) || !is_pow2(d.T_dyadic))
        throw DataError("inconsistent wavelet decomposition");
    if (d.scaling.size() != (d.T_dyadic >> d.J))
        throw DataError("scaling coefficient count does not match T_dyadic / 2^J");
    for (int m = 1; m <= d.J; ++m)
        if (d.at_scale(m).size() != (d.T_dyadic >> m))
            throw DataError("detail length at scale " + std::to_string(m) + " does not match T_dyadic / 2^m");
    check_levels(d.T_dyadic, bank, d.J);

    const std::size_t L = bank.length();
    std::vector<double> approx = d.scaling;
    std::vector<double> up;
    for (int level = d.J - 1; level >= 0; --level) {
        const auto& det = d.detail[static_cast<std::size_t>(level)];
        const std::size_t half = approx.size();
        const std::size_t n = 2 * half;
        up.assign(n, 0.0);
        for (std::size_t i = 0; i < half; ++i) {
            std::size_t idx = 2 * i;
            for (std::size_t k = 0; k < L; ++k) {
                if (idx >= n)
                    idx -= n;
                up[idx] += bank.lowpass[k] * approx[i] + bank.highpass[k] * det[i];
                ++idx;
            }
        }
        approx.swap(up);
    }
    return approx;
}

Eigen::MatrixXd build_w_matrix(std::size_t T, const FilterBank& bank, int J)
{
    if (!is_pow2(T))
        throw DataError("build_w_matrix: T must be a power of two");
    if (T > (std::size_t{1} << 16))
        throw DataError("build_w_matrix: T above 2^16 refused (matrix mode is for testing)");
    check_levels(T, bank, J);
    const auto L = static_cast<Eigen::Index>(bank.length());

    // Per-level periodized analysis operators H_j, G_j of size n/2 x n.
    auto filter_op = [&](Eigen::Index n, const std::vector<double>& f) {
        Eigen::MatrixXd op = Eigen::MatrixXd::Zero(n / 2, n);
        for (Eigen::Index i = 0; i < n / 2; ++i)
            for (Eigen::Index k = 0; k < L; ++k)
                op(i, (2 * i + k) % n) += f[static_cast<std::size_t>(k)];
        return op;
    };

    const auto n0 = static_cast<Eigen::Index>(T);
    Eigen::MatrixXd W(n0, n0);
    Eigen::MatrixXd chain = Eigen::MatrixXd::Identity(n0, n0);  // H_{j-1} ... H_1
    Eigen::Index row = 0;
    Eigen::Index n = n0;
    for (int level = 0; level < J; ++level) {
        const Eigen::MatrixXd G = filter_op(n, bank.highpass);
        const Eigen::MatrixXd H = filter_op(n, bank.lowpass);
        W.middleRows(row, n / 2) = G * chain;
        row += n / 2;
        chain = (H * chain).eval();
        n /= 2;
    }
    W.middleRows(row, n) = chain;
    return W;
}

Eigen::VectorXd flatten(const WaveletDecomposition& d)
{
    Eigen::VectorXd v(static_cast<Eigen::Index>(d.T_dyadic));
    Eigen::Index pos = 0;
    for (const auto& det : d.detail)
        for (double x : det)
            v(pos++) = x;
    for (double x : d.scaling)
        v(pos++) = x;
    return v;
}

WaveletDecomposition unflatten(const Eigen::VectorXd& v, std::size_t T, int J)
{
    if (static_cast<std::size_t>(v.size()) != T || !is_pow2(T) || J < 1 || (std::size_t{1} << J) > T)
        throw DataError("unflatten: inconsistent length or level count");
    WaveletDecomposition d;
    d.J = J;
    d.T_dyadic = T;
    d.detail.resize(static_cast<std::size_t>(J));
    Eigen::Index pos = 0;
    for (int m = 1; m <= J; ++m) {
        auto& det = d.detail[static_cast<std::size_t>(m - 1)];
        det.resize(T >> m);
        for (auto& x : det)
            x = v(pos++);
    }
    d.scaling.resize(T >> J);
    for (auto& x : d.scaling)
        x = v(pos++);
    return d;
}

} // namespace longmem
