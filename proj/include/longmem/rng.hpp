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

#include <array>
#include <cstdint>

namespace longmem {

/**
 * Philox4x32-10 counter-based generator (Salmon et al., SC'11).
 *
 * The 64-bit seed forms the two key words. The 128-bit counter is split
 * into a 64-bit draw index (words 0,1) and two 32-bit stream identifiers
 * (words 2,3), so each (seed, stream_a, stream_b) triple addresses an
 * independent sequence. Output depends only on those values and on how many
 * numbers were consumed, never on thread scheduling.
 */
class Philox {
public:
    using Block = std::array<std::uint32_t, 4>;
    using Key = std::array<std::uint32_t, 2>;

    static constexpr std::uint32_t kMul0 = 0xD2511F53u;
    static constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
    static constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
    static constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;

    explicit Philox(std::uint64_t seed, std::uint32_t stream_a = 0, std::uint32_t stream_b = 0);

    /// Raw ten-round bijection; exposed for known-answer tests.
    static Block apply(Block ctr, Key key);

    std::uint64_t next_u64();

    /// Uniform on the open interval (0, 1) with 53 random bits.
    double uniform();

    /// Standard normal via inverse CDF of uniform().
    double normal();

    /// Gamma(shape, 1) via Marsaglia-Tsang; shape < 1 uses the boost trick.
    double gamma(double shape);

    /// Inverse-gamma with the given shape and rate (scale of the 1/x).
    double inv_gamma(double shape, double rate);

    std::uint64_t draws_consumed() const { return index_; }

private:
    void refill();

    Key key_;
    std::uint32_t stream_a_;
    std::uint32_t stream_b_;
    std::uint64_t index_ = 0;  // 128-bit blocks generated
    Block buffer_{};
    int pos_ = 4;              // next unread 32-bit word, 4 = empty
};

/// Inverse of the standard normal CDF (Wichura AS241, ~1e-16 relative).
double normal_quantile(double p);

/// Standard normal CDF.
double normal_cdf(double x);

/// SplitMix64 finalizer; used to derive child seeds from a parent seed.
std::uint64_t mix64(std::uint64_t x);

/// Tags separating the per-voxel stream families of different stages.
inline constexpr std::uint64_t kSimulateStreamTag = 0x53494d554c415445ull;  // "SIMULATE"
inline constexpr std::uint64_t kEstimateStreamTag = 0x455354494d415445ull;  // "ESTIMATE"
inline constexpr std::uint64_t kGroupStreamTag = 0x47524f5550474942ull;     // "GROUPGIB"
inline constexpr std::uint64_t kCovariateStreamTag = 0x434f564152494154ull; // "COVARIAT"

/// Derive a stage- or role-specific seed from a parent seed and a tag.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag);

} // namespace longmem
