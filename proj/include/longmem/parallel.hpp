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

#include <cstddef>
#include <functional>

namespace longmem {

/// Worker count used when a caller passes 0.
unsigned default_threads();

/**
 * Run body(i) for i in [0, n) on up to `threads` workers.
 *
 * Indices are split into contiguous static chunks, so the work assignment is
 * a pure function of (n, threads). Callers write results into pre-sized
 * storage indexed by i; no reduction happens here. The first exception (by
 * index order of the chunk that raised it) is rethrown on the caller thread.
 */
void parallel_for(std::size_t n, unsigned threads, const std::function<void(std::size_t)>& body);

} // namespace longmem
