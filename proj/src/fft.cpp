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

#include "fft_internal.hpp"

#include <fftw3.h>

#include <map>
#include <mutex>

namespace longmem::detail {

namespace {

// One unaligned estimate-mode plan per size; fftw_execute_dft is thread safe.
fftw_plan plan_for(std::size_t n)
{
    static std::mutex m;
    static std::map<std::size_t, fftw_plan> plans;
    std::lock_guard lock(m);
    auto it = plans.find(n);
    if (it != plans.end())
        return it->second;
    std::vector<std::complex<double>> scratch(n);
    auto* data = reinterpret_cast<fftw_complex*>(scratch.data());
    fftw_plan p = fftw_plan_dft_1d(static_cast<int>(n), data, data, FFTW_FORWARD, FFTW_ESTIMATE | FFTW_UNALIGNED);
    plans.emplace(n, p);
    return p;
}

} // namespace

void fft_inplace(std::vector<std::complex<double>>& x)
{
    if (x.empty())
        return;
    auto* data = reinterpret_cast<fftw_complex*>(x.data());
    fftw_execute_dft(plan_for(x.size()), data, data);
}

} // namespace longmem::detail
