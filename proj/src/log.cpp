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

#include "longmem/log.hpp"

#include <atomic>
#include <iostream>
#include <mutex>

namespace longmem::log {

namespace {
std::atomic<Level> g_level{Level::warn};
std::mutex g_mutex;

void emit(const char* tag, std::string_view msg)
{
    std::lock_guard lock(g_mutex);
    std::cerr << "[longmem " << tag << "] " << msg << '\n';
}
} // namespace

void set_level(Level level) { g_level = level; }
Level level() { return g_level; }

void warn(std::string_view msg)
{
    if (g_level >= Level::warn)
        emit("warn", msg);
}

void info(std::string_view msg)
{
    if (g_level >= Level::info)
        emit("info", msg);
}

void debug(std::string_view msg)
{
    if (g_level >= Level::debug)
        emit("debug", msg);
}

} // namespace longmem::log
