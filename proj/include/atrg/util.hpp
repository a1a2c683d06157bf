// Copyright 2026 The atrg Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef ATRG_UTIL_HPP
#define ATRG_UTIL_HPP

#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <functional>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "atrg/errors.hpp"

namespace atrg {

// FNV-1a, used for config/vocab/corpus digests embedded in artifacts.
inline uint64_t fnv1a_bytes(const void* bytes, size_t len,
                            uint64_t h = 14695981039346656037ull) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

inline uint64_t fnv1a(std::string_view s, uint64_t h = 14695981039346656037ull) {
  return fnv1a_bytes(s.data(), s.size(), h);
}

inline std::string hex64(uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

// Little-endian binary writer for the parameter file format.
class BinaryWriter {
 public:
  explicit BinaryWriter(const std::string& path) : out_(path, std::ios::binary) {
    if (!out_) throw DataError("cannot open for writing: " + path);
  }
  void write_bytes(const void* p, size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
  void write_u32(uint32_t v) { write_bytes(&v, 4); }
  void write_u64(uint64_t v) { write_bytes(&v, 8); }
  void write_f64(double v) { write_bytes(&v, 8); }
  void write_f64_block(const std::vector<double>& v) {
    write_bytes(v.data(), v.size() * sizeof(double));
  }
  bool good() const { return out_.good(); }

 private:
  std::ofstream out_;
};

class BinaryReader {
 public:
  explicit BinaryReader(const std::string& path) : in_(path, std::ios::binary) {
    if (!in_) throw DataError("cannot open for reading: " + path);
  }
  void read_bytes(void* p, size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(in_.gcount()) != n) throw DataError("truncated file");
  }
  uint32_t read_u32() { uint32_t v; read_bytes(&v, 4); return v; }
  uint64_t read_u64() { uint64_t v; read_bytes(&v, 8); return v; }
  double read_f64() { double v; read_bytes(&v, 8); return v; }
  void read_f64_block(std::vector<double>& v) {
    read_bytes(v.data(), v.size() * sizeof(double));
  }
  bool at_eof() { return in_.peek() == std::char_traits<char>::eof(); }

 private:
  std::ifstream in_;
};

inline uint64_t file_digest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open: " + path);
  uint64_t h = 14695981039346656037ull;
  char buf[4096];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    h = fnv1a_bytes(buf, static_cast<size_t>(in.gcount()), h);
  }
  return h;
}

// Worker cap: ATRG_THREADS env var, else hardware concurrency.
inline unsigned worker_count() {
  if (const char* env = std::getenv("ATRG_THREADS")) {
    long v = std::strtol(env, nullptr, 10);
    if (v >= 1) return static_cast<unsigned>(v);
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : hw;
}

// Index-parallel map over [0, n). Results are written by index, so the
// output is independent of scheduling. Exceptions propagate to the caller.
inline void parallel_for(size_t n, const std::function<void(size_t)>& fn) {
  unsigned workers = worker_count();
  if (workers <= 1 || n <= 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<size_t> next{0};
  std::exception_ptr err;
  std::atomic<bool> failed{false};
  auto run = [&]() {
    while (true) {
      size_t i = next.fetch_add(1);
      if (i >= n || failed.load()) return;
      try {
        fn(i);
      } catch (...) {
        if (!failed.exchange(true)) err = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  unsigned count = static_cast<unsigned>(std::min<size_t>(workers, n));
  pool.reserve(count);
  for (unsigned t = 0; t < count; ++t) pool.emplace_back(run);
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);
}

}  // namespace atrg

#endif  // ATRG_UTIL_HPP
