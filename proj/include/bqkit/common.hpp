#pragma once

// Shared plumbing: error type, seeded random streams, little-endian byte
// helpers, atomic file writes and a small deterministic parallel_for.

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <functional>
#include <mutex>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace bqkit {

static_assert(std::endian::native == std::endian::little,
              "bqkit file formats assume a little-endian host");

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Bytes = std::vector<std::uint8_t>;

// ---------------------------------------------------------------------------
// Random streams
//
// Every consumer of randomness derives its own generator from the run seed and
// a stream name (plus optional indices), so the order in which rows or layers
// are processed never changes what they draw.

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream,
                                 std::uint64_t a = 0, std::uint64_t b = 0) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (char c : stream) {
    h ^= static_cast<std::uint8_t>(c);
    h *= 0x100000001b3ULL;
  }
  return splitmix64(splitmix64(splitmix64(seed ^ h) + a) + b);
}

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed, std::string_view stream,
                    std::uint64_t a = 0, std::uint64_t b = 0) {
  return Rng(derive_seed(seed, stream, a, b));
}

// Uniform double in [0, 1) from the raw 53 high bits.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Standard normal via Box-Muller. Written out so draws do not depend on the
// standard library's distribution implementation.
inline double standard_normal(Rng& rng) {
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  return static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n)) % n;
}

// ---------------------------------------------------------------------------
// Little-endian byte helpers

template <class T>
void put_le(Bytes& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
  out.insert(out.end(), p, p + sizeof(T));
}

template <class T>
T get_le(std::span<const std::uint8_t> in, std::size_t offset) {
  if (offset + sizeof(T) > in.size()) throw Error("truncated data");
  T value;
  std::memcpy(&value, in.data() + offset, sizeof(T));
  return value;
}

inline Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  Bytes data(size);
  if (size > 0 && !in.read(reinterpret_cast<char*>(data.data()),
                           static_cast<std::streamsize>(size)))
    throw Error("read failed: " + path.string());
  return data;
}

// Writes to a sibling temp file and renames it into place, so a failed write
// never leaves a partial file at `path`.
inline void write_file_atomic(const std::filesystem::path& path,
                              std::span<const std::uint8_t> data) {
  namespace fs = std::filesystem;
  const fs::path dir = path.has_parent_path() ? path.parent_path() : fs::path(".");
  if (!fs::is_directory(dir))
    throw Error("output directory does not exist: " + dir.string());
  fs::path tmp = path;
  tmp += ".tmp" + std::to_string(
                      static_cast<unsigned long long>(std::hash<std::thread::id>{}(
                          std::this_thread::get_id())));
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(data.data()),
              static_cast<std::streamsize>(data.size()));
    out.flush();
    if (!out) {
      out.close();
      std::error_code ec;
      fs::remove(tmp, ec);
      throw Error("write failed: " + path.string());
    }
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw Error("cannot rename into " + path.string());
  }
}

inline void write_text_atomic(const std::filesystem::path& path, std::string_view text) {
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()),
                                    text.size()));
}

// ---------------------------------------------------------------------------
// Parallelism

// Worker cap: explicit value if > 0, else BQKIT_JOBS, else hardware threads.
inline unsigned resolve_jobs(int requested = 0) {
  if (requested > 0) return static_cast<unsigned>(requested);
  if (const char* env = std::getenv("BQKIT_JOBS")) {
    const int v = std::atoi(env);
    if (v > 0) return static_cast<unsigned>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

inline unsigned& default_jobs() {
  static unsigned jobs = resolve_jobs();
  return jobs;
}

// Runs fn(i) for i in [0, n). Each index writes only its own output slot, so
// results do not depend on scheduling. The first exception is rethrown.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn, unsigned jobs = default_jobs()) {
  jobs = static_cast<unsigned>(std::min<std::size_t>(std::max(1u, jobs), n));
  if (jobs <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::atomic<bool> failed{false};
  std::vector<std::jthread> workers;
  workers.reserve(jobs);
  std::mutex error_mutex;
  for (unsigned t = 0; t < jobs; ++t) {
    workers.emplace_back([&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= n || failed.load()) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
          failed = true;
        }
      }
    });
  }
  workers.clear();
  if (error) std::rethrow_exception(error);
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::size_t product(std::span<const std::size_t> dims) {
  std::size_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

}  // namespace bqkit
