#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace coda {

/// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Incompatible tensor/matrix shapes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A documented precondition was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Malformed external data; message carries the byte offset where known.
class ParseError : public Error {
 public:
  using Error::Error;
};

/// Invalid run/build configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Training aborted (non-finite loss or similar).
class TrainingError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << "x";
    os << s[i];
  }
  os << "]";
  return os.str();
}

/// Epsilon used in every guarded division / norm denominator.
template <typename S>
constexpr S norm_epsilon() {
  return S(1e-6);
}

// ---------------------------------------------------------------------------
// Tracked allocation statistics. All tensor buffers go through
// CountingAllocator so benchmarks can report an allocator high-water mark
// instead of OS RSS.
// ---------------------------------------------------------------------------

struct AllocStats {
  std::atomic<std::int64_t> current{0};
  std::atomic<std::int64_t> peak{0};

  void on_alloc(std::size_t bytes) {
    const std::int64_t now = current.fetch_add(std::int64_t(bytes)) + std::int64_t(bytes);
    std::int64_t old = peak.load();
    while (now > old && !peak.compare_exchange_weak(old, now)) {
    }
  }
  void on_free(std::size_t bytes) { current.fetch_sub(std::int64_t(bytes)); }
  void reset_peak() { peak.store(current.load()); }
};

inline AllocStats& alloc_stats() {
  static AllocStats stats;
  return stats;
}

template <typename T>
struct CountingAllocator {
  using value_type = T;

  CountingAllocator() = default;
  template <typename U>
  CountingAllocator(const CountingAllocator<U>&) {}

  T* allocate(std::size_t n) {
    alloc_stats().on_alloc(n * sizeof(T));
    return static_cast<T*>(::operator new(n * sizeof(T)));
  }
  void deallocate(T* p, std::size_t n) {
    alloc_stats().on_free(n * sizeof(T));
    ::operator delete(p);
  }
  bool operator==(const CountingAllocator&) const { return true; }
};

template <typename S>
using Buffer = std::vector<S, CountingAllocator<S>>;

}  // namespace coda
