#pragma once

// Core plumbing shared by every module: error types, the dense Tensor
// container, seeded rng streams, hashing, and little-endian blob io.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <istream>
#include <numeric>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace encmark {

// ---------------------------------------------------------------------------
// Errors

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};
struct InputError : std::runtime_error {
  explicit InputError(const std::string& msg) : std::runtime_error("input error: " + msg) {}
};
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error("numeric error: " + msg) {}
};
struct TrainingError : std::runtime_error {
  explicit TrainingError(const std::string& msg) : std::runtime_error("training error: " + msg) {}
};
struct IntegrityError : std::runtime_error {
  explicit IntegrityError(const std::string& msg) : std::runtime_error("integrity error: " + msg) {}
};

// ---------------------------------------------------------------------------
// Tensor: dense row-major container. Image batches are (N,H,W,C), feature
// batches are (N,D). No views, no strides; shapes are explicit and cheap to
// reason about at the sizes this project runs at.

template <typename T = float>
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)), data(numel_of(shape)) {}
  Tensor(std::vector<int64_t> s, T fill) : shape(std::move(s)), data(numel_of(shape), fill) {}

  static int64_t numel_of(const std::vector<int64_t>& s) {
    int64_t n = 1;
    for (int64_t d : s) {
      if (d < 0) throw InputError("negative dimension in tensor shape");
      n *= d;
    }
    return n;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int64_t dim(size_t i) const { return shape.at(i); }
  size_t rank() const { return shape.size(); }

  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }

  T& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

  // (N,H,W,C) indexing
  T& at4(int64_t n, int64_t h, int64_t w, int64_t c) {
    return data[((n * shape[1] + h) * shape[2] + w) * shape[3] + c];
  }
  const T& at4(int64_t n, int64_t h, int64_t w, int64_t c) const {
    return data[((n * shape[1] + h) * shape[2] + w) * shape[3] + c];
  }
  // (N,D) indexing
  T& at2(int64_t n, int64_t d) { return data[n * shape[1] + d]; }
  const T& at2(int64_t n, int64_t d) const { return data[n * shape[1] + d]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  Tensor reshaped(std::vector<int64_t> s) const {
    if (numel_of(s) != numel()) throw InputError("reshape changes element count");
    Tensor out;
    out.shape = std::move(s);
    out.data = data;
    return out;
  }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }

  // Rows [begin, end) of a batch-major tensor.
  Tensor slice_rows(int64_t begin, int64_t end) const {
    if (rank() < 1 || begin < 0 || end > shape[0] || begin > end)
      throw InputError("bad row slice");
    int64_t row = numel() / std::max<int64_t>(shape[0], 1);
    Tensor out;
    out.shape = shape;
    out.shape[0] = end - begin;
    out.data.assign(data.begin() + begin * row, data.begin() + end * row);
    return out;
  }
};

// Gathers rows by index into a new batch tensor.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& t, const std::vector<int64_t>& idx) {
  int64_t row = t.numel() / std::max<int64_t>(t.dim(0), 1);
  Tensor<T> out;
  out.shape = t.shape;
  out.shape[0] = static_cast<int64_t>(idx.size());
  out.data.resize(row * static_cast<int64_t>(idx.size()));
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= t.dim(0)) throw InputError("gather index out of range");
    std::copy_n(t.ptr() + idx[i] * row, row, out.ptr() + static_cast<int64_t>(i) * row);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Hashing (FNV-1a 64) for blob integrity and config hashes.

inline uint64_t fnv1a64(const void* bytes, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t fnv1a64(std::string_view s) { return fnv1a64(s.data(), s.size()); }

inline std::string hex64(uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[i] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Seeded rng streams. Every random draw in the project flows through a named
// stream so runs are reproducible and streams never alias by accident.

inline uint64_t mix64(uint64_t z) {
  // splitmix64 finalizer
  z += 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline uint64_t derive_seed(uint64_t base, std::string_view name) {
  return mix64(base ^ mix64(fnv1a64(name)));
}

inline uint64_t derive_seed(uint64_t base, uint64_t a, uint64_t b = 0) {
  return mix64(base ^ mix64(a + 0x632be59bd9b4e019ull) ^ mix64(b + 0x9e3779b97f4a7c15ull));
}

using Rng = std::mt19937_64;

inline Rng make_stream(uint64_t base, std::string_view name) { return Rng(derive_seed(base, name)); }

// Fills with N(0, stddev). Deterministic per rng state.
template <typename T>
void fill_normal(std::vector<T>& v, Rng& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& x : v) x = static_cast<T>(dist(rng));
}

template <typename T>
void fill_uniform(std::vector<T>& v, Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& x : v) x = static_cast<T>(dist(rng));
}

// Fisher-Yates over [0, n)
inline std::vector<int64_t> shuffled_indices(int64_t n, Rng& rng) {
  std::vector<int64_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (int64_t i = n - 1; i > 0; --i) {
    std::uniform_int_distribution<int64_t> d(0, i);
    std::swap(idx[i], idx[d(rng)]);
  }
  return idx;
}

// ---------------------------------------------------------------------------
// Little-endian float32 blob io. Hosts here are little-endian x86; the
// static_assert keeps the assumption honest.

static_assert(std::endian::native == std::endian::little, "blob io assumes a little-endian host");

inline void write_f32_blob(std::ostream& os, const float* p, size_t n) {
  os.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n * sizeof(float)));
}

inline void read_f32_blob(std::istream& is, float* p, size_t n) {
  is.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n * sizeof(float)));
  if (static_cast<size_t>(is.gcount()) != n * sizeof(float))
    throw IntegrityError("blob truncated: expected " + std::to_string(n * sizeof(float)) + " bytes");
}

inline void write_u64(std::ostream& os, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline uint64_t read_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (is.gcount() != 8) throw IntegrityError("header truncated");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return v;
}

// ---------------------------------------------------------------------------
// Small math helpers

constexpr double kCosineEps = 1e-12;  // guards every cosine denominator

template <typename T>
double dot_d(const T* a, const T* b, int64_t n) {
  double s = 0.0;
  for (int64_t i = 0; i < n; ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

template <typename T>
double norm_d(const T* a, int64_t n) {
  return std::sqrt(dot_d(a, a, n));
}

template <typename T>
double cosine_d(const T* a, const T* b, int64_t n) {
  return dot_d(a, b, n) / (norm_d(a, n) * norm_d(b, n) + kCosineEps);
}

}  // namespace encmark
