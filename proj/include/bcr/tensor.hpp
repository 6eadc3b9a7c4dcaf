#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace bcr {

/// Dense N-dimensional array, row-major. The element type doubles as the
/// dtype: float for training, double for gradient verification.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(static_cast<size_t>(numel_), T(0));
  }

  Tensor(std::vector<int> shape, T fill) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(static_cast<size_t>(numel_), fill);
  }

  Tensor(std::vector<int> shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (static_cast<int64_t>(data_.size()) != numel_) {
      throw std::invalid_argument("Tensor: data length does not match shape");
    }
  }

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int64_t numel() const { return numel_; }
  bool empty() const { return numel_ == 0; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  // Row-major accessors for the ranks this codebase uses.
  T& at(int i, int j) { return data_[static_cast<size_t>(i) * shape_[1] + j]; }
  const T& at(int i, int j) const {
    return data_[static_cast<size_t>(i) * shape_[1] + j];
  }
  T& at(int i, int j, int k) {
    return data_[(static_cast<size_t>(i) * shape_[1] + j) * shape_[2] + k];
  }
  const T& at(int i, int j, int k) const {
    return data_[(static_cast<size_t>(i) * shape_[1] + j) * shape_[2] + k];
  }
  T& at(int i, int j, int k, int l) {
    return data_[((static_cast<size_t>(i) * shape_[1] + j) * shape_[2] + k) *
                     shape_[3] +
                 l];
  }
  const T& at(int i, int j, int k, int l) const {
    return data_[((static_cast<size_t>(i) * shape_[1] + j) * shape_[2] + k) *
                     shape_[3] +
                 l];
  }

  /// Pointer to the innermost row at (i, j) of a rank-3 tensor.
  T* row(int i, int j) {
    return data_.data() + (static_cast<size_t>(i) * shape_[1] + j) * shape_[2];
  }
  const T* row(int i, int j) const {
    return data_.data() + (static_cast<size_t>(i) * shape_[1] + j) * shape_[2];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (const T& v : data_) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

  void require_finite(const char* what) const {
    if (!all_finite()) {
      throw std::runtime_error(std::string("non-finite values in ") + what);
    }
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    for (size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return Tensor<U>(shape_, std::move(out));
  }

 private:
  void validate_shape() {
    numel_ = 1;
    for (int d : shape_) {
      if (d < 0) throw std::invalid_argument("Tensor: negative extent");
      numel_ *= d;
    }
  }

  std::vector<int> shape_;
  std::vector<T> data_;
  int64_t numel_ = 0;
};

inline int64_t shape_numel(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

// ---------------------------------------------------------------------------
// Deterministic RNG. SplitMix64 core; all streams in the repository derive
// from explicit seeds so runs are bit-reproducible.
// ---------------------------------------------------------------------------

inline uint64_t splitmix64(uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Mix two 64-bit values into a derived seed (per-image seeds, sub-streams).
inline uint64_t hash_seed(uint64_t a, uint64_t b) {
  uint64_t s = a ^ (0x9e3779b97f4a7c15ULL + (b << 6) + (b >> 2));
  splitmix64(s);
  uint64_t t = s + b;
  return splitmix64(t);
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {
    // burn-in so nearby seeds decorrelate
    splitmix64(state_);
    splitmix64(state_);
  }

  uint64_t next_u64() { return splitmix64(state_); }

  /// Uniform in [0, 1) with 53-bit resolution.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform in the open interval (lo, hi).
  double uniform_open(double lo, double hi) {
    double u;
    do {
      u = uniform();
    } while (u == 0.0);
    return lo + (hi - lo) * u;
  }

  /// Inclusive integer range.
  int uniform_int(int lo, int hi) {
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(next_u64() % span);
  }

  double normal() {
    if (have_cached_) {
      have_cached_ = false;
      return cached_;
    }
    double u1, u2;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * 3.14159265358979323846 * u2;
    cached_ = r * std::sin(a);
    have_cached_ = true;
    return r * std::cos(a);
  }

  /// Fisher-Yates shuffle.
  template <typename V>
  void shuffle(std::vector<V>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(next_u64() % i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  uint64_t state_;
  bool have_cached_ = false;
  double cached_ = 0.0;
};

/// He-style fan-in normal init used by every conv/linear in the repository.
template <typename T>
void he_init(Tensor<T>& w, int fan_in, Rng& rng) {
  double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (int64_t i = 0; i < w.numel(); ++i) {
    w[i] = static_cast<T>(rng.normal() * stddev);
  }
}

// Every random decision draws from its own purpose-keyed stream so that
// toggling one feature never shifts the draws of another.
namespace rngkey {
inline constexpr uint64_t kParamInit = 0x01;
inline constexpr uint64_t kRpnSample = 0x02;
inline constexpr uint64_t kScaleJitter = 0x03;
inline constexpr uint64_t kRpnContrast = 0x04;
inline constexpr uint64_t kEpochOrder = 0x05;
inline constexpr uint64_t kPointInBox = 0x06;
inline constexpr uint64_t kSplit = 0x07;
inline constexpr uint64_t kScene = 0x08;
}  // namespace rngkey

inline Rng purpose_rng(uint64_t seed, uint64_t key, uint64_t a = 0, uint64_t b = 0) {
  return Rng(hash_seed(hash_seed(hash_seed(seed, key), a), b));
}

}  // namespace bcr
