#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace enelf {

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Dense 4-D extents in batch/channel/height/width order.
struct Shape4 {
  int64_t n = 0, c = 0, h = 0, w = 0;

  int64_t numel() const { return n * c * h * w; }
  bool operator==(const Shape4&) const = default;

  std::string str() const {
    return "[" + std::to_string(n) + "," + std::to_string(c) + "," +
           std::to_string(h) + "," + std::to_string(w) + "]";
  }
};

// Seedable deterministic generator. The mt19937_64 engine output is
// standardized, and the uniform/normal mappings below are fixed here,
// so a seed pins the whole value stream.
class Rng {
public:
  explicit Rng(uint64_t seed = 0) : eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  double uniform(double a, double b) {
    const double u = static_cast<double>(eng_() >> 11) * 0x1.0p-53;
    return a + (b - a) * u;
  }

  // Box-Muller; consumes exactly two engine draws per call.
  double normal(double mu, double sigma) {
    double u1 = static_cast<double>(eng_() >> 11) * 0x1.0p-53;
    double u2 = static_cast<double>(eng_() >> 11) * 0x1.0p-53;
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    const double r = std::sqrt(-2.0 * std::log(u1));
    return mu + sigma * r * std::cos(2.0 * M_PI * u2);
  }

  // Independent stream for task `index`, stable under scheduling.
  static Rng derive(uint64_t base_seed, uint64_t index) {
    // splitmix64 of the pair, so derived seeds do not collide trivially
    uint64_t z = base_seed + 0x9e3779b97f4a7c15ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return Rng(z ^ (z >> 31));
  }

private:
  std::mt19937_64 eng_;
};

// Contiguous row-major N,C,H,W tensor. Float in production paths,
// double in gradient-check paths.
template <typename T>
class Tensor {
public:
  Tensor() = default;

  explicit Tensor(Shape4 s) : shape_(s) {
    if (s.n < 1 || s.c < 1 || s.h < 1 || s.w < 1)
      throw ShapeError("invalid tensor shape " + s.str());
    data_.assign(static_cast<size_t>(s.numel()), T(0));
  }

  Tensor(int64_t n, int64_t c, int64_t h, int64_t w)
      : Tensor(Shape4{n, c, h, w}) {}

  const Shape4& shape() const { return shape_; }
  int64_t size() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  int64_t index(int64_t n, int64_t c, int64_t h, int64_t w) const {
    return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }

  T& at(int64_t n, int64_t c, int64_t h, int64_t w) {
    return data_[static_cast<size_t>(index(n, c, h, w))];
  }
  const T& at(int64_t n, int64_t c, int64_t h, int64_t w) const {
    return data_[static_cast<size_t>(index(n, c, h, w))];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (const T& v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (int64_t i = 0; i < size(); ++i)
      out[i] = static_cast<U>(data_[static_cast<size_t>(i)]);
    return out;
  }

private:
  Shape4 shape_{0, 0, 0, 0};
  std::vector<T> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

// Random-fill distribution selector.
struct Dist {
  enum class Kind { Uniform, Normal, KaimingFanIn };
  Kind kind = Kind::Uniform;
  double a = 0.0;  // low / mean
  double b = 1.0;  // high / stddev

  static Dist uniform(double lo, double hi) {
    return {Kind::Uniform, lo, hi};
  }
  static Dist normal(double mu, double sigma) {
    return {Kind::Normal, mu, sigma};
  }
  // normal(0, sqrt(2/fan_in)); fan_in from the weight shape (c*h*w).
  static Dist kaiming_fan_in() { return {Kind::KaimingFanIn, 0, 0}; }
};

template <typename T>
Tensor<T> tensor_random(Shape4 shape, Rng& rng, const Dist& dist) {
  Tensor<T> out(shape);
  switch (dist.kind) {
    case Dist::Kind::Uniform:
      for (int64_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<T>(rng.uniform(dist.a, dist.b));
      break;
    case Dist::Kind::Normal:
      for (int64_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<T>(rng.normal(dist.a, dist.b));
      break;
    case Dist::Kind::KaimingFanIn: {
      const double fan_in =
          static_cast<double>(shape.c) * shape.h * shape.w;
      const double sigma = std::sqrt(2.0 / fan_in);
      for (int64_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<T>(rng.normal(0.0, sigma));
      break;
    }
  }
  return out;
}

}  // namespace enelf
