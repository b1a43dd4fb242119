#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace chanorm {

/// Dense row-major tensor of doubles. Shapes are explicit; there is no
/// broadcasting machinery, kernels index what they need.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> dims);

  static Tensor zeros(std::vector<std::size_t> dims);
  static Tensor ones(std::vector<std::size_t> dims);
  static Tensor full(std::vector<std::size_t> dims, double value);

  std::size_t numel() const { return data.size(); }
  std::size_t ndim() const { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }

  double& operator()(std::size_t i) { return data[i]; }
  double operator()(std::size_t i) const { return data[i]; }
  double& operator()(std::size_t i, std::size_t j) {
    return data[i * shape[1] + j];
  }
  double operator()(std::size_t i, std::size_t j) const {
    return data[i * shape[1] + j];
  }
  double& operator()(std::size_t i, std::size_t j, std::size_t k) {
    return data[(i * shape[1] + j) * shape[2] + k];
  }
  double operator()(std::size_t i, std::size_t j, std::size_t k) const {
    return data[(i * shape[1] + j) * shape[2] + k];
  }
  double& operator()(std::size_t i, std::size_t j, std::size_t k,
                     std::size_t l) {
    return data[((i * shape[1] + j) * shape[2] + k) * shape[3] + l];
  }
  double operator()(std::size_t i, std::size_t j, std::size_t k,
                    std::size_t l) const {
    return data[((i * shape[1] + j) * shape[2] + k) * shape[3] + l];
  }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }
  void fill(double value);
  bool all_finite() const;

  std::string shape_str() const;
};

/// Debug-friendly shape check; throws std::invalid_argument on mismatch.
void require_shape(const Tensor& t, const std::vector<std::size_t>& dims,
                   const std::string& what);

double max_abs_diff(const Tensor& a, const Tensor& b);

/// Counter-based deterministic generator (splitmix64 on seed + counter).
/// The same seed and call sequence produce the same stream on every
/// platform; `split` derives independent streams from a tag so that
/// consumers do not perturb each other's sequences.
struct RngState {
  std::uint64_t seed = 0;
  std::uint64_t counter = 0;
  static constexpr const char* kAlgorithm = "splitmix64-counter";

  explicit RngState(std::uint64_t s = 0) : seed(s) {}

  std::uint64_t next_u64();
  double next_unit();    // uniform in [0, 1)
  double next_normal();  // standard normal via Box-Muller (cosine branch)
  double uniform(double lo, double hi);

  RngState split(std::uint64_t tag) const;
  RngState split(const std::string& tag) const;

  Tensor normal_tensor(std::vector<std::size_t> dims, double stddev = 1.0);
  Tensor uniform_tensor(std::vector<std::size_t> dims, double lo, double hi);
  /// Fisher-Yates shuffle of an index vector.
  void shuffle(std::vector<std::size_t>& idx);
};

}  // namespace chanorm
