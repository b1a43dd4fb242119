#include "chanorm/tensor.hpp"

#include <cmath>
#include <cstdlib>
#include <sstream>
#include <stdexcept>

namespace chanorm {

namespace {

std::size_t product(const std::vector<std::size_t>& dims) {
  std::size_t n = 1;
  for (std::size_t d : dims) n *= d;
  return n;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> dims)
    : shape(std::move(dims)), data(product(shape), 0.0) {}

Tensor Tensor::zeros(std::vector<std::size_t> dims) {
  return Tensor(std::move(dims));
}

Tensor Tensor::ones(std::vector<std::size_t> dims) {
  return full(std::move(dims), 1.0);
}

Tensor Tensor::full(std::vector<std::size_t> dims, double value) {
  Tensor t(std::move(dims));
  t.fill(value);
  return t;
}

void Tensor::fill(double value) {
  for (double& v : data) v = value;
}

bool Tensor::all_finite() const {
  for (double v : data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

void require_shape(const Tensor& t, const std::vector<std::size_t>& dims,
                   const std::string& what) {
  if (t.shape != dims) {
    Tensor want;
    want.shape = dims;
    throw std::invalid_argument(what + ": shape mismatch, got " +
                                t.shape_str() + ", want " + want.shape_str());
  }
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) {
    throw std::invalid_argument("max_abs_diff: shape mismatch " +
                                a.shape_str() + " vs " + b.shape_str());
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    m = std::max(m, std::fabs(a.data[i] - b.data[i]));
  }
  return m;
}

std::uint64_t RngState::next_u64() {
  return splitmix64(seed + 0x9e3779b97f4a7c15ULL * (++counter));
}

double RngState::next_unit() {
  // 53 mantissa bits -> double in [0, 1)
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngState::next_normal() {
  // Box-Muller, cosine branch only: two uniforms per normal keeps the
  // stream layout independent of consumption history.
  double u1 = 1.0 - next_unit();  // (0, 1]
  double u2 = next_unit();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

double RngState::uniform(double lo, double hi) {
  return lo + (hi - lo) * next_unit();
}

RngState RngState::split(std::uint64_t tag) const {
  return RngState(splitmix64(seed ^ splitmix64(tag)));
}

RngState RngState::split(const std::string& tag) const {
  return split(fnv1a(tag));
}

Tensor RngState::normal_tensor(std::vector<std::size_t> dims, double stddev) {
  Tensor t(std::move(dims));
  for (double& v : t.data) v = stddev * next_normal();
  return t;
}

Tensor RngState::uniform_tensor(std::vector<std::size_t> dims, double lo,
                                double hi) {
  Tensor t(std::move(dims));
  for (double& v : t.data) v = uniform(lo, hi);
  return t;
}

void RngState::shuffle(std::vector<std::size_t>& idx) {
  for (std::size_t i = idx.size(); i > 1; --i) {
    std::size_t j = next_u64() % i;
    std::swap(idx[i - 1], idx[j]);
  }
}

}  // namespace chanorm
