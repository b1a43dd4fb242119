#include "chanorm/linalg.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace chanorm {

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2) {
    throw std::invalid_argument("matmul: expects rank-2 tensors");
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw std::invalid_argument("matmul: inner dimensions disagree, " +
                                a.shape_str() + " x " + b.shape_str());
  }
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a(i, p);
      for (std::size_t j = 0; j < n; ++j) {
        out(i, j) += aip * b(p, j);
      }
    }
  }
  return out;
}

Tensor rowwise_softmax(const Tensor& m, double tau) {
  if (tau <= 0.0) {
    throw std::invalid_argument("rowwise_softmax: tau must be positive, got " +
                                std::to_string(tau));
  }
  if (m.ndim() != 2) {
    throw std::invalid_argument("rowwise_softmax: expects rank-2 tensor");
  }
  const std::size_t rows = m.dim(0), cols = m.dim(1);
  Tensor out({rows, cols});
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = m(r, 0) / tau;
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, m(r, c) / tau);
    double sum = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double e = std::exp(m(r, c) / tau - mx);
      out(r, c) = e;
      sum += e;
    }
    for (std::size_t c = 0; c < cols; ++c) out(r, c) /= sum;
  }
  return out;
}

double logdet_psd(const Tensor& m) {
  if (m.ndim() != 2 || m.dim(0) != m.dim(1)) {
    throw std::invalid_argument("logdet_psd: expects a square matrix, got " +
                                m.shape_str());
  }
  const std::size_t n = m.dim(0);
  // In-place lower Cholesky; logdet = 2 * sum(log L_ii).
  Tensor l({n, n});
  double logdet = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double s = m(i, j);
      for (std::size_t p = 0; p < j; ++p) s -= l(i, p) * l(j, p);
      if (i == j) {
        if (s <= 0.0) {
          throw std::invalid_argument(
              "logdet_psd: matrix not positive definite, pivot " +
              std::to_string(i) + " = " + std::to_string(s));
        }
        l(i, i) = std::sqrt(s);
        logdet += 2.0 * std::log(l(i, i));
      } else {
        l(i, j) = s / l(j, j);
      }
    }
  }
  return logdet;
}

Tensor softmax_last_axis(const Tensor& raw, double tau) {
  Tensor flat = raw;
  flat.shape = {raw.numel() / raw.shape.back(), raw.shape.back()};
  Tensor w = rowwise_softmax(flat, tau);
  w.shape = raw.shape;
  return w;
}

Tensor softmax_last_axis_backward(const Tensor& y, const Tensor& dy,
                                  double tau) {
  Tensor ds(y.shape);
  const std::size_t n = y.shape.back();
  const std::size_t rows = y.numel() / n;
  for (std::size_t r = 0; r < rows; ++r) {
    double dot = 0.0;
    for (std::size_t j = 0; j < n; ++j)
      dot += dy.data[r * n + j] * y.data[r * n + j];
    for (std::size_t j = 0; j < n; ++j)
      ds.data[r * n + j] = y.data[r * n + j] * (dy.data[r * n + j] - dot) / tau;
  }
  return ds;
}

Tensor cosine_rows(const Tensor& a, const Tensor& b, double eps) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(1)) {
    throw std::invalid_argument("cosine_rows: row length mismatch " +
                                a.shape_str() + " vs " + b.shape_str());
  }
  if (eps < 0.0) {
    throw std::invalid_argument("cosine_rows: eps must be non-negative");
  }
  const std::size_t p = a.dim(0), q = b.dim(0), d = a.dim(1);
  std::vector<double> na(p, 0.0), nb(q, 0.0);
  for (std::size_t i = 0; i < p; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += a(i, j) * a(i, j);
    na[i] = std::sqrt(s);
  }
  for (std::size_t i = 0; i < q; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += b(i, j) * b(i, j);
    nb[i] = std::sqrt(s);
  }
  Tensor out({p, q});
  for (std::size_t i = 0; i < p; ++i) {
    for (std::size_t j = 0; j < q; ++j) {
      double dot = 0.0;
      for (std::size_t k = 0; k < d; ++k) dot += a(i, k) * b(j, k);
      out(i, j) = dot / (na[i] * nb[j] + eps);
    }
  }
  return out;
}

}  // namespace chanorm
