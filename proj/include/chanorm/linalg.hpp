#pragma once

#include "chanorm/tensor.hpp"

namespace chanorm {

/// Standard matrix product, double accumulation. Throws on inner-dim
/// mismatch.
Tensor matmul(const Tensor& a, const Tensor& b);

/// Softmax of each row of m / tau, max-subtracted for stability.
/// Rows of the result sum to 1. Throws if tau <= 0.
Tensor rowwise_softmax(const Tensor& m, double tau);

/// Log-determinant of a symmetric positive definite matrix via Cholesky.
/// The caller is responsible for any ridge term; a non-positive pivot is
/// reported with its index.
double logdet_psd(const Tensor& m);

/// Pairwise cosine similarity between rows of a (PxD) and rows of b (QxD):
/// out[p][q] = <a_p, b_q> / (|a_p| |b_q| + eps). With eps > 0 a zero row
/// yields similarity 0 against everything.
Tensor cosine_rows(const Tensor& a, const Tensor& b, double eps);

/// Temperature softmax over the last axis of a tensor of any rank; the
/// row-major layout makes this a reshape plus rowwise_softmax.
Tensor softmax_last_axis(const Tensor& raw, double tau);

/// Gradient of softmax_last_axis: given the softmax output y and dL/dy,
/// returns dL/d(raw scores): ds_j = y_j (dy_j - sum_i dy_i y_i) / tau.
Tensor softmax_last_axis_backward(const Tensor& y, const Tensor& dy,
                                  double tau);

}  // namespace chanorm
