#include "chanorm/normlayers.hpp"

#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>

#include "chanorm/binio.hpp"
#include "chanorm/linalg.hpp"

namespace chanorm {

namespace {

void require_rank3(const Tensor& t, const char* what) {
  if (t.ndim() != 3) {
    throw std::invalid_argument(std::string(what) +
                                ": expects a B x C x D batch, got shape " +
                                t.shape_str());
  }
}

double sign0(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

// Gradient of the pairwise channel scores w.r.t. the basis vectors.
// draw[b][c][i] weights the score between basis rows (b,c) and (b,i); both
// slots of each pair receive their share.
Tensor channel_similarity_backward(const Tensor& basis, const Tensor& draw,
                                   SimMetric metric) {
  const std::size_t bsz = basis.dim(0), c = basis.dim(1), m = basis.dim(2);
  Tensor db(basis.shape);
  std::vector<double> norms(c, 0.0);
  for (std::size_t b = 0; b < bsz; ++b) {
    if (metric == SimMetric::cosine) {
      for (std::size_t i = 0; i < c; ++i) {
        double s = 0.0;
        for (std::size_t k = 0; k < m; ++k) s += basis(b, i, k) * basis(b, i, k);
        norms[i] = std::sqrt(s);
      }
    }
    for (std::size_t c1 = 0; c1 < c; ++c1) {
      for (std::size_t c2 = 0; c2 < c; ++c2) {
        const double w = draw(b, c1, c2);
        if (w == 0.0) continue;
        switch (metric) {
          case SimMetric::cosine: {
            const double na = norms[c1], nv = norms[c2];
            const double p = na * nv + kCosineEps;
            double dot = 0.0;
            for (std::size_t k = 0; k < m; ++k)
              dot += basis(b, c1, k) * basis(b, c2, k);
            const double coef_a = na > 0.0 ? dot * nv / (p * p * na) : 0.0;
            const double coef_v = nv > 0.0 ? dot * na / (p * p * nv) : 0.0;
            for (std::size_t k = 0; k < m; ++k) {
              const double a = basis(b, c1, k), v = basis(b, c2, k);
              db(b, c1, k) += w * (v / p - coef_a * a);
              db(b, c2, k) += w * (a / p - coef_v * v);
            }
            break;
          }
          case SimMetric::neg_l2: {
            double d2 = 0.0;
            for (std::size_t k = 0; k < m; ++k) {
              const double diff = basis(b, c1, k) - basis(b, c2, k);
              d2 += diff * diff;
            }
            const double dist = std::sqrt(d2);
            if (dist <= 1e-12) break;  // identical rows: score pinned at 0
            for (std::size_t k = 0; k < m; ++k) {
              const double t = (basis(b, c1, k) - basis(b, c2, k)) / dist;
              db(b, c1, k) -= w * t;
              db(b, c2, k) += w * t;
            }
            break;
          }
          case SimMetric::neg_l1: {
            for (std::size_t k = 0; k < m; ++k) {
              const double s = sign0(basis(b, c1, k) - basis(b, c2, k));
              db(b, c1, k) -= w * s;
              db(b, c2, k) += w * s;
            }
            break;
          }
        }
      }
    }
  }
  return db;
}

// h(x) = x W + b applied to every channel window: B x C x L -> B x C x D.
Tensor project_windows(const Tensor& x_cw, const PcnParams& p) {
  require_rank3(x_cw, "project_windows");
  const std::size_t bsz = x_cw.dim(0), c = x_cw.dim(1), l = x_cw.dim(2);
  if (p.proj_w.ndim() != 2 || p.proj_w.dim(0) != l) {
    throw std::invalid_argument(
        "project_windows: window length " + std::to_string(l) +
        " does not match projection input " + p.proj_w.shape_str());
  }
  const std::size_t d = p.proj_w.dim(1);
  Tensor h({bsz, c, d});
  for (std::size_t b = 0; b < bsz; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t j = 0; j < d; ++j) {
        double s = p.proj_b(j);
        for (std::size_t i = 0; i < l; ++i)
          s += x_cw(b, ch, i) * p.proj_w(i, j);
        h(b, ch, j) = s;
      }
    }
  }
  return h;
}

// Cosine of each projected window against each prototype row, then the
// temperature softmax over prototypes.
SimilarityMatrix bank_similarity(const Tensor& h, const Tensor& bank,
                                 double tau) {
  const std::size_t bsz = h.dim(0), c = h.dim(1), d = h.dim(2);
  if (bank.ndim() != 2 || bank.dim(1) != d) {
    throw std::invalid_argument("bank_similarity: prototype rows " +
                                bank.shape_str() + " do not match h dim " +
                                std::to_string(d));
  }
  const std::size_t k = bank.dim(0);
  Tensor raw({bsz, c, k});
  std::vector<double> bank_norm(k, 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += bank(i, j) * bank(i, j);
    bank_norm[i] = std::sqrt(s);
  }
  for (std::size_t b = 0; b < bsz; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double hn = 0.0;
      for (std::size_t j = 0; j < d; ++j) hn += h(b, ch, j) * h(b, ch, j);
      hn = std::sqrt(hn);
      for (std::size_t i = 0; i < k; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) dot += h(b, ch, j) * bank(i, j);
        raw(b, ch, i) = dot / (hn * bank_norm[i] + kCosineEps);
      }
    }
  }
  return {softmax_last_axis(raw, tau), raw};
}

// Backward through bank_similarity's cosine for one bank: accumulates into
// dL/dh and dL/dbank given dL/d(raw scores).
void bank_similarity_backward(const Tensor& h, const Tensor& bank,
                              const Tensor& draw, Tensor& dh, Tensor& dbank) {
  const std::size_t bsz = h.dim(0), c = h.dim(1), d = h.dim(2);
  const std::size_t k = bank.dim(0);
  std::vector<double> bank_norm(k, 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += bank(i, j) * bank(i, j);
    bank_norm[i] = std::sqrt(s);
  }
  for (std::size_t b = 0; b < bsz; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double hn = 0.0;
      for (std::size_t j = 0; j < d; ++j) hn += h(b, ch, j) * h(b, ch, j);
      hn = std::sqrt(hn);
      for (std::size_t i = 0; i < k; ++i) {
        const double w = draw(b, ch, i);
        if (w == 0.0) continue;
        const double p = hn * bank_norm[i] + kCosineEps;
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) dot += h(b, ch, j) * bank(i, j);
        const double coef_h = hn > 0.0 ? dot * bank_norm[i] / (p * p * hn) : 0.0;
        const double coef_v =
            bank_norm[i] > 0.0 ? dot * hn / (p * p * bank_norm[i]) : 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          const double a = h(b, ch, j), v = bank(i, j);
          dh(b, ch, j) += w * (v / p - coef_h * a);
          dbank(i, j) += w * (a / p - coef_v * v);
        }
      }
    }
  }
}

// What serialization errors call this container.
const std::string kNormContainer = "norm container";

}  // namespace

std::string norm_kind_name(NormKind k) {
  switch (k) {
    case NormKind::none: return "none";
    case NormKind::ln: return "ln";
    case NormKind::in: return "in";
    case NormKind::cn: return "cn";
    case NormKind::acn: return "acn";
    case NormKind::pcn: return "pcn";
  }
  throw std::invalid_argument("norm_kind_name: bad enum value");
}

NormKind norm_kind_from_name(const std::string& s) {
  if (s == "none") return NormKind::none;
  if (s == "ln") return NormKind::ln;
  if (s == "in") return NormKind::in;
  if (s == "cn") return NormKind::cn;
  if (s == "acn") return NormKind::acn;
  if (s == "pcn") return NormKind::pcn;
  throw std::invalid_argument("unknown norm kind '" + s +
                              "' (expected none|ln|in|cn|acn|pcn)");
}

std::string sim_metric_name(SimMetric m) {
  switch (m) {
    case SimMetric::cosine: return "cosine";
    case SimMetric::neg_l1: return "neg_l1";
    case SimMetric::neg_l2: return "neg_l2";
  }
  throw std::invalid_argument("sim_metric_name: bad enum value");
}

SimMetric sim_metric_from_name(const std::string& s) {
  if (s == "cosine") return SimMetric::cosine;
  if (s == "neg_l1") return SimMetric::neg_l1;
  if (s == "neg_l2") return SimMetric::neg_l2;
  throw std::invalid_argument("unknown similarity metric '" + s +
                              "' (expected cosine|neg_l1|neg_l2)");
}

std::string sim_space_name(SimSpace s) {
  switch (s) {
    case SimSpace::data_x: return "data_x";
    case SimSpace::latent_z: return "latent_z";
  }
  throw std::invalid_argument("sim_space_name: bad enum value");
}

SimSpace sim_space_from_name(const std::string& s) {
  if (s == "data_x") return SimSpace::data_x;
  if (s == "latent_z") return SimSpace::latent_z;
  throw std::invalid_argument("unknown similarity space '" + s +
                              "' (expected data_x|latent_z)");
}

LnParams make_ln(std::size_t d) {
  return {Tensor::ones({d}), Tensor::zeros({d})};
}

CnParams make_cn(std::size_t c, std::size_t d) {
  return {Tensor::ones({c, d}), Tensor::zeros({c, d})};
}

AcnParams make_acn(std::size_t c, std::size_t d, double tau, SimMetric metric,
                   SimSpace space) {
  AcnParams p;
  p.alpha_g = Tensor::ones({c, d});
  // All-ones local bank keeps the similarity-weighted average at exactly 1
  // (rows of the similarity matrix sum to 1), so the layer starts as the
  // bare standardization. A zero local bank would zero the effective scale.
  p.alpha_l = Tensor::ones({c, d});
  p.beta_g = Tensor::ones({c, d});
  p.beta_l = Tensor::zeros({c, d});
  p.tau = tau;
  p.sim_metric = metric;
  p.sim_space = space;
  return p;
}

PcnParams make_pcn(std::size_t k, std::size_t d, std::size_t l_in,
                   RngState& rng, double tau) {
  if (k < 1) throw std::invalid_argument("make_pcn: need at least 1 prototype");
  PcnParams p;
  p.alpha_p = Tensor::ones({k, d});
  p.beta_p = Tensor::zeros({k, d});
  p.proj_w = rng.normal_tensor({l_in, d});
  const double scale = 1.0 / std::sqrt(static_cast<double>(l_in));
  for (double& v : p.proj_w.data) v *= scale;
  p.proj_b = Tensor::zeros({d});
  p.tau = tau;
  p.k = k;
  return p;
}

std::pair<Tensor, NormStats> normalize_core(const Tensor& z, double eps_norm) {
  require_rank3(z, "normalize_core");
  if (eps_norm <= 0.0)
    throw std::invalid_argument("normalize_core: eps_norm must be positive");
  const std::size_t bsz = z.dim(0), c = z.dim(1), d = z.dim(2);
  Tensor out(z.shape);
  NormStats st{Tensor({bsz, c}), Tensor({bsz, c}), eps_norm};
  for (std::size_t b = 0; b < bsz; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double mu = 0.0;
      for (std::size_t j = 0; j < d; ++j) mu += z(b, ch, j);
      mu /= static_cast<double>(d);
      double var = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double dev = z(b, ch, j) - mu;
        var += dev * dev;
      }
      var /= static_cast<double>(d);
      const double sigma = std::sqrt(var + eps_norm);
      st.mu(b, ch) = mu;
      st.sigma(b, ch) = sigma;
      for (std::size_t j = 0; j < d; ++j)
        out(b, ch, j) = (z(b, ch, j) - mu) / sigma;
    }
  }
  return {std::move(out), std::move(st)};
}

Tensor normalize_core_backward(const Tensor& grad_normed, const Tensor& normed,
                               const NormStats& stats) {
  const std::size_t bsz = normed.dim(0), c = normed.dim(1), d = normed.dim(2);
  Tensor dz(normed.shape);
  for (std::size_t b = 0; b < bsz; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double g_mean = 0.0, gn_mean = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        g_mean += grad_normed(b, ch, j);
        gn_mean += grad_normed(b, ch, j) * normed(b, ch, j);
      }
      g_mean /= static_cast<double>(d);
      gn_mean /= static_cast<double>(d);
      const double inv_sigma = 1.0 / stats.sigma(b, ch);
      for (std::size_t j = 0; j < d; ++j) {
        dz(b, ch, j) = inv_sigma * (grad_normed(b, ch, j) - g_mean -
                                    normed(b, ch, j) * gn_mean);
      }
    }
  }
  return dz;
}

Tensor ln_forward(const Tensor& z, const LnParams& p, double eps_norm) {
  require_rank3(z, "ln_forward");
  const std::size_t d = z.dim(2);
  require_shape(p.alpha, {d}, "ln alpha");
  require_shape(p.beta, {d}, "ln beta");
  auto [n, st] = normalize_core(z, eps_norm);
  const std::size_t bsz = z.dim(0), c = z.dim(1);
  for (std::size_t b = 0; b < bsz; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t j = 0; j < d; ++j)
        n(b, ch, j) = p.alpha(j) * n(b, ch, j) + p.beta(j);
  return n;
}

Tensor in_forward(const Tensor& z, const LnParams& p, double eps_norm) {
  require_rank3(z, "in_forward");
  const std::size_t bsz = z.dim(0), c = z.dim(1), d = z.dim(2);
  if (c < 2)
    throw std::invalid_argument(
        "in_forward: cross-channel statistics need C >= 2");
  require_shape(p.alpha, {d}, "in alpha");
  require_shape(p.beta, {d}, "in beta");
  Tensor out(z.shape);
  for (std::size_t b = 0; b < bsz; ++b) {
    for (std::size_t j = 0; j < d; ++j) {
      double mu = 0.0;
      for (std::size_t ch = 0; ch < c; ++ch) mu += z(b, ch, j);
      mu /= static_cast<double>(c);
      double var = 0.0;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double dev = z(b, ch, j) - mu;
        var += dev * dev;
      }
      var /= static_cast<double>(c);
      const double sigma = std::sqrt(var + eps_norm);
      for (std::size_t ch = 0; ch < c; ++ch)
        out(b, ch, j) = p.alpha(j) * (z(b, ch, j) - mu) / sigma + p.beta(j);
    }
  }
  return out;
}

Tensor cn_forward(const Tensor& z, const CnParams& p, double eps_norm) {
  require_rank3(z, "cn_forward");
  const std::size_t c = z.dim(1), d = z.dim(2);
  if (p.alpha.ndim() != 2 || p.alpha.dim(0) != c || p.alpha.dim(1) != d) {
    throw std::invalid_argument(
        "cn_forward: parameter rows " + p.alpha.shape_str() +
        " do not match the batch's " + std::to_string(c) +
        " channels; per-channel parameters are bound to a fixed channel "
        "count");
  }
  require_shape(p.beta, {c, d}, "cn beta");
  auto [n, st] = normalize_core(z, eps_norm);
  const std::size_t bsz = z.dim(0);
  for (std::size_t b = 0; b < bsz; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t j = 0; j < d; ++j)
        n(b, ch, j) = p.alpha(ch, j) * n(b, ch, j) + p.beta(ch, j);
  return n;
}

SimilarityMatrix channel_similarity(const Tensor& basis, double tau,
                                    SimMetric metric) {
  require_rank3(basis, "channel_similarity");
  if (tau <= 0.0)
    throw std::invalid_argument("channel_similarity: tau must be positive");
  const std::size_t bsz = basis.dim(0), c = basis.dim(1), m = basis.dim(2);
  Tensor raw({bsz, c, c});
  std::vector<double> norms(c, 0.0);
  for (std::size_t b = 0; b < bsz; ++b) {
    if (metric == SimMetric::cosine) {
      for (std::size_t i = 0; i < c; ++i) {
        double s = 0.0;
        for (std::size_t k = 0; k < m; ++k)
          s += basis(b, i, k) * basis(b, i, k);
        norms[i] = std::sqrt(s);
      }
    }
    for (std::size_t c1 = 0; c1 < c; ++c1) {
      for (std::size_t c2 = 0; c2 < c; ++c2) {
        double score = 0.0;
        switch (metric) {
          case SimMetric::cosine: {
            double dot = 0.0;
            for (std::size_t k = 0; k < m; ++k)
              dot += basis(b, c1, k) * basis(b, c2, k);
            score = dot / (norms[c1] * norms[c2] + kCosineEps);
            break;
          }
          case SimMetric::neg_l1: {
            double dist = 0.0;
            for (std::size_t k = 0; k < m; ++k)
              dist += std::abs(basis(b, c1, k) - basis(b, c2, k));
            score = -dist;
            break;
          }
          case SimMetric::neg_l2: {
            double d2 = 0.0;
            for (std::size_t k = 0; k < m; ++k) {
              const double diff = basis(b, c1, k) - basis(b, c2, k);
              d2 += diff * diff;
            }
            score = -std::sqrt(d2);
            break;
          }
        }
        raw(b, c1, c2) = score;
      }
    }
  }
  return {softmax_last_axis(raw, tau), raw};
}

AcnResult acn_forward(const Tensor& z, const AcnParams& p,
                      const Tensor& sim_basis, double eps_norm) {
  require_rank3(z, "acn_forward");
  require_rank3(sim_basis, "acn_forward basis");
  const std::size_t bsz = z.dim(0), c = z.dim(1), d = z.dim(2);
  if (sim_basis.dim(0) != bsz || sim_basis.dim(1) != c) {
    throw std::invalid_argument(
        "acn_forward: similarity basis batch/channel mismatch, z " +
        z.shape_str() + " vs basis " + sim_basis.shape_str());
  }
  require_shape(p.alpha_g, {c, d}, "acn alpha_g");
  require_shape(p.alpha_l, {c, d}, "acn alpha_l");
  require_shape(p.beta_g, {c, d}, "acn beta_g");
  require_shape(p.beta_l, {c, d}, "acn beta_l");

  auto [n, st] = normalize_core(z, eps_norm);
  SimilarityMatrix sim = channel_similarity(sim_basis, p.tau, p.sim_metric);

  DynamicAffine affine{Tensor({bsz, c, d}), Tensor({bsz, c, d})};
  Tensor out(z.shape);
  for (std::size_t b = 0; b < bsz; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t j = 0; j < d; ++j) {
        double ah = 0.0, bh = 0.0;
        for (std::size_t i = 0; i < c; ++i) {
          ah += sim.weights(b, ch, i) * p.alpha_l(i, j);
          bh += sim.weights(b, ch, i) * p.beta_l(i, j);
        }
        affine.alpha_hat(b, ch, j) = ah;
        affine.beta_hat(b, ch, j) = bh;
        out(b, ch, j) = p.alpha_g(ch, j) * ah * n(b, ch, j) +
                        p.beta_g(ch, j) * bh;
      }
    }
  }
  return {std::move(out), std::move(sim), std::move(affine), std::move(n),
          std::move(st)};
}

SimilarityMatrix prototype_similarity(const Tensor& x_cw, const PcnParams& p,
                                      const Tensor& bank) {
  return bank_similarity(project_windows(x_cw, p), bank, p.tau);
}

PcnResult pcn_forward(const Tensor& z, const Tensor& x_cw, const PcnParams& p,
                      double eps_norm) {
  require_rank3(z, "pcn_forward");
  require_rank3(x_cw, "pcn_forward windows");
  const std::size_t bsz = z.dim(0), c = z.dim(1), d = z.dim(2);
  if (x_cw.dim(0) != bsz || x_cw.dim(1) != c) {
    throw std::invalid_argument("pcn_forward: z " + z.shape_str() +
                                " and windows " + x_cw.shape_str() +
                                " disagree on batch/channels");
  }
  if (p.alpha_p.dim(1) != d) {
    throw std::invalid_argument("pcn_forward: prototype dim " +
                                p.alpha_p.shape_str() +
                                " does not match token dim " +
                                std::to_string(d));
  }
  const std::size_t k = p.alpha_p.dim(0);

  auto [n, st] = normalize_core(z, eps_norm);
  Tensor h = project_windows(x_cw, p);
  SimilarityMatrix sim_a = bank_similarity(h, p.alpha_p, p.tau);
  SimilarityMatrix sim_b = bank_similarity(h, p.beta_p, p.tau);

  DynamicAffine affine{Tensor({bsz, c, d}), Tensor({bsz, c, d})};
  Tensor out(z.shape);
  for (std::size_t b = 0; b < bsz; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t j = 0; j < d; ++j) {
        double ah = 0.0, bh = 0.0;
        for (std::size_t i = 0; i < k; ++i) {
          ah += sim_a.weights(b, ch, i) * p.alpha_p(i, j);
          bh += sim_b.weights(b, ch, i) * p.beta_p(i, j);
        }
        affine.alpha_hat(b, ch, j) = ah;
        affine.beta_hat(b, ch, j) = bh;
        out(b, ch, j) = ah * n(b, ch, j) + bh;
      }
    }
  }
  return {std::move(out),    std::move(sim_a), std::move(sim_b),
          std::move(affine), std::move(h),     std::move(n),
          std::move(st)};
}

NormLayer make_norm_layer(NormKind kind, std::size_t c, std::size_t d,
                          std::size_t l_in, std::size_t k, double tau,
                          SimMetric metric, SimSpace space, RngState& rng) {
  NormLayer layer;
  layer.kind = kind;
  switch (kind) {
    case NormKind::none:
      break;
    case NormKind::ln:
    case NormKind::in:
      layer.ln = make_ln(d);
      break;
    case NormKind::cn:
      layer.cn = make_cn(c, d);
      break;
    case NormKind::acn:
      layer.acn = make_acn(c, d, tau, metric, space);
      break;
    case NormKind::pcn:
      layer.pcn = make_pcn(k, d, l_in, rng, tau);
      break;
  }
  return layer;
}

NormGrads zero_norm_grads(const NormLayer& layer) {
  NormGrads g;
  switch (layer.kind) {
    case NormKind::none:
      break;
    case NormKind::ln:
    case NormKind::in:
      g.ln.alpha = Tensor(layer.ln.alpha.shape);
      g.ln.beta = Tensor(layer.ln.beta.shape);
      break;
    case NormKind::cn:
      g.cn.alpha = Tensor(layer.cn.alpha.shape);
      g.cn.beta = Tensor(layer.cn.beta.shape);
      break;
    case NormKind::acn:
      g.acn.alpha_g = Tensor(layer.acn.alpha_g.shape);
      g.acn.alpha_l = Tensor(layer.acn.alpha_l.shape);
      g.acn.beta_g = Tensor(layer.acn.beta_g.shape);
      g.acn.beta_l = Tensor(layer.acn.beta_l.shape);
      break;
    case NormKind::pcn:
      g.pcn.alpha_p = Tensor(layer.pcn.alpha_p.shape);
      g.pcn.beta_p = Tensor(layer.pcn.beta_p.shape);
      g.pcn.proj_w = Tensor(layer.pcn.proj_w.shape);
      g.pcn.proj_b = Tensor(layer.pcn.proj_b.shape);
      break;
  }
  return g;
}

Tensor norm_forward(const Tensor& z, const NormLayer& layer,
                    const Tensor* x_cw, double eps_norm, NormCache* cache) {
  if (cache) *cache = NormCache{};
  switch (layer.kind) {
    case NormKind::none: {
      if (cache) cache->valid = true;
      return z;
    }
    case NormKind::ln: {
      if (!cache) return ln_forward(z, layer.ln, eps_norm);
      auto [n, st] = normalize_core(z, eps_norm);
      cache->normed = n;
      cache->stats = std::move(st);
      cache->valid = true;
      const std::size_t bsz = z.dim(0), c = z.dim(1), d = z.dim(2);
      for (std::size_t b = 0; b < bsz; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t j = 0; j < d; ++j)
            n(b, ch, j) = layer.ln.alpha(j) * n(b, ch, j) + layer.ln.beta(j);
      return n;
    }
    case NormKind::in: {
      require_rank3(z, "in_forward");
      const std::size_t bsz = z.dim(0), c = z.dim(1), d = z.dim(2);
      if (c < 2)
        throw std::invalid_argument(
            "in_forward: cross-channel statistics need C >= 2");
      Tensor normed(z.shape);
      NormStats st{Tensor({bsz, d}), Tensor({bsz, d}), eps_norm};
      for (std::size_t b = 0; b < bsz; ++b) {
        for (std::size_t j = 0; j < d; ++j) {
          double mu = 0.0;
          for (std::size_t ch = 0; ch < c; ++ch) mu += z(b, ch, j);
          mu /= static_cast<double>(c);
          double var = 0.0;
          for (std::size_t ch = 0; ch < c; ++ch) {
            const double dev = z(b, ch, j) - mu;
            var += dev * dev;
          }
          var /= static_cast<double>(c);
          const double sigma = std::sqrt(var + eps_norm);
          st.mu(b, j) = mu;
          st.sigma(b, j) = sigma;
          for (std::size_t ch = 0; ch < c; ++ch)
            normed(b, ch, j) = (z(b, ch, j) - mu) / sigma;
        }
      }
      Tensor out(z.shape);
      for (std::size_t b = 0; b < bsz; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t j = 0; j < d; ++j)
            out(b, ch, j) =
                layer.ln.alpha(j) * normed(b, ch, j) + layer.ln.beta(j);
      if (cache) {
        cache->normed = std::move(normed);
        cache->stats = std::move(st);
        cache->valid = true;
      }
      return out;
    }
    case NormKind::cn: {
      if (!cache) return cn_forward(z, layer.cn, eps_norm);
      const std::size_t c = z.dim(1), d = z.dim(2);
      if (layer.cn.alpha.dim(0) != c) {
        throw std::invalid_argument(
            "cn_forward: parameter rows " + layer.cn.alpha.shape_str() +
            " do not match the batch's " + std::to_string(c) + " channels");
      }
      auto [n, st] = normalize_core(z, eps_norm);
      cache->normed = n;
      cache->stats = std::move(st);
      cache->valid = true;
      const std::size_t bsz = z.dim(0);
      for (std::size_t b = 0; b < bsz; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t j = 0; j < d; ++j)
            n(b, ch, j) =
                layer.cn.alpha(ch, j) * n(b, ch, j) + layer.cn.beta(ch, j);
      return n;
    }
    case NormKind::acn: {
      const bool use_input = layer.acn.sim_space == SimSpace::latent_z;
      const Tensor* basis = use_input ? &z : x_cw;
      if (!basis) {
        throw std::invalid_argument(
            "norm_forward: acn in data space needs the raw channel windows");
      }
      AcnResult r = acn_forward(z, layer.acn, *basis, eps_norm);
      if (cache) {
        cache->normed = std::move(r.normed);
        cache->stats = std::move(r.stats);
        cache->basis = *basis;
        cache->basis_is_input = use_input;
        cache->sim = std::move(r.sim);
        cache->affine = std::move(r.affine);
        cache->valid = true;
      }
      return std::move(r.out);
    }
    case NormKind::pcn: {
      if (!x_cw) {
        throw std::invalid_argument(
            "norm_forward: pcn needs the raw channel windows");
      }
      PcnResult r = pcn_forward(z, *x_cw, layer.pcn, eps_norm);
      if (cache) {
        cache->normed = std::move(r.normed);
        cache->stats = std::move(r.stats);
        cache->x_cw = *x_cw;
        cache->h = std::move(r.h);
        cache->sim_alpha = std::move(r.sim_alpha);
        cache->sim_beta = std::move(r.sim_beta);
        cache->affine = std::move(r.affine);
        cache->valid = true;
      }
      return std::move(r.out);
    }
  }
  throw std::invalid_argument("norm_forward: bad layer kind");
}

Tensor norm_backward(const NormLayer& layer, const NormCache& cache,
                     const Tensor& grad_out, NormGrads& grads) {
  if (!cache.valid)
    throw std::logic_error("norm_backward: forward cache missing");
  switch (layer.kind) {
    case NormKind::none:
      return grad_out;
    case NormKind::ln: {
      const Tensor& n = cache.normed;
      const std::size_t bsz = n.dim(0), c = n.dim(1), d = n.dim(2);
      Tensor dn(n.shape);
      for (std::size_t b = 0; b < bsz; ++b) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          for (std::size_t j = 0; j < d; ++j) {
            const double g = grad_out(b, ch, j);
            grads.ln.beta(j) += g;
            grads.ln.alpha(j) += g * n(b, ch, j);
            dn(b, ch, j) = g * layer.ln.alpha(j);
          }
        }
      }
      return normalize_core_backward(dn, n, cache.stats);
    }
    case NormKind::in: {
      const Tensor& n = cache.normed;
      const std::size_t bsz = n.dim(0), c = n.dim(1), d = n.dim(2);
      Tensor dn(n.shape);
      for (std::size_t b = 0; b < bsz; ++b) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          for (std::size_t j = 0; j < d; ++j) {
            const double g = grad_out(b, ch, j);
            grads.ln.beta(j) += g;
            grads.ln.alpha(j) += g * n(b, ch, j);
            dn(b, ch, j) = g * layer.ln.alpha(j);
          }
        }
      }
      // Standardization backward along the channel axis per (b, d).
      Tensor dz(n.shape);
      for (std::size_t b = 0; b < bsz; ++b) {
        for (std::size_t j = 0; j < d; ++j) {
          double g_mean = 0.0, gn_mean = 0.0;
          for (std::size_t ch = 0; ch < c; ++ch) {
            g_mean += dn(b, ch, j);
            gn_mean += dn(b, ch, j) * n(b, ch, j);
          }
          g_mean /= static_cast<double>(c);
          gn_mean /= static_cast<double>(c);
          const double inv_sigma = 1.0 / cache.stats.sigma(b, j);
          for (std::size_t ch = 0; ch < c; ++ch)
            dz(b, ch, j) = inv_sigma * (dn(b, ch, j) - g_mean -
                                        n(b, ch, j) * gn_mean);
        }
      }
      return dz;
    }
    case NormKind::cn: {
      const Tensor& n = cache.normed;
      const std::size_t bsz = n.dim(0), c = n.dim(1), d = n.dim(2);
      Tensor dn(n.shape);
      for (std::size_t b = 0; b < bsz; ++b) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          for (std::size_t j = 0; j < d; ++j) {
            const double g = grad_out(b, ch, j);
            grads.cn.beta(ch, j) += g;
            grads.cn.alpha(ch, j) += g * n(b, ch, j);
            dn(b, ch, j) = g * layer.cn.alpha(ch, j);
          }
        }
      }
      return normalize_core_backward(dn, n, cache.stats);
    }
    case NormKind::acn: {
      const Tensor& n = cache.normed;
      const Tensor& s = cache.sim.weights;
      const Tensor& ah = cache.affine.alpha_hat;
      const Tensor& bh = cache.affine.beta_hat;
      const AcnParams& p = layer.acn;
      const std::size_t bsz = n.dim(0), c = n.dim(1), d = n.dim(2);

      Tensor dah(n.shape), dbh(n.shape), dn(n.shape);
      for (std::size_t b = 0; b < bsz; ++b) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          for (std::size_t j = 0; j < d; ++j) {
            const double g = grad_out(b, ch, j);
            grads.acn.alpha_g(ch, j) += g * ah(b, ch, j) * n(b, ch, j);
            grads.acn.beta_g(ch, j) += g * bh(b, ch, j);
            dah(b, ch, j) = g * p.alpha_g(ch, j) * n(b, ch, j);
            dbh(b, ch, j) = g * p.beta_g(ch, j);
            dn(b, ch, j) = g * p.alpha_g(ch, j) * ah(b, ch, j);
          }
        }
      }

      // Local banks (through the weighted average) and the similarity
      // weights themselves.
      Tensor ds({bsz, c, c});
      for (std::size_t b = 0; b < bsz; ++b) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          for (std::size_t i = 0; i < c; ++i) {
            const double w = s(b, ch, i);
            double acc = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              grads.acn.alpha_l(i, j) += w * dah(b, ch, j);
              grads.acn.beta_l(i, j) += w * dbh(b, ch, j);
              acc += dah(b, ch, j) * p.alpha_l(i, j) +
                     dbh(b, ch, j) * p.beta_l(i, j);
            }
            ds(b, ch, i) = acc;
          }
        }
      }

      Tensor dz = normalize_core_backward(dn, n, cache.stats);
      if (cache.basis_is_input) {
        // Scores depend on the layer input; add that path to dz.
        Tensor draw = softmax_last_axis_backward(s, ds, p.tau);
        Tensor dbasis =
            channel_similarity_backward(cache.basis, draw, p.sim_metric);
        for (std::size_t idx = 0; idx < dz.numel(); ++idx)
          dz.data[idx] += dbasis.data[idx];
      }
      // With a data-space basis the scores are constant in everything
      // trainable, so the similarity path ends here.
      return dz;
    }
    case NormKind::pcn: {
      const Tensor& n = cache.normed;
      const Tensor& sa = cache.sim_alpha.weights;
      const Tensor& sb = cache.sim_beta.weights;
      const Tensor& ah = cache.affine.alpha_hat;
      const PcnParams& p = layer.pcn;
      const std::size_t bsz = n.dim(0), c = n.dim(1), d = n.dim(2);
      const std::size_t k = p.alpha_p.dim(0);
      const std::size_t l = p.proj_w.dim(0);

      Tensor dah(n.shape), dbh(n.shape), dn(n.shape);
      for (std::size_t b = 0; b < bsz; ++b) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          for (std::size_t j = 0; j < d; ++j) {
            const double g = grad_out(b, ch, j);
            dah(b, ch, j) = g * n(b, ch, j);
            dbh(b, ch, j) = g;
            dn(b, ch, j) = g * ah(b, ch, j);
          }
        }
      }

      // Prototype banks through the weighted average, plus the score
      // gradients feeding the softmax.
      Tensor dsa({bsz, c, k}), dsb({bsz, c, k});
      for (std::size_t b = 0; b < bsz; ++b) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          for (std::size_t i = 0; i < k; ++i) {
            const double wa = sa(b, ch, i), wb = sb(b, ch, i);
            double acc_a = 0.0, acc_b = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              grads.pcn.alpha_p(i, j) += wa * dah(b, ch, j);
              grads.pcn.beta_p(i, j) += wb * dbh(b, ch, j);
              acc_a += dah(b, ch, j) * p.alpha_p(i, j);
              acc_b += dbh(b, ch, j) * p.beta_p(i, j);
            }
            dsa(b, ch, i) = acc_a;
            dsb(b, ch, i) = acc_b;
          }
        }
      }

      Tensor draw_a = softmax_last_axis_backward(sa, dsa, p.tau);
      Tensor draw_b = softmax_last_axis_backward(sb, dsb, p.tau);

      // Cosine backward for both banks; each contributes to its bank and to
      // the shared projection output h.
      Tensor dh(cache.h.shape);
      bank_similarity_backward(cache.h, p.alpha_p, draw_a, dh,
                               grads.pcn.alpha_p);
      bank_similarity_backward(cache.h, p.beta_p, draw_b, dh,
                               grads.pcn.beta_p);

      // Projection backward: h = x W + b per channel window.
      for (std::size_t b = 0; b < bsz; ++b) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          for (std::size_t j = 0; j < d; ++j) {
            const double g = dh(b, ch, j);
            if (g == 0.0) continue;
            grads.pcn.proj_b(j) += g;
            for (std::size_t i = 0; i < l; ++i)
              grads.pcn.proj_w(i, j) += cache.x_cw(b, ch, i) * g;
          }
        }
      }

      return normalize_core_backward(dn, n, cache.stats);
    }
  }
  throw std::invalid_argument("norm_backward: bad layer kind");
}

std::vector<BankRef> norm_banks(NormLayer& layer) {
  switch (layer.kind) {
    case NormKind::none:
      return {};
    case NormKind::ln:
    case NormKind::in:
      return {{"alpha", &layer.ln.alpha}, {"beta", &layer.ln.beta}};
    case NormKind::cn:
      return {{"alpha", &layer.cn.alpha}, {"beta", &layer.cn.beta}};
    case NormKind::acn:
      return {{"alpha_g", &layer.acn.alpha_g},
              {"alpha_l", &layer.acn.alpha_l},
              {"beta_g", &layer.acn.beta_g},
              {"beta_l", &layer.acn.beta_l}};
    case NormKind::pcn:
      return {{"alpha_p", &layer.pcn.alpha_p},
              {"beta_p", &layer.pcn.beta_p},
              {"proj_w", &layer.pcn.proj_w},
              {"proj_b", &layer.pcn.proj_b}};
  }
  throw std::invalid_argument("norm_banks: bad layer kind");
}

std::vector<BankRef> norm_grad_banks(const NormLayer& layer, NormGrads& grads) {
  switch (layer.kind) {
    case NormKind::none:
      return {};
    case NormKind::ln:
    case NormKind::in:
      return {{"alpha", &grads.ln.alpha}, {"beta", &grads.ln.beta}};
    case NormKind::cn:
      return {{"alpha", &grads.cn.alpha}, {"beta", &grads.cn.beta}};
    case NormKind::acn:
      return {{"alpha_g", &grads.acn.alpha_g},
              {"alpha_l", &grads.acn.alpha_l},
              {"beta_g", &grads.acn.beta_g},
              {"beta_l", &grads.acn.beta_l}};
    case NormKind::pcn:
      return {{"alpha_p", &grads.pcn.alpha_p},
              {"beta_p", &grads.pcn.beta_p},
              {"proj_w", &grads.pcn.proj_w},
              {"proj_b", &grads.pcn.proj_b}};
  }
  throw std::invalid_argument("norm_grad_banks: bad layer kind");
}

void save_norm_layer(std::ostream& os, const NormLayer& layer) {
  std::uint32_t c = 0, k = 0, d = 0, l_in = 0;
  double tau = 0.0;
  switch (layer.kind) {
    case NormKind::none:
      break;
    case NormKind::ln:
    case NormKind::in:
      d = static_cast<std::uint32_t>(layer.ln.alpha.dim(0));
      break;
    case NormKind::cn:
      c = static_cast<std::uint32_t>(layer.cn.alpha.dim(0));
      d = static_cast<std::uint32_t>(layer.cn.alpha.dim(1));
      break;
    case NormKind::acn:
      c = static_cast<std::uint32_t>(layer.acn.alpha_g.dim(0));
      d = static_cast<std::uint32_t>(layer.acn.alpha_g.dim(1));
      tau = layer.acn.tau;
      break;
    case NormKind::pcn:
      k = static_cast<std::uint32_t>(layer.pcn.alpha_p.dim(0));
      d = static_cast<std::uint32_t>(layer.pcn.alpha_p.dim(1));
      l_in = static_cast<std::uint32_t>(layer.pcn.proj_w.dim(0));
      tau = layer.pcn.tau;
      break;
  }
  write_u8(os, static_cast<std::uint8_t>(layer.kind));
  write_u32(os, c);
  write_u32(os, k);
  write_u32(os, d);
  write_u32(os, l_in);
  write_f64(os, tau);
  switch (layer.kind) {
    case NormKind::none:
      break;
    case NormKind::ln:
    case NormKind::in:
      write_values(os, layer.ln.alpha);
      write_values(os, layer.ln.beta);
      break;
    case NormKind::cn:
      write_values(os, layer.cn.alpha);
      write_values(os, layer.cn.beta);
      break;
    case NormKind::acn:
      write_values(os, layer.acn.alpha_g);
      write_values(os, layer.acn.alpha_l);
      write_values(os, layer.acn.beta_g);
      write_values(os, layer.acn.beta_l);
      break;
    case NormKind::pcn:
      write_values(os, layer.pcn.alpha_p);
      write_values(os, layer.pcn.beta_p);
      write_values(os, layer.pcn.proj_w);
      write_values(os, layer.pcn.proj_b);
      break;
  }
}

NormLayer load_norm_layer(std::istream& is, SimMetric metric, SimSpace space) {
  const std::uint8_t kind_byte = read_u8(is, kNormContainer);
  if (kind_byte > static_cast<std::uint8_t>(NormKind::pcn))
    throw std::runtime_error("norm container: unknown layer kind " +
                             std::to_string(int(kind_byte)));
  const auto kind = static_cast<NormKind>(kind_byte);
  const std::uint32_t c = read_u32(is, kNormContainer);
  const std::uint32_t k = read_u32(is, kNormContainer);
  const std::uint32_t d = read_u32(is, kNormContainer);
  const std::uint32_t l_in = read_u32(is, kNormContainer);
  const double tau = read_f64(is, kNormContainer);

  NormLayer layer;
  layer.kind = kind;
  switch (kind) {
    case NormKind::none:
      break;
    case NormKind::ln:
    case NormKind::in:
      layer.ln.alpha = Tensor({d});
      layer.ln.beta = Tensor({d});
      read_values(is, layer.ln.alpha, kNormContainer);
      read_values(is, layer.ln.beta, kNormContainer);
      break;
    case NormKind::cn:
      layer.cn.alpha = Tensor({c, d});
      layer.cn.beta = Tensor({c, d});
      read_values(is, layer.cn.alpha, kNormContainer);
      read_values(is, layer.cn.beta, kNormContainer);
      break;
    case NormKind::acn:
      layer.acn.alpha_g = Tensor({c, d});
      layer.acn.alpha_l = Tensor({c, d});
      layer.acn.beta_g = Tensor({c, d});
      layer.acn.beta_l = Tensor({c, d});
      read_values(is, layer.acn.alpha_g, kNormContainer);
      read_values(is, layer.acn.alpha_l, kNormContainer);
      read_values(is, layer.acn.beta_g, kNormContainer);
      read_values(is, layer.acn.beta_l, kNormContainer);
      layer.acn.tau = tau;
      layer.acn.sim_metric = metric;
      layer.acn.sim_space = space;
      break;
    case NormKind::pcn:
      layer.pcn.alpha_p = Tensor({k, d});
      layer.pcn.beta_p = Tensor({k, d});
      layer.pcn.proj_w = Tensor({l_in, d});
      layer.pcn.proj_b = Tensor({d});
      read_values(is, layer.pcn.alpha_p, kNormContainer);
      read_values(is, layer.pcn.beta_p, kNormContainer);
      read_values(is, layer.pcn.proj_w, kNormContainer);
      read_values(is, layer.pcn.proj_b, kNormContainer);
      layer.pcn.tau = tau;
      layer.pcn.k = k;
      break;
  }
  return layer;
}

}  // namespace chanorm
