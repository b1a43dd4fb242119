#include "chanorm/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "chanorm/linalg.hpp"

namespace chanorm {

namespace {

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// log det(Z^T Z / N + eps I) for samples Z of shape N x D.
double moment_logdet(const Tensor& samples, double eps_ent, const char* what) {
  const std::size_t n = samples.shape[0];
  const std::size_t d = samples.shape[1];
  Tensor m = Tensor::zeros({d, d});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t a = 0; a < d; ++a) {
      const double za = samples(i, a);
      for (std::size_t b = a; b < d; ++b) {
        m(a, b) += za * samples(i, b);
      }
    }
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t a = 0; a < d; ++a) {
    for (std::size_t b = a; b < d; ++b) {
      m(a, b) *= inv_n;
      m(b, a) = m(a, b);
    }
  }
  for (std::size_t a = 0; a < d; ++a) m(a, a) += eps_ent;
  try {
    return logdet_psd(m);
  } catch (const std::exception& e) {
    throw std::runtime_error(std::string(what) +
                             ": moment matrix is not positive definite (" +
                             e.what() + ")");
  }
}

double entropy_from_logdet(std::size_t dim, double logdet) {
  const double log_2pi_e = std::log(2.0 * std::numbers::pi) + 1.0;
  const double h = 0.5 * (static_cast<double>(dim) * log_2pi_e + logdet);
  return h / static_cast<double>(dim);
}

void require_matrix(const Tensor& t, const char* what) {
  if (t.ndim() != 2 || t.shape[0] == 0 || t.shape[1] == 0) {
    throw std::invalid_argument(std::string(what) +
                                ": expected a non-empty rank-2 tensor, got " +
                                t.shape_str());
  }
  if (!t.all_finite()) {
    throw std::invalid_argument(std::string(what) + ": non-finite values");
  }
}

// KL(p || q) over n bins with both arguments floored inside the logs.
double kl_rows(const double* p, const double* q, std::size_t n) {
  double total = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    const double pj = std::max(p[j], kKldFloor);
    const double qj = std::max(q[j], kKldFloor);
    total += p[j] * (std::log(pj) - std::log(qj));
  }
  return total;
}

void append_entropy_json(std::ostringstream& os, const EntropyReport& r) {
  os << "{\"feature_entropy\":" << num(r.feature_entropy)
     << ",\"channel_entropy\":" << num(r.channel_entropy)
     << ",\"feature_logdet\":" << num(r.feature_logdet)
     << ",\"channel_logdet\":" << num(r.channel_logdet)
     << ",\"eps_ent\":" << num(r.eps_ent) << "}";
}

}  // namespace

std::string cid_verdict_name(CidVerdict v) {
  switch (v) {
    case CidVerdict::non_cid: return "NON_CID";
    case CidVerdict::cid: return "CID";
    case CidVerdict::indeterminate: return "INDETERMINATE";
  }
  throw std::invalid_argument("cid_verdict_name: unknown verdict");
}

CidResult cid_test(const Model& model, std::size_t lookback, std::size_t horizon,
                   std::size_t channels, std::uint64_t seed, double tol_eq,
                   double tol_neq) {
  if (channels < 2) {
    throw std::invalid_argument(
        "cid_test: needs at least 2 channels to duplicate one");
  }
  if (lookback != model.lookback || horizon != model.horizon) {
    throw std::invalid_argument("cid_test: window geometry " +
                                std::to_string(lookback) + "/" +
                                std::to_string(horizon) +
                                " does not match the model");
  }
  if (channel_count_locked(model) && channels != model.channels) {
    throw std::invalid_argument(
        "cid_test: model is locked to " + std::to_string(model.channels) +
        " channels, got " + std::to_string(channels));
  }
  if (!(tol_eq >= 0.0) || !(tol_neq > tol_eq)) {
    throw std::invalid_argument("cid_test: need 0 <= tol_eq < tol_neq");
  }

  RngState rng(seed);
  Tensor window = rng.split("cid probe").normal_tensor({1, lookback, channels});
  for (std::size_t i = 0; i < lookback; ++i) {
    window(0, i, 1) = window(0, i, 0);
  }
  const ForecastBatch pred =
      forward_forecast(make_series_batch(std::move(window)), model, nullptr);

  double gap = 0.0;
  for (std::size_t t = 0; t < horizon; ++t) {
    gap = std::max(gap, std::abs(pred.values(0, t, 0) - pred.values(0, t, 1)));
  }

  CidResult result;
  result.max_gap = gap;
  if (gap <= tol_eq) {
    result.verdict = CidVerdict::non_cid;
  } else if (gap > tol_neq) {
    result.verdict = CidVerdict::cid;
  } else {
    result.verdict = CidVerdict::indeterminate;
  }
  return result;
}

MeanRepresentation mean_representation(const Model& model,
                                       const WindowSet& data) {
  const Tensor& v = data.inputs.values;
  if (data.inputs.lookback != model.lookback) {
    throw std::invalid_argument("mean_representation: window lookback " +
                                std::to_string(data.inputs.lookback) +
                                " does not match the model");
  }
  const std::size_t b_count = v.shape[0];
  const std::size_t lookback = v.shape[1];
  const std::size_t channels = v.shape[2];
  if (channel_count_locked(model) && channels != model.channels) {
    throw std::invalid_argument(
        "mean_representation: model is locked to " +
        std::to_string(model.channels) + " channels, got " +
        std::to_string(channels));
  }

  const std::size_t d = model.cfg.kind == BackboneKind::linear
                            ? model.embed_w.shape[1]
                            : model.cfg.d_model;
  Tensor sum = Tensor::zeros({channels, d});
  for (std::size_t b = 0; b < b_count; ++b) {
    Tensor one({1, lookback, channels});
    for (std::size_t i = 0; i < lookback; ++i) {
      for (std::size_t c = 0; c < channels; ++c) one(0, i, c) = v(b, i, c);
    }
    ForwardCache cache;
    forward_forecast(make_series_batch(std::move(one)), model, &cache);
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t j = 0; j < d; ++j) sum(c, j) += cache.encoded(0, c, j);
    }
  }
  for (double& x : sum.data) x /= static_cast<double>(b_count);
  return MeanRepresentation{std::move(sum)};
}

double gaussian_entropy(const Tensor& samples, double eps_ent) {
  require_matrix(samples, "gaussian_entropy");
  if (!(eps_ent > 0.0)) {
    throw std::invalid_argument("gaussian_entropy: eps_ent must be positive");
  }
  const double logdet = moment_logdet(samples, eps_ent, "gaussian_entropy");
  return entropy_from_logdet(samples.shape[1], logdet);
}

EntropyReport channel_feature_entropy(const MeanRepresentation& rep,
                                      double eps_ent) {
  require_matrix(rep.z_bar, "channel_feature_entropy");
  if (!(eps_ent > 0.0)) {
    throw std::invalid_argument(
        "channel_feature_entropy: eps_ent must be positive");
  }
  const std::size_t c = rep.z_bar.shape[0];
  const std::size_t d = rep.z_bar.shape[1];
  Tensor transposed({d, c});
  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t j = 0; j < d; ++j) transposed(j, i) = rep.z_bar(i, j);
  }

  EntropyReport report;
  report.eps_ent = eps_ent;
  report.feature_logdet =
      moment_logdet(rep.z_bar, eps_ent, "channel_feature_entropy");
  report.channel_logdet =
      moment_logdet(transposed, eps_ent, "channel_feature_entropy");
  report.feature_entropy = entropy_from_logdet(d, report.feature_logdet);
  report.channel_entropy = entropy_from_logdet(c, report.channel_logdet);
  return report;
}

CorrelationReport channel_correlation(const MeanRepresentation& rep) {
  require_matrix(rep.z_bar, "channel_correlation");
  const std::size_t c = rep.z_bar.shape[0];
  const std::size_t d = rep.z_bar.shape[1];

  std::vector<double> mean(c, 0.0), sigma(c, 0.0);
  for (std::size_t i = 0; i < c; ++i) {
    double m = 0.0;
    for (std::size_t j = 0; j < d; ++j) m += rep.z_bar(i, j);
    mean[i] = m / static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double dev = rep.z_bar(i, j) - mean[i];
      var += dev * dev;
    }
    sigma[i] = std::sqrt(var / static_cast<double>(d));
  }

  CorrelationReport report;
  report.corr = Tensor::zeros({c, c});
  report.offdiag_hist.assign(kCorrBins, 0);
  double off_sum = 0.0, off_sq = 0.0;
  std::size_t off_count = 0;
  for (std::size_t i = 0; i < c; ++i) {
    report.corr(i, i) = 1.0;
    for (std::size_t j = i + 1; j < c; ++j) {
      double r = 0.0;
      if (sigma[i] > 0.0 && sigma[j] > 0.0) {
        double cov = 0.0;
        for (std::size_t k = 0; k < d; ++k) {
          cov += (rep.z_bar(i, k) - mean[i]) * (rep.z_bar(j, k) - mean[j]);
        }
        cov /= static_cast<double>(d);
        r = std::clamp(cov / (sigma[i] * sigma[j]), -1.0, 1.0);
      }
      report.corr(i, j) = r;
      report.corr(j, i) = r;
      const double scaled = (r + 1.0) * 0.5 * static_cast<double>(kCorrBins);
      const auto bin = static_cast<std::size_t>(std::clamp(
          std::floor(scaled), 0.0, static_cast<double>(kCorrBins - 1)));
      report.offdiag_hist[bin] += 2;  // (i, j) and its mirror
      off_sum += 2.0 * r;
      off_sq += 2.0 * r * r;
      off_count += 2;
    }
  }
  if (off_count > 0) {
    const double m = off_sum / static_cast<double>(off_count);
    const double var = off_sq / static_cast<double>(off_count) - m * m;
    report.offdiag_std = std::sqrt(std::max(var, 0.0));
  }
  return report;
}

double kl_divergence(const Tensor& p, const Tensor& q) {
  if (p.ndim() != 1 || q.ndim() != 1 || p.shape[0] != q.shape[0] ||
      p.shape[0] == 0) {
    throw std::invalid_argument(
        "kl_divergence: expected two rank-1 tensors of equal length, got " +
        p.shape_str() + " and " + q.shape_str());
  }
  if (!p.all_finite() || !q.all_finite()) {
    throw std::invalid_argument("kl_divergence: non-finite values");
  }
  return kl_rows(p.data.data(), q.data.data(), p.shape[0]);
}

HeadKldReport head_kld(const AttentionTrace& trace) {
  HeadKldReport report;
  report.pair_kld.reserve(trace.weights.size());
  report.mean_kld.reserve(trace.weights.size());
  for (std::size_t layer = 0; layer < trace.weights.size(); ++layer) {
    const Tensor& w = trace.weights[layer];
    const std::string what = "head_kld: layer " + std::to_string(layer);
    if (w.ndim() != 4 || w.shape[2] != w.shape[3] || w.shape[0] == 0 ||
        w.shape[1] == 0 || w.shape[2] == 0) {
      throw std::invalid_argument(
          what + ": expected B x heads x C x C attention weights, got " +
          w.shape_str());
    }
    if (!w.all_finite()) {
      throw std::invalid_argument(what + ": non-finite attention weights");
    }
    const std::size_t b_count = w.shape[0];
    const std::size_t heads = w.shape[1];
    const std::size_t c = w.shape[2];
    for (std::size_t n = 0; n < b_count; ++n) {
      for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t i = 0; i < c; ++i) {
          double row_sum = 0.0;
          for (std::size_t j = 0; j < c; ++j) row_sum += w(n, h, i, j);
          if (std::abs(row_sum - 1.0) > 1e-6) {
            throw std::invalid_argument(
                what + ": attention row sums to " + num(row_sum) +
                ", not 1 — not a valid trace");
          }
        }
      }
    }

    Tensor pairs = Tensor::zeros({heads, heads});
    const std::size_t rows = b_count * c;
    const double* base = w.data.data();
    for (std::size_t a = 0; a < heads; ++a) {
      for (std::size_t b = a + 1; b < heads; ++b) {
        double total = 0.0;
        for (std::size_t n = 0; n < b_count; ++n) {
          for (std::size_t i = 0; i < c; ++i) {
            const double* pa = base + ((n * heads + a) * c + i) * c;
            const double* pb = base + ((n * heads + b) * c + i) * c;
            total += 0.5 * (kl_rows(pa, pb, c) + kl_rows(pb, pa, c));
          }
        }
        const double mean_pair = total / static_cast<double>(rows);
        pairs(a, b) = mean_pair;
        pairs(b, a) = mean_pair;
      }
    }
    double layer_mean = 0.0;
    if (heads > 1) {
      double total = 0.0;
      for (std::size_t a = 0; a < heads; ++a) {
        for (std::size_t b = a + 1; b < heads; ++b) total += pairs(a, b);
      }
      layer_mean = total / (0.5 * static_cast<double>(heads) *
                            static_cast<double>(heads - 1));
    }
    report.pair_kld.push_back(std::move(pairs));
    report.mean_kld.push_back(layer_mean);
  }
  return report;
}

std::string diagnostics_json(const DiagnosticsReport& report) {
  std::ostringstream os;
  os << "{\"cid\":{\"verdict\":\"" << cid_verdict_name(report.cid.verdict)
     << "\",\"max_gap\":" << num(report.cid.max_gap) << "},";

  os << "\"entropy\":{\"baseline\":";
  append_entropy_json(os, report.entropy_baseline);
  os << ",\"subject\":";
  append_entropy_json(os, report.entropy_subject);
  os << "},";

  os << "\"correlation\":{\"offdiag_std\":" << num(report.correlation.offdiag_std)
     << ",\"histogram\":[";
  for (std::size_t k = 0; k < report.correlation.offdiag_hist.size(); ++k) {
    if (k > 0) os << ",";
    os << report.correlation.offdiag_hist[k];
  }
  os << "],\"matrix\":[";
  const Tensor& corr = report.correlation.corr;
  const std::size_t c = corr.ndim() == 2 ? corr.shape[0] : 0;
  for (std::size_t i = 0; i < c; ++i) {
    if (i > 0) os << ",";
    os << "[";
    for (std::size_t j = 0; j < c; ++j) {
      if (j > 0) os << ",";
      os << num(corr(i, j));
    }
    os << "]";
  }
  os << "]},";

  os << "\"head_kld\":{\"mean_per_layer\":[";
  for (std::size_t k = 0; k < report.heads.mean_kld.size(); ++k) {
    if (k > 0) os << ",";
    os << num(report.heads.mean_kld[k]);
  }
  os << "],\"pair_matrices\":[";
  for (std::size_t k = 0; k < report.heads.pair_kld.size(); ++k) {
    if (k > 0) os << ",";
    const Tensor& m = report.heads.pair_kld[k];
    os << "[";
    for (std::size_t a = 0; a < m.shape[0]; ++a) {
      if (a > 0) os << ",";
      os << "[";
      for (std::size_t b = 0; b < m.shape[1]; ++b) {
        if (b > 0) os << ",";
        os << num(m(a, b));
      }
      os << "]";
    }
    os << "]";
  }
  os << "]}}";
  return os.str();
}

void write_correlation_csv(std::ostream& os, const CorrelationReport& report) {
  const Tensor& corr = report.corr;
  if (corr.ndim() != 2) {
    throw std::invalid_argument("write_correlation_csv: empty report");
  }
  for (std::size_t i = 0; i < corr.shape[0]; ++i) {
    for (std::size_t j = 0; j < corr.shape[1]; ++j) {
      if (j > 0) os << ",";
      os << num(corr(i, j));
    }
    os << "\n";
  }
}

void write_histogram_csv(std::ostream& os, const CorrelationReport& report) {
  os << "bin_low,bin_high,count\n";
  const double width = 2.0 / static_cast<double>(kCorrBins);
  for (std::size_t k = 0; k < report.offdiag_hist.size(); ++k) {
    const double lo = -1.0 + width * static_cast<double>(k);
    os << num(lo) << "," << num(lo + width) << "," << report.offdiag_hist[k]
       << "\n";
  }
}

}  // namespace chanorm
