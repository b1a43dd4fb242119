#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "chanorm/backbones.hpp"
#include "chanorm/datasets.hpp"
#include "chanorm/tensor.hpp"

namespace chanorm {

// Regularizer added to second-moment matrices before taking log-determinants,
// so rank-deficient representations get a finite (very negative) entropy
// instead of -inf.
inline constexpr double kDefaultEpsEnt = 1e-4;

// Attention rows are floored at this value inside logarithms so KL terms
// stay finite when a weight underflows to zero.
inline constexpr double kKldFloor = 1e-12;

// A forecast gap at or below tol_eq means the model provably cannot tell the
// duplicated channels apart; a gap strictly above tol_neq means it provably
// can. The band between is INDETERMINATE.
inline constexpr double kCidTolEq = 1e-9;
inline constexpr double kCidTolNeq = 1e-6;

inline constexpr std::size_t kCorrBins = 40;

enum class CidVerdict : std::uint8_t { non_cid, cid, indeterminate };

std::string cid_verdict_name(CidVerdict v);

struct CidResult {
  CidVerdict verdict = CidVerdict::indeterminate;
  double max_gap = 0.0;  // max_t |prediction for channel 0 - channel 1|
};

// Duplicate-channel probe: feed the model one seeded random window whose
// channel 1 is overwritten with channel 0, and compare the two forecast
// columns. A model that treats channels identically must produce a zero gap;
// any gap above tol_neq proves it distinguishes them.
CidResult cid_test(const Model& model, std::size_t lookback, std::size_t horizon,
                   std::size_t channels, std::uint64_t seed,
                   double tol_eq = kCidTolEq, double tol_neq = kCidTolNeq);

struct MeanRepresentation {
  Tensor z_bar;  // C x D, post-encoder representation averaged over windows
};

// Average the encoder output over every window in `data` (forward passes
// only; the model is not modified).
MeanRepresentation mean_representation(const Model& model, const WindowSet& data);

// Differential entropy rate of a zero-mean Gaussian fitted to the rows of
// `samples` (N x D): H = 0.5 * log((2*pi*e)^D * det(Z^T Z / N + eps_ent I)),
// returned per dimension (H / D), in nats.
double gaussian_entropy(const Tensor& samples, double eps_ent = kDefaultEpsEnt);

struct EntropyReport {
  double feature_entropy = 0.0;  // gaussian_entropy of z_bar rows (C samples in R^D)
  double channel_entropy = 0.0;  // gaussian_entropy of z_bar columns (D samples in R^C)
  double feature_logdet = 0.0;   // log det of the regularized D x D moment
  double channel_logdet = 0.0;   // log det of the regularized C x C moment
  double eps_ent = kDefaultEpsEnt;
};

EntropyReport channel_feature_entropy(const MeanRepresentation& rep,
                                      double eps_ent = kDefaultEpsEnt);

struct CorrelationReport {
  Tensor corr;                            // C x C Pearson correlation of z_bar rows
  std::vector<std::size_t> offdiag_hist;  // kCorrBins equal bins covering [-1, 1]
  double offdiag_std = 0.0;               // population std of the off-diagonal entries
};

CorrelationReport channel_correlation(const MeanRepresentation& rep);

// Directional KL(p || q) for two discrete distributions, with both arguments
// floored at kKldFloor inside the logarithms.
double kl_divergence(const Tensor& p, const Tensor& q);

struct HeadKldReport {
  // One heads x heads matrix per layer; entry (a, b) is the symmetrized KL
  // 0.5 * (KL(a||b) + KL(b||a)) between the two heads' attention rows,
  // averaged over batch entries and query positions. Symmetric, zero diagonal.
  std::vector<Tensor> pair_kld;
  // Per layer, the mean of pair_kld over unordered head pairs (0 when a
  // layer has a single head).
  std::vector<double> mean_kld;
};

HeadKldReport head_kld(const AttentionTrace& trace);

struct DiagnosticsReport {
  CidResult cid;
  EntropyReport entropy_baseline;
  EntropyReport entropy_subject;
  CorrelationReport correlation;
  HeadKldReport heads;
};

// One self-contained JSON document (no external dependencies; doubles are
// printed with %.17g so reports round-trip exactly).
std::string diagnostics_json(const DiagnosticsReport& report);

// Plot-ready CSV exports: the correlation matrix (one row per channel) and
// the off-diagonal histogram (bin_low,bin_high,count).
void write_correlation_csv(std::ostream& os, const CorrelationReport& report);
void write_histogram_csv(std::ostream& os, const CorrelationReport& report);

}  // namespace chanorm
