#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "chanorm/tensor.hpp"

namespace chanorm {

// The normalization family. Token batches are B x C x D: B windows, C
// channels-as-tokens, D latent features. All layers standardize each
// (b, c) token over D (except `in`, which standardizes over C) and differ
// only in how the affine scale/shift is produced.

enum class NormKind : std::uint8_t { none, ln, in, cn, acn, pcn };
enum class SimMetric : std::uint8_t { cosine, neg_l1, neg_l2 };
enum class SimSpace : std::uint8_t { data_x, latent_z };

std::string norm_kind_name(NormKind k);
NormKind norm_kind_from_name(const std::string& s);
std::string sim_metric_name(SimMetric m);
SimMetric sim_metric_from_name(const std::string& s);
std::string sim_space_name(SimSpace s);
SimSpace sim_space_from_name(const std::string& s);

inline constexpr double kDefaultEpsNorm = 1e-5;
inline constexpr double kDefaultTau = 0.1;
inline constexpr double kCosineEps = 1e-8;

// Per-token standardization statistics. mu/sigma are B x C for the
// feature-axis layers and B x D for `in` (which standardizes across C).
struct NormStats {
  Tensor mu;
  Tensor sigma;
  double eps_norm = kDefaultEpsNorm;
};

// Shared affine: one scale/shift vector of length D across all channels.
struct LnParams {
  Tensor alpha;  // [D]
  Tensor beta;   // [D]
};

// Per-channel affine: row c applies to channel c.
struct CnParams {
  Tensor alpha;  // [C x D]
  Tensor beta;   // [C x D]
};

// Global parameters scaled elementwise by a similarity-weighted average of
// local parameters; the similarity basis is either the layer input (latent
// space) or the raw channel window (data space).
struct AcnParams {
  Tensor alpha_g;  // [C x D]
  Tensor alpha_l;  // [C x D]
  Tensor beta_g;   // [C x D]
  Tensor beta_l;   // [C x D]
  double tau = kDefaultTau;
  SimMetric sim_metric = SimMetric::cosine;
  SimSpace sim_space = SimSpace::latent_z;
};

// K prototype parameter rows; channels attend to prototypes through the
// cosine similarity of a shared linear projection of their raw window.
// Works for any channel count.
struct PcnParams {
  Tensor alpha_p;  // [K x D]
  Tensor beta_p;   // [K x D]
  Tensor proj_w;   // [L_in x D]
  Tensor proj_b;   // [D]
  double tau = kDefaultTau;
  std::size_t k = 1;
};

// Row-stochastic attention over channels (B x C x C) or prototypes
// (B x C x K), plus the pre-softmax scores.
struct SimilarityMatrix {
  Tensor weights;
  Tensor raw;
};

// Input-dependent effective affine parameters, one D-vector per token.
struct DynamicAffine {
  Tensor alpha_hat;  // [B x C x D]
  Tensor beta_hat;   // [B x C x D]
};

// Identity-at-init constructors: every layer starts out equal to the bare
// standardization (scale 1, shift 0), so training begins from "no
// normalization has been learned yet".
LnParams make_ln(std::size_t d);
CnParams make_cn(std::size_t c, std::size_t d);
AcnParams make_acn(std::size_t c, std::size_t d, double tau = kDefaultTau,
                   SimMetric metric = SimMetric::cosine,
                   SimSpace space = SimSpace::latent_z);
// The projection weights are the one randomly initialized bank (scale
// 1/sqrt(l_in)); prototypes start at ones/zeros like every other layer.
PcnParams make_pcn(std::size_t k, std::size_t d, std::size_t l_in,
                   RngState& rng, double tau = kDefaultTau);

// --- Forward kernels ---

// Standardize each (b, c) row over D: population variance, eps inside the
// square root. Returns the normalized batch and the cached statistics.
std::pair<Tensor, NormStats> normalize_core(const Tensor& z, double eps_norm);

Tensor ln_forward(const Tensor& z, const LnParams& p, double eps_norm);

// Instance-norm baseline: standardize across the C axis per (b, d), then a
// per-d affine. Requires C >= 2.
Tensor in_forward(const Tensor& z, const LnParams& p, double eps_norm);

Tensor cn_forward(const Tensor& z, const CnParams& p, double eps_norm);

// Pairwise similarity between channel vectors of `basis` (B x C x M),
// turned row-stochastic by a temperature softmax. Distances are negated so
// larger always means more similar.
SimilarityMatrix channel_similarity(const Tensor& basis, double tau,
                                    SimMetric metric);

struct AcnResult {
  Tensor out;
  SimilarityMatrix sim;
  DynamicAffine affine;
  Tensor normed;  // pre-affine Norm(z), kept for the backward pass
  NormStats stats;
};
// sim_basis is the layer input itself (latent space) or the raw channel
// windows B x C x L (data space); the caller passes whichever sim_space
// demands.
AcnResult acn_forward(const Tensor& z, const AcnParams& p,
                      const Tensor& sim_basis, double eps_norm);

// Similarity of projected channel windows h(x) against one prototype bank.
// x_cw is B x C x L_in (channel windows).
SimilarityMatrix prototype_similarity(const Tensor& x_cw, const PcnParams& p,
                                      const Tensor& bank);

struct PcnResult {
  Tensor out;
  SimilarityMatrix sim_alpha;
  SimilarityMatrix sim_beta;
  DynamicAffine affine;
  Tensor h;       // projected windows, B x C x D
  Tensor normed;  // pre-affine Norm(z)
  NormStats stats;
};
PcnResult pcn_forward(const Tensor& z, const Tensor& x_cw, const PcnParams& p,
                      double eps_norm);

// --- Unified layer (used by the backbones and the trainer) ---

struct NormLayer {
  NormKind kind = NormKind::none;
  LnParams ln;   // ln and in
  CnParams cn;
  AcnParams acn;
  PcnParams pcn;
};

NormLayer make_norm_layer(NormKind kind, std::size_t c, std::size_t d,
                          std::size_t l_in, std::size_t k, double tau,
                          SimMetric metric, SimSpace space, RngState& rng);

// Everything the backward pass needs from the forward pass.
struct NormCache {
  bool valid = false;
  Tensor normed;  // Norm(z), B x C x D
  NormStats stats;
  Tensor basis;           // acn similarity basis as used
  bool basis_is_input = false;  // true when the basis aliases the layer input
  SimilarityMatrix sim;   // acn
  DynamicAffine affine;   // acn: local averages; pcn: full effective affine
  Tensor x_cw;            // pcn: raw channel windows
  Tensor h;               // pcn: projected windows
  SimilarityMatrix sim_alpha;  // pcn
  SimilarityMatrix sim_beta;   // pcn
};

// Gradient banks, mirroring NormLayer's active member.
struct NormGrads {
  LnParams ln;
  CnParams cn;
  AcnParams acn;
  PcnParams pcn;
};

NormGrads zero_norm_grads(const NormLayer& layer);

// x_cw may be null for kinds that do not consume the raw window (ln, in,
// cn, acn in latent space); it is required for pcn and acn in data space.
Tensor norm_forward(const Tensor& z, const NormLayer& layer,
                    const Tensor* x_cw, double eps_norm, NormCache* cache);

// Exact analytic gradients. Returns dL/dz (including the similarity-basis
// path when acn measures similarity in latent space) and accumulates
// parameter gradients into `grads`.
Tensor norm_backward(const NormLayer& layer, const NormCache& cache,
                     const Tensor& grad_out, NormGrads& grads);

// Standardization backward shared by the layers: given dL/d(normed) and the
// cached forward state, produce dL/dz. Exposed for reuse and direct tests.
Tensor normalize_core_backward(const Tensor& grad_normed, const Tensor& normed,
                               const NormStats& stats);

// Trainable banks of a layer in declaration order, paired with stable
// names; the optimizer, serializer, and gradient checker all iterate this.
struct BankRef {
  std::string name;
  Tensor* tensor;
};
std::vector<BankRef> norm_banks(NormLayer& layer);
std::vector<BankRef> norm_grad_banks(const NormLayer& layer, NormGrads& grads);

// Flat binary container: header {kind u8, C u32, K u32, D u32, L_in u32,
// tau f64}, little-endian, followed by the banks in declaration order as
// f64 arrays. sim_metric/sim_space are configuration, not weights, and are
// restored by the caller.
void save_norm_layer(std::ostream& os, const NormLayer& layer);
NormLayer load_norm_layer(std::istream& is,
                          SimMetric metric = SimMetric::cosine,
                          SimSpace space = SimSpace::latent_z);

}  // namespace chanorm
