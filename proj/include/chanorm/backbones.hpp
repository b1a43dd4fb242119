#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "chanorm/normlayers.hpp"
#include "chanorm/series.hpp"
#include "chanorm/tensor.hpp"

namespace chanorm {

// Forecasting pipeline: optional per-instance standardization of the input
// window, a shared channel-as-token embedding, an optional additive channel
// identifier, an encoder stack wired with a configurable normalization
// layer, and a shared linear projection head. With the shared embedding and
// no identifier the attention and MLP encoders cannot tell identical
// channels apart; the normalization layer is what breaks that tie.

enum class BackboneKind : std::uint8_t { channel_attention, residual_mlp, linear };
enum class IdentifierMode : std::uint8_t { none, learnable, fixed_constant };

std::string backbone_kind_name(BackboneKind k);
BackboneKind backbone_kind_from_name(const std::string& s);
std::string identifier_mode_name(IdentifierMode m);
IdentifierMode identifier_mode_from_name(const std::string& s);

// Per-instance standardization of inputs (and the inverse map on
// forecasts) uses this variance floor.
inline constexpr double kInstanceNormEps = 1e-5;

struct BackboneConfig {
  BackboneKind kind = BackboneKind::channel_attention;
  std::size_t depth = 2;
  std::size_t d_model = 32;
  std::size_t heads = 2;  // must divide d_model
  NormKind norm_kind = NormKind::ln;
  IdentifierMode identifier_mode = IdentifierMode::none;
  bool instance_norm_io = false;
  // Normalization-layer knobs (consumed by acn/pcn).
  std::size_t prototypes = 4;
  double tau = kDefaultTau;
  SimMetric sim_metric = SimMetric::cosine;
  SimSpace sim_space = SimSpace::latent_z;
};
// The linear kind is embedding + head only; depth, heads, and norm_kind are
// ignored there.

// One encoder layer. channel_attention uses every bank; residual_mlp uses
// only the feed-forward banks and norm1. The key projection carries no
// bias: softmax rows are invariant to per-row constant score shifts, so a
// key bias would be a parameter with an identically zero gradient.
struct EncoderLayerParams {
  Tensor wq, bq;  // query projection, D x D / D
  Tensor wk;      // key projection, D x D
  Tensor wv, bv;  // value projection, D x D / D
  Tensor wo, bo;  // output projection, D x D / D
  Tensor w1, b1;  // feed-forward in, D x 2D / 2D
  Tensor w2, b2;  // feed-forward out, 2D x D / D
  NormLayer norm1;
  NormLayer norm2;
};

struct Model {
  BackboneConfig cfg;
  std::size_t lookback = 0;
  std::size_t horizon = 0;
  std::size_t channels = 0;  // channel count the model was built for
  Tensor embed_w;            // L x D, shared across channels
  Tensor embed_b;            // D
  Tensor ident_bank;         // C x D; empty when identifier_mode == none
  std::vector<EncoderLayerParams> layers;  // empty for the linear kind
  Tensor proj_w;             // D x H, shared across channels
  Tensor proj_b;             // H
};

// Attention weights per encoder layer, each B x heads x C x C; every row of
// the last axis sums to 1.
struct AttentionTrace {
  std::vector<Tensor> weights;
};

// Fresh model with seeded initialization. Every bank draws from its own
// named substream, so two models built from equal seeds share identical
// backbone weights regardless of norm_kind — the identity-at-init property
// then makes their first forward passes agree as well.
Model make_model(const BackboneConfig& cfg, std::size_t lookback,
                 std::size_t horizon, std::size_t channels, RngState& rng);

// True when some parameter bank is sized by the channel count, which pins
// inference to the build-time C. Prototype normalization with no channel
// identifier leaves the model free to run on any channel count.
bool channel_count_locked(const Model& model);

// --- Pipeline stages (exposed for staged oracles and diagnostics) ---

// Shared linear map taking each channel's length-L window to a D-token;
// returns B x C x D.
Tensor embed_channels(const SeriesBatch& x, const Tensor& w, const Tensor& b);

// z + bank, broadcast over the batch; bank is C x D.
Tensor add_channel_identifier(const Tensor& z, const Tensor& bank);

struct AttnCache {
  Tensor in;       // B x C x D
  Tensor q, k, v;  // B x C x D
  Tensor attn;     // B x heads x C x C
  Tensor ctx;      // B x C x D, heads re-concatenated
};

struct FfnCache {
  Tensor in;    // B x C x D
  Tensor act1;  // B x C x 2D, post-ReLU
};

struct EncoderLayerCache {
  AttnCache attn;
  NormCache norm1;
  FfnCache ffn;
  NormCache norm2;
};

struct EncoderResult {
  Tensor tokens;
  AttentionTrace trace;
};

// Post-norm transformer over the channel axis, depth times: self-attention
// -> residual -> norm -> position-wise feed-forward -> residual -> norm.
// x_cw (B x C x L) feeds window-conditioned norm layers and may be null
// otherwise. caches may be null when no backward pass follows.
EncoderResult channel_attention_encoder(
    const Tensor& z, const BackboneConfig& cfg,
    const std::vector<EncoderLayerParams>& layers, const Tensor* x_cw,
    std::vector<EncoderLayerCache>* caches);

// Channel-independent stack, depth times: feed-forward -> residual -> norm.
// No cross-channel mixing happens anywhere in this path.
Tensor residual_mlp_encoder(const Tensor& z, const BackboneConfig& cfg,
                            const std::vector<EncoderLayerParams>& layers,
                            const Tensor* x_cw,
                            std::vector<EncoderLayerCache>* caches);

// Shared linear head D -> H applied per channel; output is B x H x C.
ForecastBatch project_forecast(const Tensor& z, const Tensor& w,
                               const Tensor& b);

// --- Full forward/backward ---

struct ForwardCache {
  Tensor x_cw;               // B x C x L as the network consumed it
  Tensor io_mean, io_sigma;  // B x C instance statistics (instance_norm_io)
  Tensor tokens;             // embedding output plus identifier
  std::vector<EncoderLayerCache> layers;
  Tensor encoded;            // encoder output, B x C x D
  AttentionTrace trace;      // channel_attention only
};

// cache may be null for inference-only calls.
ForecastBatch forward_forecast(const SeriesBatch& x, const Model& model,
                               ForwardCache* cache);

struct EncoderLayerGrads {
  Tensor wq, bq, wk, wv, bv, wo, bo;
  Tensor w1, b1, w2, b2;
  NormGrads norm1;
  NormGrads norm2;
};

struct ModelGrads {
  Tensor embed_w, embed_b;
  Tensor ident_bank;
  std::vector<EncoderLayerGrads> layers;
  Tensor proj_w, proj_b;
};

ModelGrads zero_model_grads(const Model& model);

// Exact reverse-mode gradients for every trainable bank, accumulated into
// grads. grad_pred is dL/d(prediction), B x H x C, in output units (after
// the optional de-standardization).
void model_backward(const Model& model, const ForwardCache& cache,
                    const Tensor& grad_pred, ModelGrads& grads);

// Trainable banks with stable dotted names ("layer0.norm1.alpha", ...).
// The fixed_constant identifier bank is frozen and not listed. Grad banks
// mirror the same order and names.
std::vector<BankRef> model_banks(Model& model);
std::vector<BankRef> model_grad_banks(const Model& model, ModelGrads& grads);

// Checkpoint layout: a length-prefixed canonical key=value config record,
// then each encoder layer's norm containers, then the backbone banks as
// shape-prefixed f64 arrays. Everything needed to rebuild the model is in
// the record; unknown keys are rejected.
void save_model(std::ostream& os, const Model& model);
Model load_model(std::istream& is);

}  // namespace chanorm
