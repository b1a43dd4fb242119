#include "chanorm/backbones.hpp"

#include <cmath>
#include <cstdio>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "chanorm/binio.hpp"
#include "chanorm/linalg.hpp"

namespace chanorm {

namespace {

const std::string kCheckpoint = "model checkpoint";

void require_tokens(const Tensor& t, const char* what) {
  if (t.ndim() != 3)
    throw std::invalid_argument(std::string(what) +
                                ": expects a B x C x D token batch, got " +
                                t.shape_str());
}

// x (B x C x P) through a shared P -> Q linear map; b may be null for a
// bias-free projection.
Tensor linear_tokens(const Tensor& x, const Tensor& w, const Tensor* b,
                     const char* what) {
  require_tokens(x, what);
  const std::size_t p = x.shape[2];
  if (w.ndim() != 2 || w.shape[0] != p)
    throw std::invalid_argument(std::string(what) + ": weight shape " +
                                w.shape_str() + " does not accept width-" +
                                std::to_string(p) + " inputs");
  const std::size_t q = w.shape[1];
  if (b && (b->ndim() != 1 || b->shape[0] != q))
    throw std::invalid_argument(std::string(what) + ": bias shape " +
                                b->shape_str() +
                                " does not match output width " +
                                std::to_string(q));
  Tensor flat = x;
  flat.shape = {x.shape[0] * x.shape[1], p};
  Tensor out = matmul(flat, w);
  if (b) {
    const std::size_t rows = flat.shape[0];
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < q; ++j) out.data[r * q + j] += (*b)(j);
  }
  out.shape = {x.shape[0], x.shape[1], q};
  return out;
}

Tensor linear_tokens(const Tensor& x, const Tensor& w, const Tensor& b,
                     const char* what) {
  return linear_tokens(x, w, &b, what);
}

// Reverse of linear_tokens: accumulates into gw, into *gb when the map has a
// bias, and into *gx when the caller wants input gradients.
void linear_tokens_backward(const Tensor& x, const Tensor& w, const Tensor& g,
                            Tensor* gx, Tensor& gw, Tensor* gb) {
  const std::size_t rows = x.shape[0] * x.shape[1];
  const std::size_t p = w.shape[0];
  const std::size_t q = w.shape[1];
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < p; ++i) {
      const double xv = x.data[r * p + i];
      double acc = 0.0;
      for (std::size_t j = 0; j < q; ++j) {
        const double gv = g.data[r * q + j];
        gw.data[i * q + j] += xv * gv;
        acc += w.data[i * q + j] * gv;
      }
      if (gx) gx->data[r * p + i] += acc;
    }
    if (gb)
      for (std::size_t j = 0; j < q; ++j) gb->data[j] += g.data[r * q + j];
  }
}

void linear_tokens_backward(const Tensor& x, const Tensor& w, const Tensor& g,
                            Tensor* gx, Tensor& gw, Tensor& gb) {
  linear_tokens_backward(x, w, g, gx, gw, &gb);
}

Tensor add_tensors(const Tensor& a, const Tensor& b) {
  Tensor out = a;
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += b.data[i];
  return out;
}

// Scaled dot-product self-attention over the channel axis with heads laid
// out as contiguous slices of the feature axis.
Tensor attention_forward(const Tensor& z, const EncoderLayerParams& p,
                         std::size_t heads, AttnCache* cache, Tensor* trace) {
  const std::size_t bsz = z.shape[0], c = z.shape[1], d = z.shape[2];
  const std::size_t dh = d / heads;
  Tensor q = linear_tokens(z, p.wq, p.bq, "attention");
  Tensor k = linear_tokens(z, p.wk, nullptr, "attention");
  Tensor v = linear_tokens(z, p.wv, p.bv, "attention");
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor scores({bsz, heads, c, c});
  for (std::size_t b = 0; b < bsz; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < c; ++i)
        for (std::size_t j = 0; j < c; ++j) {
          double dot = 0.0;
          for (std::size_t e = 0; e < dh; ++e)
            dot += q(b, i, h * dh + e) * k(b, j, h * dh + e);
          scores(b, h, i, j) = dot * scale;
        }
  Tensor attn = softmax_last_axis(scores, 1.0);
  Tensor ctx = Tensor::zeros({bsz, c, d});
  for (std::size_t b = 0; b < bsz; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < c; ++i)
        for (std::size_t j = 0; j < c; ++j) {
          const double a = attn(b, h, i, j);
          for (std::size_t e = 0; e < dh; ++e)
            ctx(b, i, h * dh + e) += a * v(b, j, h * dh + e);
        }
  Tensor out = linear_tokens(ctx, p.wo, p.bo, "attention");
  if (trace) *trace = attn;
  if (cache) {
    cache->in = z;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->attn = std::move(attn);
    cache->ctx = std::move(ctx);
  }
  return out;
}

void attention_backward(const EncoderLayerParams& p, std::size_t heads,
                        const AttnCache& c, const Tensor& g_out, Tensor& gz,
                        EncoderLayerGrads& g) {
  const std::size_t bsz = c.in.shape[0], cc = c.in.shape[1],
                    d = c.in.shape[2];
  const std::size_t dh = d / heads;
  Tensor g_ctx = Tensor::zeros({bsz, cc, d});
  linear_tokens_backward(c.ctx, p.wo, g_out, &g_ctx, g.wo, g.bo);
  Tensor g_attn = Tensor::zeros({bsz, heads, cc, cc});
  Tensor g_v = Tensor::zeros({bsz, cc, d});
  for (std::size_t b = 0; b < bsz; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < cc; ++i)
        for (std::size_t j = 0; j < cc; ++j) {
          double dot = 0.0;
          const double a = c.attn(b, h, i, j);
          for (std::size_t e = 0; e < dh; ++e) {
            const double gc = g_ctx(b, i, h * dh + e);
            dot += gc * c.v(b, j, h * dh + e);
            g_v(b, j, h * dh + e) += a * gc;
          }
          g_attn(b, h, i, j) = dot;
        }
  Tensor g_scores = softmax_last_axis_backward(c.attn, g_attn, 1.0);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor g_q = Tensor::zeros({bsz, cc, d});
  Tensor g_k = Tensor::zeros({bsz, cc, d});
  for (std::size_t b = 0; b < bsz; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < cc; ++i)
        for (std::size_t j = 0; j < cc; ++j) {
          const double gs = g_scores(b, h, i, j) * scale;
          for (std::size_t e = 0; e < dh; ++e) {
            g_q(b, i, h * dh + e) += gs * c.k(b, j, h * dh + e);
            g_k(b, j, h * dh + e) += gs * c.q(b, i, h * dh + e);
          }
        }
  linear_tokens_backward(c.in, p.wq, g_q, &gz, g.wq, g.bq);
  linear_tokens_backward(c.in, p.wk, g_k, &gz, g.wk, nullptr);
  linear_tokens_backward(c.in, p.wv, g_v, &gz, g.wv, g.bv);
}

// Position-wise two-layer feed-forward with ReLU, applied per token.
Tensor ffn_forward(const Tensor& z, const EncoderLayerParams& p,
                   FfnCache* cache) {
  Tensor act = linear_tokens(z, p.w1, p.b1, "feed-forward");
  for (double& v : act.data) v = v > 0.0 ? v : 0.0;
  Tensor out = linear_tokens(act, p.w2, p.b2, "feed-forward");
  if (cache) {
    cache->in = z;
    cache->act1 = std::move(act);
  }
  return out;
}

void ffn_backward(const EncoderLayerParams& p, const FfnCache& c,
                  const Tensor& g_out, Tensor& gz, EncoderLayerGrads& g) {
  Tensor g_act = Tensor::zeros(c.act1.shape);
  linear_tokens_backward(c.act1, p.w2, g_out, &g_act, g.w2, g.b2);
  for (std::size_t i = 0; i < g_act.numel(); ++i)
    if (c.act1.data[i] <= 0.0) g_act.data[i] = 0.0;
  linear_tokens_backward(c.in, p.w1, g_act, &gz, g.w1, g.b1);
}

void check_encoder_config(const Tensor& z, const BackboneConfig& cfg,
                          const std::vector<EncoderLayerParams>& layers,
                          const char* what) {
  require_tokens(z, what);
  if (layers.empty())
    throw std::invalid_argument(std::string(what) +
                                ": depth must be at least 1");
  if (layers.size() != cfg.depth)
    throw std::invalid_argument(std::string(what) + ": got " +
                                std::to_string(layers.size()) +
                                " layer parameter sets for depth " +
                                std::to_string(cfg.depth));
  if (z.shape[2] != cfg.d_model)
    throw std::invalid_argument(std::string(what) + ": token width " +
                                std::to_string(z.shape[2]) +
                                " does not match d_model " +
                                std::to_string(cfg.d_model));
}

std::string double_text(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Canonical key=value record: keys in sorted order, one per line.
std::string config_record(const Model& m) {
  std::string out;
  out += "channels=" + std::to_string(m.channels) + "\n";
  out += "d_model=" + std::to_string(m.cfg.d_model) + "\n";
  out += "depth=" + std::to_string(m.cfg.depth) + "\n";
  out += "heads=" + std::to_string(m.cfg.heads) + "\n";
  out += "horizon=" + std::to_string(m.horizon) + "\n";
  out += "identifier_mode=" + identifier_mode_name(m.cfg.identifier_mode) + "\n";
  out += std::string("instance_norm_io=") + (m.cfg.instance_norm_io ? "1" : "0") + "\n";
  out += "kind=" + backbone_kind_name(m.cfg.kind) + "\n";
  out += "lookback=" + std::to_string(m.lookback) + "\n";
  out += "norm_kind=" + norm_kind_name(m.cfg.norm_kind) + "\n";
  out += "prototypes=" + std::to_string(m.cfg.prototypes) + "\n";
  out += "sim_metric=" + sim_metric_name(m.cfg.sim_metric) + "\n";
  out += "sim_space=" + sim_space_name(m.cfg.sim_space) + "\n";
  out += "tau=" + double_text(m.cfg.tau) + "\n";
  return out;
}

std::size_t parse_size(const std::string& v, const std::string& key) {
  try {
    std::size_t used = 0;
    const unsigned long long n = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return static_cast<std::size_t>(n);
  } catch (const std::exception&) {
    throw std::runtime_error(kCheckpoint + ": config key '" + key +
                             "' needs an unsigned integer, got '" + v + "'");
  }
}

double parse_double(const std::string& v, const std::string& key) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw std::runtime_error(kCheckpoint + ": config key '" + key +
                             "' needs a number, got '" + v + "'");
  }
}

bool parse_flag(const std::string& v, const std::string& key) {
  if (v == "1") return true;
  if (v == "0") return false;
  throw std::runtime_error(kCheckpoint + ": config key '" + key +
                           "' needs 0 or 1, got '" + v + "'");
}

// Non-norm banks in checkpoint order. Unlike model_banks this includes a
// frozen identifier bank — a checkpoint restores frozen weights too.
std::vector<BankRef> checkpoint_banks(Model& m) {
  std::vector<BankRef> banks;
  banks.push_back({"embed_w", &m.embed_w});
  banks.push_back({"embed_b", &m.embed_b});
  if (m.cfg.identifier_mode != IdentifierMode::none)
    banks.push_back({"identifier", &m.ident_bank});
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    const std::string prefix = "layer" + std::to_string(l) + ".";
    EncoderLayerParams& lp = m.layers[l];
    if (m.cfg.kind == BackboneKind::channel_attention) {
      banks.push_back({prefix + "wq", &lp.wq});
      banks.push_back({prefix + "bq", &lp.bq});
      banks.push_back({prefix + "wk", &lp.wk});
      banks.push_back({prefix + "wv", &lp.wv});
      banks.push_back({prefix + "bv", &lp.bv});
      banks.push_back({prefix + "wo", &lp.wo});
      banks.push_back({prefix + "bo", &lp.bo});
    }
    banks.push_back({prefix + "w1", &lp.w1});
    banks.push_back({prefix + "b1", &lp.b1});
    banks.push_back({prefix + "w2", &lp.w2});
    banks.push_back({prefix + "b2", &lp.b2});
  }
  banks.push_back({"proj_w", &m.proj_w});
  banks.push_back({"proj_b", &m.proj_b});
  return banks;
}

}  // namespace

std::string backbone_kind_name(BackboneKind k) {
  switch (k) {
    case BackboneKind::channel_attention: return "channel_attention";
    case BackboneKind::residual_mlp: return "residual_mlp";
    case BackboneKind::linear: return "linear";
  }
  throw std::invalid_argument("backbone_kind_name: bad enum value");
}

BackboneKind backbone_kind_from_name(const std::string& s) {
  if (s == "channel_attention") return BackboneKind::channel_attention;
  if (s == "residual_mlp") return BackboneKind::residual_mlp;
  if (s == "linear") return BackboneKind::linear;
  throw std::invalid_argument(
      "unknown backbone kind '" + s +
      "' (expected channel_attention|residual_mlp|linear)");
}

std::string identifier_mode_name(IdentifierMode m) {
  switch (m) {
    case IdentifierMode::none: return "none";
    case IdentifierMode::learnable: return "learnable";
    case IdentifierMode::fixed_constant: return "fixed_constant";
  }
  throw std::invalid_argument("identifier_mode_name: bad enum value");
}

IdentifierMode identifier_mode_from_name(const std::string& s) {
  if (s == "none") return IdentifierMode::none;
  if (s == "learnable") return IdentifierMode::learnable;
  if (s == "fixed_constant") return IdentifierMode::fixed_constant;
  throw std::invalid_argument("unknown identifier mode '" + s +
                              "' (expected none|learnable|fixed_constant)");
}

Model make_model(const BackboneConfig& cfg, std::size_t lookback,
                 std::size_t horizon, std::size_t channels, RngState& rng) {
  if (lookback == 0 || horizon == 0 || channels == 0)
    throw std::invalid_argument("make_model: lookback, horizon, and channels must be positive");
  if (cfg.d_model == 0)
    throw std::invalid_argument("make_model: d_model must be positive");
  if (cfg.kind != BackboneKind::linear && cfg.depth == 0)
    throw std::invalid_argument("make_model: depth must be at least 1");
  if (cfg.kind == BackboneKind::channel_attention &&
      (cfg.heads == 0 || cfg.d_model % cfg.heads != 0))
    throw std::invalid_argument("make_model: heads must divide d_model (got " +
                                std::to_string(cfg.heads) + " and " +
                                std::to_string(cfg.d_model) + ")");
  if (cfg.norm_kind == NormKind::pcn && cfg.prototypes == 0)
    throw std::invalid_argument("make_model: prototype normalization needs at least one prototype");

  Model m;
  m.cfg = cfg;
  m.lookback = lookback;
  m.horizon = horizon;
  m.channels = channels;
  const std::size_t d = cfg.d_model;
  const double embed_scale = 1.0 / std::sqrt(static_cast<double>(lookback));
  const double model_scale = 1.0 / std::sqrt(static_cast<double>(d));
  const double hidden_scale = 1.0 / std::sqrt(static_cast<double>(2 * d));

  RngState r_embed = rng.split("embed_w");
  m.embed_w = r_embed.normal_tensor({lookback, d}, embed_scale);
  m.embed_b = Tensor::zeros({d});
  if (cfg.identifier_mode == IdentifierMode::learnable) {
    m.ident_bank = Tensor::zeros({channels, d});
  } else if (cfg.identifier_mode == IdentifierMode::fixed_constant) {
    RngState r_ident = rng.split("identifier");
    m.ident_bank = r_ident.normal_tensor({channels, d}, 1.0);
  }

  if (cfg.kind != BackboneKind::linear) {
    m.layers.resize(cfg.depth);
    for (std::size_t l = 0; l < cfg.depth; ++l) {
      const std::string prefix = "layer" + std::to_string(l) + ".";
      EncoderLayerParams& lp = m.layers[l];
      if (cfg.kind == BackboneKind::channel_attention) {
        RngState rq = rng.split(prefix + "wq");
        RngState rk = rng.split(prefix + "wk");
        RngState rv = rng.split(prefix + "wv");
        RngState ro = rng.split(prefix + "wo");
        lp.wq = rq.normal_tensor({d, d}, model_scale);
        lp.bq = Tensor::zeros({d});
        lp.wk = rk.normal_tensor({d, d}, model_scale);
        lp.wv = rv.normal_tensor({d, d}, model_scale);
        lp.bv = Tensor::zeros({d});
        lp.wo = ro.normal_tensor({d, d}, model_scale);
        lp.bo = Tensor::zeros({d});
      }
      RngState r1 = rng.split(prefix + "w1");
      RngState r2 = rng.split(prefix + "w2");
      lp.w1 = r1.normal_tensor({d, 2 * d}, model_scale);
      lp.b1 = Tensor::zeros({2 * d});
      lp.w2 = r2.normal_tensor({2 * d, d}, hidden_scale);
      lp.b2 = Tensor::zeros({d});
      RngState rn1 = rng.split(prefix + "norm1");
      lp.norm1 = make_norm_layer(cfg.norm_kind, channels, d, lookback,
                                 cfg.prototypes, cfg.tau, cfg.sim_metric,
                                 cfg.sim_space, rn1);
      if (cfg.kind == BackboneKind::channel_attention) {
        RngState rn2 = rng.split(prefix + "norm2");
        lp.norm2 = make_norm_layer(cfg.norm_kind, channels, d, lookback,
                                   cfg.prototypes, cfg.tau, cfg.sim_metric,
                                   cfg.sim_space, rn2);
      }
    }
  }

  RngState r_proj = rng.split("proj_w");
  m.proj_w = r_proj.normal_tensor({d, horizon}, model_scale);
  m.proj_b = Tensor::zeros({horizon});
  return m;
}

bool channel_count_locked(const Model& model) {
  if (model.cfg.identifier_mode != IdentifierMode::none) return true;
  if (model.cfg.kind == BackboneKind::linear) return false;
  switch (model.cfg.norm_kind) {
    case NormKind::cn:
    case NormKind::acn:
      return true;
    case NormKind::none:
    case NormKind::ln:
    case NormKind::in:
    case NormKind::pcn:
      return false;
  }
  throw std::invalid_argument("channel_count_locked: bad norm kind");
}

Tensor embed_channels(const SeriesBatch& x, const Tensor& w, const Tensor& b) {
  if (x.values.ndim() != 3)
    throw std::invalid_argument("embed_channels: expected B x L x C values, got " +
                                x.values.shape_str());
  if (w.ndim() != 2 || w.shape[0] != x.values.shape[1])
    throw std::invalid_argument(
        "embed_channels: weight expects windows of length " +
        std::to_string(w.ndim() == 2 ? w.shape[0] : 0) + ", got " +
        std::to_string(x.values.shape[1]));
  return linear_tokens(channel_windows(x), w, b, "embed_channels");
}

Tensor add_channel_identifier(const Tensor& z, const Tensor& bank) {
  require_tokens(z, "add_channel_identifier");
  if (bank.ndim() != 2 || bank.shape[0] != z.shape[1] ||
      bank.shape[1] != z.shape[2])
    throw std::invalid_argument("add_channel_identifier: bank shape " +
                                bank.shape_str() + " does not match tokens " +
                                z.shape_str());
  Tensor out = z;
  const std::size_t bsz = z.shape[0], c = z.shape[1], d = z.shape[2];
  for (std::size_t b = 0; b < bsz; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t j = 0; j < d; ++j) out(b, ch, j) += bank(ch, j);
  return out;
}

EncoderResult channel_attention_encoder(
    const Tensor& z, const BackboneConfig& cfg,
    const std::vector<EncoderLayerParams>& layers, const Tensor* x_cw,
    std::vector<EncoderLayerCache>* caches) {
  check_encoder_config(z, cfg, layers, "channel_attention_encoder");
  if (cfg.heads == 0 || cfg.d_model % cfg.heads != 0)
    throw std::invalid_argument(
        "channel_attention_encoder: heads must divide d_model");
  if (caches) caches->assign(layers.size(), EncoderLayerCache{});
  EncoderResult result;
  Tensor cur = z;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const EncoderLayerParams& lp = layers[l];
    EncoderLayerCache* lc = caches ? &(*caches)[l] : nullptr;
    Tensor trace;
    Tensor attn_out =
        attention_forward(cur, lp, cfg.heads, lc ? &lc->attn : nullptr, &trace);
    Tensor res1 = add_tensors(cur, attn_out);
    Tensor n1 = norm_forward(res1, lp.norm1, x_cw, kDefaultEpsNorm,
                             lc ? &lc->norm1 : nullptr);
    Tensor ffn_out = ffn_forward(n1, lp, lc ? &lc->ffn : nullptr);
    Tensor res2 = add_tensors(n1, ffn_out);
    cur = norm_forward(res2, lp.norm2, x_cw, kDefaultEpsNorm,
                       lc ? &lc->norm2 : nullptr);
    result.trace.weights.push_back(std::move(trace));
  }
  result.tokens = std::move(cur);
  return result;
}

Tensor residual_mlp_encoder(const Tensor& z, const BackboneConfig& cfg,
                            const std::vector<EncoderLayerParams>& layers,
                            const Tensor* x_cw,
                            std::vector<EncoderLayerCache>* caches) {
  check_encoder_config(z, cfg, layers, "residual_mlp_encoder");
  if (caches) caches->assign(layers.size(), EncoderLayerCache{});
  Tensor cur = z;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const EncoderLayerParams& lp = layers[l];
    EncoderLayerCache* lc = caches ? &(*caches)[l] : nullptr;
    Tensor ffn_out = ffn_forward(cur, lp, lc ? &lc->ffn : nullptr);
    Tensor res = add_tensors(cur, ffn_out);
    cur = norm_forward(res, lp.norm1, x_cw, kDefaultEpsNorm,
                       lc ? &lc->norm1 : nullptr);
  }
  return cur;
}

ForecastBatch project_forecast(const Tensor& z, const Tensor& w,
                               const Tensor& b) {
  Tensor per = linear_tokens(z, w, b, "project_forecast");  // B x C x H
  const std::size_t bsz = per.shape[0], c = per.shape[1], h = per.shape[2];
  Tensor out({bsz, h, c});
  for (std::size_t bi = 0; bi < bsz; ++bi)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t t = 0; t < h; ++t) out(bi, t, ch) = per(bi, ch, t);
  ForecastBatch fc;
  fc.values = std::move(out);
  fc.horizon = h;
  return fc;
}

ForecastBatch forward_forecast(const SeriesBatch& x, const Model& model,
                               ForwardCache* cache) {
  if (cache) *cache = ForwardCache{};
  if (x.values.ndim() != 3)
    throw std::invalid_argument("forward_forecast: expected B x L x C input, got " +
                                x.values.shape_str());
  const std::size_t bsz = x.values.shape[0];
  const std::size_t l = x.values.shape[1];
  const std::size_t c = x.values.shape[2];
  if (l != model.lookback)
    throw std::invalid_argument("forward_forecast: input lookback " +
                                std::to_string(l) + " != model lookback " +
                                std::to_string(model.lookback));
  if (c != model.channels && channel_count_locked(model))
    throw std::invalid_argument("forward_forecast: model banks are bound to " +
                                std::to_string(model.channels) +
                                " channels, got " + std::to_string(c));
  if (!x.values.all_finite())
    throw std::invalid_argument("forward_forecast: input contains non-finite values");

  Tensor xw = channel_windows(x);
  Tensor mean, sigma;
  if (model.cfg.instance_norm_io) {
    mean = Tensor({bsz, c});
    sigma = Tensor({bsz, c});
    for (std::size_t b = 0; b < bsz; ++b)
      for (std::size_t ch = 0; ch < c; ++ch) {
        double mu = 0.0;
        for (std::size_t t = 0; t < l; ++t) mu += xw(b, ch, t);
        mu /= static_cast<double>(l);
        double var = 0.0;
        for (std::size_t t = 0; t < l; ++t) {
          const double dv = xw(b, ch, t) - mu;
          var += dv * dv;
        }
        var /= static_cast<double>(l);
        const double s = std::sqrt(var + kInstanceNormEps);
        mean(b, ch) = mu;
        sigma(b, ch) = s;
        for (std::size_t t = 0; t < l; ++t)
          xw(b, ch, t) = (xw(b, ch, t) - mu) / s;
      }
  }

  Tensor tokens = linear_tokens(xw, model.embed_w, model.embed_b, "embed_channels");
  if (model.cfg.identifier_mode != IdentifierMode::none)
    tokens = add_channel_identifier(tokens, model.ident_bank);

  EncoderResult enc;
  std::vector<EncoderLayerCache>* lc = cache ? &cache->layers : nullptr;
  switch (model.cfg.kind) {
    case BackboneKind::channel_attention:
      enc = channel_attention_encoder(tokens, model.cfg, model.layers, &xw, lc);
      break;
    case BackboneKind::residual_mlp:
      enc.tokens = residual_mlp_encoder(tokens, model.cfg, model.layers, &xw, lc);
      break;
    case BackboneKind::linear:
      enc.tokens = tokens;
      break;
  }

  ForecastBatch fc = project_forecast(enc.tokens, model.proj_w, model.proj_b);
  if (model.cfg.instance_norm_io) {
    const std::size_t h = fc.values.shape[1];
    for (std::size_t b = 0; b < bsz; ++b)
      for (std::size_t t = 0; t < h; ++t)
        for (std::size_t ch = 0; ch < c; ++ch)
          fc.values(b, t, ch) = fc.values(b, t, ch) * sigma(b, ch) + mean(b, ch);
  }

  if (cache) {
    cache->x_cw = std::move(xw);
    cache->io_mean = std::move(mean);
    cache->io_sigma = std::move(sigma);
    cache->tokens = std::move(tokens);
    cache->encoded = std::move(enc.tokens);
    cache->trace = std::move(enc.trace);
  }
  return fc;
}

ModelGrads zero_model_grads(const Model& model) {
  ModelGrads g;
  g.embed_w = Tensor(model.embed_w.shape);
  g.embed_b = Tensor(model.embed_b.shape);
  if (model.ident_bank.numel() > 0) g.ident_bank = Tensor(model.ident_bank.shape);
  g.layers.resize(model.layers.size());
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const EncoderLayerParams& lp = model.layers[l];
    EncoderLayerGrads& lg = g.layers[l];
    if (model.cfg.kind == BackboneKind::channel_attention) {
      lg.wq = Tensor(lp.wq.shape);
      lg.bq = Tensor(lp.bq.shape);
      lg.wk = Tensor(lp.wk.shape);
      lg.wv = Tensor(lp.wv.shape);
      lg.bv = Tensor(lp.bv.shape);
      lg.wo = Tensor(lp.wo.shape);
      lg.bo = Tensor(lp.bo.shape);
    }
    lg.w1 = Tensor(lp.w1.shape);
    lg.b1 = Tensor(lp.b1.shape);
    lg.w2 = Tensor(lp.w2.shape);
    lg.b2 = Tensor(lp.b2.shape);
    lg.norm1 = zero_norm_grads(lp.norm1);
    lg.norm2 = zero_norm_grads(lp.norm2);
  }
  g.proj_w = Tensor(model.proj_w.shape);
  g.proj_b = Tensor(model.proj_b.shape);
  return g;
}

void model_backward(const Model& model, const ForwardCache& cache,
                    const Tensor& grad_pred, ModelGrads& grads) {
  if (grad_pred.ndim() != 3)
    throw std::invalid_argument("model_backward: gradient must be B x H x C, got " +
                                grad_pred.shape_str());
  if (cache.encoded.ndim() != 3 || cache.layers.size() != model.layers.size())
    throw std::logic_error(
        "model_backward: forward cache is missing; run forward_forecast with a cache first");
  const std::size_t bsz = grad_pred.shape[0];
  const std::size_t h = grad_pred.shape[1];
  const std::size_t c = grad_pred.shape[2];
  if (h != model.horizon || bsz != cache.encoded.shape[0] ||
      c != cache.encoded.shape[1])
    throw std::invalid_argument("model_backward: gradient shape " +
                                grad_pred.shape_str() +
                                " does not match the cached forward pass");

  // Through the optional de-standardization (prediction = raw * sigma + mean,
  // statistics constant in the parameters), transposed to the B x C x H
  // projection layout.
  Tensor g_fore({bsz, c, h});
  for (std::size_t b = 0; b < bsz; ++b)
    for (std::size_t t = 0; t < h; ++t)
      for (std::size_t ch = 0; ch < c; ++ch) {
        double gv = grad_pred(b, t, ch);
        if (model.cfg.instance_norm_io) gv *= cache.io_sigma(b, ch);
        g_fore(b, ch, t) = gv;
      }

  Tensor g = Tensor::zeros(cache.encoded.shape);
  linear_tokens_backward(cache.encoded, model.proj_w, g_fore, &g,
                         grads.proj_w, grads.proj_b);

  for (std::size_t li = model.layers.size(); li-- > 0;) {
    const EncoderLayerParams& lp = model.layers[li];
    const EncoderLayerCache& lc = cache.layers[li];
    EncoderLayerGrads& lg = grads.layers[li];
    if (model.cfg.kind == BackboneKind::channel_attention) {
      Tensor g_res2 = norm_backward(lp.norm2, lc.norm2, g, lg.norm2);
      Tensor g_n1 = g_res2;
      ffn_backward(lp, lc.ffn, g_res2, g_n1, lg);
      Tensor g_res1 = norm_backward(lp.norm1, lc.norm1, g_n1, lg.norm1);
      Tensor g_in = g_res1;
      attention_backward(lp, model.cfg.heads, lc.attn, g_res1, g_in, lg);
      g = std::move(g_in);
    } else {
      Tensor g_res = norm_backward(lp.norm1, lc.norm1, g, lg.norm1);
      Tensor g_in = g_res;
      ffn_backward(lp, lc.ffn, g_res, g_in, lg);
      g = std::move(g_in);
    }
  }

  if (model.cfg.identifier_mode == IdentifierMode::learnable) {
    const std::size_t d = model.cfg.d_model;
    for (std::size_t b = 0; b < bsz; ++b)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t j = 0; j < d; ++j)
          grads.ident_bank(ch, j) += g(b, ch, j);
  }
  linear_tokens_backward(cache.x_cw, model.embed_w, g, nullptr,
                         grads.embed_w, grads.embed_b);
}

std::vector<BankRef> model_banks(Model& model) {
  std::vector<BankRef> banks;
  banks.push_back({"embed_w", &model.embed_w});
  banks.push_back({"embed_b", &model.embed_b});
  if (model.cfg.identifier_mode == IdentifierMode::learnable)
    banks.push_back({"identifier", &model.ident_bank});
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const std::string prefix = "layer" + std::to_string(l) + ".";
    EncoderLayerParams& lp = model.layers[l];
    if (model.cfg.kind == BackboneKind::channel_attention) {
      banks.push_back({prefix + "wq", &lp.wq});
      banks.push_back({prefix + "bq", &lp.bq});
      banks.push_back({prefix + "wk", &lp.wk});
      banks.push_back({prefix + "wv", &lp.wv});
      banks.push_back({prefix + "bv", &lp.bv});
      banks.push_back({prefix + "wo", &lp.wo});
      banks.push_back({prefix + "bo", &lp.bo});
    }
    banks.push_back({prefix + "w1", &lp.w1});
    banks.push_back({prefix + "b1", &lp.b1});
    banks.push_back({prefix + "w2", &lp.w2});
    banks.push_back({prefix + "b2", &lp.b2});
    for (const BankRef& r : norm_banks(lp.norm1))
      banks.push_back({prefix + "norm1." + r.name, r.tensor});
    if (model.cfg.kind == BackboneKind::channel_attention)
      for (const BankRef& r : norm_banks(lp.norm2))
        banks.push_back({prefix + "norm2." + r.name, r.tensor});
  }
  banks.push_back({"proj_w", &model.proj_w});
  banks.push_back({"proj_b", &model.proj_b});
  return banks;
}

std::vector<BankRef> model_grad_banks(const Model& model, ModelGrads& grads) {
  std::vector<BankRef> banks;
  banks.push_back({"embed_w", &grads.embed_w});
  banks.push_back({"embed_b", &grads.embed_b});
  if (model.cfg.identifier_mode == IdentifierMode::learnable)
    banks.push_back({"identifier", &grads.ident_bank});
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const std::string prefix = "layer" + std::to_string(l) + ".";
    EncoderLayerGrads& lg = grads.layers[l];
    if (model.cfg.kind == BackboneKind::channel_attention) {
      banks.push_back({prefix + "wq", &lg.wq});
      banks.push_back({prefix + "bq", &lg.bq});
      banks.push_back({prefix + "wk", &lg.wk});
      banks.push_back({prefix + "wv", &lg.wv});
      banks.push_back({prefix + "bv", &lg.bv});
      banks.push_back({prefix + "wo", &lg.wo});
      banks.push_back({prefix + "bo", &lg.bo});
    }
    banks.push_back({prefix + "w1", &lg.w1});
    banks.push_back({prefix + "b1", &lg.b1});
    banks.push_back({prefix + "w2", &lg.w2});
    banks.push_back({prefix + "b2", &lg.b2});
    for (const BankRef& r : norm_grad_banks(model.layers[l].norm1, lg.norm1))
      banks.push_back({prefix + "norm1." + r.name, r.tensor});
    if (model.cfg.kind == BackboneKind::channel_attention)
      for (const BankRef& r : norm_grad_banks(model.layers[l].norm2, lg.norm2))
        banks.push_back({prefix + "norm2." + r.name, r.tensor});
  }
  banks.push_back({"proj_w", &grads.proj_w});
  banks.push_back({"proj_b", &grads.proj_b});
  return banks;
}

void save_model(std::ostream& os, const Model& model) {
  const std::string record = config_record(model);
  write_u32(os, static_cast<std::uint32_t>(record.size()));
  os.write(record.data(), static_cast<std::streamsize>(record.size()));
  for (const EncoderLayerParams& lp : model.layers) {
    save_norm_layer(os, lp.norm1);
    if (model.cfg.kind == BackboneKind::channel_attention)
      save_norm_layer(os, lp.norm2);
  }
  // Read-only traversal; checkpoint_banks needs mutable refs for the loader.
  Model& m = const_cast<Model&>(model);
  for (const BankRef& r : checkpoint_banks(m)) {
    write_u32(os, static_cast<std::uint32_t>(r.tensor->ndim()));
    for (std::size_t dim : r.tensor->shape)
      write_u32(os, static_cast<std::uint32_t>(dim));
    write_values(os, *r.tensor);
  }
}

Model load_model(std::istream& is) {
  const std::uint32_t record_len = read_u32(is, kCheckpoint);
  std::string text(record_len, '\0');
  if (record_len > 0 &&
      !is.read(text.data(), static_cast<std::streamsize>(record_len)))
    throw std::runtime_error(kCheckpoint + ": truncated stream");

  BackboneConfig cfg;
  std::size_t lookback = 0, horizon = 0, channels = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    const std::string line = text.substr(pos, end - pos);
    pos = end + 1;
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error(kCheckpoint + ": malformed config line '" +
                               line + "'");
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    if (key == "channels") channels = parse_size(value, key);
    else if (key == "d_model") cfg.d_model = parse_size(value, key);
    else if (key == "depth") cfg.depth = parse_size(value, key);
    else if (key == "heads") cfg.heads = parse_size(value, key);
    else if (key == "horizon") horizon = parse_size(value, key);
    else if (key == "identifier_mode") cfg.identifier_mode = identifier_mode_from_name(value);
    else if (key == "instance_norm_io") cfg.instance_norm_io = parse_flag(value, key);
    else if (key == "kind") cfg.kind = backbone_kind_from_name(value);
    else if (key == "lookback") lookback = parse_size(value, key);
    else if (key == "norm_kind") cfg.norm_kind = norm_kind_from_name(value);
    else if (key == "prototypes") cfg.prototypes = parse_size(value, key);
    else if (key == "sim_metric") cfg.sim_metric = sim_metric_from_name(value);
    else if (key == "sim_space") cfg.sim_space = sim_space_from_name(value);
    else if (key == "tau") cfg.tau = parse_double(value, key);
    else
      throw std::runtime_error(kCheckpoint + ": unknown config key '" + key +
                               "'");
  }
  if (lookback == 0 || horizon == 0 || channels == 0)
    throw std::runtime_error(kCheckpoint + ": config record is missing geometry");

  RngState scratch(0);
  Model m = make_model(cfg, lookback, horizon, channels, scratch);
  for (EncoderLayerParams& lp : m.layers) {
    lp.norm1 = load_norm_layer(is, cfg.sim_metric, cfg.sim_space);
    if (lp.norm1.kind != cfg.norm_kind)
      throw std::runtime_error(
          kCheckpoint + ": norm container does not match the config record");
    if (cfg.kind == BackboneKind::channel_attention) {
      lp.norm2 = load_norm_layer(is, cfg.sim_metric, cfg.sim_space);
      if (lp.norm2.kind != cfg.norm_kind)
        throw std::runtime_error(
            kCheckpoint + ": norm container does not match the config record");
    }
  }
  for (const BankRef& r : checkpoint_banks(m)) {
    const std::uint32_t rank = read_u32(is, kCheckpoint);
    if (rank != r.tensor->ndim())
      throw std::runtime_error(kCheckpoint + ": bank " + r.name +
                               " has rank " + std::to_string(rank) +
                               ", expected " + std::to_string(r.tensor->ndim()));
    for (std::size_t i = 0; i < rank; ++i) {
      const std::uint32_t dim = read_u32(is, kCheckpoint);
      if (dim != r.tensor->shape[i])
        throw std::runtime_error(kCheckpoint + ": bank " + r.name +
                                 " dimension " + std::to_string(i) +
                                 " is " + std::to_string(dim) + ", expected " +
                                 std::to_string(r.tensor->shape[i]));
    }
    read_values(is, *r.tensor, kCheckpoint);
  }
  return m;
}

}  // namespace chanorm
