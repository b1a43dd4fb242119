#include "chanorm/training.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <limits>
#include <mutex>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace chanorm {
namespace {

constexpr std::uint64_t kProbeSeed = 0x9e3779b97f4a7c15ull;
constexpr std::size_t kSampleLimit = 256;

std::string double_text(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void require_pair(const ForecastBatch& pred, const ForecastBatch& target,
                  const char* what) {
  if (!pred.values.same_shape(target.values) ||
      pred.horizon != target.horizon)
    throw std::invalid_argument(std::string(what) + ": prediction shape " +
                                pred.values.shape_str() +
                                " does not match target shape " +
                                target.values.shape_str());
}

// Run fn(item) over [0, items) on up to `threads` workers. Items are claimed
// through an atomic counter, so any completion order is possible; callers
// must write into per-item slots and reduce in item order afterwards.
template <typename Fn>
void run_parallel(std::size_t items, std::size_t threads, Fn&& fn) {
  const std::size_t workers =
      std::min(std::max<std::size_t>(threads, 1), items);
  if (workers <= 1) {
    for (std::size_t i = 0; i < items; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error = nullptr;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&]() {
      while (true) {
        const std::size_t i = next.fetch_add(1);
        if (i >= items) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!error) error = std::current_exception();
          return;
        }
      }
    });
  }
  for (std::thread& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

// Copy window `b` of a B x P x C batch into a 1 x P x C tensor.
void slice_window(const Tensor& src, std::size_t b, Tensor& dst) {
  const std::size_t n = src.shape[1] * src.shape[2];
  std::copy(src.data.begin() + static_cast<long>(b * n),
            src.data.begin() + static_cast<long>((b + 1) * n),
            dst.data.begin());
}

void zero_grad_banks(const std::vector<BankRef>& banks) {
  for (const BankRef& r : banks) r.tensor->fill(0.0);
}

void add_grad_banks(const std::vector<BankRef>& into,
                    const std::vector<BankRef>& from) {
  for (std::size_t i = 0; i < into.size(); ++i)
    for (std::size_t j = 0; j < into[i].tensor->numel(); ++j)
      into[i].tensor->data[j] += from[i].tensor->data[j];
}

struct PassMetrics {
  double mse = 0.0;
  double mae = 0.0;
};

// Full pass over a window set: per-window means computed independently
// (possibly in parallel), then reduced in window order.
PassMetrics eval_windows(const Model& model, const WindowSet& w,
                         std::size_t threads) {
  const std::size_t count = w.inputs.values.shape[0];
  const std::size_t l = w.inputs.values.shape[1];
  const std::size_t h = w.targets.values.shape[1];
  const std::size_t c = w.inputs.values.shape[2];
  std::vector<double> se(count), ae(count);
  run_parallel(count, threads, [&](std::size_t i) {
    SeriesBatch xb{Tensor({1, l, c}), l};
    slice_window(w.inputs.values, i, xb.values);
    ForecastBatch pred = forward_forecast(xb, model, nullptr);
    double se_sum = 0.0, ae_sum = 0.0;
    const std::size_t n = h * c;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = pred.values.data[j] - w.targets.values.data[i * n + j];
      se_sum += d * d;
      ae_sum += std::abs(d);
    }
    se[i] = se_sum / static_cast<double>(n);
    ae[i] = ae_sum / static_cast<double>(n);
  });
  PassMetrics m;
  for (std::size_t i = 0; i < count; ++i) {
    m.mse += se[i];
    m.mae += ae[i];
  }
  m.mse /= static_cast<double>(count);
  m.mae /= static_cast<double>(count);
  return m;
}

void require_windows(const Model& model, const WindowSet& w,
                     const char* what) {
  if (w.inputs.values.ndim() != 3 || w.inputs.values.shape[0] == 0)
    throw std::invalid_argument(std::string(what) + ": empty window set");
  if (w.inputs.values.shape[0] != w.targets.values.shape[0])
    throw std::invalid_argument(std::string(what) +
                                ": input/target window counts differ");
  if (w.inputs.lookback != model.lookback ||
      w.targets.horizon != model.horizon)
    throw std::invalid_argument(
        std::string(what) + ": windows are L=" +
        std::to_string(w.inputs.lookback) + ", H=" +
        std::to_string(w.targets.horizon) + " but the model expects L=" +
        std::to_string(model.lookback) + ", H=" +
        std::to_string(model.horizon));
  if (w.inputs.values.shape[2] != model.channels)
    throw std::invalid_argument(
        std::string(what) + ": " + std::to_string(w.inputs.values.shape[2]) +
        " channels but the model was built for " +
        std::to_string(model.channels));
}

// Finite-difference sweep shared by both grad_check overloads. `loss` must
// re-evaluate the scalar objective at the current parameter values.
template <typename LossFn>
GradCheckReport fd_sweep(const std::vector<BankRef>& params,
                         const std::vector<BankRef>& analytic, LossFn&& loss,
                         double h_scale, double tol) {
  GradCheckReport rep;
  rep.tol = tol;
  for (std::size_t b = 0; b < params.size(); ++b) {
    Tensor& theta = *params[b].tensor;
    const Tensor& ga = *analytic[b].tensor;
    std::vector<std::size_t> coords(theta.numel());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (coords.size() > kSampleLimit) {
      RngState crng = RngState(kProbeSeed).split("fd coords")
                          .split(params[b].name);
      crng.shuffle(coords);
      coords.resize(kSampleLimit);
    }
    for (std::size_t j : coords) {
      const double save = theta.data[j];
      const double h = h_scale * std::max(1.0, std::abs(save));
      theta.data[j] = save + h;
      const double lp = loss();
      theta.data[j] = save - h;
      const double lm = loss();
      theta.data[j] = save;
      const double gn = (lp - lm) / (2.0 * h);
      const double gaj = ga.data[j];
      const double rel = std::abs(gaj - gn) /
                         std::max(1e-8, std::abs(gaj) + std::abs(gn));
      ++rep.coords_checked;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_bank = params[b].name;
        rep.worst_index = j;
      }
      if (rel > tol)
        rep.failures.push_back({params[b].name, j, gaj, gn, rel});
    }
  }
  return rep;
}

}  // namespace

double mse(const ForecastBatch& pred, const ForecastBatch& target) {
  require_pair(pred, target, "mse");
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.values.numel(); ++i) {
    const double d = pred.values.data[i] - target.values.data[i];
    sum += d * d;
  }
  return sum / static_cast<double>(pred.values.numel());
}

double mae(const ForecastBatch& pred, const ForecastBatch& target) {
  require_pair(pred, target, "mae");
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.values.numel(); ++i)
    sum += std::abs(pred.values.data[i] - target.values.data[i]);
  return sum / static_cast<double>(pred.values.numel());
}

OptimizerState make_optimizer(const std::vector<BankRef>& params,
                              AdamHyper hyper) {
  OptimizerState state;
  state.hyper = hyper;
  state.first.reserve(params.size());
  state.second.reserve(params.size());
  for (const BankRef& r : params) {
    state.first.push_back(Tensor::zeros(r.tensor->shape));
    state.second.push_back(Tensor::zeros(r.tensor->shape));
  }
  return state;
}

void adam_step(const std::vector<BankRef>& params,
               const std::vector<BankRef>& grads, OptimizerState& state) {
  if (params.size() != grads.size() || params.size() != state.first.size())
    throw std::invalid_argument("adam_step: bank count mismatch");
  ++state.step;
  const AdamHyper& h = state.hyper;
  const double c1 = 1.0 - std::pow(h.b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(h.b2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& theta = *params[i].tensor;
    const Tensor& g = *grads[i].tensor;
    Tensor& m = state.first[i];
    Tensor& v = state.second[i];
    if (!theta.same_shape(g) || !theta.same_shape(m))
      throw std::invalid_argument("adam_step: shape mismatch for bank '" +
                                  params[i].name + "'");
    for (std::size_t j = 0; j < theta.numel(); ++j) {
      const double gj = g.data[j];
      m.data[j] = h.b1 * m.data[j] + (1.0 - h.b1) * gj;
      v.data[j] = h.b2 * v.data[j] + (1.0 - h.b2) * gj * gj;
      const double m_hat = m.data[j] / c1;
      const double v_hat = v.data[j] / c2;
      theta.data[j] -= h.lr * m_hat / (std::sqrt(v_hat) + h.eps_opt);
    }
  }
}

std::string train_log_jsonl(const TrainLog& log, bool include_wall_ms) {
  std::ostringstream out;
  for (const EpochStats& s : log) {
    out << "{\"epoch\":" << s.epoch
        << ",\"train_mse\":" << double_text(s.train_mse)
        << ",\"train_mae\":" << double_text(s.train_mae)
        << ",\"val_mse\":" << double_text(s.val_mse)
        << ",\"val_mae\":" << double_text(s.val_mae)
        << ",\"wall_ms\":" << (include_wall_ms ? s.wall_ms : 0) << "}\n";
  }
  return out.str();
}

TrainLog train_model(Model& model, const WindowSet& train,
                     const WindowSet& val, const TrainConfig& cfg,
                     std::size_t threads) {
  require_windows(model, train, "train_model (training set)");
  require_windows(model, val, "train_model (validation set)");
  if (cfg.batch_size == 0)
    throw std::invalid_argument("train_model: batch_size must be positive");
  if (cfg.early_stop_patience == 0)
    throw std::invalid_argument("train_model: patience must be positive");
  if (!(cfg.learning_rate > 0.0))
    throw std::invalid_argument(
        "train_model: learning rate must be positive");

  const std::size_t n_train = train.inputs.values.shape[0];
  const std::size_t l = model.lookback;
  const std::size_t h = model.horizon;
  const std::size_t c = model.channels;

  std::vector<BankRef> banks = model_banks(model);
  OptimizerState opt = make_optimizer(
      banks, AdamHyper{cfg.learning_rate, 0.9, 0.999, 1e-8});
  ModelGrads grads = zero_model_grads(model);
  std::vector<BankRef> grad_banks = model_grad_banks(model, grads);

  // Per-window gradient slots: each window of a batch accumulates into its
  // own buffer so the cross-window reduction happens in a fixed order no
  // matter how many threads evaluated them.
  std::vector<ModelGrads> slots;
  std::vector<std::vector<BankRef>> slot_banks;
  slots.reserve(cfg.batch_size);
  for (std::size_t i = 0; i < cfg.batch_size; ++i)
    slots.push_back(zero_model_grads(model));
  slot_banks.reserve(cfg.batch_size);
  for (std::size_t i = 0; i < cfg.batch_size; ++i)
    slot_banks.push_back(model_grad_banks(model, slots[i]));

  std::vector<Tensor> best;
  best.reserve(banks.size());
  for (const BankRef& r : banks) best.push_back(*r.tensor);
  double best_val = std::numeric_limits<double>::infinity();
  std::size_t epochs_without_improvement = 0;

  RngState base(cfg.seed);
  TrainLog log;
  std::vector<double> window_loss(cfg.batch_size);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::size_t> order(n_train);
    std::iota(order.begin(), order.end(), std::size_t{0});
    RngState shuffle_rng = base.split("epoch shuffle").split(epoch);
    shuffle_rng.shuffle(order);

    for (std::size_t start = 0; start < n_train; start += cfg.batch_size) {
      const std::size_t bn = std::min(cfg.batch_size, n_train - start);
      run_parallel(bn, threads, [&](std::size_t k) {
        zero_grad_banks(slot_banks[k]);
        const std::size_t w = order[start + k];
        SeriesBatch xb{Tensor({1, l, c}), l};
        slice_window(train.inputs.values, w, xb.values);
        ForwardCache cache;
        ForecastBatch pred = forward_forecast(xb, model, &cache);
        const std::size_t n = h * c;
        Tensor grad_pred({1, h, c});
        double se_sum = 0.0;
        const double scale =
            2.0 / (static_cast<double>(n) * static_cast<double>(bn));
        for (std::size_t j = 0; j < n; ++j) {
          const double d = pred.values.data[j] -
                           train.targets.values.data[w * n + j];
          se_sum += d * d;
          grad_pred.data[j] = scale * d;
        }
        window_loss[k] = se_sum / static_cast<double>(n);
        model_backward(model, cache, grad_pred, slots[k]);
      });

      double batch_loss = 0.0;
      for (std::size_t k = 0; k < bn; ++k) batch_loss += window_loss[k];
      batch_loss /= static_cast<double>(bn);
      if (!std::isfinite(batch_loss))
        throw std::runtime_error(
            "train_model: non-finite loss at optimizer step " +
            std::to_string(opt.step));

      zero_grad_banks(grad_banks);
      for (std::size_t k = 0; k < bn; ++k)
        add_grad_banks(grad_banks, slot_banks[k]);
      adam_step(banks, grad_banks, opt);
    }

    const PassMetrics tr = eval_windows(model, train, threads);
    const PassMetrics va = eval_windows(model, val, threads);
    if (!std::isfinite(tr.mse) || !std::isfinite(va.mse))
      throw std::runtime_error(
          "train_model: non-finite loss at optimizer step " +
          std::to_string(opt.step));
    const auto wall = std::chrono::duration_cast<std::chrono::milliseconds>(
        std::chrono::steady_clock::now() - t0);
    log.push_back({epoch + 1, tr.mse, tr.mae, va.mse, va.mae,
                   static_cast<std::uint64_t>(wall.count())});

    if (va.mse < best_val) {
      best_val = va.mse;
      for (std::size_t i = 0; i < banks.size(); ++i) best[i] = *banks[i].tensor;
      epochs_without_improvement = 0;
    } else if (++epochs_without_improvement >= cfg.early_stop_patience) {
      break;
    }
  }

  for (std::size_t i = 0; i < banks.size(); ++i) *banks[i].tensor = best[i];
  return log;
}

GradCheckReport grad_check(Model& model, const SeriesBatch& probe,
                           double h_scale, double tol) {
  ForwardCache cache;
  ForecastBatch pred = forward_forecast(probe, model, &cache);
  const Tensor weights = RngState(kProbeSeed).split("model probe")
                             .normal_tensor(pred.values.shape, 0.3);

  ModelGrads grads = zero_model_grads(model);
  model_backward(model, cache, weights, grads);
  std::vector<BankRef> params = model_banks(model);
  std::vector<BankRef> analytic = model_grad_banks(model, grads);

  auto loss = [&]() {
    ForecastBatch p = forward_forecast(probe, model, nullptr);
    double s = 0.0;
    for (std::size_t i = 0; i < p.values.numel(); ++i)
      s += weights.data[i] * p.values.data[i];
    return s;
  };
  return fd_sweep(params, analytic, loss, h_scale, tol);
}

GradCheckReport grad_check(NormLayer& layer, const Tensor& probe,
                           const Tensor* x_cw, double h_scale, double tol) {
  if (probe.ndim() != 3)
    throw std::invalid_argument("grad_check: probe must be B x C x D, got " +
                                probe.shape_str());
  const bool needs_window =
      layer.kind == NormKind::pcn ||
      (layer.kind == NormKind::acn &&
       layer.acn.sim_space == SimSpace::data_x);
  if (needs_window && x_cw == nullptr)
    throw std::invalid_argument(
        "grad_check: this layer kind needs the raw channel windows");

  NormCache cache;
  const Tensor out =
      norm_forward(probe, layer, x_cw, kDefaultEpsNorm, &cache);
  const Tensor weights = RngState(kProbeSeed).split("layer probe")
                             .normal_tensor(out.shape, 0.3);

  NormGrads grads = zero_norm_grads(layer);
  norm_backward(layer, cache, weights, grads);
  std::vector<BankRef> params = norm_banks(layer);
  std::vector<BankRef> analytic = norm_grad_banks(layer, grads);

  auto loss = [&]() {
    const Tensor o = norm_forward(probe, layer, x_cw, kDefaultEpsNorm,
                                  nullptr);
    double s = 0.0;
    for (std::size_t i = 0; i < o.numel(); ++i)
      s += weights.data[i] * o.data[i];
    return s;
  };
  return fd_sweep(params, analytic, loss, h_scale, tol);
}

}  // namespace chanorm
