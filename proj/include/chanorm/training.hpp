#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "chanorm/backbones.hpp"
#include "chanorm/datasets.hpp"
#include "chanorm/normlayers.hpp"
#include "chanorm/series.hpp"
#include "chanorm/tensor.hpp"

namespace chanorm {

enum class LossKind : std::uint8_t { mse };

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  std::uint64_t seed = 7;
  LossKind loss = LossKind::mse;
  std::size_t early_stop_patience = 10;  // epochs without val improvement
};

// Means over all B x H x C elements; shapes must match.
double mse(const ForecastBatch& pred, const ForecastBatch& target);
double mae(const ForecastBatch& pred, const ForecastBatch& target);

struct AdamHyper {
  double lr = 1e-3;
  double b1 = 0.9;
  double b2 = 0.999;
  double eps_opt = 1e-8;
};

// Moment banks are index-aligned with the parameter bank list the state was
// built from.
struct OptimizerState {
  std::vector<Tensor> first;
  std::vector<Tensor> second;
  std::size_t step = 0;
  AdamHyper hyper;
};

OptimizerState make_optimizer(const std::vector<BankRef>& params,
                              AdamHyper hyper = {});

// One bias-corrected adaptive-moment update. params/grads must align with
// the state bank for bank; deterministic given inputs.
void adam_step(const std::vector<BankRef>& params,
               const std::vector<BankRef>& grads, OptimizerState& state);

struct EpochStats {
  std::size_t epoch = 0;  // 1-based
  double train_mse = 0.0;
  double train_mae = 0.0;
  double val_mse = 0.0;
  double val_mae = 0.0;
  std::uint64_t wall_ms = 0;
};
using TrainLog = std::vector<EpochStats>;

// One JSON object per epoch:
// {"epoch":..,"train_mse":..,"train_mae":..,"val_mse":..,"val_mae":..,
//  "wall_ms":..}. Metric values are printed bit-faithfully. When
// include_wall_ms is false the timing field is written as 0 so two logs of
// the same run can be compared byte-for-byte (wall time is the one
// physically non-deterministic column).
std::string train_log_jsonl(const TrainLog& log, bool include_wall_ms = true);

// Minibatch training with seeded per-epoch shuffling, per-epoch train/val
// metrics, early stopping on validation MSE, and restoration of the
// best-validation parameters. Gradients are evaluated per window and
// reduced in window order, so results are bit-identical for any `threads`
// value. A non-finite training loss aborts with the offending optimizer
// step index in the message.
TrainLog train_model(Model& model, const WindowSet& train,
                     const WindowSet& val, const TrainConfig& cfg,
                     std::size_t threads = 1);

struct GradCheckIssue {
  std::string bank;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_err = 0.0;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_bank;
  std::size_t worst_index = 0;
  std::size_t coords_checked = 0;
  double tol = 1e-4;
  std::vector<GradCheckIssue> failures;  // coordinates with rel_err > tol
  bool passed() const { return max_rel_err <= tol; }
};

// Compare analytic gradients against central finite differences of a seeded
// probe-weighted scalar loss. Every coordinate of every trainable bank is
// visited (banks above 256 elements get a seeded sample of 256 distinct
// coordinates). Per-coordinate step is h_scale * max(1, |theta|); relative
// error is |g_a - g_n| / max(1e-8, |g_a| + |g_n|). Parameters are restored
// bit-exactly.
GradCheckReport grad_check(Model& model, const SeriesBatch& probe,
                           double h_scale = 1e-5, double tol = 1e-4);

// Layer-level variant; probe is a B x C x D token batch. x_cw (nullable)
// supplies the raw channel windows required by pcn and data-space acn.
GradCheckReport grad_check(NormLayer& layer, const Tensor& probe,
                           const Tensor* x_cw = nullptr,
                           double h_scale = 1e-5, double tol = 1e-4);

}  // namespace chanorm
