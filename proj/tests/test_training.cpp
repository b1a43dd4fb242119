#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "chanorm/backbones.hpp"
#include "chanorm/datasets.hpp"
#include "chanorm/normlayers.hpp"
#include "chanorm/series.hpp"
#include "chanorm/tensor.hpp"
#include "chanorm/training.hpp"
#include "doctest.h"

using namespace chanorm;

namespace {

ForecastBatch forecast_of(Tensor t) { return make_forecast_batch(std::move(t)); }

// Period-L series: the next H values of any window are a fixed selection of
// the window itself, so a linear backbone can fit it exactly.
RawSeries periodic_series(std::size_t total) {
  const double ch0[8] = {0.9, -0.3, 0.5, 1.2, -0.7, 0.1, -1.1, 0.4};
  const double ch1[8] = {-0.2, 0.8, -0.6, 0.3, 1.0, -0.9, 0.2, 0.6};
  RawSeries s;
  s.matrix = Tensor({total, 2});
  for (std::size_t t = 0; t < total; ++t) {
    s.matrix(t, 0) = ch0[t % 8];
    s.matrix(t, 1) = ch1[t % 8];
  }
  s.channel_names = {"a", "b"};
  return s;
}

Model linear_model(std::size_t lookback, std::size_t horizon,
                   std::size_t channels, std::uint64_t seed) {
  BackboneConfig cfg;
  cfg.kind = BackboneKind::linear;
  cfg.d_model = 16;
  RngState rng(seed);
  return make_model(cfg, lookback, horizon, channels, rng);
}

Model toy_model(NormKind norm, std::uint64_t seed) {
  BackboneConfig cfg;
  cfg.kind = BackboneKind::channel_attention;
  cfg.depth = 1;
  cfg.d_model = 8;
  cfg.heads = 2;
  cfg.norm_kind = norm;
  RngState rng(seed);
  return make_model(cfg, 16, 4, 2, rng);
}

void nudge_layer(NormLayer& layer, std::uint64_t seed) {
  RngState rng(seed);
  for (const BankRef& r : norm_banks(layer)) {
    RngState bank_rng = rng.split(r.name);
    for (double& v : r.tensor->data) v += 0.1 * bank_rng.next_normal();
  }
}

std::vector<Tensor> snapshot(Model& m) {
  std::vector<Tensor> out;
  for (const BankRef& r : model_banks(m)) out.push_back(*r.tensor);
  return out;
}

}  // namespace

TEST_CASE("mse and mae: pinned values and loop oracle") {
  ForecastBatch a = forecast_of(Tensor::full({2, 3, 2}, 1.5));
  ForecastBatch b = forecast_of(Tensor::full({2, 3, 2}, 1.5));
  CHECK(mse(a, b) == 0.0);
  CHECK(mae(a, b) == 0.0);

  ForecastBatch c = forecast_of(Tensor::full({2, 3, 2}, 3.5));
  CHECK(mse(c, b) == 4.0);
  CHECK(mae(c, b) == 2.0);

  RngState rng(31);
  ForecastBatch p = forecast_of(rng.normal_tensor({3, 5, 4}));
  ForecastBatch q = forecast_of(rng.normal_tensor({3, 5, 4}));
  double se = 0.0, ae = 0.0;
  for (std::size_t i = 0; i < p.values.numel(); ++i) {
    const double d = p.values.data[i] - q.values.data[i];
    se += d * d;
    ae += std::abs(d);
  }
  CHECK(mse(p, q) == doctest::Approx(se / 60.0).epsilon(1e-12));
  CHECK(mae(p, q) == doctest::Approx(ae / 60.0).epsilon(1e-12));

  ForecastBatch wrong = forecast_of(Tensor::full({2, 3, 3}, 0.0));
  CHECK_THROWS_AS(mse(p, wrong), std::invalid_argument);
  CHECK_THROWS_AS(mae(p, wrong), std::invalid_argument);
}

TEST_CASE("adam: zero gradients leave parameters untouched") {
  Tensor theta = Tensor::full({3}, 0.75);
  Tensor g = Tensor::zeros({3});
  std::vector<BankRef> params{{"theta", &theta}};
  std::vector<BankRef> grads{{"theta", &g}};
  OptimizerState state = make_optimizer(params);
  const Tensor before = theta;
  for (int i = 0; i < 4; ++i) adam_step(params, grads, state);
  CHECK(max_abs_diff(theta, before) == 0.0);
  CHECK(state.step == 4);
}

TEST_CASE("adam: first step matches the closed form") {
  Tensor theta = Tensor::full({1}, 0.5);
  Tensor g = Tensor::full({1}, 0.25);
  std::vector<BankRef> params{{"theta", &theta}};
  std::vector<BankRef> grads{{"theta", &g}};
  OptimizerState state = make_optimizer(params);
  adam_step(params, grads, state);

  const AdamHyper h;
  const double m_hat = ((1.0 - h.b1) * 0.25) / (1.0 - std::pow(h.b1, 1.0));
  const double v_hat =
      ((1.0 - h.b2) * 0.25 * 0.25) / (1.0 - std::pow(h.b2, 1.0));
  const double expected = 0.5 - h.lr * m_hat / (std::sqrt(v_hat) + h.eps_opt);
  CHECK(theta(0) == expected);
  // After bias correction the first step is the learning rate times the
  // gradient sign, up to eps_opt.
  CHECK(theta(0) == doctest::Approx(0.5 - h.lr).epsilon(1e-9));
}

TEST_CASE("adam: bitwise determinism and shape guards") {
  auto run = [](std::uint64_t) {
    Tensor theta({4});
    for (std::size_t i = 0; i < 4; ++i) theta(i) = 0.2 * double(i) - 0.3;
    Tensor g({4});
    std::vector<BankRef> params{{"w", &theta}};
    std::vector<BankRef> grads{{"w", &g}};
    OptimizerState state = make_optimizer(params);
    for (int s = 0; s < 7; ++s) {
      for (std::size_t i = 0; i < 4; ++i)
        g(i) = 0.1 * double(i + 1) * (s % 2 ? -1.0 : 1.0);
      adam_step(params, grads, state);
    }
    return theta;
  };
  CHECK(max_abs_diff(run(0), run(1)) == 0.0);

  Tensor theta = Tensor::zeros({2});
  Tensor bad = Tensor::zeros({3});
  std::vector<BankRef> params{{"w", &theta}};
  std::vector<BankRef> grads{{"w", &bad}};
  OptimizerState state = make_optimizer(params);
  CHECK_THROWS_AS(adam_step(params, grads, state), std::invalid_argument);
  CHECK_THROWS_AS(adam_step(params, {}, state), std::invalid_argument);
}

TEST_CASE("jsonl log: schema, bit-faithful values, timing mask") {
  TrainLog log;
  log.push_back({1, 0.25, 0.5, 1.0 / 3.0, 0.125, 42});
  log.push_back({2, 1e-7, 2e-3, 0.03125, 0.0625, 57});
  const std::string masked = train_log_jsonl(log, false);
  CHECK(masked ==
        "{\"epoch\":1,\"train_mse\":0.25,\"train_mae\":0.5,"
        "\"val_mse\":0.33333333333333331,\"val_mae\":0.125,\"wall_ms\":0}\n"
        "{\"epoch\":2,\"train_mse\":9.9999999999999995e-08,"
        "\"train_mae\":0.002,\"val_mse\":0.03125,\"val_mae\":0.0625,"
        "\"wall_ms\":0}\n");
  const std::string timed = train_log_jsonl(log);
  CHECK(timed.find("\"wall_ms\":42") != std::string::npos);
  CHECK(timed.find("\"wall_ms\":57") != std::string::npos);
}

TEST_CASE("training: linear backbone fits noiseless linear data") {
  RawSeries s = periodic_series(160);
  WindowSet train = make_windows(s, 8, 4, 1);
  WindowSet val = make_windows(s, 8, 4, 8);
  Model m = linear_model(8, 4, 2, 7);

  TrainConfig cfg;
  cfg.epochs = 300;
  cfg.batch_size = 32;
  cfg.learning_rate = 0.01;
  cfg.early_stop_patience = 50;
  cfg.seed = 7;
  TrainLog log = train_model(m, train, val, cfg);
  REQUIRE(!log.empty());
  double best_train = log.front().train_mse;
  for (const EpochStats& e : log) best_train = std::min(best_train, e.train_mse);
  CHECK(best_train < 1e-6);
}

TEST_CASE("training: zero epochs return the initial model") {
  RawSeries s = periodic_series(80);
  WindowSet w = make_windows(s, 8, 4, 1);
  Model m = linear_model(8, 4, 2, 3);
  const std::vector<Tensor> before = snapshot(m);
  TrainConfig cfg;
  cfg.epochs = 0;
  TrainLog log = train_model(m, w, w, cfg);
  CHECK(log.empty());
  const std::vector<Tensor> after = snapshot(m);
  for (std::size_t i = 0; i < before.size(); ++i)
    CHECK(max_abs_diff(before[i], after[i]) == 0.0);
}

TEST_CASE("training: identical runs emit identical logs") {
  RawSeries s = gen_cid_toy(16, 4, 1.0, 6, 0.01, 5);
  WindowSet train = make_windows(s, 16, 4, 1);
  WindowSet val = make_windows(s, 16, 4, 20);
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.batch_size = 16;

  Model m1 = toy_model(NormKind::cn, 11);
  Model m2 = toy_model(NormKind::cn, 11);
  TrainLog a = train_model(m1, train, val, cfg);
  TrainLog b = train_model(m2, train, val, cfg);
  CHECK(train_log_jsonl(a, false) == train_log_jsonl(b, false));
  const std::vector<Tensor> pa = snapshot(m1);
  const std::vector<Tensor> pb = snapshot(m2);
  for (std::size_t i = 0; i < pa.size(); ++i)
    CHECK(max_abs_diff(pa[i], pb[i]) == 0.0);
}

TEST_CASE("training: thread count cannot change the result") {
  RawSeries s = gen_cid_toy(16, 4, 1.0, 6, 0.01, 5);
  WindowSet train = make_windows(s, 16, 4, 1);
  WindowSet val = make_windows(s, 16, 4, 20);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 16;

  Model serial = toy_model(NormKind::acn, 13);
  Model threaded = toy_model(NormKind::acn, 13);
  TrainLog a = train_model(serial, train, val, cfg, 1);
  TrainLog b = train_model(threaded, train, val, cfg, 4);
  CHECK(train_log_jsonl(a, false) == train_log_jsonl(b, false));
  const std::vector<Tensor> pa = snapshot(serial);
  const std::vector<Tensor> pb = snapshot(threaded);
  for (std::size_t i = 0; i < pa.size(); ++i)
    CHECK(max_abs_diff(pa[i], pb[i]) == 0.0);
}

TEST_CASE("training: best-of-epoch train loss envelope is non-increasing") {
  RawSeries s = gen_cid_toy(16, 4, 1.0, 8, 0.01, 3);
  WindowSet train = make_windows(s, 16, 4, 1);
  WindowSet val = make_windows(s, 16, 4, 20);
  Model m = toy_model(NormKind::cn, 7);
  TrainConfig cfg;
  cfg.epochs = 8;
  cfg.batch_size = 16;
  TrainLog log = train_model(m, train, val, cfg);
  REQUIRE(log.size() == 8);
  double envelope = log.front().train_mse;
  for (const EpochStats& e : log) {
    const double next = std::min(envelope, e.train_mse);
    CHECK(next <= envelope);
    envelope = next;
  }
  CHECK(envelope < log.front().train_mse);
}

TEST_CASE("training: early stopping and best-checkpoint restore") {
  // Validation targets are the negated training targets, so every update
  // that helps training hurts validation: epoch 1 is the best epoch and
  // patience runs out right after it.
  RawSeries s = periodic_series(120);
  WindowSet train = make_windows(s, 8, 4, 1);
  WindowSet val = train;
  for (double& v : val.targets.values.data) v = -3.0 * v;

  Model m = linear_model(8, 4, 2, 9);
  TrainConfig cfg;
  cfg.epochs = 30;
  cfg.early_stop_patience = 3;
  cfg.learning_rate = 0.01;
  TrainLog log = train_model(m, train, val, cfg);
  REQUIRE(log.size() == 4);  // best epoch + patience exhausted
  CHECK(log[0].val_mse < log[1].val_mse);
  CHECK(log[0].val_mse < log[2].val_mse);
  CHECK(log[0].val_mse < log[3].val_mse);

  // The returned model is the epoch-1 snapshot, not the last state.
  ForecastBatch pred = forward_forecast(val.inputs, m, nullptr);
  CHECK(mse(pred, val.targets) ==
        doctest::Approx(log[0].val_mse).epsilon(1e-12));
}

TEST_CASE("training: non-finite loss aborts with the step index") {
  RawSeries s = periodic_series(80);
  WindowSet w = make_windows(s, 8, 4, 1);
  Model m = linear_model(8, 4, 2, 3);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.learning_rate = 1e290;
  CHECK_THROWS_WITH_AS(train_model(m, w, w, cfg),
                       doctest::Contains("optimizer step"),
                       std::runtime_error);
}

TEST_CASE("training: window geometry is validated against the model") {
  RawSeries s = periodic_series(80);
  WindowSet w = make_windows(s, 8, 4, 1);
  Model wrong_l = linear_model(10, 4, 2, 3);
  Model wrong_c = linear_model(8, 4, 3, 3);
  TrainConfig cfg;
  CHECK_THROWS_AS(train_model(wrong_l, w, w, cfg), std::invalid_argument);
  CHECK_THROWS_AS(train_model(wrong_c, w, w, cfg), std::invalid_argument);
}

TEST_CASE("grad check: ln layer on a random batch") {
  RngState rng(41);
  NormLayer layer = make_norm_layer(NormKind::ln, 3, 4, 1, 1, kDefaultTau,
                                    SimMetric::cosine, SimSpace::latent_z,
                                    rng);
  nudge_layer(layer, 90);
  const Tensor probe = rng.normal_tensor({2, 3, 4});
  GradCheckReport rep = grad_check(layer, probe);
  CHECK(rep.coords_checked == 8);
  CHECK(rep.max_rel_err <= 1e-4);
  CHECK(rep.passed());
  CHECK(rep.failures.empty());
}

TEST_CASE("grad check: acn layer through softmax, tau, and every metric") {
  RngState rng(43);
  const Tensor probe = rng.normal_tensor({2, 3, 4});
  const Tensor windows = rng.normal_tensor({2, 3, 5});
  for (SimMetric metric :
       {SimMetric::cosine, SimMetric::neg_l1, SimMetric::neg_l2}) {
    for (SimSpace space : {SimSpace::latent_z, SimSpace::data_x}) {
      NormLayer layer = make_norm_layer(NormKind::acn, 3, 4, 5, 1, 0.2,
                                        metric, space, rng);
      nudge_layer(layer, 91);
      GradCheckReport rep =
          grad_check(layer, probe,
                     space == SimSpace::data_x ? &windows : nullptr);
      INFO("metric=", sim_metric_name(metric), " space=",
           sim_space_name(space), " worst=", rep.worst_bank);
      CHECK(rep.coords_checked == 48);
      CHECK(rep.max_rel_err <= 1e-4);
    }
  }
}

TEST_CASE("grad check: pcn layer including the projection") {
  RngState rng(47);
  NormLayer layer = make_norm_layer(NormKind::pcn, 3, 4, 5, 2, kDefaultTau,
                                    SimMetric::cosine, SimSpace::latent_z,
                                    rng);
  nudge_layer(layer, 92);
  const Tensor probe = rng.normal_tensor({2, 3, 4});
  const Tensor windows = rng.normal_tensor({2, 3, 5});
  GradCheckReport rep = grad_check(layer, probe, &windows);
  CHECK(rep.coords_checked == 8 + 8 + 20 + 4);
  CHECK(rep.max_rel_err <= 1e-4);
  CHECK_THROWS_AS(grad_check(layer, probe), std::invalid_argument);
}

TEST_CASE("grad check: full model with coordinate sampling on large banks") {
  BackboneConfig cfg;
  cfg.kind = BackboneKind::channel_attention;
  cfg.depth = 1;
  cfg.d_model = 8;
  cfg.heads = 2;
  cfg.norm_kind = NormKind::cn;
  RngState rng(53);
  Model m = make_model(cfg, 40, 4, 3, rng);  // embed bank 40 x 8 = 320 > 256

  const SeriesBatch probe = make_series_batch(rng.normal_tensor({2, 40, 3}));
  GradCheckReport rep = grad_check(m, probe);
  std::size_t total = 0;
  for (const BankRef& r : model_banks(m)) total += r.tensor->numel();
  CHECK(rep.coords_checked < total);
  CHECK(rep.coords_checked >= 200);
  CHECK(rep.max_rel_err <= 1e-4);
  CHECK(rep.passed());
}
