#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "chanorm/experiment.hpp"
#include "doctest.h"

using namespace chanorm;

namespace {

// A config with every field moved off its default, so serialization tests
// cannot pass by accident.
ExperimentConfig exotic_config() {
  ExperimentConfig c;
  c.data = "mixture";
  c.csv_timestamp = true;
  c.data_seed = 99;
  c.lookback = 48;
  c.horizon = 12;
  c.stride = 3;
  c.toy_amplitude = 2.5;
  c.toy_noise = 0.125;
  c.toy_periods = 11;
  c.mixture_channels = 6;
  c.mixture_length = 512;
  c.train_frac = 0.7;
  c.val_frac = 0.1;
  c.test_frac = 0.2;
  c.backbone = BackboneKind::residual_mlp;
  c.depth = 3;
  c.d_model = 16;
  c.heads = 4;
  c.norm = NormKind::acn;
  c.identifier = IdentifierMode::fixed_constant;
  c.instance_norm_io = true;
  c.prototypes = 7;
  c.tau = 0.05;
  c.sim_metric = SimMetric::neg_l1;
  c.sim_space = SimSpace::data_x;
  c.epochs = 9;
  c.batch_size = 8;
  c.learning_rate = 0.015625;  // exact in binary
  c.seed = 1234;
    c.patience = 2;
  c.out_dir = "runs/exotic";
  return c;
}

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("chanorm_exp_" + std::to_string(std::rand()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace

TEST_CASE("config text: canonical emission is stable under reparse") {
  const ExperimentConfig def;
  const std::string text = experiment_config_text(def);
  CHECK(parse_experiment_config(text).out_dir == def.out_dir);
  CHECK(experiment_config_text(parse_experiment_config(text)) == text);

  const ExperimentConfig exo = exotic_config();
  const std::string exo_text = experiment_config_text(exo);
  CHECK(experiment_config_text(parse_experiment_config(exo_text)) == exo_text);
  CHECK(exo_text != text);
}

TEST_CASE("config text: every field survives a round trip") {
  const ExperimentConfig exo = exotic_config();
  const ExperimentConfig back =
      parse_experiment_config(experiment_config_text(exo));
  CHECK(back.data == "mixture");
  CHECK(back.csv_timestamp == true);
  CHECK(back.data_seed == 99);
  CHECK(back.lookback == 48);
  CHECK(back.horizon == 12);
  CHECK(back.stride == 3);
  CHECK(back.toy_amplitude == 2.5);
  CHECK(back.toy_noise == 0.125);
  CHECK(back.toy_periods == 11);
  CHECK(back.mixture_channels == 6);
  CHECK(back.mixture_length == 512);
  CHECK(back.train_frac == 0.7);
  CHECK(back.val_frac == 0.1);
  CHECK(back.test_frac == 0.2);
  CHECK(back.backbone == BackboneKind::residual_mlp);
  CHECK(back.depth == 3);
  CHECK(back.d_model == 16);
  CHECK(back.heads == 4);
  CHECK(back.norm == NormKind::acn);
  CHECK(back.identifier == IdentifierMode::fixed_constant);
  CHECK(back.instance_norm_io == true);
  CHECK(back.prototypes == 7);
  CHECK(back.tau == 0.05);
  CHECK(back.sim_metric == SimMetric::neg_l1);
  CHECK(back.sim_space == SimSpace::data_x);
  CHECK(back.epochs == 9);
  CHECK(back.batch_size == 8);
  CHECK(back.learning_rate == 0.015625);
  CHECK(back.seed == 1234);
  CHECK(back.loss == LossKind::mse);
  CHECK(back.patience == 2);
  CHECK(back.out_dir == "runs/exotic");
}

TEST_CASE("config text: doubles round-trip exactly, not via decimal prettying") {
  ExperimentConfig c;
  c.tau = 0.1 + 1e-17;          // collapses to 0.1's double
  c.learning_rate = 1.0 / 3.0;  // no short decimal form
  c.toy_noise = 1e-300;
  const ExperimentConfig back =
      parse_experiment_config(experiment_config_text(c));
  CHECK(back.tau == c.tau);
  CHECK(back.learning_rate == c.learning_rate);
  CHECK(back.toy_noise == c.toy_noise);
}

TEST_CASE("config parse: comments, blanks, and spacing are tolerated") {
  const std::string text =
      "# experiment file\n"
      "\n"
      "   lookback =  32\n"
      "horizon=8   \n"
      "\n"
      "# trailing comment line\n"
      "norm = cn\n";
  const ExperimentConfig c = parse_experiment_config(text);
  CHECK(c.lookback == 32);
  CHECK(c.horizon == 8);
  CHECK(c.norm == NormKind::cn);
  CHECK(c.epochs == 50);  // untouched keys keep defaults
}

TEST_CASE("config parse: rejects malformed input with the offending line") {
  CHECK_THROWS_WITH_AS(parse_experiment_config("lookback = 32\nwat = 1\n"),
                       doctest::Contains("config line 2"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse_experiment_config("lookback = 32\nlookback = 8\n"),
                       doctest::Contains("duplicate"),
                       std::invalid_argument);
  CHECK_THROWS_AS(parse_experiment_config("just some words\n"),
                  std::invalid_argument);
  CHECK_THROWS_AS(parse_experiment_config("lookback = twelve\n"),
                  std::invalid_argument);
  CHECK_THROWS_AS(parse_experiment_config("lookback = 12 12\n"),
                  std::invalid_argument);
  CHECK_THROWS_AS(parse_experiment_config("lookback = -3\n"),
                  std::invalid_argument);
  CHECK_THROWS_AS(parse_experiment_config("norm = best\n"),
                  std::invalid_argument);
  CHECK_THROWS_AS(parse_experiment_config("csv_timestamp = yes\n"),
                  std::invalid_argument);
  CHECK_THROWS_AS(parse_experiment_config("tau = 0.1sec\n"),
                  std::invalid_argument);
}

TEST_CASE("set_config_value: unknown key and enum names") {
  ExperimentConfig c;
  set_config_value(c, "sim_metric", "neg_l2");
  CHECK(c.sim_metric == SimMetric::neg_l2);
  set_config_value(c, "sim_space", "data_x");
  CHECK(c.sim_space == SimSpace::data_x);
  set_config_value(c, "backbone", "linear");
  CHECK(c.backbone == BackboneKind::linear);
  set_config_value(c, "identifier", "learnable");
  CHECK(c.identifier == IdentifierMode::learnable);
  CHECK_THROWS_WITH_AS(set_config_value(c, "momentum", "0.9"),
                       doctest::Contains("unknown config key"),
                       std::invalid_argument);
}

TEST_CASE("loss kind names map both ways and reject strangers") {
  CHECK(loss_kind_name(LossKind::mse) == "mse");
  CHECK(loss_kind_from_name("mse") == LossKind::mse);
  CHECK_THROWS_AS(loss_kind_from_name("mae"), std::invalid_argument);
  CHECK_THROWS_AS(loss_kind_from_name("huber"), std::invalid_argument);
  CHECK_THROWS_AS(loss_kind_from_name("MSE"), std::invalid_argument);
}

TEST_CASE("config file save/load round trip and missing-file error") {
  TempDir tmp;
  const std::string path = (tmp.path / "cfg.txt").string();
  const ExperimentConfig exo = exotic_config();
  save_experiment_config(path, exo);
  const ExperimentConfig back = load_experiment_config(path);
  CHECK(experiment_config_text(back) == experiment_config_text(exo));
  CHECK_THROWS_WITH_AS(load_experiment_config((tmp.path / "nope.txt").string()),
                       doctest::Contains("cannot open"), std::runtime_error);
}

TEST_CASE("realize_dataset: toy and mixture generators, csv fallback") {
  ExperimentConfig c;
  c.lookback = 16;
  c.horizon = 4;
  c.toy_periods = 5;
  const RawSeries toy = realize_dataset(c);
  CHECK(toy.channels() == 2);
  CHECK(toy.length() == 5 * (16 + 4));

  c.data = "mixture";
  c.mixture_channels = 6;
  c.mixture_length = 128;
  const RawSeries mix = realize_dataset(c);
  CHECK(mix.channels() == 6);
  CHECK(mix.length() == 128);

  // Same settings, same seed: generation is a pure function of the config.
  const RawSeries mix2 = realize_dataset(c);
  CHECK(mix.matrix.data == mix2.matrix.data);
  c.data_seed = 8;
  const RawSeries mix3 = realize_dataset(c);
  CHECK(mix.matrix.data != mix3.matrix.data);

  TempDir tmp;
  const std::string path = (tmp.path / "series.csv").string();
  save_csv(path, mix);
  c.data = path;
  const RawSeries loaded = realize_dataset(c);
  CHECK(loaded.channels() == 6);
  CHECK(loaded.length() == 128);
  CHECK(loaded.channel_names == mix.channel_names);

  c.data = (tmp.path / "missing.csv").string();
  CHECK_THROWS_AS(realize_dataset(c), std::runtime_error);
}

TEST_CASE("realize_backbone/training/split copy every knob across") {
  const ExperimentConfig exo = exotic_config();
  const BackboneConfig b = realize_backbone(exo);
  CHECK(b.kind == BackboneKind::residual_mlp);
  CHECK(b.depth == 3);
  CHECK(b.d_model == 16);
  CHECK(b.heads == 4);
  CHECK(b.norm_kind == NormKind::acn);
  CHECK(b.identifier_mode == IdentifierMode::fixed_constant);
  CHECK(b.instance_norm_io == true);
  CHECK(b.prototypes == 7);
  CHECK(b.tau == 0.05);
  CHECK(b.sim_metric == SimMetric::neg_l1);
  CHECK(b.sim_space == SimSpace::data_x);

  const TrainConfig t = realize_training(exo);
  CHECK(t.epochs == 9);
  CHECK(t.batch_size == 8);
  CHECK(t.learning_rate == 0.015625);
  CHECK(t.seed == 1234);
  CHECK(t.loss == LossKind::mse);
  CHECK(t.early_stop_patience == 2);

  const SplitSpec s = realize_split(exo);
  CHECK(s.train == 0.7);
  CHECK(s.val == 0.1);
  CHECK(s.test == 0.2);
}

TEST_CASE("prepare_experiment_data: window counts follow split and stride") {
  ExperimentConfig c;
  c.lookback = 16;
  c.horizon = 4;
  c.toy_periods = 6;  // T = 120 -> split 72/24/24
  const RawSeries series = realize_dataset(c);
  REQUIRE(series.length() == 120);

  const ExperimentData d = prepare_experiment_data(series, c);
  // Segment of length T yields T - L - H + 1 unit-stride windows.
  CHECK(d.train.inputs.values.dim(0) == 72 - 16 - 4 + 1);
  CHECK(d.val.inputs.values.dim(0) == 24 - 16 - 4 + 1);
  CHECK(d.test.inputs.values.dim(0) == 24 - 16 - 4 + 1);
  CHECK(d.train.inputs.lookback == 16);
  CHECK(d.train.targets.horizon == 4);
  CHECK(d.train.inputs.values.dim(2) == 2);

  c.stride = 3;
  const ExperimentData strided = prepare_experiment_data(series, c);
  CHECK(strided.train.inputs.values.dim(0) == (72 - 16 - 4) / 3 + 1);

  // First training window must be the head of the series, untouched.
  for (std::size_t t = 0; t < 16; ++t) {
    for (std::size_t ch = 0; ch < 2; ++ch) {
      CHECK(d.train.inputs.values(0, t, ch) == series.matrix(t, ch));
    }
  }

  c.stride = 1;
  c.lookback = 30;  // val/test segments (24) too short to window
  CHECK_THROWS_AS(prepare_experiment_data(series, c), std::invalid_argument);
}
