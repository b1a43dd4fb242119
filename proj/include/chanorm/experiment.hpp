#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include "chanorm/backbones.hpp"
#include "chanorm/datasets.hpp"
#include "chanorm/training.hpp"

namespace chanorm {

// One experiment, fully described: dataset source, windowing, split,
// backbone, normalization knobs, and training schedule. Serializes to
// canonical key=value text; a run is reproducible from that text alone.
struct ExperimentConfig {
  // dataset: "toy" (two mirrored-ramp channels), "mixture" (sine clusters),
  // or a CSV path
  std::string data = "toy";
  bool csv_timestamp = false;  // first CSV column is a timestamp
  std::uint64_t data_seed = 7;
  std::size_t lookback = 96;
  std::size_t horizon = 24;
  std::size_t stride = 1;
  double toy_amplitude = 1.0;
  double toy_noise = 0.01;
  std::size_t toy_periods = 40;
  std::size_t mixture_channels = 8;
  std::size_t mixture_length = 2048;
  double train_frac = 0.6;
  double val_frac = 0.2;
  double test_frac = 0.2;

  BackboneKind backbone = BackboneKind::channel_attention;
  std::size_t depth = 2;
  std::size_t d_model = 32;
  std::size_t heads = 2;
  NormKind norm = NormKind::ln;
  IdentifierMode identifier = IdentifierMode::none;
  bool instance_norm_io = false;
  std::size_t prototypes = 4;
  double tau = kDefaultTau;
  SimMetric sim_metric = SimMetric::cosine;
  SimSpace sim_space = SimSpace::latent_z;

  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  std::uint64_t seed = 7;
  LossKind loss = LossKind::mse;
  std::size_t patience = 10;

  std::string out_dir = "runs/exp";
};

std::string loss_kind_name(LossKind k);
LossKind loss_kind_from_name(const std::string& s);

// Set one key to a textual value; throws std::invalid_argument for unknown
// keys or unparseable values. The key set is exactly what
// experiment_config_text emits.
void set_config_value(ExperimentConfig& cfg, const std::string& key,
                      const std::string& value);

// Canonical serialization: every key, fixed order, one `key = value` per
// line, doubles printed so they round-trip exactly.
std::string experiment_config_text(const ExperimentConfig& cfg);

// Parse key=value text ('#' starts a comment, blank lines ignored).
// Unknown and duplicate keys are rejected.
ExperimentConfig parse_experiment_config(const std::string& text);

ExperimentConfig load_experiment_config(const std::string& path);
void save_experiment_config(const std::string& path,
                            const ExperimentConfig& cfg);

// Generate or load the configured series.
RawSeries realize_dataset(const ExperimentConfig& cfg);

BackboneConfig realize_backbone(const ExperimentConfig& cfg);
TrainConfig realize_training(const ExperimentConfig& cfg);
SplitSpec realize_split(const ExperimentConfig& cfg);

// Chronological split plus windowing of each segment.
struct ExperimentData {
  WindowSet train;
  WindowSet val;
  WindowSet test;
};
ExperimentData prepare_experiment_data(const RawSeries& series,
                                       const ExperimentConfig& cfg);

}  // namespace chanorm
