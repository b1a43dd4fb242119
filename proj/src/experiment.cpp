#include "chanorm/experiment.hpp"

#include <charconv>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <system_error>

namespace chanorm {

namespace {

std::string trim(const std::string& s) {
  const std::size_t first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return "";
  const std::size_t last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value,
                            const char* expected) {
  throw std::invalid_argument("config key '" + key + "': cannot parse '" +
                              value + "' as " + expected);
}

double parse_double(const std::string& key, const std::string& value) {
  double out = 0.0;
  const char* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) bad_value(key, value, "a number");
  return out;
}

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
  std::uint64_t out = 0;
  const char* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) bad_value(key, value, "an integer");
  return out;
}

std::size_t parse_size(const std::string& key, const std::string& value) {
  return static_cast<std::size_t>(parse_u64(key, value));
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true") return true;
  if (value == "false") return false;
  bad_value(key, value, "true or false");
}

std::string fmt_double(double v) {
  char buf[32];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc()) throw std::runtime_error("fmt_double: buffer");
  return std::string(buf, ptr);
}

}  // namespace

std::string loss_kind_name(LossKind k) {
  switch (k) {
    case LossKind::mse: return "mse";
  }
  throw std::invalid_argument("loss_kind_name: unknown loss");
}

LossKind loss_kind_from_name(const std::string& s) {
  if (s == "mse") return LossKind::mse;
  throw std::invalid_argument("loss_kind_from_name: unknown loss '" + s + "'");
}

void set_config_value(ExperimentConfig& cfg, const std::string& key,
                      const std::string& value) {
  if (key == "data") {
    if (value.empty()) bad_value(key, value, "a generator name or CSV path");
    cfg.data = value;
  } else if (key == "csv_timestamp") {
    cfg.csv_timestamp = parse_bool(key, value);
  } else if (key == "data_seed") {
    cfg.data_seed = parse_u64(key, value);
  } else if (key == "lookback") {
    cfg.lookback = parse_size(key, value);
  } else if (key == "horizon") {
    cfg.horizon = parse_size(key, value);
  } else if (key == "stride") {
    cfg.stride = parse_size(key, value);
  } else if (key == "toy_amplitude") {
    cfg.toy_amplitude = parse_double(key, value);
  } else if (key == "toy_noise") {
    cfg.toy_noise = parse_double(key, value);
  } else if (key == "toy_periods") {
    cfg.toy_periods = parse_size(key, value);
  } else if (key == "mixture_channels") {
    cfg.mixture_channels = parse_size(key, value);
  } else if (key == "mixture_length") {
    cfg.mixture_length = parse_size(key, value);
  } else if (key == "train_frac") {
    cfg.train_frac = parse_double(key, value);
  } else if (key == "val_frac") {
    cfg.val_frac = parse_double(key, value);
  } else if (key == "test_frac") {
    cfg.test_frac = parse_double(key, value);
  } else if (key == "backbone") {
    cfg.backbone = backbone_kind_from_name(value);
  } else if (key == "depth") {
    cfg.depth = parse_size(key, value);
  } else if (key == "d_model") {
    cfg.d_model = parse_size(key, value);
  } else if (key == "heads") {
    cfg.heads = parse_size(key, value);
  } else if (key == "norm") {
    cfg.norm = norm_kind_from_name(value);
  } else if (key == "identifier") {
    cfg.identifier = identifier_mode_from_name(value);
  } else if (key == "instance_norm_io") {
    cfg.instance_norm_io = parse_bool(key, value);
  } else if (key == "prototypes") {
    cfg.prototypes = parse_size(key, value);
  } else if (key == "tau") {
    cfg.tau = parse_double(key, value);
  } else if (key == "sim_metric") {
    cfg.sim_metric = sim_metric_from_name(value);
  } else if (key == "sim_space") {
    cfg.sim_space = sim_space_from_name(value);
  } else if (key == "epochs") {
    cfg.epochs = parse_size(key, value);
  } else if (key == "batch_size") {
    cfg.batch_size = parse_size(key, value);
  } else if (key == "learning_rate") {
    cfg.learning_rate = parse_double(key, value);
  } else if (key == "seed") {
    cfg.seed = parse_u64(key, value);
  } else if (key == "loss") {
    cfg.loss = loss_kind_from_name(value);
  } else if (key == "patience") {
    cfg.patience = parse_size(key, value);
  } else if (key == "out_dir") {
    if (value.empty()) bad_value(key, value, "a directory path");
    cfg.out_dir = value;
  } else {
    throw std::invalid_argument("unknown config key '" + key + "'");
  }
}

std::string experiment_config_text(const ExperimentConfig& cfg) {
  std::ostringstream os;
  os << "data = " << cfg.data << "\n";
  os << "csv_timestamp = " << (cfg.csv_timestamp ? "true" : "false") << "\n";
  os << "data_seed = " << cfg.data_seed << "\n";
  os << "lookback = " << cfg.lookback << "\n";
  os << "horizon = " << cfg.horizon << "\n";
  os << "stride = " << cfg.stride << "\n";
  os << "toy_amplitude = " << fmt_double(cfg.toy_amplitude) << "\n";
  os << "toy_noise = " << fmt_double(cfg.toy_noise) << "\n";
  os << "toy_periods = " << cfg.toy_periods << "\n";
  os << "mixture_channels = " << cfg.mixture_channels << "\n";
  os << "mixture_length = " << cfg.mixture_length << "\n";
  os << "train_frac = " << fmt_double(cfg.train_frac) << "\n";
  os << "val_frac = " << fmt_double(cfg.val_frac) << "\n";
  os << "test_frac = " << fmt_double(cfg.test_frac) << "\n";
  os << "backbone = " << backbone_kind_name(cfg.backbone) << "\n";
  os << "depth = " << cfg.depth << "\n";
  os << "d_model = " << cfg.d_model << "\n";
  os << "heads = " << cfg.heads << "\n";
  os << "norm = " << norm_kind_name(cfg.norm) << "\n";
  os << "identifier = " << identifier_mode_name(cfg.identifier) << "\n";
  os << "instance_norm_io = " << (cfg.instance_norm_io ? "true" : "false")
     << "\n";
  os << "prototypes = " << cfg.prototypes << "\n";
  os << "tau = " << fmt_double(cfg.tau) << "\n";
  os << "sim_metric = " << sim_metric_name(cfg.sim_metric) << "\n";
  os << "sim_space = " << sim_space_name(cfg.sim_space) << "\n";
  os << "epochs = " << cfg.epochs << "\n";
  os << "batch_size = " << cfg.batch_size << "\n";
  os << "learning_rate = " << fmt_double(cfg.learning_rate) << "\n";
  os << "seed = " << cfg.seed << "\n";
  os << "loss = " << loss_kind_name(cfg.loss) << "\n";
  os << "patience = " << cfg.patience << "\n";
  os << "out_dir = " << cfg.out_dir << "\n";
  return os.str();
}

ExperimentConfig parse_experiment_config(const std::string& text) {
  ExperimentConfig cfg;
  std::set<std::string> seen;
  std::istringstream is(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const std::string stripped = trim(line);
    if (stripped.empty() || stripped.front() == '#') continue;
    const std::size_t eq = stripped.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(line_no) +
                                  ": expected key = value, got '" + stripped +
                                  "'");
    }
    const std::string key = trim(stripped.substr(0, eq));
    const std::string value = trim(stripped.substr(eq + 1));
    if (key.empty()) {
      throw std::invalid_argument("config line " + std::to_string(line_no) +
                                  ": empty key");
    }
    if (!seen.insert(key).second) {
      throw std::invalid_argument("config line " + std::to_string(line_no) +
                                  ": duplicate key '" + key + "'");
    }
    try {
      set_config_value(cfg, key, value);
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument("config line " + std::to_string(line_no) +
                                  ": " + e.what());
    }
  }
  return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw std::runtime_error("load_experiment_config: cannot open '" + path +
                             "'");
  }
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_experiment_config(buf.str());
}

void save_experiment_config(const std::string& path,
                            const ExperimentConfig& cfg) {
  std::ofstream out(path);
  if (!out) {
    throw std::runtime_error("save_experiment_config: cannot open '" + path +
                             "'");
  }
  out << experiment_config_text(cfg);
  if (!out) {
    throw std::runtime_error("save_experiment_config: write failed on '" +
                             path + "'");
  }
}

RawSeries realize_dataset(const ExperimentConfig& cfg) {
  if (cfg.data == "toy") {
    return gen_cid_toy(cfg.lookback, cfg.horizon, cfg.toy_amplitude,
                       cfg.toy_periods, cfg.toy_noise, cfg.data_seed);
  }
  if (cfg.data == "mixture") {
    return gen_sine_mixture(cfg.mixture_channels, cfg.mixture_length,
                            cfg.data_seed);
  }
  return load_csv(cfg.data, cfg.csv_timestamp);
}

BackboneConfig realize_backbone(const ExperimentConfig& cfg) {
  BackboneConfig b;
  b.kind = cfg.backbone;
  b.depth = cfg.depth;
  b.d_model = cfg.d_model;
  b.heads = cfg.heads;
  b.norm_kind = cfg.norm;
  b.identifier_mode = cfg.identifier;
  b.instance_norm_io = cfg.instance_norm_io;
  b.prototypes = cfg.prototypes;
  b.tau = cfg.tau;
  b.sim_metric = cfg.sim_metric;
  b.sim_space = cfg.sim_space;
  return b;
}

TrainConfig realize_training(const ExperimentConfig& cfg) {
  TrainConfig t;
  t.epochs = cfg.epochs;
  t.batch_size = cfg.batch_size;
  t.learning_rate = cfg.learning_rate;
  t.seed = cfg.seed;
  t.loss = cfg.loss;
  t.early_stop_patience = cfg.patience;
  return t;
}

SplitSpec realize_split(const ExperimentConfig& cfg) {
  SplitSpec s;
  s.train = cfg.train_frac;
  s.val = cfg.val_frac;
  s.test = cfg.test_frac;
  return s;
}

ExperimentData prepare_experiment_data(const RawSeries& series,
                                       const ExperimentConfig& cfg) {
  const ChronoSplit split = chronological_split(series, realize_split(cfg));
  ExperimentData data;
  data.train = make_windows(split.train, cfg.lookback, cfg.horizon, cfg.stride);
  data.val = make_windows(split.val, cfg.lookback, cfg.horizon, cfg.stride);
  data.test = make_windows(split.test, cfg.lookback, cfg.horizon, cfg.stride);
  return data;
}

}  // namespace chanorm
