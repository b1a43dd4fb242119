#include "chanorm/datasets.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace chanorm {
namespace {

std::string double_text(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string trim(const std::string& s) {
  const char* ws = " \t\r";
  const std::size_t a = s.find_first_not_of(ws);
  if (a == std::string::npos) return "";
  const std::size_t b = s.find_last_not_of(ws);
  return s.substr(a, b - a + 1);
}

std::vector<std::string> split_cells(const std::string& line) {
  std::vector<std::string> cells;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string::npos) {
      cells.push_back(trim(line.substr(start)));
      break;
    }
    cells.push_back(trim(line.substr(start, comma - start)));
    start = comma + 1;
  }
  return cells;
}

bool parse_cell(const std::string& cell, double& out) {
  if (cell.empty()) return false;
  const char* first = cell.data();
  const char* last = first + cell.size();
  auto res = std::from_chars(first, last, out);
  return res.ec == std::errc() && res.ptr == last && std::isfinite(out);
}

void require_series(const RawSeries& s, const std::string& what) {
  if (s.matrix.ndim() != 2 || s.matrix.shape[0] == 0 ||
      s.matrix.shape[1] == 0)
    throw std::invalid_argument(what + ": series matrix must be T x C, got " +
                                s.matrix.shape_str());
  if (s.channel_names.size() != s.channels())
    throw std::invalid_argument(
        what + ": " + std::to_string(s.channel_names.size()) +
        " channel names for " + std::to_string(s.channels()) + " channels");
  if (!s.timestamps.empty() && s.timestamps.size() != s.length())
    throw std::invalid_argument(
        what + ": " + std::to_string(s.timestamps.size()) +
        " timestamps for " + std::to_string(s.length()) + " rows");
}

RawSeries slice_rows(const RawSeries& s, std::size_t begin, std::size_t end) {
  RawSeries out;
  const std::size_t c = s.channels();
  out.matrix = Tensor({end - begin, c});
  for (std::size_t t = begin; t < end; ++t)
    for (std::size_t j = 0; j < c; ++j)
      out.matrix(t - begin, j) = s.matrix(t, j);
  out.channel_names = s.channel_names;
  if (!s.timestamps.empty())
    out.timestamps.assign(s.timestamps.begin() + static_cast<long>(begin),
                          s.timestamps.begin() + static_cast<long>(end));
  return out;
}

}  // namespace

RawSeries gen_cid_toy(std::size_t lookback, std::size_t horizon,
                      double amplitude, std::size_t periods, double noise,
                      std::uint64_t seed) {
  if (lookback == 0 || horizon == 0)
    throw std::invalid_argument("gen_cid_toy: lookback and horizon must be "
                                "positive");
  if (!(amplitude > 0.0))
    throw std::invalid_argument("gen_cid_toy: amplitude must be positive");
  if (periods < 4)
    throw std::invalid_argument("gen_cid_toy: need at least 4 periods");
  if (!(noise >= 0.0))
    throw std::invalid_argument("gen_cid_toy: noise must be non-negative");

  const std::size_t period_len = lookback + horizon;
  const std::size_t total = periods * period_len;
  RawSeries out;
  out.matrix = Tensor::zeros({total, 2});
  out.channel_names = {"up", "down"};

  RngState rng(seed);
  RngState phase_rng = rng.split("cid toy phases");
  constexpr std::size_t kSines = 3;
  const double sine_amp = amplitude / (2.0 * static_cast<double>(kSines));
  for (std::size_t k = 0; k < periods; ++k) {
    double phases[kSines];
    for (std::size_t j = 0; j < kSines; ++j)
      phases[j] = phase_rng.uniform(0.0, 2.0 * std::numbers::pi);
    const std::size_t base = k * period_len;
    for (std::size_t i = 0; i < lookback; ++i) {
      double w = 0.0;
      for (std::size_t j = 0; j < kSines; ++j) {
        const double cycles = static_cast<double>(j + 1);
        w += sine_amp * std::sin(2.0 * std::numbers::pi * cycles *
                                     static_cast<double>(i) /
                                     static_cast<double>(lookback) +
                                 phases[j]);
      }
      out.matrix(base + i, 0) = w;
      out.matrix(base + i, 1) = w;
    }
    for (std::size_t t = 1; t <= horizon; ++t) {
      const double ramp = amplitude * static_cast<double>(t) /
                          static_cast<double>(horizon);
      out.matrix(base + lookback + t - 1, 0) = ramp;
      out.matrix(base + lookback + t - 1, 1) = -ramp;
    }
  }

  if (noise > 0.0) {
    RngState noise_rng = rng.split("cid toy noise");
    for (double& v : out.matrix.data) v += noise * noise_rng.next_normal();
  }
  return out;
}

double cid_toy_mse_bound(std::size_t horizon, double amplitude) {
  if (horizon == 0)
    throw std::invalid_argument("cid_toy_mse_bound: horizon must be positive");
  const double h = static_cast<double>(horizon);
  return amplitude * amplitude * (h + 1.0) * (2.0 * h + 1.0) / (6.0 * h * h);
}

RawSeries gen_sine_mixture(std::size_t channels, std::size_t length,
                           std::uint64_t seed, double amplitude_scale) {
  if (channels < 2)
    throw std::invalid_argument("gen_sine_mixture: need at least 2 channels");
  if (length == 0)
    throw std::invalid_argument("gen_sine_mixture: length must be positive");

  constexpr std::size_t kSines = 3;
  const double low_freqs[kSines] = {3.0, 5.0, 7.0};
  const double high_freqs[kSines] = {11.0, 17.0, 23.0};
  constexpr double kNoiseSigma = 0.1;
  constexpr double kPhaseJitter = 0.15;

  RngState rng(seed);
  RngState amp_rng = rng.split("mixture amplitudes");
  RngState phase_rng = rng.split("mixture phases");
  RngState noise_rng = rng.split("mixture noise");

  double base_phase[2][kSines];
  for (std::size_t g = 0; g < 2; ++g)
    for (std::size_t j = 0; j < kSines; ++j)
      base_phase[g][j] = phase_rng.uniform(0.0, 2.0 * std::numbers::pi);

  RawSeries out;
  out.matrix = Tensor::zeros({length, channels});
  const std::size_t low_count = (channels + 1) / 2;
  for (std::size_t c = 0; c < channels; ++c) {
    const bool low = c < low_count;
    out.channel_names.push_back((low ? "low" : "high") +
                                std::to_string(low ? c : c - low_count));
    const double* freqs = low ? low_freqs : high_freqs;
    double amps[kSines];
    double phases[kSines];
    for (std::size_t j = 0; j < kSines; ++j) {
      amps[j] = amplitude_scale * amp_rng.uniform(0.6, 1.4);
      phases[j] = base_phase[low ? 0 : 1][j] +
                  kPhaseJitter * phase_rng.next_normal();
    }
    for (std::size_t t = 0; t < length; ++t) {
      double v = 0.0;
      for (std::size_t j = 0; j < kSines; ++j)
        v += amps[j] * std::sin(2.0 * std::numbers::pi * freqs[j] *
                                    static_cast<double>(t) /
                                    static_cast<double>(length) +
                                phases[j]);
      out.matrix(t, c) = v + kNoiseSigma * noise_rng.next_normal();
    }
  }
  return out;
}

RawSeries load_csv(const std::string& path, bool has_timestamp_col) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_csv: cannot open '" + path + "'");

  RawSeries out;
  std::string line;
  std::size_t line_no = 0;
  std::size_t expected_fields = 0;
  bool saw_header = false;
  bool saw_data = false;
  std::vector<double> values;
  std::size_t rows = 0;

  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    std::vector<std::string> cells = split_cells(line);

    if (!saw_header && !saw_data) {
      const std::size_t first_data_col = has_timestamp_col ? 1 : 0;
      if (cells.size() <= first_data_col)
        throw std::runtime_error("load_csv: row " + std::to_string(line_no) +
                                 " has no data columns");
      bool numeric = true;
      for (std::size_t j = first_data_col; j < cells.size() && numeric; ++j) {
        double v;
        numeric = parse_cell(cells[j], v);
      }
      if (!numeric) {
        saw_header = true;
        expected_fields = cells.size();
        out.channel_names.assign(cells.begin() + static_cast<long>(
                                                     first_data_col),
                                 cells.end());
        continue;
      }
      expected_fields = cells.size();
      for (std::size_t j = first_data_col; j < cells.size(); ++j)
        out.channel_names.push_back("ch" + std::to_string(j -
                                                          first_data_col));
    }

    if (cells.size() != expected_fields)
      throw std::runtime_error(
          "load_csv: row " + std::to_string(line_no) + " has " +
          std::to_string(cells.size()) + " fields, expected " +
          std::to_string(expected_fields));
    std::size_t j = 0;
    if (has_timestamp_col) {
      out.timestamps.push_back(cells[0]);
      j = 1;
    }
    for (; j < cells.size(); ++j) {
      double v;
      if (!parse_cell(cells[j], v))
        throw std::runtime_error(
            "load_csv: row " + std::to_string(line_no) + ", column " +
            std::to_string(j + 1) + ": cannot parse '" + cells[j] +
            "' as a finite number");
      values.push_back(v);
    }
    ++rows;
    saw_data = true;
  }
  if (!saw_data) throw std::runtime_error("load_csv: no data rows in '" +
                                          path + "'");

  const std::size_t cols = out.channel_names.size();
  out.matrix = Tensor({rows, cols});
  out.matrix.data = std::move(values);
  return out;
}

void save_csv(const std::string& path, const RawSeries& s) {
  require_series(s, "save_csv");
  std::ofstream outf(path);
  if (!outf)
    throw std::runtime_error("save_csv: cannot open '" + path +
                             "' for writing");
  std::ostringstream text;
  const bool stamped = !s.timestamps.empty();
  if (stamped) text << "timestamp,";
  for (std::size_t j = 0; j < s.channels(); ++j) {
    if (j) text << ',';
    text << s.channel_names[j];
  }
  text << '\n';
  for (std::size_t t = 0; t < s.length(); ++t) {
    if (stamped) text << s.timestamps[t] << ',';
    for (std::size_t j = 0; j < s.channels(); ++j) {
      if (j) text << ',';
      text << double_text(s.matrix(t, j));
    }
    text << '\n';
  }
  outf << text.str();
  if (!outf) throw std::runtime_error("save_csv: write to '" + path +
                                      "' failed");
}

ChronoSplit chronological_split(const RawSeries& s, const SplitSpec& spec) {
  require_series(s, "chronological_split");
  if (!(spec.train > 0.0) || !(spec.val > 0.0) || !(spec.test > 0.0))
    throw std::invalid_argument(
        "chronological_split: all three fractions must be positive");
  if (std::fabs(spec.train + spec.val + spec.test - 1.0) > 1e-9)
    throw std::invalid_argument(
        "chronological_split: fractions must sum to 1, got " +
        double_text(spec.train + spec.val + spec.test));

  const std::size_t total = s.length();
  const auto n_train = static_cast<std::size_t>(
      std::llround(static_cast<double>(total) * spec.train));
  const auto n_val = static_cast<std::size_t>(
      std::llround(static_cast<double>(total) * spec.val));
  if (n_train == 0 || n_val == 0 || n_train + n_val >= total)
    throw std::invalid_argument(
        "chronological_split: a segment came out empty for " +
        std::to_string(total) + " rows");

  ChronoSplit split;
  split.train = slice_rows(s, 0, n_train);
  split.val = slice_rows(s, n_train, n_train + n_val);
  split.test = slice_rows(s, n_train + n_val, total);
  return split;
}

WindowSet make_windows(const RawSeries& s, std::size_t lookback,
                       std::size_t horizon, std::size_t stride) {
  require_series(s, "make_windows");
  if (lookback == 0 || horizon == 0)
    throw std::invalid_argument(
        "make_windows: lookback and horizon must be positive");
  if (stride == 0)
    throw std::invalid_argument("make_windows: stride must be positive");
  const std::size_t total = s.length();
  if (total < lookback + horizon)
    throw std::invalid_argument(
        "make_windows: series has " + std::to_string(total) +
        " rows, shorter than lookback+horizon = " +
        std::to_string(lookback + horizon));

  const std::size_t count = (total - lookback - horizon) / stride + 1;
  const std::size_t c = s.channels();
  Tensor xs({count, lookback, c});
  Tensor ys({count, horizon, c});
  for (std::size_t b = 0; b < count; ++b) {
    const std::size_t start = b * stride;
    for (std::size_t i = 0; i < lookback; ++i)
      for (std::size_t j = 0; j < c; ++j)
        xs(b, i, j) = s.matrix(start + i, j);
    for (std::size_t i = 0; i < horizon; ++i)
      for (std::size_t j = 0; j < c; ++j)
        ys(b, i, j) = s.matrix(start + lookback + i, j);
  }
  WindowSet w;
  w.inputs = make_series_batch(std::move(xs));
  w.targets = make_forecast_batch(std::move(ys));
  w.stride = stride;
  return w;
}

}  // namespace chanorm
