#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "chanorm/series.hpp"
#include "chanorm/tensor.hpp"

namespace chanorm {

// A whole multivariate series, as generated or loaded: matrix is T x C with
// time on rows and channels on columns. timestamps is empty or carries one
// label per row.
struct RawSeries {
  Tensor matrix;
  std::vector<std::string> channel_names;
  std::vector<std::string> timestamps;

  std::size_t length() const {
    return matrix.ndim() == 2 ? matrix.shape[0] : 0;
  }
  std::size_t channels() const {
    return matrix.ndim() == 2 ? matrix.shape[1] : 0;
  }
};

// Chronological train/val/test fractions; each positive, summing to 1.
struct SplitSpec {
  double train = 0.6;
  double val = 0.2;
  double test = 0.2;
};

struct ChronoSplit {
  RawSeries train;
  RawSeries val;
  RawSeries test;
};

// Aligned forecasting pairs cut at a fixed stride: target window i starts
// exactly where input window i ends.
struct WindowSet {
  SeriesBatch inputs;     // B x L x C
  ForecastBatch targets;  // B x H x C
  std::size_t stride = 1;
};

// The two-channel identifiability trap. Every period of length L+H starts
// with a smooth curve shared by both channels (a seeded sum of three
// random-phase sinusoids, amplitude/2 peak, fresh phases per period) and
// ends with mirrored ramps: +amplitude*t/H on channel "up" and
// -amplitude*t/H on channel "down", t = 1..H. Lookback windows aligned at
// period starts are therefore elementwise identical across the channels
// while their targets diverge. Gaussian noise of scale `noise` is added to
// every element when nonzero. Requires amplitude > 0, periods >= 4.
RawSeries gen_cid_toy(std::size_t lookback, std::size_t horizon,
                      double amplitude, std::size_t periods, double noise,
                      std::uint64_t seed);

// Irreducible per-element MSE on noise-free aligned windows of the trap for
// any predictor that cannot tell the channels apart:
// amplitude^2 (H+1)(2H+1) / (6 H^2). The optimum shared output is the
// midpoint of the mirrored ramps.
double cid_toy_mse_bound(std::size_t horizon, double amplitude);

// C channels of seeded sinusoid mixtures in two frequency clusters (the
// first ceil(C/2) channels share the low-frequency basis, the rest the
// high one) plus Gaussian noise, so channels correlate strongly within a
// cluster and weakly across. amplitude_scale multiplies every sinusoid
// amplitude; 0 leaves pure noise. Requires C >= 2, T >= 1.
RawSeries gen_sine_mixture(std::size_t channels, std::size_t length,
                           std::uint64_t seed, double amplitude_scale = 1.0);

// Rectangular numeric CSV -> RawSeries. If the first non-blank row has any
// cell that does not parse as a number (ignoring the timestamp column), it
// is taken as a header naming the channels; otherwise channels are named
// ch0, ch1, ... When has_timestamp_col is set the first column becomes the
// timestamp labels instead of data. Blank lines are skipped. Ragged rows
// and bad cells are reported with 1-based file line / column numbers.
// Values must be finite.
RawSeries load_csv(const std::string& path, bool has_timestamp_col);

// Inverse of load_csv: header row (timestamp column first when present),
// then one row per time step with values printed so a round trip is exact.
void save_csv(const std::string& path, const RawSeries& s);

// Contiguous prefix/middle/suffix along time, no shuffling. Lengths are
// round(T*train), round(T*val), and the remainder; every segment must come
// out non-empty.
ChronoSplit chronological_split(const RawSeries& s, const SplitSpec& spec);

// Every (lookback, horizon) pair at the given stride, inputs B x L x C and
// targets B x H x C with B = floor((T - L - H) / stride) + 1.
WindowSet make_windows(const RawSeries& s, std::size_t lookback,
                       std::size_t horizon, std::size_t stride);

}  // namespace chanorm
