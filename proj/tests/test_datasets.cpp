#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "chanorm/datasets.hpp"
#include "chanorm/series.hpp"
#include "chanorm/tensor.hpp"
#include "doctest.h"

using namespace chanorm;

namespace {

double pearson(const Tensor& m, std::size_t a, std::size_t b) {
  const std::size_t n = m.shape[0];
  double ma = 0.0, mb = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    ma += m(t, a);
    mb += m(t, b);
  }
  ma /= static_cast<double>(n);
  mb /= static_cast<double>(n);
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    const double da = m(t, a) - ma;
    const double db = m(t, b) - mb;
    cov += da * db;
    va += da * da;
    vb += db * db;
  }
  return cov / std::sqrt(va * vb);
}

RawSeries arange_series(std::size_t rows, std::size_t cols) {
  RawSeries s;
  s.matrix = Tensor({rows, cols});
  for (std::size_t t = 0; t < rows; ++t) {
    for (std::size_t j = 0; j < cols; ++j)
      s.matrix(t, j) = static_cast<double>(t * cols + j);
    s.timestamps.push_back("t" + std::to_string(t));
  }
  for (std::size_t j = 0; j < cols; ++j)
    s.channel_names.push_back("ch" + std::to_string(j));
  return s;
}

struct TempFile {
  std::string path;
  explicit TempFile(const std::string& name) : path(name) {}
  ~TempFile() { std::remove(path.c_str()); }
};

}  // namespace

TEST_CASE("trap generator: aligned windows identical across channels") {
  const std::size_t L = 16, H = 6, P = 5;
  RawSeries s = gen_cid_toy(L, H, 1.5, P, 0.0, 3);
  CHECK(s.length() == P * (L + H));
  CHECK(s.channels() == 2);
  CHECK(s.channel_names == std::vector<std::string>{"up", "down"});
  CHECK(s.matrix.all_finite());

  WindowSet w = make_windows(s, L, H, L + H);
  CHECK(w.inputs.values.shape == std::vector<std::size_t>{P, L, 2});
  for (std::size_t k = 0; k < P; ++k)
    for (std::size_t i = 0; i < L; ++i)
      CHECK(w.inputs.values(k, i, 0) == w.inputs.values(k, i, 1));

  // The shared curve is non-constant (instance normalization must not wipe
  // it out) and distinct across periods.
  double spread = 0.0;
  for (std::size_t i = 1; i < L; ++i)
    spread = std::max(spread, std::abs(w.inputs.values(0, i, 0) -
                                       w.inputs.values(0, 0, 0)));
  CHECK(spread > 1e-3);
  CHECK(max_abs_diff(s.matrix, s.matrix) == 0.0);
  double period_gap = 0.0;
  for (std::size_t i = 0; i < L; ++i)
    period_gap = std::max(period_gap, std::abs(w.inputs.values(0, i, 0) -
                                               w.inputs.values(1, i, 0)));
  CHECK(period_gap > 1e-3);
}

TEST_CASE("trap generator: mirrored ramp targets") {
  const std::size_t L = 8, H = 24, P = 4;
  const double A = 1.25;
  RawSeries s = gen_cid_toy(L, H, A, P, 0.0, 9);
  WindowSet w = make_windows(s, L, H, L + H);
  for (std::size_t k = 0; k < P; ++k) {
    for (std::size_t t = 0; t < H; ++t) {
      const double y0 = w.targets.values(k, t, 0);
      const double y1 = w.targets.values(k, t, 1);
      CHECK(y0 == -y1);
      const double gap = 2.0 * A * static_cast<double>(t + 1) /
                         static_cast<double>(H);
      CHECK(y0 - y1 == doctest::Approx(gap).epsilon(1e-12));
    }
    // The ramp ends at full amplitude.
    CHECK(w.targets.values(k, H - 1, 0) == doctest::Approx(A));
  }
}

TEST_CASE("trap generator: brute-force shared predictor hits the bound") {
  const std::size_t L = 8, H = 24, P = 6;
  RawSeries s = gen_cid_toy(L, H, 1.0, P, 0.0, 17);
  WindowSet w = make_windows(s, L, H, L + H);

  // Any predictor blind to channel identity must emit one shared value per
  // (period, step). Minimize the squared error of that shared value by grid
  // search and compare the best reachable MSE against the closed form.
  const std::size_t kGrid = 6001;
  double total = 0.0;
  for (std::size_t k = 0; k < P; ++k) {
    for (std::size_t t = 0; t < H; ++t) {
      const double y0 = w.targets.values(k, t, 0);
      const double y1 = w.targets.values(k, t, 1);
      double best = 1e300;
      for (std::size_t g = 0; g < kGrid; ++g) {
        const double p = -1.5 + 3.0 * static_cast<double>(g) /
                                    static_cast<double>(kGrid - 1);
        const double err = 0.5 * ((p - y0) * (p - y0) + (p - y1) * (p - y1));
        best = std::min(best, err);
      }
      total += best;
    }
  }
  const double brute = total / static_cast<double>(P * H);
  CHECK(brute == doctest::Approx(cid_toy_mse_bound(H, 1.0)).epsilon(1e-10));
  CHECK(cid_toy_mse_bound(24, 1.0) ==
        doctest::Approx(0.3544560185185185).epsilon(1e-14));
  // Large-horizon limit: A^2 / 3.
  CHECK(cid_toy_mse_bound(100000, 2.0) ==
        doctest::Approx(4.0 / 3.0).epsilon(1e-4));
}

TEST_CASE("trap generator: determinism and noise control") {
  RawSeries a = gen_cid_toy(12, 4, 1.0, 4, 0.0, 21);
  RawSeries b = gen_cid_toy(12, 4, 1.0, 4, 0.0, 21);
  CHECK(max_abs_diff(a.matrix, b.matrix) == 0.0);
  RawSeries c = gen_cid_toy(12, 4, 1.0, 4, 0.0, 22);
  CHECK(max_abs_diff(a.matrix, c.matrix) > 1e-6);

  RawSeries noisy = gen_cid_toy(12, 4, 1.0, 4, 0.01, 21);
  const double dist = max_abs_diff(a.matrix, noisy.matrix);
  CHECK(dist > 0.0);
  CHECK(dist < 0.08);  // a few sigma of the 0.01 noise

  CHECK_THROWS_AS(gen_cid_toy(0, 4, 1.0, 4, 0.0, 1), std::invalid_argument);
  CHECK_THROWS_AS(gen_cid_toy(8, 0, 1.0, 4, 0.0, 1), std::invalid_argument);
  CHECK_THROWS_AS(gen_cid_toy(8, 4, 0.0, 4, 0.0, 1), std::invalid_argument);
  CHECK_THROWS_AS(gen_cid_toy(8, 4, 1.0, 3, 0.0, 1), std::invalid_argument);
  CHECK_THROWS_AS(gen_cid_toy(8, 4, 1.0, 4, -0.1, 1), std::invalid_argument);
}

TEST_CASE("sine mixture: clustered correlation structure") {
  RawSeries s = gen_sine_mixture(8, 4096, 11);
  CHECK(s.length() == 4096);
  CHECK(s.channels() == 8);
  CHECK(s.channel_names[0] == "low0");
  CHECK(s.channel_names[7] == "high3");

  double min_within = 1.0, max_across = -1.0;
  for (std::size_t a = 0; a < 8; ++a) {
    for (std::size_t b = a + 1; b < 8; ++b) {
      const double r = pearson(s.matrix, a, b);
      const bool same_cluster = (a < 4) == (b < 4);
      if (same_cluster)
        min_within = std::min(min_within, r);
      else
        max_across = std::max(max_across, r);
    }
  }
  CHECK(min_within > max_across + 0.1);

  RawSeries again = gen_sine_mixture(8, 4096, 11);
  CHECK(max_abs_diff(s.matrix, again.matrix) == 0.0);
  CHECK_THROWS_AS(gen_sine_mixture(1, 64, 1), std::invalid_argument);
  CHECK_THROWS_AS(gen_sine_mixture(4, 0, 1), std::invalid_argument);
}

TEST_CASE("sine mixture: zero amplitudes leave centered noise") {
  RawSeries s = gen_sine_mixture(4, 20000, 5, 0.0);
  double mean = 0.0;
  for (double v : s.matrix.data) mean += v;
  mean /= static_cast<double>(s.matrix.numel());
  CHECK(std::abs(mean) < 0.01);
  double var = 0.0;
  for (double v : s.matrix.data) var += (v - mean) * (v - mean);
  var /= static_cast<double>(s.matrix.numel());
  CHECK(var == doctest::Approx(0.01).epsilon(0.1));  // sigma = 0.1
}

TEST_CASE("csv round trip preserves values, names, timestamps") {
  RawSeries s;
  s.matrix = Tensor({4, 3});
  const double vals[12] = {1.0 / 3.0,  -2.718281828459045e-5, 9.87654321e12,
                           1e-300,     0.0,                   -17.25,
                           3.141592653589793, 2.0,            -0.0,
                           42.0,       1.0000000000000002,    -1e16};
  for (std::size_t i = 0; i < 12; ++i) s.matrix.data[i] = vals[i];
  s.channel_names = {"load", "temp", "rpm"};
  s.timestamps = {"2021-01-01 00:00", "2021-01-01 01:00", "2021-01-01 02:00",
                  "2021-01-01 03:00"};

  TempFile f("tmp_roundtrip.csv");
  save_csv(f.path, s);
  RawSeries back = load_csv(f.path, true);
  CHECK(back.channel_names == s.channel_names);
  CHECK(back.timestamps == s.timestamps);
  REQUIRE(back.matrix.shape == s.matrix.shape);
  CHECK(max_abs_diff(back.matrix, s.matrix) == 0.0);
}

TEST_CASE("csv loading: headerless, header, and error reporting") {
  TempFile plain("tmp_plain.csv");
  {
    std::ofstream out(plain.path);
    out << "1,2\n3,4\n5.5,-6e-2\n\n";
  }
  RawSeries s = load_csv(plain.path, false);
  CHECK(s.length() == 3);
  CHECK(s.channels() == 2);
  CHECK(s.channel_names == std::vector<std::string>{"ch0", "ch1"});
  CHECK(s.timestamps.empty());
  CHECK(s.matrix(2, 1) == -6e-2);

  TempFile dated("tmp_dated.csv");
  {
    std::ofstream out(dated.path);
    out << "date,a,b\r\n2020-01-01,1,2\r\n2020-01-02,3,4\r\n";
  }
  RawSeries d = load_csv(dated.path, true);
  CHECK(d.channel_names == std::vector<std::string>{"a", "b"});
  CHECK(d.timestamps == std::vector<std::string>{"2020-01-01", "2020-01-02"});
  CHECK(d.matrix(1, 0) == 3.0);

  TempFile ragged("tmp_ragged.csv");
  {
    std::ofstream out(ragged.path);
    out << "a,b\n1,2\n3\n";
  }
  CHECK_THROWS_WITH_AS(load_csv(ragged.path, false),
                       doctest::Contains("row 3"), std::runtime_error);

  TempFile bad("tmp_bad.csv");
  {
    std::ofstream out(bad.path);
    out << "a,b\n1,nan\n";
  }
  CHECK_THROWS_WITH_AS(load_csv(bad.path, false),
                       doctest::Contains("row 2, column 2"),
                       std::runtime_error);

  CHECK_THROWS_WITH_AS(load_csv("does_not_exist.csv", false),
                       doctest::Contains("cannot open"), std::runtime_error);

  TempFile empty("tmp_empty.csv");
  {
    std::ofstream out(empty.path);
    out << "\n\n";
  }
  CHECK_THROWS_WITH_AS(load_csv(empty.path, false),
                       doctest::Contains("no data rows"), std::runtime_error);
}

TEST_CASE("chronological split: pinned ratios and exhaustiveness") {
  RawSeries s = arange_series(100, 2);

  ChronoSplit sixtwo = chronological_split(s, SplitSpec{0.6, 0.2, 0.2});
  CHECK(sixtwo.train.length() == 60);
  CHECK(sixtwo.val.length() == 20);
  CHECK(sixtwo.test.length() == 20);

  ChronoSplit seven = chronological_split(s, SplitSpec{0.7, 0.1, 0.2});
  CHECK(seven.train.length() == 70);
  CHECK(seven.val.length() == 10);
  CHECK(seven.test.length() == 20);

  // Disjoint, ordered, exhaustive: concatenation reproduces the original.
  std::size_t row = 0;
  for (const RawSeries* part : {&seven.train, &seven.val, &seven.test}) {
    for (std::size_t t = 0; t < part->length(); ++t, ++row) {
      CHECK(part->matrix(t, 0) == s.matrix(row, 0));
      CHECK(part->matrix(t, 1) == s.matrix(row, 1));
      CHECK(part->timestamps[t] == s.timestamps[row]);
    }
    CHECK(part->channel_names == s.channel_names);
  }
  CHECK(row == 100);

  CHECK_THROWS_AS(chronological_split(s, SplitSpec{0.5, 0.2, 0.2}),
                  std::invalid_argument);
  CHECK_THROWS_AS(chronological_split(s, SplitSpec{0.8, 0.0, 0.2}),
                  std::invalid_argument);
  RawSeries tiny = arange_series(2, 1);
  CHECK_THROWS_AS(chronological_split(tiny, SplitSpec{0.5, 0.25, 0.25}),
                  std::invalid_argument);
}

TEST_CASE("window extraction: counts and slicing oracle") {
  RawSeries s = gen_sine_mixture(3, 30, 13);

  WindowSet one = make_windows(s, 20, 10, 1);
  CHECK(one.inputs.values.shape == std::vector<std::size_t>{1, 20, 3});
  CHECK(one.targets.values.shape == std::vector<std::size_t>{1, 10, 3});

  WindowSet three = make_windows(s, 20, 8, 1);
  CHECK(three.inputs.values.shape[0] == 3);

  WindowSet strided = make_windows(s, 5, 3, 4);
  CHECK(strided.inputs.values.shape[0] == (30 - 5 - 3) / 4 + 1);  // 6
  CHECK(strided.stride == 4);
  for (std::size_t b = 0; b < strided.inputs.values.shape[0]; ++b) {
    const std::size_t start = b * 4;
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 3; ++j)
        CHECK(strided.inputs.values(b, i, j) == s.matrix(start + i, j));
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 3; ++j)
        CHECK(strided.targets.values(b, i, j) ==
              s.matrix(start + 5 + i, j));
  }

  CHECK_THROWS_AS(make_windows(s, 28, 3, 1), std::invalid_argument);
  CHECK_THROWS_AS(make_windows(s, 5, 3, 0), std::invalid_argument);
  CHECK_THROWS_AS(make_windows(s, 0, 3, 1), std::invalid_argument);
}
