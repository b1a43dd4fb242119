#include "chanorm/series.hpp"

#include <stdexcept>
#include <string>
#include <utility>

namespace chanorm {

namespace {

Tensor checked_window_batch(Tensor values, const char* what) {
  if (values.ndim() != 3)
    throw std::invalid_argument(std::string(what) +
                                ": expected a rank-3 B x T x C tensor, got " +
                                values.shape_str());
  for (std::size_t i = 0; i < 3; ++i)
    if (values.shape[i] == 0)
      throw std::invalid_argument(std::string(what) +
                                  ": every dimension must be nonzero, got " +
                                  values.shape_str());
  if (!values.all_finite())
    throw std::invalid_argument(std::string(what) +
                                ": values must be finite");
  return values;
}

}  // namespace

SeriesBatch make_series_batch(Tensor values) {
  SeriesBatch out;
  out.values = checked_window_batch(std::move(values), "make_series_batch");
  out.lookback = out.values.shape[1];
  return out;
}

ForecastBatch make_forecast_batch(Tensor values) {
  ForecastBatch out;
  out.values = checked_window_batch(std::move(values), "make_forecast_batch");
  out.horizon = out.values.shape[1];
  return out;
}

Tensor channel_windows(const SeriesBatch& x) {
  if (x.values.ndim() != 3)
    throw std::invalid_argument("channel_windows: expected B x L x C values, got " +
                                x.values.shape_str());
  const std::size_t b = x.values.shape[0];
  const std::size_t l = x.values.shape[1];
  const std::size_t c = x.values.shape[2];
  Tensor out({b, c, l});
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t t = 0; t < l; ++t)
      for (std::size_t ch = 0; ch < c; ++ch)
        out(bi, ch, t) = x.values(bi, t, ch);
  return out;
}

}  // namespace chanorm
