#pragma once

#include <cstddef>

#include "chanorm/tensor.hpp"

namespace chanorm {

// A batch of lookback windows: values is B x L x C — B windows of L time
// steps over C channels, channels on the last axis in CSV column order.
struct SeriesBatch {
  Tensor values;
  std::size_t lookback = 0;
};

// A batch of forecast windows (targets or predictions): values is B x H x C.
struct ForecastBatch {
  Tensor values;
  std::size_t horizon = 0;
};

// Validate shape (rank 3, C >= 1) and finiteness, then wrap. The second
// axis becomes lookback/horizon.
SeriesBatch make_series_batch(Tensor values);
ForecastBatch make_forecast_batch(Tensor values);

// B x L x C -> B x C x L. Channel-as-token consumers (the shared embedding,
// the prototype window projection) want each channel's window contiguous.
Tensor channel_windows(const SeriesBatch& x);

}  // namespace chanorm
