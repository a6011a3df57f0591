#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cdvgm/tensor.hpp"

namespace cdvgm::data {

inline constexpr std::size_t kSlotsPerDay = 288;  // 5-minute slots

// Nonnegative traffic magnitudes, values [T_total, N, F] in (t, n, f) order.
// Feature 0 is flow.
struct RawSeries {
  Tensor values;
  std::size_t n_steps = 0;
  std::size_t n_nodes = 0;
  std::size_t n_features = 0;
  std::string source_name;
  std::size_t slot_minutes = 5;

  double value(std::size_t t, std::size_t n, std::size_t f) const {
    return values.data()[(t * n_nodes + n) * n_features + f];
  }
};

// Binary container:
//   "CDVG" u16 version, u32 T_total, u32 N, u32 F, then T_total*N*F
//   little-endian float64 in (t, n, f) order.
void save_dataset(const std::string& path, const RawSeries& series);
// Validates header against file size, rejects NaN and values below -1e-9
// (tiny negatives are clamped to zero).
RawSeries load_dataset(const std::string& path);

// Window i covers slots [i*stride, i*stride + t_in) as input and the next
// t_out slots as target (flow only). Windows are split 6:2:2 in temporal
// order: [0, train_end), [train_end, val_end), [val_end, count).
class DatasetWindows {
 public:
  DatasetWindows(std::shared_ptr<const RawSeries> raw, std::size_t t_in, std::size_t t_out, std::size_t stride);

  std::size_t count() const { return count_; }
  std::size_t train_end() const { return train_end_; }
  std::size_t val_end() const { return val_end_; }
  std::size_t t_in() const { return t_in_; }
  std::size_t t_out() const { return t_out_; }
  std::size_t stride() const { return stride_; }
  std::size_t n_nodes() const { return raw_->n_nodes; }
  std::size_t n_features() const { return raw_->n_features; }
  std::size_t window_start(std::size_t i) const { return i * stride_; }
  const RawSeries& raw() const { return *raw_; }

  // [B, F, N, t_in] and [B, N, t_out] for the listed windows.
  Tensor input_batch(std::span<const std::size_t> indices) const;
  Tensor target_batch(std::span<const std::size_t> indices) const;
  // Whole-range materializations [S, F, N, t_in] / [S, N, t_out].
  Tensor inputs() const;
  Tensor targets() const;

 private:
  std::shared_ptr<const RawSeries> raw_;
  std::size_t t_in_, t_out_, stride_;
  std::size_t count_, train_end_, val_end_;
};

DatasetWindows make_windows(const RawSeries& raw, std::size_t t_in = 12, std::size_t t_out = 12,
                            std::size_t stride = 1);

// Desk-scale fixture with daily periodicity, per-node phase offsets, a
// recurring sub-hour cycle, lagged coupling over a random virtual graph, day
// to day level variation and seeded noise. F = 3 (flow, occupancy, speed).
RawSeries synthetic_traffic(std::size_t n_nodes, std::size_t n_days, std::uint64_t seed);

struct Metrics {
  double mae = 0.0;
  double rmse = 0.0;
  double mape = 0.0;  // percent
  std::size_t count = 0;
  std::size_t mape_excluded = 0;  // entries with |truth| < 1
};

// MAE, RMSE and MAPE over all entries; MAPE skips truth entries below 1 in
// magnitude.
Metrics evaluate(const Tensor& pred, const Tensor& truth);

// Repeats each node's last observed flow across the horizon; [S', N, t_out]
// for windows [begin, end).
Tensor last_value_baseline(const DatasetWindows& w, std::size_t begin, std::size_t end);

// Mean training-range flow per (node, slot of day); [S', N, t_out].
Tensor historical_average_baseline(const DatasetWindows& w, std::size_t begin, std::size_t end);

std::vector<std::size_t> index_range(std::size_t begin, std::size_t end);

}  // namespace cdvgm::data
