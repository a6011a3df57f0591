#include "cdvgm/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>

#include "cdvgm/errors.hpp"
#include "cdvgm/rng.hpp"

namespace cdvgm::data {

namespace {

constexpr char kMagic[4] = {'C', 'D', 'V', 'G'};
constexpr std::uint16_t kVersion = 1;
constexpr std::size_t kHeaderBytes = 4 + 2 + 3 * 4;

void put_le(std::string& buf, std::uint64_t v, int n) {
  for (int i = 0; i < n; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_le(const std::string& buf, std::size_t pos, int n) {
  std::uint64_t v = 0;
  for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
  return v;
}

}  // namespace

void save_dataset(const std::string& path, const RawSeries& series) {
  if (series.values.shape() != Shape{series.n_steps, series.n_nodes, series.n_features}) {
    throw ShapeError("save_dataset: values " + shape_str(series.values.shape()) + " disagree with declared dims");
  }
  std::string buf(kMagic, sizeof(kMagic));
  put_le(buf, kVersion, 2);
  put_le(buf, series.n_steps, 4);
  put_le(buf, series.n_nodes, 4);
  put_le(buf, series.n_features, 4);
  buf.reserve(buf.size() + series.values.numel() * 8);
  for (double v : series.values.data()) put_le(buf, std::bit_cast<std::uint64_t>(v), 8);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("dataset: cannot open '" + path + "' for writing");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw DataError("dataset: write to '" + path + "' failed");
}

RawSeries load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("dataset: cannot open '" + path + "'");
  const std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < kHeaderBytes) {
    throw DataError("dataset " + path + ": header needs " + std::to_string(kHeaderBytes) + " bytes, file has " +
                    std::to_string(buf.size()));
  }
  if (buf.compare(0, 4, kMagic, 4) != 0) throw DataError("dataset " + path + ": bad magic bytes (expected CDVG)");
  if (const auto v = get_le(buf, 4, 2); v != kVersion) {
    throw DataError("dataset " + path + ": unsupported format version " + std::to_string(v));
  }
  RawSeries r;
  r.n_steps = get_le(buf, 6, 4);
  r.n_nodes = get_le(buf, 10, 4);
  r.n_features = get_le(buf, 14, 4);
  r.source_name = path;
  if (r.n_steps == 0 || r.n_nodes == 0 || r.n_features == 0) {
    throw DataError("dataset " + path + ": header declares an empty dimension");
  }
  const std::size_t count = r.n_steps * r.n_nodes * r.n_features;
  const std::size_t expected = kHeaderBytes + count * 8;
  if (buf.size() != expected) {
    throw DataError("dataset " + path + ": header declares T=" + std::to_string(r.n_steps) + " N=" +
                    std::to_string(r.n_nodes) + " F=" + std::to_string(r.n_features) + ", expected " +
                    std::to_string(expected) + " bytes, actual " + std::to_string(buf.size()));
  }
  std::vector<double> values(count);
  for (std::size_t i = 0; i < count; ++i) {
    double v = std::bit_cast<double>(get_le(buf, kHeaderBytes + 8 * i, 8));
    if (std::isnan(v) || std::isinf(v)) throw DataError("dataset " + path + ": non-finite value at index " + std::to_string(i));
    if (v < -1e-9) {
      throw DataError("dataset " + path + ": negative value " + std::to_string(v) + " at index " + std::to_string(i));
    }
    values[i] = v < 0.0 ? 0.0 : v;
  }
  r.values = Tensor::from({r.n_steps, r.n_nodes, r.n_features}, std::move(values));
  return r;
}

DatasetWindows::DatasetWindows(std::shared_ptr<const RawSeries> raw, std::size_t t_in, std::size_t t_out,
                               std::size_t stride)
    : raw_(std::move(raw)), t_in_(t_in), t_out_(t_out), stride_(stride) {
  if (t_in_ == 0 || t_out_ == 0 || stride_ == 0) throw DataError("make_windows: t_in, t_out and stride must be positive");
  if (raw_->n_steps < t_in_ + t_out_) {
    throw DataError("make_windows: series of " + std::to_string(raw_->n_steps) + " steps is shorter than t_in + t_out = " +
                    std::to_string(t_in_ + t_out_));
  }
  count_ = (raw_->n_steps - t_in_ - t_out_) / stride_ + 1;
  train_end_ = count_ * 6 / 10;
  val_end_ = count_ * 8 / 10;
}

Tensor DatasetWindows::input_batch(std::span<const std::size_t> indices) const {
  const std::size_t b = indices.size(), f = n_features(), n = n_nodes();
  std::vector<double> out(b * f * n * t_in_);
  const auto src = raw_->values.data();
  for (std::size_t i = 0; i < b; ++i) {
    if (indices[i] >= count_) throw ShapeError("input_batch: window index " + std::to_string(indices[i]) + " out of range");
    const std::size_t start = window_start(indices[i]);
    for (std::size_t t = 0; t < t_in_; ++t) {
      const double* row = src.data() + (start + t) * n * f;
      for (std::size_t node = 0; node < n; ++node) {
        for (std::size_t c = 0; c < f; ++c) out[((i * f + c) * n + node) * t_in_ + t] = row[node * f + c];
      }
    }
  }
  return Tensor::from({b, f, n, t_in_}, std::move(out));
}

Tensor DatasetWindows::target_batch(std::span<const std::size_t> indices) const {
  const std::size_t b = indices.size(), f = n_features(), n = n_nodes();
  std::vector<double> out(b * n * t_out_);
  const auto src = raw_->values.data();
  for (std::size_t i = 0; i < b; ++i) {
    if (indices[i] >= count_) throw ShapeError("target_batch: window index " + std::to_string(indices[i]) + " out of range");
    const std::size_t start = window_start(indices[i]) + t_in_;
    for (std::size_t t = 0; t < t_out_; ++t) {
      for (std::size_t node = 0; node < n; ++node) out[(i * n + node) * t_out_ + t] = src[((start + t) * n + node) * f];
    }
  }
  return Tensor::from({b, n, t_out_}, std::move(out));
}

Tensor DatasetWindows::inputs() const { return input_batch(index_range(0, count_)); }
Tensor DatasetWindows::targets() const { return target_batch(index_range(0, count_)); }

DatasetWindows make_windows(const RawSeries& raw, std::size_t t_in, std::size_t t_out, std::size_t stride) {
  return DatasetWindows(std::make_shared<const RawSeries>(raw), t_in, t_out, stride);
}

std::vector<std::size_t> index_range(std::size_t begin, std::size_t end) {
  std::vector<std::size_t> out;
  for (std::size_t i = begin; i < end; ++i) out.push_back(i);
  return out;
}

RawSeries synthetic_traffic(std::size_t n_nodes, std::size_t n_days, std::uint64_t seed) {
  if (n_nodes < 2) throw DomainError("synthetic_traffic: n_nodes must be >= 2");
  if (n_days < 1) throw DomainError("synthetic_traffic: n_days must be >= 1");
  Rng rng = rng_stream(seed, "synth");
  constexpr double kTwoPi = 2.0 * std::numbers::pi;
  constexpr std::size_t kFeatures = 3;
  const std::size_t steps = n_days * kSlotsPerDay;

  struct Node {
    double level, phase, cycle_amp, cycle_phase, capacity, free_speed;
    std::vector<std::size_t> parents;
    std::vector<double> weights;
    std::vector<std::size_t> lags;
  };
  std::vector<Node> nodes(n_nodes);
  for (std::size_t i = 0; i < n_nodes; ++i) {
    auto& nd = nodes[i];
    nd.level = rng.uniform(40.0, 120.0);
    nd.phase = rng.uniform(-12.0, 12.0);  // slots
    nd.cycle_amp = rng.uniform(0.25, 0.35);
    nd.cycle_phase = rng.uniform(0.0, kTwoPi);
    nd.capacity = nd.level * rng.uniform(2.0, 3.0);
    nd.free_speed = rng.uniform(60.0, 70.0);
    // Incoming weights sum to 0.5 so that coupling around cycles stays stable.
    const std::size_t n_parents = 1 + rng.below(2);
    double total = 0.0;
    for (std::size_t k = 0; k < n_parents; ++k) {
      std::size_t j = rng.below(n_nodes - 1);
      if (j >= i) ++j;
      nd.parents.push_back(j);
      nd.weights.push_back(rng.uniform(0.5, 1.0));
      nd.lags.push_back(1 + rng.below(3));
      total += nd.weights.back();
    }
    for (double& wk : nd.weights) wk *= 0.5 / total;
  }
  std::vector<double> day_factor(n_days * n_nodes);
  for (std::size_t d = 0; d < n_days; ++d) {
    const double shared = rng.uniform(0.8, 1.2);
    for (std::size_t i = 0; i < n_nodes; ++i) day_factor[d * n_nodes + i] = shared * rng.uniform(0.95, 1.05);
  }

  // Two rush-hour peaks on a night floor, in units of the node level.
  auto profile = [](double slot) {
    const double h = slot * 24.0 / static_cast<double>(kSlotsPerDay);
    auto bump = [h](double centre, double width) {
      double d = std::fabs(h - centre);
      d = std::min(d, 24.0 - d);
      return std::exp(-0.5 * (d / width) * (d / width));
    };
    return 0.15 + 0.9 * bump(8.0, 1.5) + 0.5 * bump(13.0, 3.0) + 0.8 * bump(17.5, 2.0);
  };
  const double cycle_period = static_cast<double>(kSlotsPerDay) / 20.0;

  std::vector<double> base(steps * n_nodes), dev(steps * n_nodes, 0.0), latent(n_nodes, 0.0);
  for (std::size_t t = 0; t < steps; ++t) {
    const std::size_t day = t / kSlotsPerDay;
    const double slot = static_cast<double>(t % kSlotsPerDay);
    for (std::size_t i = 0; i < n_nodes; ++i) {
      const auto& nd = nodes[i];
      const double level = nd.level * day_factor[day * n_nodes + i];
      const double cycle = nd.cycle_amp * std::sin(kTwoPi * slot / cycle_period + nd.cycle_phase);
      base[t * n_nodes + i] = level * (profile(slot - nd.phase) + cycle);
      latent[i] = 0.97 * latent[i] + 0.02 * level * rng.normal();
      double d = latent[i];
      for (std::size_t k = 0; k < nd.parents.size(); ++k) {
        if (t >= nd.lags[k]) d += nd.weights[k] * dev[(t - nd.lags[k]) * n_nodes + nd.parents[k]];
      }
      dev[t * n_nodes + i] = d;
    }
  }

  std::vector<double> values(steps * n_nodes * kFeatures);
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t i = 0; i < n_nodes; ++i) {
      const auto& nd = nodes[i];
      const double noise = 0.02 * nd.level * rng.normal();
      const double flow = std::max(0.0, base[t * n_nodes + i] + dev[t * n_nodes + i] + noise);
      const double occ = std::clamp(flow / nd.capacity * (1.0 + 0.03 * rng.normal()), 0.0, 1.0);
      const double speed = std::max(0.0, nd.free_speed * (1.0 - 0.6 * occ * occ) + 0.5 * rng.normal());
      double* out = values.data() + (t * n_nodes + i) * kFeatures;
      out[0] = flow;
      out[1] = occ;
      out[2] = speed;
    }
  }

  RawSeries r;
  r.values = Tensor::from({steps, n_nodes, kFeatures}, std::move(values));
  r.n_steps = steps;
  r.n_nodes = n_nodes;
  r.n_features = kFeatures;
  r.source_name = "synthetic(seed=" + std::to_string(seed) + ")";
  return r;
}

Metrics evaluate(const Tensor& pred, const Tensor& truth) {
  if (pred.shape() != truth.shape()) {
    throw ShapeError("evaluate: prediction " + shape_str(pred.shape()) + " vs truth " + shape_str(truth.shape()));
  }
  const auto p = pred.data();
  const auto y = truth.data();
  Metrics m;
  m.count = p.size();
  if (m.count == 0) return m;
  double abs_sum = 0.0, sq_sum = 0.0, pct_sum = 0.0;
  std::size_t pct_n = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double e = p[i] - y[i];
    abs_sum += std::fabs(e);
    sq_sum += e * e;
    if (std::fabs(y[i]) < 1.0) {
      ++m.mape_excluded;
    } else {
      pct_sum += std::fabs(e / y[i]);
      ++pct_n;
    }
  }
  const double n = static_cast<double>(m.count);
  m.mae = abs_sum / n;
  m.rmse = std::sqrt(sq_sum / n);
  m.mape = pct_n ? 100.0 * pct_sum / static_cast<double>(pct_n) : 0.0;
  return m;
}

Tensor last_value_baseline(const DatasetWindows& w, std::size_t begin, std::size_t end) {
  const std::size_t n = w.n_nodes(), f = w.n_features(), horizon = w.t_out();
  const auto src = w.raw().values.data();
  std::vector<double> out((end - begin) * n * horizon);
  for (std::size_t s = begin; s < end; ++s) {
    const std::size_t last = w.window_start(s) + w.t_in() - 1;
    for (std::size_t node = 0; node < n; ++node) {
      const double v = src[(last * n + node) * f];
      std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(((s - begin) * n + node) * horizon), horizon, v);
    }
  }
  return Tensor::from({end - begin, n, horizon}, std::move(out));
}

Tensor historical_average_baseline(const DatasetWindows& w, std::size_t begin, std::size_t end) {
  const std::size_t n = w.n_nodes(), f = w.n_features(), horizon = w.t_out();
  const auto src = w.raw().values.data();
  if (w.train_end() == 0) throw DataError("historical_average_baseline: empty training split");
  const std::size_t train_slots = w.window_start(w.train_end() - 1) + w.t_in() + w.t_out();
  std::vector<double> sums(n * kSlotsPerDay, 0.0), node_sum(n, 0.0);
  std::vector<std::size_t> counts(kSlotsPerDay, 0);
  for (std::size_t t = 0; t < train_slots; ++t) {
    ++counts[t % kSlotsPerDay];
    for (std::size_t node = 0; node < n; ++node) {
      const double v = src[(t * n + node) * f];
      sums[node * kSlotsPerDay + t % kSlotsPerDay] += v;
      node_sum[node] += v;
    }
  }
  std::vector<double> out((end - begin) * n * horizon);
  for (std::size_t s = begin; s < end; ++s) {
    for (std::size_t node = 0; node < n; ++node) {
      for (std::size_t h = 0; h < horizon; ++h) {
        const std::size_t slot = (w.window_start(s) + w.t_in() + h) % kSlotsPerDay;
        const double v = counts[slot] ? sums[node * kSlotsPerDay + slot] / static_cast<double>(counts[slot])
                                       : node_sum[node] / static_cast<double>(train_slots);
        out[((s - begin) * n + node) * horizon + h] = v;
      }
    }
  }
  return Tensor::from({end - begin, n, horizon}, std::move(out));
}

}  // namespace cdvgm::data
