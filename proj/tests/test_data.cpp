#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>

#include "cdvgm/data.hpp"
#include "cdvgm/errors.hpp"
#include "oracles.hpp"

using namespace cdvgm;
using namespace cdvgm::data;

namespace {

namespace fs = std::filesystem;

struct TempDir {
  fs::path path;
  TempDir() : path(fs::temp_directory_path() / "cdvgm_test_data") { fs::create_directories(path); }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

// Flow values equal to the slot index, so windows can be checked by value.
RawSeries ramp(std::size_t steps, std::size_t nodes = 2, std::size_t features = 2) {
  RawSeries r;
  r.n_steps = steps;
  r.n_nodes = nodes;
  r.n_features = features;
  std::vector<double> v;
  for (std::size_t t = 0; t < steps; ++t)
    for (std::size_t n = 0; n < nodes; ++n)
      for (std::size_t f = 0; f < features; ++f) v.push_back(f == 0 ? static_cast<double>(t) + 1000.0 * n : 0.5);
  r.values = Tensor::from({steps, nodes, features}, std::move(v));
  return r;
}

void write_raw(const std::string& path, std::uint16_t version, std::uint32_t t, std::uint32_t n, std::uint32_t f,
               const std::vector<double>& values) {
  std::ofstream out(path, std::ios::binary);
  out.write("CDVG", 4);
  out.write(reinterpret_cast<const char*>(&version), 2);
  for (std::uint32_t d : {t, n, f}) out.write(reinterpret_cast<const char*>(&d), 4);
  out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * 8));
}

double autocorrelation(const RawSeries& r, std::size_t node, std::size_t lag) {
  const std::size_t steps = r.n_steps;
  double mu = 0.0;
  for (std::size_t t = 0; t < steps; ++t) mu += r.value(t, node, 0);
  mu /= static_cast<double>(steps);
  double num = 0.0, den = 0.0;
  for (std::size_t t = 0; t < steps; ++t) den += std::pow(r.value(t, node, 0) - mu, 2);
  for (std::size_t t = 0; t + lag < steps; ++t) num += (r.value(t, node, 0) - mu) * (r.value(t + lag, node, 0) - mu);
  return num / den;
}

}  // namespace

TEST_CASE("dataset file round trip") {
  TempDir dir;
  const auto series = synthetic_traffic(3, 1, 4);
  save_dataset(dir.file("a.cdvg"), series);
  const auto back = load_dataset(dir.file("a.cdvg"));
  CHECK(back.n_steps == series.n_steps);
  CHECK(back.n_nodes == 3);
  CHECK(back.n_features == 3);
  CHECK(back.slot_minutes == 5);
  CHECK(back.values.to_vector() == series.values.to_vector());
  CHECK(fs::file_size(dir.file("a.cdvg")) == 18 + 8 * series.values.numel());
}

TEST_CASE("dataset file validation") {
  TempDir dir;
  const std::string p = dir.file("bad.cdvg");
  SUBCASE("truncated file names expected and actual sizes") {
    write_raw(p, 1, 4, 2, 1, std::vector<double>(7, 1.0));
    try {
      load_dataset(p);
      FAIL("expected DataError");
    } catch (const DataError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("82") != std::string::npos);
      CHECK(msg.find("74") != std::string::npos);
    }
  }
  SUBCASE("bad magic") {
    std::ofstream(p, std::ios::binary) << "NOPE0000000000000000";
    CHECK_THROWS_AS(load_dataset(p), DataError);
  }
  SUBCASE("unknown version") {
    write_raw(p, 9, 1, 1, 1, {1.0});
    CHECK_THROWS_AS(load_dataset(p), DataError);
  }
  SUBCASE("NaN content") {
    write_raw(p, 1, 2, 1, 1, {1.0, std::numeric_limits<double>::quiet_NaN()});
    CHECK_THROWS_AS(load_dataset(p), DataError);
  }
  SUBCASE("negative values") {
    write_raw(p, 1, 2, 1, 1, {1.0, -0.5});
    CHECK_THROWS_AS(load_dataset(p), DataError);
    write_raw(p, 1, 2, 1, 1, {1.0, -1e-12});
    const auto r = load_dataset(p);
    CHECK(r.value(1, 0, 0) == 0.0);
  }
  SUBCASE("missing file") { CHECK_THROWS_AS(load_dataset(dir.file("absent.cdvg")), DataError); }
}

TEST_CASE("make_windows") {
  SUBCASE("boundary length gives one window") { CHECK(make_windows(ramp(24)).count() == 1); }
  SUBCASE("offsets") {
    const auto w = make_windows(ramp(26));
    REQUIRE(w.count() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(w.window_start(i) == i);
      const std::vector<std::size_t> idx{i};
      CHECK(w.input_batch(idx).at({0, 0, 0, 0}) == static_cast<double>(i));
      CHECK(w.target_batch(idx).at({0, 0, 0}) == static_cast<double>(i + 12));
    }
  }
  SUBCASE("6:2:2 split") {
    const auto w = make_windows(ramp(123));
    CHECK(w.count() == 100);
    CHECK(w.train_end() == 60);
    CHECK(w.val_end() == 80);
  }
  SUBCASE("layout and target feature") {
    const auto w = make_windows(ramp(30, 3, 2));
    const Tensor x = w.inputs(), y = w.targets();
    CHECK(x.shape() == Shape{7, 2, 3, 12});
    CHECK(y.shape() == Shape{7, 3, 12});
    CHECK(x.at({4, 0, 2, 5}) == 4.0 + 5.0 + 2000.0);
    CHECK(x.at({4, 1, 2, 5}) == 0.5);
    CHECK(y.at({4, 1, 3}) == 4.0 + 12.0 + 3.0 + 1000.0);
  }
  SUBCASE("stride") {
    const auto w = make_windows(ramp(40), 12, 12, 5);
    CHECK(w.count() == 4);
    CHECK(w.window_start(3) == 15);
  }
  SUBCASE("too short") {
    CHECK_THROWS_AS(make_windows(ramp(23)), DataError);
    CHECK_THROWS_AS(make_windows(ramp(30), 12, 12, 0), DataError);
  }
  SUBCASE("reconstruction and split ordering") {
    const auto series = synthetic_traffic(2, 1, 9);
    const auto w = make_windows(series);
    const Tensor x = w.inputs(), y = w.targets();
    const std::size_t n = series.n_nodes;
    std::vector<bool> seen(series.n_steps, false);
    for (std::size_t i = 0; i < w.count(); ++i)
      for (std::size_t s = 0; s < 12; ++s) {
        seen[i + s] = true;
        seen[i + 12 + s] = true;
      }
    for (bool b : seen) CHECK(b);
    for (std::size_t i = 0; i + 12 < w.count(); ++i)
      for (std::size_t node = 0; node < n; ++node)
        for (std::size_t s = 0; s < 12; ++s) CHECK(y.at({i, node, s}) == x.at({i + 12, 0, node, s}));
    // last train input slot precedes the first val input slot, and so on
    CHECK(w.window_start(w.train_end() - 1) < w.window_start(w.train_end()));
    CHECK(w.window_start(w.val_end() - 1) < w.window_start(w.val_end()));
  }
}

TEST_CASE("synthetic_traffic") {
  const auto a = synthetic_traffic(8, 6, 7), b = synthetic_traffic(8, 6, 7);
  CHECK(a.values.to_vector() == b.values.to_vector());
  CHECK(a.n_steps == 6 * kSlotsPerDay);
  CHECK(a.n_features == 3);
  CHECK(synthetic_traffic(8, 6, 8).values.to_vector() != a.values.to_vector());
  for (double v : a.values.data()) CHECK(v >= 0.0);
  for (std::uint64_t seed : {7, 1, 2, 3}) {
    const auto r = synthetic_traffic(8, 6, seed);
    for (std::size_t node = 0; node < 8; ++node) {
      CHECK_MESSAGE(autocorrelation(r, node, 288) > autocorrelation(r, node, 7), "seed " << seed << " node " << node);
    }
  }
  CHECK_THROWS(synthetic_traffic(1, 6, 7));
  CHECK_THROWS(synthetic_traffic(4, 0, 7));
}

TEST_CASE("evaluate") {
  const auto zero = evaluate(Tensor::from({3}, {2, 5, 7}), Tensor::from({3}, {2, 5, 7}));
  CHECK(zero.mae == 0.0);
  CHECK(zero.rmse == 0.0);
  CHECK(zero.mape == 0.0);

  const auto hand = evaluate(Tensor::from({2}, {1, 2}), Tensor::from({2}, {1, 4}));
  CHECK(hand.mae == 1.0);
  CHECK(hand.rmse == doctest::Approx(std::sqrt(2.0)).epsilon(1e-15));
  CHECK(hand.mape == doctest::Approx(25.0).epsilon(1e-15));
  CHECK(hand.mape_excluded == 0);

  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor p = rng.uniform_tensor({5, 3, 12}, 0, 50), y = rng.uniform_tensor({5, 3, 12}, 0, 50);
    const auto m = evaluate(p, y);
    const auto ref = oracle::scores(p.data(), y.data());
    CHECK(std::abs(m.mae - ref.mae) < 1e-12);
    CHECK(std::abs(m.rmse - ref.rmse) < 1e-12);
    CHECK(std::abs(m.mape - ref.mape) < 1e-12);
    CHECK(m.rmse >= m.mae);
  }
  const Tensor above = rng.uniform_tensor({4, 4}, 1.0, 9.0);
  CHECK(evaluate(rng.uniform_tensor({4, 4}, 0, 9), above).mape_excluded == 0);
  const auto night = evaluate(Tensor::from({3}, {1, 1, 1}), Tensor::from({3}, {0.0, 0.5, 2.0}));
  CHECK(night.mape_excluded == 2);
  CHECK(night.mape == doctest::Approx(50.0));
  CHECK_THROWS_AS(evaluate(Tensor::zeros({2}), Tensor::zeros({3})), ShapeError);
}

TEST_CASE("baselines") {
  const auto w = make_windows(ramp(2 * kSlotsPerDay));
  const std::size_t last = w.count();
  SUBCASE("last value repeats the final input slot") {
    const Tensor lv = last_value_baseline(w, 5, 7);
    CHECK(lv.shape() == Shape{2, 2, 12});
    for (std::size_t s = 0; s < 12; ++s) {
      CHECK(lv.at({0, 0, s}) == 5.0 + 11.0);
      CHECK(lv.at({1, 1, s}) == 6.0 + 11.0 + 1000.0);
    }
  }
  SUBCASE("historical average per slot of day over the training range") {
    // train windows [0, train_end) cover slots [0, train_end + 23)
    const std::size_t covered = w.train_end() + 23;
    const Tensor ha = historical_average_baseline(w, last - 1, last);
    for (std::size_t s = 0; s < 12; ++s) {
      const std::size_t slot = w.window_start(last - 1) + 12 + s;
      const std::size_t sod = slot % kSlotsPerDay;
      double sum = 0.0, count = 0.0;
      for (std::size_t t = sod; t < covered; t += kSlotsPerDay) {
        sum += static_cast<double>(t);
        count += 1.0;
      }
      CHECK(ha.at({0, 0, s}) == doctest::Approx(sum / count));
    }
  }
}

TEST_CASE("index_range") {
  CHECK(index_range(2, 5) == std::vector<std::size_t>{2, 3, 4});
  CHECK(index_range(3, 3).empty());
}
