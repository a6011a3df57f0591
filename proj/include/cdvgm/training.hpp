#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cdvgm/data.hpp"
#include "cdvgm/gradcheck.hpp"
#include "cdvgm/model.hpp"
#include "cdvgm/tensor.hpp"

namespace cdvgm::training {

enum class LossMode { mse, rmse };

std::string to_string(LossMode m);
LossMode parse_loss_mode(const std::string& s);

// Mean squared error over every entry; rmse mode takes its square root.
Tensor mse_loss(const Tensor& pred, const Tensor& target, LossMode mode = LossMode::mse);

struct TrainState {
  std::size_t step = 0;
  std::vector<std::vector<double>> adam_m;
  std::vector<std::vector<double>> adam_v;
  std::vector<std::vector<double>> slow_weights;
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  bool lookahead = true;
  std::size_t lookahead_k = 5;
  double lookahead_alpha = 0.5;
  double clip_norm = 0.0;  // global gradient norm cap; 0 disables
  std::uint64_t seed = 0;
  std::vector<double> loss_history;
  std::string rng_state;  // shuffle generator after the latest epoch

  // Zero moments and a slow copy of the current parameter values.
  void init(const std::vector<NamedTensor>& params);
};

// One bias-corrected Adam update from the accumulated gradients. Increments
// s.step first. Throws NumericError, leaving parameters untouched, when any
// gradient entry is not finite.
void adam_step(const std::vector<NamedTensor>& params, TrainState& s);

// slow <- (1 - alpha) slow + alpha fast; fast <- slow.
void lookahead_sync(const std::vector<NamedTensor>& params, TrainState& s);

// Rescales all gradients so that their joint L2 norm is at most max_norm.
// Returns the norm before clipping.
double clip_gradients(const std::vector<NamedTensor>& params, double max_norm);

struct EpochRecord {
  std::size_t epoch = 0;
  std::string split;
  data::Metrics metrics;
  double loss = 0.0;
  double wall_ms = 0.0;
};

struct TrainOptions {
  std::size_t epochs = 40;
  std::size_t batch_size = 16;
  std::size_t max_steps = 0;  // 0: no cap
  LossMode loss = LossMode::mse;
  double divergence_threshold = 1e8;
  std::size_t threads = 1;  // > 1 assembles batches on a helper thread
  std::function<void(const EpochRecord&)> on_record;
  // Called with the model whenever validation MAE improves.
  std::function<void(model::CdvgmModel&, const EpochRecord&)> on_best;
};

struct TrainResult {
  std::vector<EpochRecord> records;
  std::size_t steps = 0;
  std::size_t best_epoch = 0;
  double best_val_mae = 0.0;
  bool has_best = false;
  data::Metrics test;
};

// Seeded shuffled mini-batches over the training split; per-epoch validation;
// the best-validation weights are restored at the end and scored on the test
// split. Aborts with NumericError when the loss is non-finite or exceeds the
// divergence threshold.
TrainResult train_loop(model::CdvgmModel& model, const data::DatasetWindows& windows, TrainState& s,
                       const TrainOptions& opts);

// Eval-mode predictions for windows [begin, end), in chunks of batch_size.
Tensor predict(model::CdvgmModel& model, const data::DatasetWindows& windows, std::size_t begin, std::size_t end,
               std::size_t batch_size);

}  // namespace cdvgm::training
