#include "cdvgm/training.hpp"

#include <chrono>
#include <cmath>
#include <condition_variable>
#include <deque>
#include <mutex>
#include <optional>
#include <thread>

#include "cdvgm/errors.hpp"
#include "cdvgm/ops.hpp"
#include "cdvgm/rng.hpp"

namespace cdvgm::training {

std::string to_string(LossMode m) { return m == LossMode::mse ? "mse" : "rmse"; }

LossMode parse_loss_mode(const std::string& s) {
  if (s == "mse") return LossMode::mse;
  if (s == "rmse") return LossMode::rmse;
  throw ConfigError("loss must be mse|rmse, got '" + s + "'");
}

Tensor mse_loss(const Tensor& pred, const Tensor& target, LossMode mode) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("mse_loss: prediction " + shape_str(pred.shape()) + " vs target " + shape_str(target.shape()));
  }
  Tensor m = mean(square(sub(pred, target)));
  return mode == LossMode::mse ? m : sqrt(m);
}

void TrainState::init(const std::vector<NamedTensor>& params) {
  step = 0;
  adam_m.clear();
  adam_v.clear();
  slow_weights.clear();
  for (const auto& p : params) {
    adam_m.emplace_back(p.tensor.numel(), 0.0);
    adam_v.emplace_back(p.tensor.numel(), 0.0);
    slow_weights.push_back(p.tensor.to_vector());
  }
}

void adam_step(const std::vector<NamedTensor>& params, TrainState& s) {
  if (s.adam_m.size() != params.size()) throw ShapeError("adam_step: optimizer state does not match parameter list");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (s.adam_m[i].size() != params[i].tensor.numel()) {
      throw ShapeError("adam_step: moment buffer for '" + params[i].name + "' has the wrong size");
    }
    if (!params[i].tensor.has_grad()) continue;
    const auto g = params[i].tensor.grad();
    for (std::size_t j = 0; j < g.size(); ++j) {
      if (!std::isfinite(g[j])) {
        throw NumericError("adam_step: non-finite gradient in '" + params[i].name + "' at index " + std::to_string(j) +
                           " (step " + std::to_string(s.step + 1) + ")");
      }
    }
  }
  ++s.step;
  const double t = static_cast<double>(s.step);
  const double c1 = 1.0 - std::pow(s.beta1, t);
  const double c2 = 1.0 - std::pow(s.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = Tensor(params[i].tensor).mutable_data();
    const auto g = params[i].tensor.grad();
    auto& m = s.adam_m[i];
    auto& v = s.adam_v[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = s.beta1 * m[j] + (1.0 - s.beta1) * g[j];
      v[j] = s.beta2 * v[j] + (1.0 - s.beta2) * g[j] * g[j];
      const double m_hat = m[j] / c1;
      const double v_hat = v[j] / c2;
      w[j] -= s.lr * m_hat / (std::sqrt(v_hat) + s.eps);
    }
  }
}

void lookahead_sync(const std::vector<NamedTensor>& params, TrainState& s) {
  if (s.slow_weights.size() != params.size()) throw ShapeError("lookahead_sync: slow weights do not match parameters");
  const double a = s.lookahead_alpha;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = Tensor(params[i].tensor).mutable_data();
    auto& slow = s.slow_weights[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      slow[j] = (1.0 - a) * slow[j] + a * w[j];
      w[j] = slow[j];
    }
  }
}

double clip_gradients(const std::vector<NamedTensor>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (double g : p.tensor.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double f = max_norm / norm;
    for (const auto& p : params) {
      if (!p.tensor.has_grad()) continue;
      for (double& g : Tensor(p.tensor).mutable_grad()) g *= f;
    }
  }
  return norm;
}

namespace {

struct Batch {
  Tensor input;
  Tensor target;
};

// Assembles batches in order on a helper thread, at most `depth` ahead.
class Prefetcher {
 public:
  Prefetcher(const data::DatasetWindows& w, const std::vector<std::vector<std::size_t>>& plan, std::size_t depth)
      : depth_(depth) {
    worker_ = std::thread([this, &w, &plan] {
      for (const auto& idx : plan) {
        Batch b{w.input_batch(idx), w.target_batch(idx)};
        std::unique_lock lock(mu_);
        cv_.wait(lock, [this] { return queue_.size() < depth_ || stop_; });
        if (stop_) return;
        queue_.push_back(std::move(b));
        cv_.notify_all();
      }
    });
  }
  ~Prefetcher() {
    {
      std::lock_guard lock(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    worker_.join();
  }
  Batch next() {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [this] { return !queue_.empty(); });
    Batch b = std::move(queue_.front());
    queue_.pop_front();
    cv_.notify_all();
    return b;
  }

 private:
  std::size_t depth_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<Batch> queue_;
  bool stop_ = false;
  std::thread worker_;
};

double elapsed_ms(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - since).count();
}

}  // namespace

Tensor predict(model::CdvgmModel& model, const data::DatasetWindows& windows, std::size_t begin, std::size_t end,
               std::size_t batch_size) {
  if (batch_size == 0) throw ConfigError("predict: batch_size must be positive");
  NoGradGuard no_grad;
  const std::size_t n = windows.n_nodes(), horizon = model.config().t_out;
  std::vector<double> out;
  out.reserve((end - begin) * n * horizon);
  for (std::size_t s = begin; s < end; s += batch_size) {
    const auto idx = data::index_range(s, std::min(end, s + batch_size));
    const Tensor y = model.forward(windows.input_batch(idx), false);
    out.insert(out.end(), y.data().begin(), y.data().end());
  }
  return Tensor::from({end - begin, n, horizon}, std::move(out));
}

TrainResult train_loop(model::CdvgmModel& model, const data::DatasetWindows& windows, TrainState& s,
                       const TrainOptions& opts) {
  if (opts.batch_size == 0) throw ConfigError("batch_size must be positive");
  if (model.config().t_out != windows.t_out() || model.config().t_in != windows.t_in()) {
    throw ConfigError("train_loop: model horizon does not match the dataset windows");
  }
  const std::size_t n_train = windows.train_end();
  const std::size_t n_val = windows.val_end() - windows.train_end();
  const std::size_t n_test = windows.count() - windows.val_end();
  if (n_train == 0 || n_val == 0 || n_test == 0) {
    throw DataError("train_loop: empty split (train " + std::to_string(n_train) + ", val " + std::to_string(n_val) +
                    ", test " + std::to_string(n_test) + " windows)");
  }

  const auto params = model.parameters();
  if (s.adam_m.size() != params.size()) s.init(params);
  Rng shuffle_rng = rng_stream(s.seed, "shuffle");
  model::CdvgmModel best = model.clone();
  TrainResult result;

  auto emit = [&](EpochRecord r) {
    if (opts.on_record) opts.on_record(r);
    result.records.push_back(std::move(r));
  };

  bool capped = false;
  for (std::size_t epoch = 1; epoch <= opts.epochs && !capped; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    auto order = data::index_range(0, n_train);
    shuffle_rng.shuffle(order);
    std::vector<std::vector<std::size_t>> plan;
    for (std::size_t b = 0; b < n_train; b += opts.batch_size) {
      if (opts.max_steps && s.step + plan.size() >= opts.max_steps) break;
      plan.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b),
                        order.begin() + static_cast<std::ptrdiff_t>(std::min(n_train, b + opts.batch_size)));
    }
    if (plan.empty()) break;

    std::optional<Prefetcher> prefetch;
    if (opts.threads > 1) prefetch.emplace(windows, plan, 2);
    std::vector<double> preds, truths;
    double loss_sum = 0.0;
    for (const auto& idx : plan) {
      Batch batch = prefetch ? prefetch->next() : Batch{windows.input_batch(idx), windows.target_batch(idx)};
      for (const auto& p : params) Tensor(p.tensor).zero_grad();
      const Tensor pred = model.forward(batch.input, true);
      const Tensor loss = mse_loss(pred, batch.target, opts.loss);
      const double value = loss.item();
      if (!std::isfinite(value) || value > opts.divergence_threshold) {
        throw NumericError("training diverged at step " + std::to_string(s.step + 1) + ": loss " + std::to_string(value) +
                           " (threshold " + std::to_string(opts.divergence_threshold) + ")");
      }
      loss.backward();
      if (s.clip_norm > 0.0) clip_gradients(params, s.clip_norm);
      adam_step(params, s);
      if (s.lookahead && s.lookahead_k > 0 && s.step % s.lookahead_k == 0) lookahead_sync(params, s);
      s.loss_history.push_back(value);
      loss_sum += value;
      preds.insert(preds.end(), pred.data().begin(), pred.data().end());
      truths.insert(truths.end(), batch.target.data().begin(), batch.target.data().end());
    }
    prefetch.reset();
    result.steps = s.step;
    s.rng_state = shuffle_rng.state();
    if (opts.max_steps && s.step >= opts.max_steps) capped = true;

    EpochRecord train_rec;
    train_rec.epoch = epoch;
    train_rec.split = "train";
    const std::size_t m = preds.size();
    train_rec.metrics = data::evaluate(Tensor::from({m}, std::move(preds)), Tensor::from({m}, std::move(truths)));
    train_rec.loss = loss_sum / static_cast<double>(plan.size());
    train_rec.wall_ms = elapsed_ms(start);
    emit(train_rec);

    const auto val_start = std::chrono::steady_clock::now();
    const Tensor val_pred = predict(model, windows, windows.train_end(), windows.val_end(), opts.batch_size);
    const Tensor val_truth = windows.target_batch(data::index_range(windows.train_end(), windows.val_end()));
    EpochRecord val_rec;
    val_rec.epoch = epoch;
    val_rec.split = "val";
    val_rec.metrics = data::evaluate(val_pred, val_truth);
    {
      NoGradGuard no_grad;
      val_rec.loss = mse_loss(val_pred, val_truth, opts.loss).item();
    }
    val_rec.wall_ms = elapsed_ms(val_start);
    emit(val_rec);

    if (!result.has_best || val_rec.metrics.mae < result.best_val_mae) {
      result.has_best = true;
      result.best_epoch = epoch;
      result.best_val_mae = val_rec.metrics.mae;
      model::copy_state(model, best);
      if (opts.on_best) opts.on_best(model, val_rec);
    }
  }

  if (result.has_best) model::copy_state(best, model);
  const auto test_start = std::chrono::steady_clock::now();
  const Tensor test_pred = predict(model, windows, windows.val_end(), windows.count(), opts.batch_size);
  const Tensor test_truth = windows.target_batch(data::index_range(windows.val_end(), windows.count()));
  EpochRecord test_rec;
  test_rec.epoch = result.best_epoch;
  test_rec.split = "test";
  test_rec.metrics = data::evaluate(test_pred, test_truth);
  {
    NoGradGuard no_grad;
    test_rec.loss = mse_loss(test_pred, test_truth, opts.loss).item();
  }
  test_rec.wall_ms = elapsed_ms(test_start);
  result.test = test_rec.metrics;
  emit(test_rec);
  return result;
}

}  // namespace cdvgm::training
