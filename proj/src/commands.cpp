#include "cdvgm/commands.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <optional>
#include <ostream>

#include "cdvgm/errors.hpp"
#include "cdvgm/model.hpp"

namespace cdvgm::cli {

namespace fs = std::filesystem;

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return kConfigError;
  if (dynamic_cast<const DataError*>(&e)) return kDataError;
  if (dynamic_cast<const NumericError*>(&e)) return kNumericError;
  if (dynamic_cast<const ShapeError*>(&e) || dynamic_cast<const DomainError*>(&e)) return kDataError;
  return kConfigError;
}

int guarded(const std::function<void()>& fn, std::ostream& err) {
  try {
    fn();
    return kOk;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
}

std::size_t threads_from_env() {
  const char* v = std::getenv("CDVGM_THREADS");
  if (!v || !*v) return 1;
  const auto n = kv::parse_size("CDVGM_THREADS", v);
  if (n == 0) throw ConfigError("CDVGM_THREADS must be >= 1");
  return n;
}

std::string record_json(const training::EpochRecord& r) {
  nlohmann::json j;
  j["epoch"] = r.epoch;
  j["split"] = r.split;
  j["mae"] = r.metrics.mae;
  j["rmse"] = r.metrics.rmse;
  j["mape"] = r.metrics.mape;
  j["mape_excluded"] = r.metrics.mape_excluded;
  j["loss"] = r.loss;
  j["wall_ms"] = r.wall_ms;
  return j.dump();
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw DataError("write to '" + path.string() + "' failed");
}

void resolve_dims(run::RunConfig& c, const data::RawSeries& raw) {
  auto fill = [&](std::size_t& field, std::size_t actual, const char* what) {
    if (field == 0) {
      field = actual;
    } else if (field != actual) {
      throw DataError(std::string("config ") + what + " = " + std::to_string(field) + " but dataset '" + c.dataset +
                      "' has " + std::to_string(actual));
    }
  };
  fill(c.model.n_nodes, raw.n_nodes, "n_nodes");
  fill(c.model.n_features, raw.n_features, "n_features");
}

std::map<std::string, std::string> checkpoint_metadata(const run::RunConfig& c, const training::EpochRecord& best) {
  std::map<std::string, std::string> meta;
  for (const auto& [k, v] : c.to_kv()) meta["run." + k] = v;
  meta["best_epoch"] = std::to_string(best.epoch);
  meta["best_val_mae"] = kv::format_double(best.metrics.mae);
  return meta;
}

run::RunConfig run_config_from_metadata(const std::map<std::string, std::string>& meta) {
  kv::Document doc;
  for (const auto& [k, v] : meta) {
    if (k.rfind("run.", 0) == 0) doc[k.substr(4)] = v;
  }
  return run::RunConfig::from_kv(doc);
}

struct LoadedCheckpoint {
  model::CheckpointData data;
  run::RunConfig run;
};

LoadedCheckpoint load_checkpoint_for(const std::string& checkpoint, const data::RawSeries& raw, const std::string& dataset) {
  LoadedCheckpoint out;
  out.data = model::read_checkpoint(checkpoint);
  try {
    out.run = run_config_from_metadata(out.data.metadata);
  } catch (const ConfigError& e) {
    throw DataError("checkpoint " + checkpoint + " metadata: " + e.what());
  }
  const auto& mc = out.data.config;
  if (raw.n_nodes != mc.n_nodes) {
    throw DataError("dataset '" + dataset + "' has N=" + std::to_string(raw.n_nodes) + " nodes but checkpoint '" +
                    checkpoint + "' expects N=" + std::to_string(mc.n_nodes));
  }
  if (raw.n_features != mc.n_features) {
    throw DataError("dataset '" + dataset + "' has F=" + std::to_string(raw.n_features) + " features but checkpoint '" +
                    checkpoint + "' expects F=" + std::to_string(mc.n_features));
  }
  return out;
}

}  // namespace

TrainOutcome cmd_train(const std::string& config_path, const std::vector<std::string>& overrides, std::ostream& log) {
  return cmd_train(run::load_run_config(config_path, overrides), log);
}

TrainOutcome cmd_train(run::RunConfig config, std::ostream& log) {
  if (config.dataset.empty()) throw ConfigError("config key 'dataset' is not set");
  const std::size_t threads = threads_from_env();
  const auto raw = data::load_dataset(config.dataset);
  resolve_dims(config, raw);
  config.model.validate();

  model::CdvgmModel model(config.model, config.seed);
  TrainOutcome outcome;
  outcome.param_count = model.parameter_count();

  const fs::path dir(config.output_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create output directory '" + dir.string() + "': " + ec.message());
  write_text(dir / kResolvedConfig, run::resolved_text(config, outcome.param_count));

  const auto windows = data::make_windows(raw, config.model.t_in, config.model.t_out, config.stride);
  auto state = config.train_state();
  auto options = config.train_options();
  options.threads = threads;

  std::ofstream metrics(dir / kMetricsLog, std::ios::trunc);
  if (!metrics) throw DataError("cannot write '" + (dir / kMetricsLog).string() + "'");
  options.on_record = [&](const training::EpochRecord& r) {
    const auto line = record_json(r);
    metrics << line << "\n" << std::flush;
    log << line << "\n";
  };
  options.on_best = [&](model::CdvgmModel& m, const training::EpochRecord& r) {
    model::save_checkpoint((dir / kBestCheckpoint).string(), m, checkpoint_metadata(config, r), state.rng_state);
  };

  outcome.result = training::train_loop(model, windows, state, options);
  outcome.loss_history = state.loss_history;

  std::string history;
  char buf[40];
  for (double v : state.loss_history) {
    std::snprintf(buf, sizeof(buf), "%.17g\n", v);
    history += buf;
  }
  write_text(dir / kLossHistory, history);
  outcome.config = std::move(config);
  return outcome;
}

data::Metrics cmd_eval(const std::string& checkpoint, const std::string& dataset, const std::string& output_path,
                       std::ostream& log) {
  const auto raw = data::load_dataset(dataset);
  const auto ckpt = load_checkpoint_for(checkpoint, raw, dataset);
  auto model = model::model_from_checkpoint(ckpt.data);
  const auto& mc = model.config();
  const auto windows = data::make_windows(raw, mc.t_in, mc.t_out, ckpt.run.stride);
  if (windows.val_end() == windows.count()) throw DataError("dataset '" + dataset + "' has an empty test split");

  const Tensor pred = training::predict(model, windows, windows.val_end(), windows.count(), ckpt.run.batch_size);
  const Tensor truth = windows.target_batch(data::index_range(windows.val_end(), windows.count()));
  training::EpochRecord r;
  r.epoch = ckpt.data.metadata.count("best_epoch") ? kv::parse_size("best_epoch", ckpt.data.metadata.at("best_epoch")) : 0;
  r.split = "test";
  r.metrics = data::evaluate(pred, truth);
  {
    NoGradGuard no_grad;
    r.loss = training::mse_loss(pred, truth, ckpt.run.loss).item();
  }
  const auto line = record_json(r);
  log << line << "\n";
  if (!output_path.empty()) write_text(output_path, line + "\n");
  return r.metrics;
}

bool cmd_gradcheck(suite::Scale scale, std::ostream& log, const std::string& corrupt_op) {
  std::optional<testing::BackwardCorruption> corruption;
  if (!corrupt_op.empty()) corruption.emplace(corrupt_op, 1.5);
  const auto reports = suite::run_gradcheck(scale);
  bool ok = true;
  double worst = 0.0;
  for (const auto& r : reports) {
    log << (r.passed() ? "PASS " : "FAIL ") << std::left << std::setw(44) << r.component << " max_rel_err "
        << std::scientific << std::setprecision(3) << r.max_rel_error << " (analytic " << r.analytic << ", numeric " << r.numeric << ")" << std::defaultfloat << "  (" << r.points
        << " point" << (r.points == 1 ? "" : "s") << ")\n";
    ok = ok && r.passed();
    worst = std::max(worst, r.max_rel_error);
  }
  log << "gradcheck scale=" << suite::to_string(scale) << ": " << reports.size() << " components, worst "
      << std::scientific << std::setprecision(3) << worst << std::defaultfloat << ", tolerance " << suite::kGradTolerance
      << " -> " << (ok ? "PASS" : "FAIL") << "\n";
  return ok;
}

void cmd_export_laplacian(const std::string& checkpoint, const std::string& dataset, std::size_t block,
                          const std::string& output_path) {
  const auto raw = data::load_dataset(dataset);
  const auto ckpt = load_checkpoint_for(checkpoint, raw, dataset);
  auto model = model::model_from_checkpoint(ckpt.data);
  const auto& mc = model.config();
  if (block >= mc.n_blocks) {
    throw ConfigError("block index " + std::to_string(block) + " out of range (model has " + std::to_string(mc.n_blocks) +
                      " blocks)");
  }
  const auto windows = data::make_windows(raw, mc.t_in, mc.t_out, ckpt.run.stride);
  if (windows.val_end() == windows.count()) throw DataError("dataset '" + dataset + "' has an empty test split");
  const std::vector<std::size_t> first{windows.val_end()};
  model::ForwardTrace trace;
  {
    NoGradGuard no_grad;
    model.forward(windows.input_batch(first), false, &trace);
  }
  const Tensor& l = trace.laplacians.at(block);
  const std::size_t n = l.dim(0);
  std::string csv;
  char buf[40];
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      std::snprintf(buf, sizeof(buf), "%.17g", l.data()[i * n + j]);
      csv += buf;
      csv += j + 1 < n ? "," : "\n";
    }
  }
  write_text(output_path, csv);
}

void cmd_synth(std::size_t nodes, std::size_t days, std::uint64_t seed, const std::string& output_path) {
  data::save_dataset(output_path, data::synthetic_traffic(nodes, days, seed));
}

}  // namespace cdvgm::cli
