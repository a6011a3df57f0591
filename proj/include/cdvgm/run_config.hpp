#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "cdvgm/kv.hpp"
#include "cdvgm/model.hpp"
#include "cdvgm/training.hpp"

namespace cdvgm::run {

// Everything a run needs, as one flat key = value document. n_nodes and
// n_features of 0 are filled in from the dataset header.
struct RunConfig {
  model::ModelConfig model;
  std::string dataset;
  std::string output_dir = "run";
  std::uint64_t seed = 1;
  std::size_t epochs = 40;
  std::size_t batch_size = 16;
  std::size_t max_steps = 0;
  std::size_t stride = 1;
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  bool lookahead = true;
  std::size_t lookahead_k = 5;
  double lookahead_alpha = 0.5;
  bool grad_clip = false;
  double clip_norm = 5.0;
  training::LossMode loss = training::LossMode::mse;
  double divergence_threshold = 1e8;

  RunConfig();

  kv::Document to_kv() const;
  // Rejects unknown keys and unparsable values with ConfigError.
  static RunConfig from_kv(const kv::Document& doc);

  training::TrainState train_state() const;
  training::TrainOptions train_options() const;
};

// "key=value" pairs applied on top of a parsed document.
void apply_overrides(kv::Document& doc, const std::vector<std::string>& overrides);

RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides = {});

// Resolved document with audit comment lines (parameter count, effective
// head, protocol flag) ahead of the key = value body.
std::string resolved_text(const RunConfig& config, std::size_t param_count);

}  // namespace cdvgm::run
