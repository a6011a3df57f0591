#include "cdvgm/run_config.hpp"

#include <fstream>
#include <sstream>

#include "cdvgm/errors.hpp"

namespace cdvgm::run {

RunConfig::RunConfig() {
  model.n_nodes = 0;
  model.n_features = 0;
}

kv::Document RunConfig::to_kv() const {
  kv::Document doc = model.to_kv();
  doc["dataset"] = dataset;
  doc["output_dir"] = output_dir;
  doc["seed"] = std::to_string(seed);
  doc["epochs"] = std::to_string(epochs);
  doc["batch_size"] = std::to_string(batch_size);
  doc["max_steps"] = std::to_string(max_steps);
  doc["stride"] = std::to_string(stride);
  doc["lr"] = kv::format_double(lr);
  doc["beta1"] = kv::format_double(beta1);
  doc["beta2"] = kv::format_double(beta2);
  doc["adam_eps"] = kv::format_double(adam_eps);
  doc["lookahead"] = kv::format_bool(lookahead);
  doc["lookahead_k"] = std::to_string(lookahead_k);
  doc["lookahead_alpha"] = kv::format_double(lookahead_alpha);
  doc["grad_clip"] = kv::format_bool(grad_clip);
  doc["clip_norm"] = kv::format_double(clip_norm);
  doc["loss"] = training::to_string(loss);
  doc["divergence_threshold"] = kv::format_double(divergence_threshold);
  return doc;
}

RunConfig RunConfig::from_kv(const kv::Document& doc) {
  RunConfig c;
  const kv::Document known = c.to_kv();
  for (const auto& [k, v] : doc) {
    if (!known.count(k)) throw ConfigError("unknown config key '" + k + "'");
  }
  kv::Document model_doc;
  for (const auto& k : model::ModelConfig::keys()) {
    if (auto it = doc.find(k); it != doc.end()) model_doc.insert(*it);
  }
  const auto n_nodes = c.model.n_nodes, n_features = c.model.n_features;
  c.model = model::ModelConfig::from_kv(model_doc);
  if (!model_doc.count("n_nodes")) c.model.n_nodes = n_nodes;
  if (!model_doc.count("n_features")) c.model.n_features = n_features;

  auto get = [&](const char* key, auto&& apply) {
    if (auto it = doc.find(key); it != doc.end()) apply(it->first, it->second);
  };
  get("dataset", [&](auto&, auto& v) { c.dataset = v; });
  get("output_dir", [&](auto&, auto& v) { c.output_dir = v; });
  get("seed", [&](auto& k, auto& v) { c.seed = kv::parse_u64(k, v); });
  get("epochs", [&](auto& k, auto& v) { c.epochs = kv::parse_size(k, v); });
  get("batch_size", [&](auto& k, auto& v) { c.batch_size = kv::parse_size(k, v); });
  get("max_steps", [&](auto& k, auto& v) { c.max_steps = kv::parse_size(k, v); });
  get("stride", [&](auto& k, auto& v) { c.stride = kv::parse_size(k, v); });
  get("lr", [&](auto& k, auto& v) { c.lr = kv::parse_double(k, v); });
  get("beta1", [&](auto& k, auto& v) { c.beta1 = kv::parse_double(k, v); });
  get("beta2", [&](auto& k, auto& v) { c.beta2 = kv::parse_double(k, v); });
  get("adam_eps", [&](auto& k, auto& v) { c.adam_eps = kv::parse_double(k, v); });
  get("lookahead", [&](auto& k, auto& v) { c.lookahead = kv::parse_bool(k, v); });
  get("lookahead_k", [&](auto& k, auto& v) { c.lookahead_k = kv::parse_size(k, v); });
  get("lookahead_alpha", [&](auto& k, auto& v) { c.lookahead_alpha = kv::parse_double(k, v); });
  get("grad_clip", [&](auto& k, auto& v) { c.grad_clip = kv::parse_bool(k, v); });
  get("clip_norm", [&](auto& k, auto& v) { c.clip_norm = kv::parse_double(k, v); });
  get("loss", [&](auto&, auto& v) { c.loss = training::parse_loss_mode(v); });
  get("divergence_threshold", [&](auto& k, auto& v) { c.divergence_threshold = kv::parse_double(k, v); });

  if (c.batch_size == 0) throw ConfigError("batch_size must be positive");
  if (c.stride == 0) throw ConfigError("stride must be positive");
  if (!(c.lr > 0.0)) throw ConfigError("lr must be positive");
  if (!(c.beta1 >= 0.0 && c.beta1 < 1.0) || !(c.beta2 >= 0.0 && c.beta2 < 1.0)) {
    throw ConfigError("beta1 and beta2 must lie in [0, 1)");
  }
  if (!(c.adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  if (c.lookahead && c.lookahead_k == 0) throw ConfigError("lookahead_k must be positive");
  if (!(c.lookahead_alpha >= 0.0 && c.lookahead_alpha <= 1.0)) throw ConfigError("lookahead_alpha must lie in [0, 1]");
  if (!(c.clip_norm > 0.0)) throw ConfigError("clip_norm must be positive");
  if (!(c.divergence_threshold > 0.0)) throw ConfigError("divergence_threshold must be positive");
  return c;
}

training::TrainState RunConfig::train_state() const {
  training::TrainState s;
  s.lr = lr;
  s.beta1 = beta1;
  s.beta2 = beta2;
  s.eps = adam_eps;
  s.lookahead = lookahead;
  s.lookahead_k = lookahead_k;
  s.lookahead_alpha = lookahead_alpha;
  s.clip_norm = grad_clip ? clip_norm : 0.0;
  s.seed = seed;
  return s;
}

training::TrainOptions RunConfig::train_options() const {
  training::TrainOptions o;
  o.epochs = epochs;
  o.batch_size = batch_size;
  o.max_steps = max_steps;
  o.loss = loss;
  o.divergence_threshold = divergence_threshold;
  return o;
}

void apply_overrides(kv::Document& doc, const std::vector<std::string>& overrides) {
  for (const auto& o : overrides) {
    const auto parsed = kv::parse(o, "--set " + o);
    if (parsed.size() != 1) throw ConfigError("override must look like key=value, got '" + o + "'");
    doc[parsed.begin()->first] = parsed.begin()->second;
  }
}

RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  kv::Document doc = kv::parse(ss.str(), path);
  apply_overrides(doc, overrides);
  return RunConfig::from_kv(doc);
}

std::string resolved_text(const RunConfig& config, std::size_t param_count) {
  std::string out;
  out += "# resolved run configuration (defaults included)\n";
  out += "# audit.param_count = " + std::to_string(param_count) + "\n";
  out += "# audit.effective_head = " + model::to_string(config.model.effective_head()) + "\n";
  out += "# audit.standard_protocol = " + kv::format_bool(config.model.standard_protocol()) + "\n";
  out += kv::serialize(config.to_kv());
  return out;
}

}  // namespace cdvgm::run
