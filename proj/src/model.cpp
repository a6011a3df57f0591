#include "cdvgm/model.hpp"

#include <cmath>

#include "cdvgm/errors.hpp"
#include "cdvgm/kv.hpp"
#include "cdvgm/ops.hpp"

namespace cdvgm::model {

std::string to_string(HeadMode m) { return m == HeadMode::tcn ? "tcn" : "conv"; }
std::string to_string(FusionSplit m) { return m == FusionSplit::half_time ? "half_time" : "full_copy"; }
std::string to_string(LaplacianSummary m) { return m == LaplacianSummary::first ? "first" : "mean"; }

HeadMode parse_head_mode(const std::string& s) {
  if (s == "tcn") return HeadMode::tcn;
  if (s == "conv") return HeadMode::conv;
  throw ConfigError("head_mode must be tcn|conv, got '" + s + "'");
}

FusionSplit parse_fusion_split(const std::string& s) {
  if (s == "half_time") return FusionSplit::half_time;
  if (s == "full_copy") return FusionSplit::full_copy;
  throw ConfigError("fusion_split must be half_time|full_copy, got '" + s + "'");
}

LaplacianSummary parse_laplacian_summary(const std::string& s) {
  if (s == "first") return LaplacianSummary::first;
  if (s == "mean") return LaplacianSummary::mean;
  throw ConfigError("laplacian_summary must be first|mean, got '" + s + "'");
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (n_nodes < 1) fail("n_nodes must be >= 1");
  if (n_features < 1) fail("n_features must be >= 1");
  if (t_in < 3) fail("t_in must be >= 3 for the strengthening reshaping");
  if (t_out < 1) fail("t_out must be >= 1");
  if (fusion_split == FusionSplit::half_time && t_in % 2 != 0) fail("t_in must be even for fusion_split = half_time");
  if (n_blocks < 1) fail("n_blocks must be >= 1");
  if (channels < 1) fail("channels must be >= 1");
  if (cheby_k < 1) fail("cheby_k must be >= 1");
  if (!(theta > 0.0)) fail("theta must be positive");
  if (leaky_slope < 0.0) fail("leaky_slope must be >= 0");
  if (tcn_layers < 1) fail("tcn_layers must be >= 1");
  if (tcn_kernel < 1) fail("tcn_kernel must be >= 1");
}

const std::vector<std::string>& ModelConfig::keys() {
  static const std::vector<std::string> k = {
      "n_nodes",     "n_features", "t_in",        "t_out",         "n_blocks",
      "channels",    "cheby_k",    "theta",       "leaky_slope",   "head_mode",
      "ts_enabled",  "tcn_enabled", "tcn_layers", "tcn_kernel",    "cheby_rescale",
      "laplacian_update_mode", "fusion_split", "laplacian_summary"};
  return k;
}

std::map<std::string, std::string> ModelConfig::to_kv() const {
  return {
      {"n_nodes", std::to_string(n_nodes)},
      {"n_features", std::to_string(n_features)},
      {"t_in", std::to_string(t_in)},
      {"t_out", std::to_string(t_out)},
      {"n_blocks", std::to_string(n_blocks)},
      {"channels", std::to_string(channels)},
      {"cheby_k", std::to_string(cheby_k)},
      {"theta", kv::format_double(theta)},
      {"leaky_slope", kv::format_double(leaky_slope)},
      {"head_mode", to_string(head_mode)},
      {"ts_enabled", kv::format_bool(ts_enabled)},
      {"tcn_enabled", kv::format_bool(tcn_enabled)},
      {"tcn_layers", std::to_string(tcn_layers)},
      {"tcn_kernel", std::to_string(tcn_kernel)},
      {"cheby_rescale", graph::to_string(cheby_rescale)},
      {"laplacian_update_mode", graph::to_string(laplacian_update_mode)},
      {"fusion_split", to_string(fusion_split)},
      {"laplacian_summary", to_string(laplacian_summary)},
  };
}

ModelConfig ModelConfig::from_kv(const std::map<std::string, std::string>& doc) {
  ModelConfig c;
  auto get = [&](const char* key, auto&& apply) {
    if (auto it = doc.find(key); it != doc.end()) apply(it->first, it->second);
  };
  get("n_nodes", [&](auto& k, auto& v) { c.n_nodes = kv::parse_size(k, v); });
  get("n_features", [&](auto& k, auto& v) { c.n_features = kv::parse_size(k, v); });
  get("t_in", [&](auto& k, auto& v) { c.t_in = kv::parse_size(k, v); });
  get("t_out", [&](auto& k, auto& v) { c.t_out = kv::parse_size(k, v); });
  get("n_blocks", [&](auto& k, auto& v) { c.n_blocks = kv::parse_size(k, v); });
  get("channels", [&](auto& k, auto& v) { c.channels = kv::parse_size(k, v); });
  get("cheby_k", [&](auto& k, auto& v) { c.cheby_k = kv::parse_size(k, v); });
  get("theta", [&](auto& k, auto& v) { c.theta = kv::parse_double(k, v); });
  get("leaky_slope", [&](auto& k, auto& v) { c.leaky_slope = kv::parse_double(k, v); });
  get("head_mode", [&](auto&, auto& v) { c.head_mode = parse_head_mode(v); });
  get("ts_enabled", [&](auto& k, auto& v) { c.ts_enabled = kv::parse_bool(k, v); });
  get("tcn_enabled", [&](auto& k, auto& v) { c.tcn_enabled = kv::parse_bool(k, v); });
  get("tcn_layers", [&](auto& k, auto& v) { c.tcn_layers = kv::parse_size(k, v); });
  get("tcn_kernel", [&](auto& k, auto& v) { c.tcn_kernel = kv::parse_size(k, v); });
  get("cheby_rescale", [&](auto&, auto& v) { c.cheby_rescale = graph::parse_cheby_rescale(v); });
  get("laplacian_update_mode", [&](auto&, auto& v) { c.laplacian_update_mode = graph::parse_laplacian_update_mode(v); });
  get("fusion_split", [&](auto&, auto& v) { c.fusion_split = parse_fusion_split(v); });
  get("laplacian_summary", [&](auto&, auto& v) { c.laplacian_summary = parse_laplacian_summary(v); });
  return c;
}

FeatureTransformOutput feature_transform(const Tensor& x, const FeatureTransformParams& p, LaplacianSummary mode,
                                         double slope) {
  if (x.rank() != 4) throw ShapeError("feature_transform: input must be [B, F, N, T], got " + shape_str(x.shape()));
  if (p.w.dim(1) != x.dim(1) || p.summary_w.dim(1) != x.dim(1)) {
    throw ShapeError("feature_transform: weights expect " + std::to_string(p.w.dim(1)) + " features, input " +
                     shape_str(x.shape()) + " has " + std::to_string(x.dim(1)));
  }
  const std::size_t nodes = x.dim(2), steps = x.dim(3);
  FeatureTransformOutput out;
  out.hidden = leaky_relu(pointwise_conv(x, p.w, p.b), slope);
  const Tensor s = sigmoid(pointwise_conv(x, p.summary_w, p.summary_b));  // [B, 1, N, T]
  if (mode == LaplacianSummary::first) {
    out.summary = reshape(narrow(s, 0, 0, 1), {nodes, steps});
  } else {
    out.summary = reshape(mean_axis(s, 0), {nodes, steps});
  }
  return out;
}

Tensor cst_block(const Tensor& x_in, const Tensor& l_v, CstBlockParams& p, const BlockOptions& opts, bool training) {
  const Tensor& x_high = x_in;
  const Tensor& x_low = x_in;
  const Tensor x_s = graph::chebyshev_conv(l_v, x_high, p.cheby, opts.rescale, opts.slope);
  const Tensor x_t = opts.ts_enabled ? temporal::lt2s(x_low, p.lt2s, opts.slope) : x_low;
  const Tensor scores = temporal::temporal_attention(x_t, p.attention, training);
  const Tensor x_st = pointwise_conv(temporal::apply_attention(scores, x_s), p.agg_w, p.agg_b);
  return layer_norm(add(x_high, x_st), p.norm_gamma, p.norm_beta, {1});
}

Tensor fusion_layer(const Tensor& x_st, const FusionParams& p, const FusionOptions& opts) {
  if (x_st.rank() != 4) throw ShapeError("fusion_layer: input must be [B, C, N, T], got " + shape_str(x_st.shape()));
  const std::size_t steps = x_st.dim(3);
  Tensor head, tail;
  if (opts.split == FusionSplit::half_time) {
    if (steps % 2 != 0) throw DomainError("fusion_layer: half_time split needs an even time length, got " + std::to_string(steps));
    const std::size_t half = steps / 2;
    head = pointwise_conv(narrow(x_st, 3, 0, half), p.head_w, p.head_b);
    tail = pointwise_conv(narrow(x_st, 3, half, half), p.tail_w, p.tail_b);
  } else {
    head = pointwise_conv(x_st, p.head_w, p.head_b);
    tail = pointwise_conv(x_st, p.tail_w, p.tail_b);
  }
  Tensor z = add(head, tail);
  if (opts.head == HeadMode::tcn) {
    z = temporal::tcn_forward(z, p.tcn, opts.slope);
  } else {
    z = leaky_relu(pointwise_conv(z, p.conv_w, p.conv_b), opts.slope);
  }
  const std::size_t batch = z.dim(0), channels = z.dim(1), nodes = z.dim(2), span = z.dim(3);
  if (p.out_w.dim(1) != channels * span) {
    throw ShapeError("fusion_layer: output projection " + shape_str(p.out_w.shape()) + " vs fused features " +
                     shape_str(z.shape()));
  }
  const Tensor flat = reshape(permute(z, {0, 2, 1, 3}), {batch, nodes, channels * span});
  return add_bias(matmul(flat, transpose(p.out_w)), p.out_b, 2);
}

namespace {

double bound_for(std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); }

Tensor uniform_param(Rng& rng, Shape shape, std::size_t fan_in) {
  const double b = bound_for(fan_in);
  return rng.uniform_tensor(std::move(shape), -b, b, true);
}

}  // namespace

CdvgmModel::CdvgmModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  const auto& c = config_;
  Rng rng = rng_stream(seed, "init");
  const std::size_t ch = c.channels;

  feature_.w = uniform_param(rng, {ch, c.n_features}, c.n_features);
  feature_.b = uniform_param(rng, {ch}, c.n_features);
  feature_.summary_w = uniform_param(rng, {1, c.n_features}, c.n_features);
  feature_.summary_b = uniform_param(rng, {1}, c.n_features);

  dvgl_ = graph::DvglParams::init(c.n_nodes, c.theta, c.leaky_slope, rng);

  for (std::size_t i = 0; i < c.n_blocks; ++i) {
    CstBlockParams b;
    b.cheby = graph::ChebyParams::init(c.cheby_k, ch, ch, rng);
    if (c.ts_enabled) b.lt2s = temporal::Lt2sParams::init(ch, rng);
    b.attention = temporal::AttentionParams::init(c.t_in, c.n_nodes, ch, rng);
    b.agg_w = uniform_param(rng, {ch, ch}, ch);
    b.agg_b = uniform_param(rng, {ch}, ch);
    b.norm_gamma = Tensor::full({ch}, 1.0, true);
    b.norm_beta = Tensor::zeros({ch}, true);
    blocks_.push_back(std::move(b));
  }

  fusion_.head_w = uniform_param(rng, {ch, ch}, ch);
  fusion_.head_b = uniform_param(rng, {ch}, ch);
  fusion_.tail_w = uniform_param(rng, {ch, ch}, ch);
  fusion_.tail_b = uniform_param(rng, {ch}, ch);
  if (c.effective_head() == HeadMode::tcn) {
    fusion_.tcn = temporal::TcnParams::init(c.tcn_layers, ch, c.tcn_kernel, rng);
  } else {
    fusion_.conv_w = uniform_param(rng, {ch, ch}, ch);
    fusion_.conv_b = uniform_param(rng, {ch}, ch);
  }
  const std::size_t span = c.fusion_split == FusionSplit::half_time ? c.t_in / 2 : c.t_in;
  fusion_.out_w = uniform_param(rng, {c.t_out, ch * span}, ch * span);
  fusion_.out_b = uniform_param(rng, {c.t_out}, ch * span);
}

CdvgmModel CdvgmModel::clone() const {
  CdvgmModel copy(config_, 0);
  const auto src = parameters();
  const auto dst = copy.parameters();
  for (std::size_t i = 0; i < src.size(); ++i) {
    auto out = dst[i].tensor;
    const auto in = src[i].tensor.data();
    std::copy(in.begin(), in.end(), out.mutable_data().begin());
  }
  for (std::size_t i = 0; i < blocks_.size(); ++i) copy.blocks_[i].attention.bn = blocks_[i].attention.bn;
  return copy;
}

Tensor CdvgmModel::forward(const Tensor& x, bool training, ForwardTrace* trace) {
  const auto& c = config_;
  if (x.rank() != 4 || x.dim(1) != c.n_features || x.dim(2) != c.n_nodes || x.dim(3) != c.t_in) {
    throw ShapeError("model forward: expected input [B, " + std::to_string(c.n_features) + ", " +
                     std::to_string(c.n_nodes) + ", " + std::to_string(c.t_in) + "], got " + shape_str(x.shape()));
  }
  const auto ft = feature_transform(x, feature_, c.laplacian_summary, c.leaky_slope);
  const Tensor l_t = graph::trend_matrix(dvgl_);
  const Tensor l_c = graph::connectivity_matrix(ft.summary);
  Tensor l_v = graph::virtual_laplacian(l_t, l_c, dvgl_.theta, dvgl_.activation_slope);
  if (trace) {
    trace->summary = ft.summary;
    trace->laplacians.clear();
  }

  const BlockOptions block_opts{c.cheby_rescale, c.ts_enabled, c.leaky_slope};
  Tensor h = ft.hidden;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    if (i > 0) l_v = graph::laplacian_update(l_v, c.laplacian_update_mode);
    if (trace) trace->laplacians.push_back(l_v);
    h = cst_block(h, l_v, blocks_[i], block_opts, training);
  }
  return fusion_layer(h, fusion_, {c.fusion_split, c.effective_head(), c.leaky_slope});
}

std::vector<NamedTensor> CdvgmModel::parameters() const {
  std::vector<NamedTensor> out;
  auto push = [&](std::string name, const Tensor& t) {
    if (t.defined()) out.push_back({std::move(name), t});
  };
  push("feature.w", feature_.w);
  push("feature.b", feature_.b);
  push("feature.summary_w", feature_.summary_w);
  push("feature.summary_b", feature_.summary_b);
  push("dvgl.p_h", dvgl_.p_h);
  push("dvgl.p_b", dvgl_.p_b);
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const auto& b = blocks_[i];
    const std::string pre = "block" + std::to_string(i) + ".";
    for (std::size_t k = 0; k < b.cheby.coeffs.size(); ++k) push(pre + "cheby.theta" + std::to_string(k), b.cheby.coeffs[k]);
    push(pre + "lt2s.w", b.lt2s.conv_w);
    push(pre + "lt2s.b", b.lt2s.conv_b);
    push(pre + "attn.v_p", b.attention.v_p);
    push(pre + "attn.w_p", b.attention.w_p);
    push(pre + "attn.b_p", b.attention.b_p);
    push(pre + "attn.tau1", b.attention.tau1);
    push(pre + "attn.tau2", b.attention.tau2);
    push(pre + "agg.w", b.agg_w);
    push(pre + "agg.b", b.agg_b);
    push(pre + "norm.gamma", b.norm_gamma);
    push(pre + "norm.beta", b.norm_beta);
  }
  push("fusion.head.w", fusion_.head_w);
  push("fusion.head.b", fusion_.head_b);
  push("fusion.tail.w", fusion_.tail_w);
  push("fusion.tail.b", fusion_.tail_b);
  for (std::size_t j = 0; j < fusion_.tcn.layers.size(); ++j) {
    push("fusion.tcn" + std::to_string(j) + ".w", fusion_.tcn.layers[j].kernel);
    push("fusion.tcn" + std::to_string(j) + ".b", fusion_.tcn.layers[j].bias);
  }
  push("fusion.conv.w", fusion_.conv_w);
  push("fusion.conv.b", fusion_.conv_b);
  push("fusion.out.w", fusion_.out_w);
  push("fusion.out.b", fusion_.out_b);
  return out;
}

std::size_t CdvgmModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

std::vector<std::pair<std::string, std::vector<double>*>> CdvgmModel::buffers() {
  std::vector<std::pair<std::string, std::vector<double>*>> out;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const std::string pre = "block" + std::to_string(i) + ".attn.bn.";
    out.emplace_back(pre + "running_mean", &blocks_[i].attention.bn.running_mean);
    out.emplace_back(pre + "running_var", &blocks_[i].attention.bn.running_var);
  }
  return out;
}

void copy_state(CdvgmModel& src, CdvgmModel& dst) {
  require_compatible(src.config(), dst.config());
  const auto from = src.parameters();
  auto to = dst.parameters();
  for (std::size_t i = 0; i < from.size(); ++i) {
    const auto in = from[i].tensor.data();
    std::copy(in.begin(), in.end(), to[i].tensor.mutable_data().begin());
  }
  auto bf = src.buffers();
  auto bt = dst.buffers();
  for (std::size_t i = 0; i < bf.size(); ++i) *bt[i].second = *bf[i].second;
}

void require_compatible(const ModelConfig& expected, const ModelConfig& actual) {
  const auto a = expected.to_kv();
  const auto b = actual.to_kv();
  std::string diff;
  for (const auto& [k, v] : a) {
    const auto& w = b.at(k);
    if (v != w) diff += (diff.empty() ? "" : "; ") + k + ": expected " + v + ", found " + w;
  }
  if (!diff.empty()) throw DataError("model config mismatch (" + diff + ")");
}

}  // namespace cdvgm::model
