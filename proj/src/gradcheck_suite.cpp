#include "cdvgm/gradcheck_suite.hpp"

#include <algorithm>
#include <functional>

#include "cdvgm/errors.hpp"
#include "cdvgm/gradcheck.hpp"
#include "cdvgm/graph_ops.hpp"
#include "cdvgm/model.hpp"
#include "cdvgm/ops.hpp"
#include "cdvgm/rng.hpp"
#include "cdvgm/temporal_ops.hpp"
#include "cdvgm/training.hpp"

namespace cdvgm::suite {

Scale parse_scale(const std::string& s) {
  if (s == "op") return Scale::op;
  if (s == "block") return Scale::block;
  if (s == "model") return Scale::model;
  throw ConfigError("gradcheck scale must be op|block|model, got '" + s + "'");
}

std::string to_string(Scale s) {
  switch (s) {
    case Scale::op: return "op";
    case Scale::block: return "block";
    case Scale::model: return "model";
  }
  return "?";
}

namespace {

constexpr std::size_t kOpPoints = 10;
// Toy instances use a larger negative slope so that no path is damped below
// finite-difference resolution; the backward rules are slope-agnostic.
constexpr double kCheckSlope = 0.2;

class Suite {
 public:
  Suite(std::uint64_t seed, double eps) : rng_(rng_stream(seed, "gradcheck")), eps_(eps) {}

  Tensor leaf(Shape shape, double lo = -1.0, double hi = 1.0) { return rng_.uniform_tensor(std::move(shape), lo, hi, true); }

  // Magnitudes in [0.2, 1] with random sign, clear of kinks at zero.
  Tensor away_from_zero(Shape shape) {
    Tensor t = leaf(std::move(shape), 0.2, 1.0);
    for (double& v : t.mutable_data()) {
      if (rng_.uniform() < 0.5) v = -v;
    }
    return t;
  }

  Rng& rng() { return rng_; }

  // Checks sum(out() * R) for a fixed random R against every listed leaf.
  double check(const std::function<Tensor()>& out, const std::vector<NamedTensor>& leaves) {
    Tensor probe;
    {
      NoGradGuard no_grad;
      probe = out();
    }
    const Tensor weights = rng_.normal_tensor(probe.shape(), 1.0);
    const auto results = finite_diff_check_params([&] { return sum(mul(out(), weights)); }, leaves, eps_);
    double worst = 0.0;
    for (const auto& r : results) worst = std::max(worst, r.result.max_rel_error);
    return worst;
  }

  // Like check(), but one report per leaf.
  std::vector<ComponentReport> check_each(const std::string& prefix, const std::function<Tensor()>& out,
                                          const std::vector<NamedTensor>& leaves) {
    Tensor probe;
    {
      NoGradGuard no_grad;
      probe = out();
    }
    const Tensor weights = rng_.normal_tensor(probe.shape(), 1.0);
    const auto results = finite_diff_check_params([&] { return sum(mul(out(), weights)); }, leaves, eps_);
    std::vector<ComponentReport> out_reports;
    for (const auto& r : results) {
      out_reports.push_back({prefix + r.name, r.result.max_rel_error, 1, r.result.analytic, r.result.numeric});
    }
    return out_reports;
  }

  void op(const std::string& name, const std::function<double(Suite&)>& one_point) {
    ComponentReport r{name, 0.0, 0};
    for (std::size_t i = 0; i < kOpPoints; ++i) {
      r.max_rel_error = std::max(r.max_rel_error, one_point(*this));
      ++r.points;
    }
    reports_.push_back(r);
  }

  void single(const std::string& name, double err) { reports_.push_back({name, err, 1}); }
  void extend(const std::vector<ComponentReport>& more) { reports_.insert(reports_.end(), more.begin(), more.end()); }
  std::vector<ComponentReport> take() { return std::move(reports_); }

 private:
  Rng rng_;
  double eps_;
  std::vector<ComponentReport> reports_;
};

void randomize_bn(temporal::AttentionParams& p, Rng& rng) {
  for (double& m : p.bn.running_mean) m = rng.uniform(-0.3, 0.3);
  for (double& v : p.bn.running_var) v = rng.uniform(0.5, 1.5);
}

void op_suite(Suite& s) {
  auto unary = [&](const std::string& name, auto fn, double lo, double hi) {
    s.op(name, [fn, lo, hi](Suite& st) {
      Tensor x = st.leaf({3, 4}, lo, hi);
      return st.check([&] { return fn(x); }, {{"x", x}});
    });
  };
  auto binary = [&](const std::string& name, auto fn, Shape sb) {
    s.op(name, [fn, sb](Suite& st) {
      Tensor a = st.leaf({3, 4});
      Tensor b = st.leaf(sb, 0.5, 1.5);
      return st.check([&] { return fn(a, b); }, {{"a", a}, {"b", b}});
    });
  };
  binary("add", [](auto& a, auto& b) { return add(a, b); }, {3, 4});
  binary("add[scalar]", [](auto& a, auto& b) { return add(a, b); }, {1});
  binary("sub", [](auto& a, auto& b) { return sub(a, b); }, {3, 4});
  binary("mul", [](auto& a, auto& b) { return mul(a, b); }, {3, 4});
  binary("mul[scalar]", [](auto& a, auto& b) { return mul(a, b); }, {1});
  binary("div", [](auto& a, auto& b) { return div(a, b); }, {3, 4});
  unary("scale", [](auto& x) { return scale(x, -1.7); }, -1, 1);
  unary("add_scalar", [](auto& x) { return add_scalar(x, 0.3); }, -1, 1);
  unary("neg", [](auto& x) { return neg(x); }, -1, 1);
  unary("square", [](auto& x) { return square(x); }, -1, 1);
  unary("sqrt", [](auto& x) { return sqrt(x); }, 0.5, 2.0);
  unary("exp", [](auto& x) { return exp(x); }, -1, 1);
  unary("log1p", [](auto& x) { return log1p(x); }, 0.0, 2.0);
  unary("sin", [](auto& x) { return sin(x); }, -3, 3);
  unary("sigmoid", [](auto& x) { return sigmoid(x); }, -3, 3);
  unary("sum", [](auto& x) { return sum(x); }, -1, 1);
  unary("mean", [](auto& x) { return mean(x); }, -1, 1);
  unary("amax", [](auto& x) { return amax(x); }, -1, 1);
  unary("sum_axis", [](auto& x) { return sum_axis(x, 1); }, -1, 1);
  unary("mean_axis", [](auto& x) { return mean_axis(x, 0, true); }, -1, 1);
  unary("softmax", [](auto& x) { return softmax(x, 1); }, -2, 2);
  unary("softmax[axis0]", [](auto& x) { return softmax(x, 0); }, -2, 2);
  unary("reshape", [](auto& x) { return reshape(x, {2, 6}); }, -1, 1);
  unary("transpose", [](auto& x) { return transpose(x); }, -1, 1);
  unary("narrow", [](auto& x) { return narrow(x, 1, 1, 2); }, -1, 1);
  unary("broadcast_to", [](auto& x) { return broadcast_to(mean_axis(x, 0, true), {3, 4}); }, -1, 1);
  for (const char* name : {"abs", "leaky_relu", "relu"}) {
    s.op(name, [name = std::string(name)](Suite& st) {
      Tensor x = st.away_from_zero({3, 4});
      return st.check(
          [&] { return name == "abs" ? abs(x) : name == "relu" ? relu(x) : leaky_relu(x, 0.01); }, {{"x", x}});
    });
  }
  s.op("permute", [](Suite& st) {
    Tensor x = st.leaf({2, 3, 4});
    return st.check([&] { return permute(x, {2, 0, 1}); }, {{"x", x}});
  });
  s.op("concat", [](Suite& st) {
    Tensor a = st.leaf({2, 3}), b = st.leaf({2, 2});
    return st.check([&] { return concat({a, b}, 1); }, {{"a", a}, {"b", b}});
  });
  s.op("add_bias", [](Suite& st) {
    Tensor x = st.leaf({2, 3, 4}), b = st.leaf({3});
    return st.check([&] { return add_bias(x, b, 1); }, {{"x", x}, {"b", b}});
  });
  s.op("matmul", [](Suite& st) {
    Tensor a = st.leaf({3, 4}), b = st.leaf({4, 2});
    return st.check([&] { return matmul(a, b); }, {{"a", a}, {"b", b}});
  });
  s.op("matmul[batched]", [](Suite& st) {
    Tensor a = st.leaf({2, 1, 3, 4}), b = st.leaf({3, 4, 2});
    return st.check([&] { return matmul(a, b); }, {{"a", a}, {"b", b}});
  });
  s.op("pointwise_conv", [](Suite& st) {
    Tensor x = st.leaf({2, 3, 2, 3}), w = st.leaf({4, 3}), b = st.leaf({4});
    return st.check([&] { return pointwise_conv(x, w, b); }, {{"x", x}, {"w", w}, {"b", b}});
  });
  s.op("temporal_conv[causal]", [](Suite& st) {
    Tensor x = st.leaf({2, 2, 2, 5}), w = st.leaf({3, 2, 2}), b = st.leaf({3});
    return st.check([&] { return temporal_conv(x, w, b, 2, true); }, {{"x", x}, {"w", w}, {"b", b}});
  });
  s.op("temporal_conv[valid]", [](Suite& st) {
    Tensor x = st.leaf({1, 2, 2, 5}), w = st.leaf({2, 2, 3}), b = st.leaf({2});
    return st.check([&] { return temporal_conv(x, w, b, 1, false); }, {{"x", x}, {"w", w}, {"b", b}});
  });
  s.op("layer_norm", [](Suite& st) {
    Tensor x = st.leaf({2, 4, 2, 3}), g = st.leaf({4}, 0.5, 1.5), b = st.leaf({4});
    return st.check([&] { return layer_norm(x, g, b, {1}); }, {{"x", x}, {"gamma", g}, {"beta", b}});
  });
  s.op("layer_norm[multi-axis]", [](Suite& st) {
    Tensor x = st.leaf({2, 3, 4}), g = st.leaf({3, 4}, 0.5, 1.5), b = st.leaf({3, 4});
    return st.check([&] { return layer_norm(x, g, b, {1, 2}); }, {{"x", x}, {"gamma", g}, {"beta", b}});
  });
  s.op("batch_norm[train]", [](Suite& st) {
    Tensor x = st.leaf({3, 2, 2});
    auto state = BatchNormState::for_features(4);
    return st.check([&] { return batch_norm(x, state, true); }, {{"x", x}});
  });
  s.op("batch_norm[eval]", [](Suite& st) {
    Tensor x = st.leaf({2, 2, 2});
    auto state = BatchNormState::for_features(4);
    for (double& v : state.running_var) v = st.rng().uniform(0.5, 1.5);
    return st.check([&] { return batch_norm(x, state, false); }, {{"x", x}});
  });
  s.op("time_contract", [](Suite& st) {
    Tensor e = st.leaf({2, 3, 4}), x = st.leaf({2, 2, 2, 4});
    return st.check([&] { return time_contract(e, x); }, {{"e", e}, {"x", x}});
  });
  s.op("mse_loss", [](Suite& st) {
    Tensor p = st.leaf({2, 3, 2}), t = st.leaf({2, 3, 2});
    return st.check([&] { return training::mse_loss(p, t); }, {{"pred", p}, {"target", t}});
  });
  s.op("mse_loss[rmse]", [](Suite& st) {
    Tensor p = st.leaf({2, 3, 2}), t = st.leaf({2, 3, 2});
    return st.check([&] { return training::mse_loss(p, t, training::LossMode::rmse); }, {{"pred", p}, {"target", t}});
  });

  // Graph operators.
  s.op("trend_matrix", [](Suite& st) {
    auto p = graph::DvglParams::init(4, 0.5, 0.01, st.rng());
    return st.check([&] { return graph::trend_matrix(p); }, {{"p_h", p.p_h}, {"p_b", p.p_b}});
  });
  s.op("connectivity_matrix", [](Suite& st) {
    Tensor x = st.leaf({4, 3}, 0.1, 1.0);
    return st.check([&] { return graph::connectivity_matrix(x); }, {{"x", x}});
  });
  s.op("virtual_laplacian", [](Suite& st) {
    Tensor lt = st.away_from_zero({4, 4}), lc = st.leaf({4, 4}, -0.1, 0.0);
    return st.check([&] { return graph::virtual_laplacian(lt, lc, 0.5); }, {{"l_t", lt}, {"l_c", lc}});
  });
  for (auto mode : {graph::LaplacianUpdateMode::scalar_mean, graph::LaplacianUpdateMode::row_mean}) {
    s.op("laplacian_update[" + graph::to_string(mode) + "]", [mode](Suite& st) {
      Tensor l = st.leaf({4, 4});
      return st.check([&] { return graph::laplacian_update(l, mode); }, {{"l_v", l}});
    });
  }
  s.op("rescale_laplacian", [](Suite& st) {
    Tensor l = st.leaf({4, 4}, 0.1, 1.0);
    return st.check([&] { return graph::rescale_laplacian(l, graph::ChebyRescale::rowsum); }, {{"l", l}});
  });
  for (std::size_t k : {1, 3}) {
    s.op("chebyshev_conv[K=" + std::to_string(k) + "]", [k](Suite& st) {
      Tensor l = st.leaf({3, 3}, 0.0, 1.0), x = st.leaf({2, 2, 3, 2});
      auto p = graph::ChebyParams::init(k, 2, 2, st.rng());
      std::vector<NamedTensor> leaves{{"l_v", l}, {"x", x}};
      for (std::size_t i = 0; i < k; ++i) leaves.push_back({"theta" + std::to_string(i), p.coeffs[i]});
      return st.check([&] { return graph::chebyshev_conv(l, x, p); }, leaves);
    });
  }

  // Temporal operators.
  s.op("lt2s", [](Suite& st) {
    Tensor x = st.leaf({2, 2, 2, 5});
    auto p = temporal::Lt2sParams::init(2, st.rng());
    return st.check([&] { return temporal::lt2s(x, p); }, {{"x", x}, {"w", p.conv_w}, {"b", p.conv_b}});
  });
  s.op("temporal_attention[train]", [](Suite& st) {
    Tensor x = st.leaf({3, 2, 2, 4});
    auto p = temporal::AttentionParams::init(4, 2, 2, st.rng());
    return st.check([&] { return temporal::temporal_attention(x, p, true); },
                    {{"x", x}, {"v_p", p.v_p}, {"w_p", p.w_p}, {"b_p", p.b_p}, {"tau1", p.tau1}, {"tau2", p.tau2}});
  });
  s.op("temporal_attention[eval]", [](Suite& st) {
    Tensor x = st.leaf({1, 2, 2, 4});
    auto p = temporal::AttentionParams::init(4, 2, 2, st.rng());
    randomize_bn(p, st.rng());
    return st.check([&] { return temporal::temporal_attention(x, p, false); },
                    {{"x", x}, {"v_p", p.v_p}, {"w_p", p.w_p}, {"b_p", p.b_p}, {"tau1", p.tau1}, {"tau2", p.tau2}});
  });
  s.op("apply_attention", [](Suite& st) {
    Tensor e = st.leaf({2, 3, 3}, 0.0, 1.0), x = st.leaf({2, 2, 2, 3});
    return st.check([&] { return temporal::apply_attention(e, x); }, {{"e", e}, {"x", x}});
  });
  s.op("tcn_forward", [](Suite& st) {
    Tensor x = st.leaf({1, 2, 2, 4});
    auto p = temporal::TcnParams::init(2, 2, 2, st.rng());
    std::vector<NamedTensor> leaves{{"x", x}};
    for (std::size_t j = 0; j < p.layers.size(); ++j) {
      leaves.push_back({"w" + std::to_string(j), p.layers[j].kernel});
      leaves.push_back({"b" + std::to_string(j), p.layers[j].bias});
    }
    return st.check([&] { return temporal::tcn_forward(x, p); }, leaves);
  });
}

model::CstBlockParams make_block(std::size_t c, std::size_t n, std::size_t t, bool ts, Rng& rng) {
  model::CstBlockParams b;
  b.cheby = graph::ChebyParams::init(3, c, c, rng);
  if (ts) b.lt2s = temporal::Lt2sParams::init(c, rng);
  b.attention = temporal::AttentionParams::init(t, n, c, rng);
  b.agg_w = rng.uniform_tensor({c, c}, -0.5, 0.5, true);
  b.agg_b = rng.uniform_tensor({c}, -0.5, 0.5, true);
  b.norm_gamma = rng.uniform_tensor({c}, 0.5, 1.5, true);
  b.norm_beta = rng.uniform_tensor({c}, -0.5, 0.5, true);
  return b;
}

std::vector<NamedTensor> block_leaves(model::CstBlockParams& b) {
  std::vector<NamedTensor> out;
  for (std::size_t k = 0; k < b.cheby.coeffs.size(); ++k) out.push_back({"cheby.theta" + std::to_string(k), b.cheby.coeffs[k]});
  if (b.lt2s.conv_w.defined()) {
    out.push_back({"lt2s.w", b.lt2s.conv_w});
    out.push_back({"lt2s.b", b.lt2s.conv_b});
  }
  out.push_back({"attn.v_p", b.attention.v_p});
  out.push_back({"attn.w_p", b.attention.w_p});
  out.push_back({"attn.b_p", b.attention.b_p});
  out.push_back({"attn.tau1", b.attention.tau1});
  out.push_back({"attn.tau2", b.attention.tau2});
  out.push_back({"agg.w", b.agg_w});
  out.push_back({"agg.b", b.agg_b});
  out.push_back({"norm.gamma", b.norm_gamma});
  out.push_back({"norm.beta", b.norm_beta});
  return out;
}

void block_suite(Suite& s) {
  const std::size_t n = 3, t = 4, c = 3;
  Rng& rng = s.rng();

  for (auto mode : {model::LaplacianSummary::first, model::LaplacianSummary::mean}) {
    model::FeatureTransformParams p{rng.uniform_tensor({c, 2}, -1, 1, true), rng.uniform_tensor({c}, -1, 1, true),
                                    rng.uniform_tensor({1, 2}, -1, 1, true), rng.uniform_tensor({1}, -1, 1, true)};
    Tensor x = s.leaf({2, 2, n, t}, 0.0, 2.0);
    std::vector<NamedTensor> leaves{{"x", x}, {"w", p.w}, {"b", p.b}, {"summary_w", p.summary_w}, {"summary_b", p.summary_b}};
    const std::string tag = "feature_transform[" + model::to_string(mode) + "].";
    s.extend(s.check_each(tag + "hidden.", [&] { return model::feature_transform(x, p, mode).hidden; }, leaves));
    s.extend(s.check_each(tag + "summary.", [&] { return model::feature_transform(x, p, mode).summary; }, leaves));
  }

  {
    auto p = graph::DvglParams::init(n, 0.5, 0.01, rng);
    Tensor x = s.leaf({n, t}, 0.05, 1.0);
    s.extend(s.check_each("dvgl_chain.",
                          [&] {
                            return graph::virtual_laplacian(graph::trend_matrix(p), graph::connectivity_matrix(x), p.theta,
                                                            p.activation_slope);
                          },
                          {{"x", x}, {"p_h", p.p_h}, {"p_b", p.p_b}}));
  }

  struct BlockCase {
    std::string tag;
    std::size_t batch;
    bool training, ts;
  };
  for (const auto& bc : {BlockCase{"cst_block[train,B=3].", 3, true, true}, BlockCase{"cst_block[eval,B=1].", 1, false, true},
                         BlockCase{"cst_block[ts_off].", 3, true, false}}) {
    auto b = make_block(c, n, t, bc.ts, rng);
    if (!bc.training) randomize_bn(b.attention, rng);
    Tensor x = s.leaf({bc.batch, c, n, t});
    Tensor l = s.leaf({n, n}, 0.0, 1.0);
    auto leaves = block_leaves(b);
    leaves.insert(leaves.begin(), {{"x_in", x}, {"l_v", l}});
    const model::BlockOptions opts{graph::ChebyRescale::rowsum, bc.ts, kCheckSlope};
    s.extend(s.check_each(bc.tag, [&] { return model::cst_block(x, l, b, opts, bc.training); }, leaves));
  }

  struct FusionCase {
    std::string tag;
    model::FusionOptions opts;
  };
  for (const auto& fc : {FusionCase{"fusion[tcn,half_time].", {model::FusionSplit::half_time, model::HeadMode::tcn, kCheckSlope}},
                         FusionCase{"fusion[conv,half_time].", {model::FusionSplit::half_time, model::HeadMode::conv, kCheckSlope}},
                         FusionCase{"fusion[tcn,full_copy].", {model::FusionSplit::full_copy, model::HeadMode::tcn, kCheckSlope}}}) {
    const std::size_t span = fc.opts.split == model::FusionSplit::half_time ? t / 2 : t;
    model::FusionParams p;
    p.head_w = s.leaf({c, c});
    p.head_b = s.leaf({c});
    p.tail_w = s.leaf({c, c});
    p.tail_b = s.leaf({c});
    std::vector<NamedTensor> leaves{{"head.w", p.head_w}, {"head.b", p.head_b}, {"tail.w", p.tail_w}, {"tail.b", p.tail_b}};
    if (fc.opts.head == model::HeadMode::tcn) {
      p.tcn = temporal::TcnParams::init(2, c, 3, rng);
      for (std::size_t j = 0; j < p.tcn.layers.size(); ++j) {
        leaves.push_back({"tcn" + std::to_string(j) + ".w", p.tcn.layers[j].kernel});
        leaves.push_back({"tcn" + std::to_string(j) + ".b", p.tcn.layers[j].bias});
      }
    } else {
      p.conv_w = s.leaf({c, c});
      p.conv_b = s.leaf({c});
      leaves.push_back({"conv.w", p.conv_w});
      leaves.push_back({"conv.b", p.conv_b});
    }
    p.out_w = s.leaf({t, c * span});
    p.out_b = s.leaf({t});
    leaves.push_back({"out.w", p.out_w});
    leaves.push_back({"out.b", p.out_b});
    Tensor x = s.leaf({2, c, n, t});
    leaves.insert(leaves.begin(), {"x_st", x});
    s.extend(s.check_each(fc.tag, [&] { return model::fusion_layer(x, p, fc.opts); }, leaves));
  }
}

bool is_bias(const std::string& name) {
  return name.size() >= 2 && (name.ends_with(".b") || name.ends_with("_b"));
}

// Weights drawn U(-1, 1) so that every path carries a gradient well above
// finite-difference resolution; additive biases only shift the output and are
// left at zero.
void generic_point(model::CdvgmModel& m, Rng& rng) {
  for (auto& p : m.parameters()) {
    const bool bias = is_bias(p.name);
    for (double& v : Tensor(p.tensor).mutable_data()) v = bias ? 0.0 : rng.uniform(-1.0, 1.0);
  }
}

model::ModelConfig toy_config() {
  model::ModelConfig c;
  c.n_nodes = 3;
  c.n_features = 2;
  c.t_in = 4;
  c.t_out = 4;
  c.n_blocks = 2;
  c.channels = 3;
  c.cheby_k = 3;
  c.leaky_slope = kCheckSlope;
  return c;
}

void model_suite(Suite& s, std::uint64_t seed) {
  struct ModelCase {
    std::string tag;
    model::ModelConfig config;
    std::size_t batch;
    bool training;
  };
  auto conv = toy_config();
  conv.tcn_enabled = false;
  conv.ts_enabled = false;
  auto rows = toy_config();
  rows.laplacian_update_mode = graph::LaplacianUpdateMode::row_mean;
  rows.laplacian_summary = model::LaplacianSummary::mean;
  rows.theta = 0.8;
  const std::vector<ModelCase> cases = {
      {"model[B=1,eval].", toy_config(), 1, false},
      {"model[B=3,train].", toy_config(), 3, true},
      {"model[conv,no_ts].", conv, 1, false},
      {"model[row_mean,mean].", rows, 3, true},
  };
  for (const auto& mc : cases) {
    model::CdvgmModel m(mc.config, seed);
    for (auto& b : m.blocks()) randomize_bn(b.attention, s.rng());
    generic_point(m, s.rng());
    Tensor x = s.leaf({mc.batch, mc.config.n_features, mc.config.n_nodes, mc.config.t_in}, 0.0, 1.0);
    auto leaves = m.parameters();
    leaves.insert(leaves.begin(), {"input", x});
    s.extend(s.check_each(mc.tag, [&] { return m.forward(x, mc.training); }, leaves));
  }
}

}  // namespace

std::vector<ComponentReport> run_gradcheck(Scale scale, std::uint64_t seed, double eps) {
  Suite s(seed, eps);
  switch (scale) {
    case Scale::op: op_suite(s); break;
    case Scale::block: block_suite(s); break;
    case Scale::model: model_suite(s, seed); break;
  }
  return s.take();
}

}  // namespace cdvgm::suite
