#include "cdvgm/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "cdvgm/errors.hpp"

namespace cdvgm {

namespace {

void check_eps(double eps) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) throw std::invalid_argument("finite_diff_check: eps must lie in [1e-7, 1e-3]");
}

double eval_scalar(const Tensor& out) {
  if (out.numel() != 1) throw ShapeError("finite_diff_check: f must be scalar-valued, got shape " + shape_str(out.shape()));
  return out.item();
}

void record(GradCheckResult& r, std::size_t i, double analytic, double numeric) {
  const double err = relative_error(analytic, numeric);
  if (i == 0 || err > r.max_rel_error) {
    r.max_rel_error = err;
    r.worst_index = i;
    r.analytic = analytic;
    r.numeric = numeric;
  }
}

}  // namespace

double relative_error(double a, double b) {
  const double denom = std::max({std::fabs(a), std::fabs(b), 1e-8});
  return std::fabs(a - b) / denom;
}

GradCheckResult finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps) {
  check_eps(eps);
  Tensor leaf = Tensor::from(x.shape(), x.to_vector(), true);
  Tensor out = f(leaf);
  eval_scalar(out);
  if (!out.requires_grad()) throw std::invalid_argument("finite_diff_check: f does not depend on x through the tape");
  out.backward();
  const auto analytic = leaf.grad();

  GradCheckResult r;
  NoGradGuard guard;
  std::vector<double> values = x.to_vector();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double orig = values[i];
    values[i] = orig + eps;
    const double fp = eval_scalar(f(Tensor::from(x.shape(), values)));
    values[i] = orig - eps;
    const double fm = eval_scalar(f(Tensor::from(x.shape(), values)));
    values[i] = orig;
    record(r, i, analytic[i], (fp - fm) / (2.0 * eps));
  }
  return r;
}

std::vector<ParamCheck> finite_diff_check_params(const std::function<Tensor()>& f, std::vector<NamedTensor> params,
                                                 double eps) {
  check_eps(eps);
  for (auto& p : params) {
    p.tensor.set_requires_grad(true);
    p.tensor.zero_grad();
  }
  Tensor out = f();
  eval_scalar(out);
  out.backward();

  std::vector<ParamCheck> report;
  NoGradGuard guard;
  for (auto& p : params) {
    const auto analytic = p.tensor.grad();
    auto values = p.tensor.mutable_data();
    GradCheckResult r;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double orig = values[i];
      values[i] = orig + eps;
      const double fp = eval_scalar(f());
      values[i] = orig - eps;
      const double fm = eval_scalar(f());
      values[i] = orig;
      record(r, i, analytic[i], (fp - fm) / (2.0 * eps));
    }
    report.push_back({p.name, r});
  }
  return report;
}

}  // namespace cdvgm
