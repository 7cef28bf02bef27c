#include "comatch/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "comatch/errors.hpp"

namespace comatch::tensor {

namespace {

double evaluate(const LossFn& f) {
  Tape tape;
  return f(tape).item();
}

}  // namespace

std::vector<GradCheckEntry> grad_check_groups(const LossFn& f, std::span<Tensor> params,
                                              std::span<const std::string> names, double eps) {
  if (names.size() != params.size()) throw ContractError("grad_check_groups: one name per parameter required");
  for (Tensor& p : params) p.zero_grad();
  {
    Tape tape;
    Tensor loss = f(tape);
    tape.backward(loss);
  }
  std::vector<GradCheckEntry> report;
  report.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    double worst = 0.0;
    Matrix& value = p.mutable_value();
    for (std::ptrdiff_t k = 0; k < value.size(); ++k) {
      double& slot = value.data()[k];
      const double saved = slot;
      slot = saved + eps;
      const double up = evaluate(f);
      slot = saved - eps;
      const double down = evaluate(f);
      slot = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double analytic = p.grad().data()[k];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(analytic - numeric) / denom);
    }
    report.push_back({names[i], worst});
  }
  return report;
}

double grad_check(const LossFn& f, std::span<Tensor> params, double eps) {
  std::vector<std::string> names(params.size());
  double worst = 0.0;
  for (const auto& entry : grad_check_groups(f, params, names, eps)) {
    worst = std::max(worst, entry.max_relative_error);
  }
  return worst;
}

}  // namespace comatch::tensor
