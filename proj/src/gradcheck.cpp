#include "dseq/gradcheck.hpp"

#include <algorithm>
#include <cmath>

DSEQ_BEGIN_NAMESPACE

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
  return std::abs(analytic - numeric) / denom;
}

GradCheckReport grad_check(const std::function<Tensor()>& f, std::vector<Tensor> inputs, double eps, double tol,
                           std::size_t sample, std::uint64_t sample_seed) {
  auto& tape = Tape::current();
  tape.clear();
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  Tensor y = f();
  if (y.rank() != 0) throw ShapeError("grad_check: function must return a scalar, got " + to_string(y.shape()));
  backward(y);
  std::vector<std::vector<double>> analytic(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    analytic[i].assign(inputs[i].numel(), 0.0);
    if (inputs[i].has_grad()) std::copy(inputs[i].grad().begin(), inputs[i].grad().end(), analytic[i].begin());
  }
  tape.clear();

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t j = 0; j < inputs[i].numel(); ++j) coords.emplace_back(i, j);
  }
  if (sample > 0 && sample < coords.size()) {
    Rng rng(sample_seed);
    rng.shuffle(coords);
    coords.resize(sample);
    std::sort(coords.begin(), coords.end());
  }

  GradCheckReport report;
  report.tolerance = tol;
  NoGradGuard no_grad;
  for (auto [i, j] : coords) {
    auto values = inputs[i].mutable_data();
    const Real original = values[j];
    values[j] = static_cast<Real>(original + eps);
    const double plus = f().item();
    values[j] = static_cast<Real>(original - eps);
    const double minus = f().item();
    values[j] = original;
    const double numeric = (plus - minus) / (2 * eps);
    const double err = relative_error(analytic[i][j], numeric);
    report.max_rel_error = std::max(report.max_rel_error, err);
    ++report.checked;
    if (!(err < tol)) report.failures.push_back({i, j, analytic[i][j], numeric, err});
  }
  report.passed = report.failures.empty();
  return report;
}

DSEQ_END_NAMESPACE
