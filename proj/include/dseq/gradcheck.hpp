#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "dseq/rng.hpp"
#include "dseq/tensor.hpp"

DSEQ_BEGIN_NAMESPACE

struct GradCheckEntry {
  std::size_t input = 0;
  std::size_t index = 0;
  double analytic = 0;
  double numeric = 0;
  double rel_error = 0;
};

struct GradCheckReport {
  double max_rel_error = 0;
  double tolerance = 0;
  std::size_t checked = 0;
  bool passed = true;
  std::vector<GradCheckEntry> failures;  // entries with rel_error >= tolerance
};

/// Relative error |a - n| / max(|a|, |n|, 1e-6).
double relative_error(double analytic, double numeric);

/// Compares reverse-mode gradients of the scalar `f` with central differences
/// of step `eps` for every element of `inputs` (or a random subset of
/// `sample` elements when sample > 0). Inputs are marked as requiring grad;
/// their values are restored afterwards. Clears the current tape.
GradCheckReport grad_check(const std::function<Tensor()>& f, std::vector<Tensor> inputs, double eps, double tol,
                           std::size_t sample = 0, std::uint64_t sample_seed = 0);

DSEQ_END_NAMESPACE
