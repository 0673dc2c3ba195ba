#pragma once

// Finite-difference gradient suite. Always runs in 64-bit precision, whatever
// the precision of the caller, so this header exposes plain types only.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace dseq::gradsuite {

struct Row {
  std::string op;
  int instances = 0;
  int passed = 0;
  double max_rel_error = 0;
};

/// grad_check of every differentiable primitive on `instances` random inputs
/// drawn uniformly from [-1, 1].
std::vector<Row> run_primitives(int instances, std::uint64_t seed, double tol);

/// Full one-step sequential-prediction loss on a 16x16-pixel toy image,
/// checked on a random subset of `sample` context-encoder and predictor
/// parameter elements per instance.
Row run_dseq_loss(int instances, std::uint64_t seed, double tol, std::size_t sample);

}  // namespace dseq::gradsuite
