#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "fedcog/nn.hpp"

namespace fedcog::nn {

struct GradCheckOptions {
  double step = 1e-5;
  double rel_tol = 1e-4;
  double abs_floor = 1e-7;
};

struct GradCheckReport {
  std::size_t checked = 0;
  std::size_t failures = 0;
  double max_rel_error = 0.0;  // over entries whose absolute error exceeds the floor
  double max_abs_error = 0.0;

  bool passed() const { return failures == 0; }
  void merge(const GradCheckReport& other);
};

/// Compares `backward` against central finite differences of `evaluate_loss`
/// for every requested parameter and input entry.
GradCheckReport check_gradients(const ModelParams& model, const Tensor& batch, const LossSpec& spec,
                                Wrt wrt, const GradCheckOptions& options = {});

struct GradCheckSuiteLine {
  std::string composition;
  GradCheckReport report;
};

/// Runs every loss composition (CE, KL-to-teacher, JS disagreement, proximal,
/// and weighted mixes) on `num_models` random MLPs with at most three layers
/// and twenty units per layer.
std::vector<GradCheckSuiteLine> run_gradcheck_suite(std::size_t num_models, std::uint64_t seed,
                                                    const GradCheckOptions& options = {});

}  // namespace fedcog::nn
