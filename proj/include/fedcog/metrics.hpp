#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "fedcog/data.hpp"
#include "fedcog/generation.hpp"
#include "fedcog/nn.hpp"

namespace fedcog::metrics {

/// Per-round diagnostics. Per-client lists are ordered by client id and have
/// one entry per client that took part in the round.
struct RoundRecord {
  int round = 0;
  double global_acc = 0.0;
  std::vector<int> client_ids;
  std::vector<double> per_client_general_acc;
  std::vector<double> per_client_personal_acc;
  std::vector<double> model_diff_l2;
  std::vector<double> mean_train_loss;
  std::vector<double> gen_seconds;
  std::vector<double> train_seconds;
  std::vector<std::string> warnings;
};

double mean(const std::vector<double>& values);

/// Top-1 accuracy; argmax ties resolve to the lowest class index.
double evaluate_accuracy(const nn::ModelParams& model, const data::LabeledDataset& test);

struct PersonalSplit {
  data::LabeledDataset train;
  data::LabeledDataset personal_test;
  std::vector<int> train_only_classes;  // classes with fewer than two samples
};

/// Per-class stratified holdout of round(fraction * n_c) samples (at least
/// one, at most n_c - 1). Classes with fewer than two samples stay in train.
PersonalSplit personalized_split(const data::LabeledDataset& client, double fraction, std::uint64_t seed);

/// Euclidean distance over all parameters.
double model_difference(const nn::ModelParams& a, const nn::ModelParams& b);

// ---------------------------------------------------------------------------
// Convergence bound for the global objective.

struct TheoremInputs {
  double phi0_minus_inf = 0.0;  // initial objective gap
  double L = 1.0;               // smoothness constant
  double sigma = 0.0;           // gradient noise standard deviation
  double kappa = 0.0;           // dissimilarity offset (kappa, not squared)
  double beta_sq = 1.0;         // dissimilarity multiplier beta^2
  int tau = 1;
  double eta = 0.01;
  int T = 1;
  std::vector<double> p{1.0};   // aggregation weights, sum to 1
};

struct TheoremTerms {
  double optimization = 0.0;     // 4 (Phi0 - Phi_inf) / (tau eta T)
  double noise = 0.0;            // 4 eta L sigma^2 sum p_k^2
  double local_noise = 0.0;      // 3 (tau - 1) eta^2 sigma^2 L^2
  double heterogeneity = 0.0;    // 6 tau (tau - 1) eta^2 L^2 kappa^2

  double total() const { return optimization + noise + local_noise + heterogeneity; }
};

/// Largest admissible eta * L: min{1/(2 tau), 1/sqrt(2 tau (tau-1)(2 beta^2 + 1))}.
double max_step_size_product(int tau, double beta_sq);

/// Validates the inputs (including the step-size condition) and returns the
/// four terms of the bound. Throws ConfigError naming the violated condition.
TheoremTerms theorem_terms(const TheoremInputs& inp);

double theorem_bound(const TheoremInputs& inp);

// ---------------------------------------------------------------------------

struct Lemma1Result {
  double lhs = 0.0;
  double rhs = 0.0;
  bool holds = false;
};

/// Task loss on `eval` plus the KD loss of `model` against each generated
/// dataset's cached teacher. `gen_new` is expected to be distilled from
/// `model` itself, so its KD term vanishes and lhs <= rhs.
Lemma1Result lemma1_check(const nn::ModelParams& model, const gen::GeneratedDataset& gen_new,
                          const gen::GeneratedDataset& gen_old, const data::LabeledDataset& eval);

/// Mean and sample standard deviation (n - 1 denominator; 0 for n < 2).
std::pair<double, double> mean_and_stddev(const std::vector<double>& values);

}  // namespace fedcog::metrics
