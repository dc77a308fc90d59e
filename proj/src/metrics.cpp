#include "fedcog/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "fedcog/error.hpp"
#include "fedcog/localtrain.hpp"
#include "fedcog/rng.hpp"

namespace fedcog::metrics {

double mean(const std::vector<double>& values) {
  if (values.empty()) return 0.0;
  return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

std::pair<double, double> mean_and_stddev(const std::vector<double>& values) {
  const double m = mean(values);
  if (values.size() < 2) return {m, 0.0};
  double ss = 0.0;
  for (double v : values) ss += (v - m) * (v - m);
  return {m, std::sqrt(ss / static_cast<double>(values.size() - 1))};
}

double evaluate_accuracy(const nn::ModelParams& model, const data::LabeledDataset& test) {
  if (test.empty()) throw InputError("evaluate_accuracy on an empty test set");
  const Tensor logits = nn::forward(model, test.features);
  std::size_t correct = 0;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    const auto row = logits.row(r);
    // max_element returns the first maximum, i.e. the lowest tied class.
    const auto pred = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    if (pred == test.labels[r]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

PersonalSplit personalized_split(const data::LabeledDataset& client, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("personal split fraction must lie in (0, 1)");
  Rng rng(seed);
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(client.num_classes));
  for (std::size_t i = 0; i < client.size(); ++i) by_class[static_cast<std::size_t>(client.labels[i])].push_back(i);

  PersonalSplit out;
  std::vector<std::size_t> train_idx, test_idx;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& members = by_class[c];
    if (members.empty()) continue;
    if (members.size() < 2) {
      out.train_only_classes.push_back(static_cast<int>(c));
      train_idx.insert(train_idx.end(), members.begin(), members.end());
      continue;
    }
    std::shuffle(members.begin(), members.end(), rng);
    const auto n = static_cast<double>(members.size());
    const std::size_t held =
        std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(fraction * n)), 1, members.size() - 1);
    test_idx.insert(test_idx.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(held));
    train_idx.insert(train_idx.end(), members.begin() + static_cast<std::ptrdiff_t>(held), members.end());
  }
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(test_idx.begin(), test_idx.end());
  out.train = client.subset(train_idx);
  out.personal_test = client.subset(test_idx);
  return out;
}

double model_difference(const nn::ModelParams& a, const nn::ModelParams& b) {
  return std::sqrt(nn::squared_norm(nn::difference(a, b)));
}

double max_step_size_product(int tau, double beta_sq) {
  const double first = 1.0 / (2.0 * tau);
  if (tau < 2) return first;
  const double second = 1.0 / std::sqrt(2.0 * tau * (tau - 1) * (2.0 * beta_sq + 1.0));
  return std::min(first, second);
}

TheoremTerms theorem_terms(const TheoremInputs& in) {
  if (!(in.L > 0.0)) throw ConfigError("theorem: L must be positive");
  if (!(in.sigma >= 0.0)) throw ConfigError("theorem: sigma must be non-negative");
  if (!(in.kappa >= 0.0)) throw ConfigError("theorem: kappa must be non-negative");
  if (!(in.beta_sq >= 1.0)) throw ConfigError("theorem: beta^2 must be at least 1");
  if (!(in.phi0_minus_inf >= 0.0)) throw ConfigError("theorem: Phi0 - Phi_inf must be non-negative");
  if (in.tau < 1) throw ConfigError("theorem: tau must be at least 1");
  if (in.T < 1) throw ConfigError("theorem: T must be at least 1");
  if (!(in.eta > 0.0)) throw ConfigError("theorem: eta must be positive");
  if (in.p.empty()) throw ConfigError("theorem: weight vector is empty");
  double p_sum = 0.0, p_sq = 0.0;
  for (double pk : in.p) {
    if (!(pk >= 0.0)) throw ConfigError("theorem: weights must be non-negative");
    p_sum += pk;
    p_sq += pk * pk;
  }
  if (std::abs(p_sum - 1.0) > 1e-9) throw ConfigError("theorem: weights must sum to 1");

  constexpr double kSlack = 1.0 + 1e-12;
  const double eta_l = in.eta * in.L;
  if (eta_l > kSlack / (2.0 * in.tau)) {
    throw ConfigError("theorem: step-size condition violated, eta*L > 1/(2 tau)");
  }
  if (in.tau >= 2) {
    const double bound = 1.0 / std::sqrt(2.0 * in.tau * (in.tau - 1) * (2.0 * in.beta_sq + 1.0));
    if (eta_l > kSlack * bound) {
      throw ConfigError("theorem: step-size condition violated, eta*L > 1/sqrt(2 tau (tau-1) (2 beta^2 + 1))");
    }
  }

  const double tau = in.tau;
  const double s2 = in.sigma * in.sigma;
  const double l2 = in.L * in.L;
  const double e2 = in.eta * in.eta;
  TheoremTerms t;
  t.optimization = 4.0 * in.phi0_minus_inf / (tau * in.eta * in.T);
  t.noise = 4.0 * in.eta * in.L * s2 * p_sq;
  t.local_noise = 3.0 * (tau - 1.0) * e2 * s2 * l2;
  t.heterogeneity = 6.0 * tau * (tau - 1.0) * e2 * l2 * in.kappa * in.kappa;
  return t;
}

double theorem_bound(const TheoremInputs& inp) { return theorem_terms(inp).total(); }

Lemma1Result lemma1_check(const nn::ModelParams& model, const gen::GeneratedDataset& gen_new,
                          const gen::GeneratedDataset& gen_old, const data::LabeledDataset& eval) {
  const double task = nn::cross_entropy(nn::softmax(nn::forward(model, eval.features)), eval.labels);
  Lemma1Result r;
  r.lhs = task + train::kd_loss(gen_new.teacher_probs, nn::forward(model, gen_new.inputs));
  r.rhs = task + train::kd_loss(gen_old.teacher_probs, nn::forward(model, gen_old.inputs));
  r.holds = r.lhs <= r.rhs + 1e-9;
  return r;
}

}  // namespace fedcog::metrics
