#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>
#include <variant>
#include <vector>

#include "fedcog/data.hpp"
#include "fedcog/generation.hpp"
#include "fedcog/nn.hpp"
#include "fedcog/rng.hpp"

namespace fedcog::train {

struct FedAvg {};
struct FedProx {
  double mu = 0.01;
};
struct Scaffold {};
struct FedCog {
  double lambda_kd = 0.01;
  bool adaptive_weights = false;
};

using TrainerKind = std::variant<FedAvg, FedProx, Scaffold, FedCog>;

const char* trainer_name(const TrainerKind& kind);

struct LocalRunConfig {
  int tau = 400;
  double lr = 0.01;
  std::size_t batch_size = 64;

  void validate() const;

  friend bool operator==(const LocalRunConfig&, const LocalRunConfig&) = default;
};

/// Epoch-wise shuffled mini-batches of a fixed size. Datasets smaller than
/// the batch size yield the whole (shuffled) dataset every step.
class MiniBatcher {
 public:
  MiniBatcher(std::size_t n, std::size_t batch_size, std::uint64_t seed);

  std::span<const std::size_t> next();

 private:
  void reshuffle();

  std::vector<std::size_t> order_;
  std::size_t batch_size_;
  std::size_t cursor_ = 0;
  Rng rng_;
};

struct LocalResult {
  nn::ModelParams params;
  double mean_loss = 0.0;  // average objective over the local steps (0 when tau == 0)
};

LocalResult local_train_fedavg(const nn::ModelParams& theta_global, const data::LabeledDataset& local,
                               const LocalRunConfig& cfg, std::uint64_t seed);

/// FedAvg plus (mu / 2) * ||theta - theta_global||^2 in every step.
LocalResult local_train_fedprox(const nn::ModelParams& theta_global, const data::LabeledDataset& local,
                                const LocalRunConfig& cfg, double mu, std::uint64_t seed);

struct ScaffoldResult {
  LocalResult local;
  nn::ModelParams new_control;   // c_k after the round
  nn::ModelParams delta_control; // new c_k - c_k
};

/// SCAFFOLD with corrected gradient g + c_global - c_k and the option-II
/// control update c_k' = c_k - c_global + (theta_global - theta_final) / (tau * lr).
ScaffoldResult local_train_scaffold(const nn::ModelParams& theta_global, const data::LabeledDataset& local,
                                    const LocalRunConfig& cfg, const nn::ModelParams& c_global,
                                    const nn::ModelParams& c_local, std::uint64_t seed);

/// Option-II variate update. Returns c_local unchanged when tau or lr is zero.
nn::ModelParams scaffold_control_update(const nn::ModelParams& c_local, const nn::ModelParams& c_global,
                                        const nn::ModelParams& theta_global, const nn::ModelParams& theta_final,
                                        int tau, double lr);

/// KL(teacher || softmax(student_logits)), averaged over rows.
double kd_loss(const Tensor& teacher_probs, const Tensor& student_logits);

/// (N_real / (N_real + N_gen), N_gen / (N_real + N_gen)).
std::pair<double, double> adaptive_kd_coefficients(std::int64_t n_real, std::int64_t n_gen);

/// Each step descends w_task * CE(real batch) + w_kd * KD(generated batch).
/// Weights are (1, lambda_kd), or the adaptive coefficients computed from the
/// client's label histogram and its complementary deficit.
LocalResult local_train_fedcog(const nn::ModelParams& theta_global, const data::LabeledDataset& local,
                               const gen::GeneratedDataset& generated, const LocalRunConfig& cfg,
                               const FedCog& options, std::uint64_t seed);

}  // namespace fedcog::train
