#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedcog/data.hpp"
#include "fedcog/generation.hpp"
#include "fedcog/localtrain.hpp"
#include "fedcog/metrics.hpp"
#include "fedcog/nn.hpp"

namespace fedcog::fed {

struct GlobalState {
  int round = 0;
  nn::ModelParams global_model;
  std::optional<nn::ModelParams> server_momentum;  // FedAvgM velocity
  std::optional<nn::ModelParams> scaffold_c;       // SCAFFOLD server control variate
};

/// Raw local result as it leaves a client.
struct ClientUpdate {
  int client_id = 0;
  nn::ModelParams params;
  std::int64_t num_samples = 0;
  std::optional<nn::ModelParams> delta_c;
};

/// p_k = n_k / sum_i n_i.
std::vector<double> aggregation_weights(std::span<const ClientUpdate> updates);

/// Weighted mean sum_k p_k theta_k. N copies of the same model aggregate to
/// that model exactly.
nn::ModelParams aggregate(std::span<const ClientUpdate> updates);

/// v <- momentum * v + (theta - averaged); returns theta - v.
nn::ModelParams apply_server_momentum(GlobalState& state, const nn::ModelParams& averaged, double momentum);

/// FedAvgM: aggregate, then apply server momentum.
nn::ModelParams aggregate_with_momentum(GlobalState& state, std::span<const ClientUpdate> updates,
                                        double momentum);

/// Number of participants for a fraction in (0, 1] of `total` clients (at least one).
int participation_count(int total, double fraction);

/// `count` distinct ids from [0, total), sorted, uniform without replacement,
/// deterministic in (seed, round).
std::vector<int> sample_clients(int total, int count, int round, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Simulated Secure Aggregation with antisymmetric pairwise masks.

struct SecAggOptions {
  double mask_range = 1.0;  // masks are uniform in [-mask_range, mask_range]
};

/// A client's contribution as the server sees it: p_k * theta_k plus the sum
/// of its pairwise masks. Only `secagg_mask` can create one.
class MaskedUpdate {
 public:
  int client_id() const { return client_id_; }
  const nn::ModelParams& masked_params() const { return masked_; }

 private:
  MaskedUpdate(int id, nn::ModelParams masked) : client_id_(id), masked_(std::move(masked)) {}

  int client_id_;
  nn::ModelParams masked_;

  friend struct MaskingRun;
};

struct MaskingResult {
  std::vector<MaskedUpdate> masked;
  std::vector<std::string> warnings;  // set when masking was skipped
};

/// Client-side masking. Each update is pre-scaled by its weight, then for
/// every id pair i < j a mask drawn from a generator seeded by
/// (round_seed, i, j) is added by i and subtracted by j. A single
/// participant is passed through unmasked with a warning.
MaskingResult secagg_mask(std::span<const ClientUpdate> updates, std::span<const double> weights,
                          std::uint64_t round_seed, const SecAggOptions& options = {});

/// Masks the control-variate deltas (weights as given) the same way.
MaskingResult secagg_mask_deltas(std::span<const ClientUpdate> updates, std::span<const double> weights,
                                 std::uint64_t round_seed, const SecAggOptions& options = {});

/// Sum of masked contributions. Every id in `roster` must appear exactly
/// once; a missing participant aborts with ProtocolError.
nn::ModelParams secagg_sum(std::span<const MaskedUpdate> masked, std::span<const int> roster);

/// Server endpoint of a masked round. It accepts masked contributions only
/// and can reveal nothing but their sum.
class SecAggServer {
 public:
  explicit SecAggServer(std::vector<int> roster);

  void receive(MaskedUpdate update);
  std::size_t received() const { return inbox_.size(); }
  nn::ModelParams finalize() const;

 private:
  std::vector<int> roster_;
  std::vector<MaskedUpdate> inbox_;
};

// ---------------------------------------------------------------------------
// Round orchestration.

/// Everything a client keeps between rounds.
struct ClientSlot {
  int id = 0;
  data::LabeledDataset train;
  data::LabeledDataset personal_test;
  std::optional<nn::ModelParams> last_local;  // most recent local model
  std::optional<nn::ModelParams> control;     // SCAFFOLD c_k
};

struct RoundConfig {
  train::TrainerKind method = train::FedAvg{};
  bool generation_active = true;   // FedCOG only: false degrades to FedAvg (warm start)
  train::LocalRunConfig local;
  gen::GenConfig gen;
  double server_momentum = 0.0;    // > 0 enables FedAvgM
  bool secagg = false;
  SecAggOptions secagg_options;
  int participants = 0;            // 0 means every client
  std::uint64_t seed = 0;
  unsigned threads = 1;
  bool evaluate_clients = true;    // fill per-client accuracy lists
};

struct RoundOutcome {
  GlobalState state;
  metrics::RoundRecord record;
};

/// One round: sampling, per-client generation and local training, masked or
/// plain aggregation, then evaluation on `test`. Client slots are updated
/// with their new local models and control variates.
RoundOutcome run_round(const GlobalState& state, std::vector<ClientSlot>& clients, const RoundConfig& config,
                       const data::LabeledDataset& test);

}  // namespace fedcog::fed
