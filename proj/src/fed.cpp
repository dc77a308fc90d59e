#include "fedcog/fed.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <numeric>
#include <random>
#include <thread>

#include "fedcog/error.hpp"
#include "fedcog/rng.hpp"

namespace fedcog::fed {

std::vector<double> aggregation_weights(std::span<const ClientUpdate> updates) {
  if (updates.empty()) throw ProtocolError("no client updates to aggregate");
  std::int64_t total = 0;
  for (const auto& u : updates) {
    if (u.num_samples < 1) throw ProtocolError("client " + std::to_string(u.client_id) + " reports no samples");
    total += u.num_samples;
  }
  std::vector<double> w;
  w.reserve(updates.size());
  for (const auto& u : updates) w.push_back(static_cast<double>(u.num_samples) / static_cast<double>(total));
  return w;
}

nn::ModelParams aggregate(std::span<const ClientUpdate> updates) {
  const auto weights = aggregation_weights(updates);
  // theta_0 + sum_k p_k (theta_k - theta_0): identical inputs cancel exactly.
  const nn::ModelParams& anchor = updates.front().params;
  nn::ModelParams out = anchor;
  for (std::size_t k = 1; k < updates.size(); ++k) {
    nn::require_congruent(anchor, updates[k].params, "aggregate");
  }
  for (std::size_t l = 0; l < out.layers.size(); ++l) {
    for (int which = 0; which < 2; ++which) {
      Tensor& dst = which == 0 ? out.layers[l].weight : out.layers[l].bias;
      const Tensor& base = which == 0 ? anchor.layers[l].weight : anchor.layers[l].bias;
      for (std::size_t i = 0; i < dst.size(); ++i) {
        double acc = 0.0;
        for (std::size_t k = 1; k < updates.size(); ++k) {
          const Tensor& src = which == 0 ? updates[k].params.layers[l].weight : updates[k].params.layers[l].bias;
          acc += weights[k] * (src[i] - base[i]);
        }
        dst[i] = base[i] + acc;
      }
    }
  }
  return out;
}

nn::ModelParams apply_server_momentum(GlobalState& state, const nn::ModelParams& averaged, double momentum) {
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("server momentum must lie in [0, 1)");
  nn::ModelParams pseudo_grad = nn::difference(state.global_model, averaged);
  if (!state.server_momentum) state.server_momentum = nn::zeros_like(state.global_model);
  nn::ModelParams& v = *state.server_momentum;
  nn::scale(v, momentum);
  nn::axpy(1.0, pseudo_grad, v);
  return nn::difference(state.global_model, v);
}

nn::ModelParams aggregate_with_momentum(GlobalState& state, std::span<const ClientUpdate> updates,
                                        double momentum) {
  return apply_server_momentum(state, aggregate(updates), momentum);
}

int participation_count(int total, double fraction) {
  if (total < 1) throw ConfigError("client population must be positive");
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("participation fraction must lie in (0, 1]");
  return std::max(1, static_cast<int>(std::lround(fraction * total)));
}

std::vector<int> sample_clients(int total, int count, int round, std::uint64_t seed) {
  if (total < 1) throw ConfigError("client population must be positive");
  if (count < 1 || count > total) {
    throw ConfigError("cannot sample " + std::to_string(count) + " of " + std::to_string(total) + " clients");
  }
  std::vector<int> ids(static_cast<std::size_t>(total));
  std::iota(ids.begin(), ids.end(), 0);
  if (count < total) {
    Rng rng(derive_seed(seed, {stream::kSampling, static_cast<std::uint64_t>(round)}));
    std::shuffle(ids.begin(), ids.end(), rng);
    ids.resize(static_cast<std::size_t>(count));
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

// ---------------------------------------------------------------------------

struct MaskingRun {
  static MaskingResult run(std::span<const ClientUpdate> updates, std::span<const nn::ModelParams* const> values,
                           std::span<const double> weights, std::uint64_t round_seed, const SecAggOptions& options) {
    if (updates.size() != weights.size()) throw ProtocolError("one weight per participant is required");
    MaskingResult result;
    std::vector<nn::ModelParams> scaled;
    scaled.reserve(updates.size());
    for (std::size_t k = 0; k < updates.size(); ++k) {
      scaled.push_back(*values[k]);
      nn::scale(scaled.back(), weights[k]);
    }
    if (updates.size() < 2) {
      result.warnings.push_back("secagg: single participant, masking skipped");
    } else {
      std::uniform_real_distribution<double> dist(-options.mask_range, options.mask_range);
      for (std::size_t a = 0; a < updates.size(); ++a) {
        for (std::size_t b = a + 1; b < updates.size(); ++b) {
          const auto [lo, hi] = std::minmax(updates[a].client_id, updates[b].client_id);
          if (lo == hi) throw ProtocolError("duplicate participant id " + std::to_string(lo));
          const std::size_t i = updates[a].client_id == lo ? a : b;  // adds the mask
          const std::size_t j = i == a ? b : a;                      // subtracts it
          Rng rng(derive_seed(round_seed, {stream::kSecAgg, static_cast<std::uint64_t>(lo),
                                           static_cast<std::uint64_t>(hi)}));
          for (std::size_t l = 0; l < scaled[i].layers.size(); ++l) {
            for (int which = 0; which < 2; ++which) {
              Tensor& ti = which == 0 ? scaled[i].layers[l].weight : scaled[i].layers[l].bias;
              Tensor& tj = which == 0 ? scaled[j].layers[l].weight : scaled[j].layers[l].bias;
              for (std::size_t e = 0; e < ti.size(); ++e) {
                const double m = options.mask_range == 0.0 ? 0.0 : dist(rng);
                ti[e] += m;
                tj[e] -= m;
              }
            }
          }
        }
      }
    }
    result.masked.reserve(updates.size());
    for (std::size_t k = 0; k < updates.size(); ++k) {
      result.masked.push_back(MaskedUpdate(updates[k].client_id, std::move(scaled[k])));
    }
    return result;
  }
};

MaskingResult secagg_mask(std::span<const ClientUpdate> updates, std::span<const double> weights,
                          std::uint64_t round_seed, const SecAggOptions& options) {
  if (updates.empty()) throw ProtocolError("no participants to mask");
  std::vector<const nn::ModelParams*> values;
  for (const auto& u : updates) values.push_back(&u.params);
  return MaskingRun::run(updates, values, weights, round_seed, options);
}

MaskingResult secagg_mask_deltas(std::span<const ClientUpdate> updates, std::span<const double> weights,
                                 std::uint64_t round_seed, const SecAggOptions& options) {
  if (updates.empty()) throw ProtocolError("no participants to mask");
  std::vector<const nn::ModelParams*> values;
  for (const auto& u : updates) {
    if (!u.delta_c) throw ProtocolError("client " + std::to_string(u.client_id) + " sent no control delta");
    values.push_back(&*u.delta_c);
  }
  // Independent stream from the parameter masks.
  return MaskingRun::run(updates, values, weights, mix64(round_seed ^ 0xDE17AC0DEULL), options);
}

nn::ModelParams secagg_sum(std::span<const MaskedUpdate> masked, std::span<const int> roster) {
  if (roster.empty()) throw ProtocolError("empty secure-aggregation roster");
  std::vector<int> seen;
  for (const auto& m : masked) seen.push_back(m.client_id());
  std::sort(seen.begin(), seen.end());
  if (std::adjacent_find(seen.begin(), seen.end()) != seen.end()) {
    throw ProtocolError("duplicate masked contribution");
  }
  for (int id : roster) {
    if (!std::binary_search(seen.begin(), seen.end(), id)) {
      throw ProtocolError("participant " + std::to_string(id) + " missing, round aborted");
    }
  }
  if (seen.size() != roster.size()) throw ProtocolError("masked contribution from a client outside the roster");

  nn::ModelParams sum = nn::zeros_like(masked.front().masked_params());
  for (const auto& m : masked) nn::axpy(1.0, m.masked_params(), sum);
  return sum;
}

SecAggServer::SecAggServer(std::vector<int> roster) : roster_(std::move(roster)) {}

void SecAggServer::receive(MaskedUpdate update) { inbox_.push_back(std::move(update)); }

nn::ModelParams SecAggServer::finalize() const { return secagg_sum(inbox_, roster_); }

// ---------------------------------------------------------------------------

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

struct ClientWork {
  bool skipped = false;
  std::string warning;
  ClientUpdate update;
  double mean_loss = 0.0;
  double gen_seconds = 0.0;
  double train_seconds = 0.0;
  std::optional<nn::ModelParams> new_control;
  std::exception_ptr error;
};

ClientWork run_client(const GlobalState& state, const ClientSlot& slot, const RoundConfig& config) {
  ClientWork work;
  if (slot.train.empty()) {
    work.skipped = true;
    work.warning = "client " + std::to_string(slot.id) + " has no training data, excluded";
    return work;
  }
  const nn::ModelParams& theta = state.global_model;
  const std::uint64_t client_seed =
      derive_seed(config.seed, {static_cast<std::uint64_t>(slot.id), static_cast<std::uint64_t>(state.round)});

  work.update.client_id = slot.id;
  work.update.num_samples = static_cast<std::int64_t>(slot.train.size());

  const train::TrainerKind method =
      std::holds_alternative<train::FedCog>(config.method) && !config.generation_active ? train::TrainerKind{train::FedAvg{}}
                                                                                        : config.method;
  train::LocalResult local;
  if (std::holds_alternative<train::FedAvg>(method)) {
    const auto t0 = Clock::now();
    local = train::local_train_fedavg(theta, slot.train, config.local, client_seed);
    work.train_seconds = seconds_since(t0);
  } else if (const auto* prox = std::get_if<train::FedProx>(&method)) {
    const auto t0 = Clock::now();
    local = train::local_train_fedprox(theta, slot.train, config.local, prox->mu, client_seed);
    work.train_seconds = seconds_since(t0);
  } else if (std::holds_alternative<train::Scaffold>(method)) {
    const nn::ModelParams zeros = nn::zeros_like(theta);
    const nn::ModelParams& c_global = state.scaffold_c ? *state.scaffold_c : zeros;
    const nn::ModelParams& c_local = slot.control ? *slot.control : zeros;
    const auto t0 = Clock::now();
    auto res = train::local_train_scaffold(theta, slot.train, config.local, c_global, c_local, client_seed);
    work.train_seconds = seconds_since(t0);
    local = std::move(res.local);
    work.new_control = std::move(res.new_control);
    work.update.delta_c = std::move(res.delta_control);
  } else {
    const auto& cog = std::get<train::FedCog>(method);
    // Never-sampled clients fall back to the global model, which makes the
    // disagreement term constant.
    const nn::ModelParams& previous_local = slot.last_local ? *slot.last_local : theta;
    auto t0 = Clock::now();
    const gen::GeneratedDataset generated =
        gen::generate(theta, previous_local, data::label_histogram(slot.train), config.gen,
                      derive_seed(client_seed, {stream::kGenInit}));
    work.gen_seconds = seconds_since(t0);
    t0 = Clock::now();
    local = train::local_train_fedcog(theta, slot.train, generated, config.local, cog, client_seed);
    work.train_seconds = seconds_since(t0);
  }
  work.update.params = std::move(local.params);
  work.mean_loss = local.mean_loss;
  return work;
}

void validate(const RoundConfig& config, const GlobalState& state, const std::vector<ClientSlot>& clients) {
  config.local.validate();
  if (std::holds_alternative<train::FedCog>(config.method) && config.generation_active) config.gen.validate();
  if (clients.empty()) throw ConfigError("no clients");
  if (config.participants < 0 || config.participants > static_cast<int>(clients.size())) {
    throw ConfigError("participants must lie in [0, number of clients]");
  }
  if (!(config.server_momentum >= 0.0 && config.server_momentum < 1.0)) {
    throw ConfigError("server momentum must lie in [0, 1)");
  }
  nn::validate(state.global_model);
  for (std::size_t i = 0; i < clients.size(); ++i) {
    if (clients[i].id != static_cast<int>(i)) throw ConfigError("client slots must be ordered by id 0..K-1");
  }
}

}  // namespace

RoundOutcome run_round(const GlobalState& state, std::vector<ClientSlot>& clients, const RoundConfig& config,
                       const data::LabeledDataset& test) {
  validate(config, state, clients);
  const int population = static_cast<int>(clients.size());
  const int count = config.participants == 0 ? population : config.participants;
  const std::vector<int> ids = sample_clients(population, count, state.round, config.seed);

  std::vector<ClientWork> work(ids.size());
  {
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
      for (std::size_t i = next++; i < ids.size(); i = next++) {
        try {
          work[i] = run_client(state, clients[static_cast<std::size_t>(ids[i])], config);
        } catch (...) {
          work[i].error = std::current_exception();
        }
      }
    };
    const unsigned n_threads = std::max(1U, std::min<unsigned>(config.threads, static_cast<unsigned>(ids.size())));
    std::vector<std::thread> pool;
    for (unsigned t = 1; t < n_threads; ++t) pool.emplace_back(worker);
    worker();
    for (auto& th : pool) th.join();
  }
  for (const auto& w : work) {
    if (w.error) std::rethrow_exception(w.error);
  }

  RoundOutcome out;
  out.state = state;
  metrics::RoundRecord& rec = out.record;
  rec.round = state.round;

  std::vector<ClientUpdate> updates;
  std::vector<std::size_t> used;  // indices into `work`
  for (std::size_t i = 0; i < work.size(); ++i) {
    if (work[i].skipped) {
      rec.warnings.push_back(work[i].warning);
      continue;
    }
    updates.push_back(work[i].update);
    used.push_back(i);
  }
  if (updates.empty()) throw ProtocolError("round " + std::to_string(state.round) + " has no participating clients");

  nn::ModelParams averaged;
  if (config.secagg) {
    std::vector<int> roster;
    for (const auto& u : updates) roster.push_back(u.client_id);
    const auto weights = aggregation_weights(updates);
    const std::uint64_t round_seed = derive_seed(config.seed, {stream::kSecAgg, static_cast<std::uint64_t>(state.round)});
    MaskingResult masking = secagg_mask(updates, weights, round_seed, config.secagg_options);
    rec.warnings.insert(rec.warnings.end(), masking.warnings.begin(), masking.warnings.end());
    SecAggServer server(roster);
    for (auto& m : masking.masked) server.receive(std::move(m));
    averaged = server.finalize();
  } else {
    averaged = aggregate(updates);
  }

  if (std::holds_alternative<train::Scaffold>(config.method)) {
    // c <- c + (1/K) sum_{k in S} delta_c_k
    if (!out.state.scaffold_c) out.state.scaffold_c = nn::zeros_like(state.global_model);
    const double w = 1.0 / static_cast<double>(population);
    if (config.secagg) {
      std::vector<int> roster;
      for (const auto& u : updates) roster.push_back(u.client_id);
      const std::vector<double> weights(updates.size(), w);
      const std::uint64_t round_seed = derive_seed(config.seed, {stream::kSecAgg, static_cast<std::uint64_t>(state.round)});
      MaskingResult masking = secagg_mask_deltas(updates, weights, round_seed, config.secagg_options);
      SecAggServer server(roster);
      for (auto& m : masking.masked) server.receive(std::move(m));
      nn::axpy(1.0, server.finalize(), *out.state.scaffold_c);
    } else {
      for (const auto& u : updates) nn::axpy(w, *u.delta_c, *out.state.scaffold_c);
    }
  }

  out.state.global_model =
      config.server_momentum > 0.0 ? apply_server_momentum(out.state, averaged, config.server_momentum) : std::move(averaged);
  out.state.round = state.round + 1;

  rec.global_acc = metrics::evaluate_accuracy(out.state.global_model, test);
  for (std::size_t i : used) {
    ClientWork& w = work[i];
    ClientSlot& slot = clients[static_cast<std::size_t>(w.update.client_id)];
    rec.client_ids.push_back(slot.id);
    if (config.evaluate_clients) {
      rec.per_client_general_acc.push_back(metrics::evaluate_accuracy(w.update.params, test));
      if (slot.personal_test.empty()) {
        rec.per_client_personal_acc.push_back(0.0);
        rec.warnings.push_back("client " + std::to_string(slot.id) + " has no personal test data");
      } else {
        rec.per_client_personal_acc.push_back(metrics::evaluate_accuracy(w.update.params, slot.personal_test));
      }
    }
    rec.model_diff_l2.push_back(metrics::model_difference(w.update.params, out.state.global_model));
    rec.mean_train_loss.push_back(w.mean_loss);
    rec.gen_seconds.push_back(w.gen_seconds);
    rec.train_seconds.push_back(w.train_seconds);
    if (w.new_control) slot.control = std::move(w.new_control);
    slot.last_local = std::move(w.update.params);
  }
  return out;
}

}  // namespace fedcog::fed
