// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero when any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <functional>
#include <set>
#include <string>
#include <type_traits>
#include <vector>

#include "fedcog/data.hpp"
#include "fedcog/error.hpp"
#include "fedcog/experiment.hpp"
#include "fedcog/fed.hpp"
#include "fedcog/generation.hpp"
#include "fedcog/gradcheck.hpp"
#include "fedcog/metrics.hpp"
#include "fedcog/nn.hpp"
#include "fedcog/rng.hpp"

namespace {

using namespace fedcog;
using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* format, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, format, args...);
  return buf;
}

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

double distance(const nn::ModelParams& a, const nn::ModelParams& b) {
  return std::sqrt(nn::squared_norm(nn::difference(a, b)));
}

double max_abs_difference(const nn::ModelParams& a, const nn::ModelParams& b) {
  double worst = 0.0;
  const auto d = nn::difference(a, b);
  for (const auto& layer : d.layers) {
    for (double v : layer.weight.data()) worst = std::max(worst, std::abs(v));
    for (double v : layer.bias.data()) worst = std::max(worst, std::abs(v));
  }
  return worst;
}

// 1. Analytic gradients agree with central differences.
Outcome gradient_oracle() {
  const auto start = Clock::now();
  const auto lines = nn::run_gradcheck_suite(20, 2024);
  const double secs = seconds_since(start);
  std::size_t checked = 0, failures = 0;
  double worst = 0.0;
  for (const auto& l : lines) {
    checked += l.report.checked;
    failures += l.report.failures;
    worst = std::max(worst, l.report.max_rel_error);
  }
  return {failures == 0 && secs < 30.0 && lines.size() >= 5,
          fmt("%zu compositions, %zu entries, %zu failures, max rel err %.2e, %.1f s", lines.size(), checked,
              failures, worst, secs)};
}

// Shared fixture for the federated checks below.
struct Fixture {
  std::vector<fed::ClientSlot> clients;
  data::LabeledDataset test;
  fed::GlobalState state;
};

Fixture make_fixture(int k, std::uint64_t seed) {
  Fixture f;
  const auto train = data::synth_blobs(6, 40, 12, 0.6, seed);
  f.test = data::synth_blobs(6, 10, 12, 0.6, seed + 1);
  const auto parts = data::partition(train, {data::Niid2{2}, k, seed});
  for (int i = 0; i < k; ++i) f.clients.push_back({i, parts[static_cast<std::size_t>(i)], {}, {}, {}});
  f.state.global_model = nn::make_mlp(std::vector<std::size_t>{12, 10, 8, 6}, seed);
  return f;
}

fed::RoundConfig round_config(train::TrainerKind method, int tau) {
  fed::RoundConfig c;
  c.method = method;
  c.local.tau = tau;
  c.local.lr = 0.05;
  c.local.batch_size = 16;
  c.gen.num_samples = 24;
  c.gen.steps = 5;
  c.seed = 77;
  return c;
}

struct Trace {
  nn::ModelParams final_model;
  std::vector<double> accs;
  std::vector<std::vector<double>> diffs;
};

Trace run_rounds(Fixture f, const fed::RoundConfig& cfg, int rounds) {
  Trace t;
  fed::RoundOutcome out{f.state, {}};
  for (int r = 0; r < rounds; ++r) {
    out = fed::run_round(out.state, f.clients, cfg, f.test);
    t.accs.push_back(out.record.global_acc);
    t.diffs.push_back(out.record.model_diff_l2);
  }
  t.final_model = out.state.global_model;
  return t;
}

bool identical(const Trace& a, const Trace& b) {
  return a.final_model == b.final_model && a.accs == b.accs && a.diffs == b.diffs;
}

// 2. Special cases of each method collapse to FedAvg bit for bit.
Outcome reduction_identities() {
  const Fixture f = make_fixture(5, 3);
  const Trace avg = run_rounds(f, round_config(train::FedAvg{}, 8), 3);
  const bool prox = identical(run_rounds(f, round_config(train::FedProx{0.0}, 8), 3), avg);
  auto cog_cfg = round_config(train::FedCog{0.0, false}, 8);
  cog_cfg.gen.steps = 0;
  const bool cog = identical(run_rounds(f, cog_cfg, 3), avg);
  const bool scaffold = identical(run_rounds(f, round_config(train::Scaffold{}, 1), 1),
                                  run_rounds(f, round_config(train::FedAvg{}, 1), 1));
  return {prox && cog && scaffold,
          fmt("fedprox(mu=0) %s, fedcog(lambda=0, steps=0) %s, scaffold(zero c, tau=1) %s",
              prox ? "identical" : "DIFFERS", cog ? "identical" : "DIFFERS", scaffold ? "identical" : "DIFFERS")};
}

// 3. Masked aggregation is exact and the server only ever handles masked data.
Outcome secagg_transparency() {
  static_assert(!std::is_constructible_v<fed::MaskedUpdate, int, nn::ModelParams>);
  static_assert(!std::is_invocable_v<decltype(&fed::SecAggServer::receive), fed::SecAggServer&, fed::ClientUpdate>);
  static_assert(!std::is_invocable_v<decltype(&fed::SecAggServer::receive), fed::SecAggServer&, nn::ModelParams>);

  Rng rng(99);
  double worst = 0.0;
  bool hidden = true;
  for (int round = 0; round < 20; ++round) {
    const int k = 2 + static_cast<int>(rng() % 9);
    std::vector<int> pool(20);
    for (int i = 0; i < 20; ++i) pool[static_cast<std::size_t>(i)] = i;
    std::shuffle(pool.begin(), pool.end(), rng);
    std::vector<fed::ClientUpdate> ups;
    std::vector<int> roster;
    for (int i = 0; i < k; ++i) {
      fed::ClientUpdate u;
      u.client_id = pool[static_cast<std::size_t>(i)];
      u.params = nn::make_mlp(std::vector<std::size_t>{10, 7, 4}, rng());
      u.num_samples = 1 + static_cast<std::int64_t>(rng() % 500);
      roster.push_back(u.client_id);
      ups.push_back(std::move(u));
    }
    const auto weights = fed::aggregation_weights(ups);
    const auto masked = fed::secagg_mask(ups, weights, rng());
    fed::SecAggServer server(roster);
    for (std::size_t i = 0; i < masked.masked.size(); ++i) {
      nn::ModelParams scaled = ups[i].params;
      nn::scale(scaled, weights[i]);
      hidden = hidden && distance(masked.masked[i].masked_params(), scaled) > 1e-6;
      server.receive(masked.masked[i]);
    }
    worst = std::max(worst, max_abs_difference(server.finalize(), fed::aggregate(ups)));
  }
  return {worst <= 1e-9 && hidden,
          fmt("20 rounds, max element error %.2e, contributions %s, server accepts MaskedUpdate only", worst,
              hidden ? "masked" : "EXPOSED")};
}

// 4. The global-loss inequality holds on random trials.
Outcome lemma1_property() {
  int holds = 0;
  double worst_gap = -1e300;
  for (std::uint64_t trial = 0; trial < 50; ++trial) {
    const auto next = nn::make_mlp(std::vector<std::size_t>{12, 9, 5}, 500 + trial);
    const auto prev = nn::make_mlp(std::vector<std::size_t>{12, 9, 5}, 900 + trial);
    gen::GenConfig g;
    g.num_samples = 20;
    g.steps = 3;
    const data::LabelHistogram hist(5, 1);
    const auto gen_new = gen::generate(next, prev, hist, g, 3 * trial);
    const auto gen_old = gen::generate(prev, next, hist, g, 3 * trial + 1);
    const auto eval = data::synth_blobs(5, 6, 12, 0.5, trial);
    const auto r = metrics::lemma1_check(next, gen_new, gen_old, eval);
    if (r.holds) ++holds;
    worst_gap = std::max(worst_gap, r.lhs - r.rhs);
  }
  return {holds == 50, fmt("%d/50 trials hold, max lhs - rhs %.3e", holds, worst_gap)};
}

// 5. Convergence-bound calculator.
Outcome theorem_calculator() {
  metrics::TheoremInputs in;
  in.phi0_minus_inf = 1.0;
  in.L = 1.0;
  in.tau = 2;
  in.eta = 0.01;
  in.T = 100;
  const double noiseless = metrics::theorem_bound(in);

  in.sigma = 0.3;
  in.kappa = 0.2;
  in.p = {0.5, 0.5};
  in.tau = 5;
  in.T = 1000;
  in.eta = 1.0 / std::sqrt(in.tau * in.T);
  const auto base = metrics::theorem_terms(in);
  in.T *= 4;
  in.eta = 1.0 / std::sqrt(in.tau * in.T);
  const auto quad = metrics::theorem_terms(in);
  const double r_opt = quad.optimization / base.optimization;
  const double r_noise = quad.noise / base.noise;
  const double r_local = quad.local_noise / base.local_noise;
  const double r_het = quad.heterogeneity / base.heterogeneity;
  const bool ratios = std::abs(r_opt - 0.5) < 1e-9 && std::abs(r_noise - 0.5) < 1e-9 &&
                      std::abs(r_local - 0.25) < 1e-9 && std::abs(r_het - 0.25) < 1e-9;
  return {noiseless == 2.0 && ratios,
          fmt("noiseless bound %.17g, ratios at 4T: %.12f %.12f %.12f %.12f", noiseless, r_opt, r_noise, r_local,
              r_het)};
}

experiment::ExperimentConfig load_table_config(const char* name) {
  auto cfg = experiment::parse_config(std::filesystem::path(FEDCOG_SOURCE_DIR) / "configs" / name);
  cfg.seeds = {0, 1, 2};
  cfg.record_wall_time = false;
  cfg.dump_images = false;
  return cfg;
}

struct Comparison {
  experiment::ExperimentResult fedavg;
  experiment::ExperimentResult fedcog;
  double seconds = 0.0;
  std::string error;
};

Comparison run_comparison() {
  Comparison c;
  const auto start = Clock::now();
  try {
    c.fedavg = experiment::run_experiment(load_table_config("niid2_fedavg.ini"));
    c.fedcog = experiment::run_experiment(load_table_config("niid2_fedcog.ini"));
  } catch (const std::exception& e) {
    c.error = e.what();
  }
  c.seconds = seconds_since(start);
  return c;
}

// 6. FedCOG beats FedAvg by at least one point on the label-skewed setting.
Outcome accuracy_direction(const Comparison& c) {
  if (!c.error.empty()) return {false, "experiment failed: " + c.error};
  const double avg = c.fedavg.mean_final_acc * 100.0;
  const double cog = c.fedcog.mean_final_acc * 100.0;
  return {cog >= avg + 1.0 && c.seconds < 900.0,
          fmt("fedavg %s, fedcog %s, gap %+.2f points (need >= +1.00), %.0f s for both",
              experiment::format_mean_std(c.fedavg.mean_final_acc, c.fedavg.stddev_final_acc).c_str(),
              experiment::format_mean_std(c.fedcog.mean_final_acc, c.fedcog.stddev_final_acc).c_str(), cog - avg,
              c.seconds)};
}

// 7. Local models stay closer to the global model under FedCOG.
Outcome model_difference_direction(const Comparison& c) {
  if (!c.error.empty()) return {false, "experiment failed: " + c.error};
  auto final_diff = [](const experiment::ExperimentResult& r) {
    std::vector<double> v;
    for (const auto& run : r.runs) v.push_back(run.summary.final_mean_model_diff);
    return metrics::mean(v);
  };
  const double avg = final_diff(c.fedavg);
  const double cog = final_diff(c.fedcog);
  return {cog <= avg, fmt("final mean l2 model difference: fedavg %.4f, fedcog %.4f", avg, cog)};
}

// 8. Generation raises the target-label probability; zero steps is the clamped start.
Outcome generation_sanity() {
  int improved = 0;
  bool clamp_exact = true;
  for (std::uint64_t trial = 0; trial < 20; ++trial) {
    const auto g = nn::make_mlp(std::vector<std::size_t>{784, 120, 84, 10}, 3000 + trial);
    const auto l = nn::make_mlp(std::vector<std::size_t>{784, 120, 84, 10}, 4000 + trial);
    const data::LabelHistogram hist(10, 1);
    gen::GenConfig cfg;
    cfg.num_samples = 64;
    cfg.steps = 0;
    const auto before = gen::generate(g, l, hist, cfg, trial);
    cfg.steps = 100;
    const auto after = gen::generate(g, l, hist, cfg, trial);
    if (gen::mean_target_probability(g, after) > gen::mean_target_probability(g, before)) ++improved;
    Tensor expected = gen::init_inputs(64, 784, trial);
    for (double& v : expected.data()) v = std::clamp(v, 0.0, 1.0);
    clamp_exact = clamp_exact && before.inputs == expected;
  }
  return {improved >= 19 && clamp_exact,
          fmt("%d/20 trials improved (need >= 19), steps=0 %s clamped init", improved,
              clamp_exact ? "equals" : "DIFFERS FROM")};
}

// 9. Partition statistics.
Outcome partition_statistics() {
  const auto ds = data::synth_blobs(10, 600, 4, 0.5, 1);
  const auto global = data::label_histogram(ds);
  bool conserved = true;
  double worst_dev = 0.0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto parts = data::partition(ds, {data::Niid1{1e6}, 10, seed});
    std::size_t total = 0;
    for (const auto& p : parts) {
      total += p.size();
      const auto h = data::label_histogram(p);
      for (std::size_t c = 0; c < h.size(); ++c) {
        const double share = static_cast<double>(h[c]) / static_cast<double>(p.size());
        const double global_share = static_cast<double>(global[c]) / static_cast<double>(ds.size());
        worst_dev = std::max(worst_dev, std::abs(share - global_share));
      }
    }
    conserved = conserved && total == ds.size();
  }
  bool exact_labels = true;
  for (int q : {1, 2, 3, 5}) {
    for (int k : {5, 10, 20}) {
      if (q == 1 && k < 10) continue;  // fewer clients than classes cannot cover every class
      const auto parts = data::partition(ds, {data::Niid2{q}, k, static_cast<std::uint64_t>(q * 100 + k)});
      std::size_t total = 0;
      for (const auto& p : parts) {
        total += p.size();
        const std::set<int> labels(p.labels.begin(), p.labels.end());
        exact_labels = exact_labels && static_cast<int>(labels.size()) == q;
      }
      conserved = conserved && total == ds.size();
    }
  }
  return {worst_dev <= 0.05 && exact_labels && conserved,
          fmt("niid1(beta=1e6) max share deviation %.4f, niid2 exact label counts %s, sizes %s", worst_dev,
              exact_labels ? "yes" : "NO", conserved ? "conserved" : "NOT CONSERVED")};
}

// 10. Re-running a configuration reproduces rounds.csv byte for byte.
Outcome determinism() {
  experiment::ExperimentConfig cfg;
  cfg.dataset.source = "synth";
  cfg.dataset.synth_classes = 5;
  cfg.dataset.synth_train_per_class = 60;
  cfg.dataset.synth_test_per_class = 20;
  cfg.dataset.synth_dim = 36;
  cfg.dataset.image_side = 6;
  cfg.hidden = {16, 12};
  cfg.partition = experiment::PartitionKind::Niid1;
  cfg.clients = 4;
  cfg.rounds = 3;
  cfg.fedcog_start_round = 1;
  cfg.method = "fedcog";
  cfg.secagg = true;
  cfg.local.tau = 10;
  cfg.local.lr = 0.05;
  cfg.local.batch_size = 16;
  cfg.gen.num_samples = 16;
  cfg.gen.steps = 10;
  cfg.threads = 2;
  const auto datasets = experiment::load_datasets(cfg);
  const std::string a = experiment::rounds_csv(experiment::run_seed(cfg, datasets, 7));
  const std::string b = experiment::rounds_csv(experiment::run_seed(cfg, datasets, 7));
  cfg.threads = 1;
  const std::string c = experiment::rounds_csv(experiment::run_seed(cfg, datasets, 7));
  return {a == b && a == c, fmt("rounds.csv %zu bytes, rerun %s, single-thread rerun %s", a.size(),
                                a == b ? "identical" : "DIFFERS", a == c ? "identical" : "DIFFERS")};
}

}  // namespace

int main() {
  int failed = 0;
  auto report = [&](int id, const char* name, const std::function<Outcome()>& check) {
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    if (!o.pass) ++failed;
    std::printf("%s criterion %d (%s): %s\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str());
    std::fflush(stdout);
  };

  report(1, "gradient oracle", gradient_oracle);
  report(2, "reduction identities", reduction_identities);
  report(3, "secure aggregation", secagg_transparency);
  report(4, "non-increasing global loss", lemma1_property);
  report(5, "convergence bound", theorem_calculator);
  const Comparison comparison = run_comparison();
  report(6, "accuracy vs fedavg", [&] { return accuracy_direction(comparison); });
  report(7, "model difference", [&] { return model_difference_direction(comparison); });
  report(8, "generation sanity", generation_sanity);
  report(9, "partition statistics", partition_statistics);
  report(10, "determinism", determinism);

  std::printf("%d of 10 criteria failed\n", failed);
  return failed == 0 ? 0 : 1;
}
