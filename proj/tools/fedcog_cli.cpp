// Command-line driver: run experiments, check gradients, export generated samples.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "fedcog/error.hpp"
#include "fedcog/experiment.hpp"
#include "fedcog/generation.hpp"
#include "fedcog/gradcheck.hpp"
#include "fedcog/rng.hpp"

namespace {

using namespace fedcog;

int cmd_run(const std::string& config_path, const std::string& output_override, bool quiet) {
  experiment::ExperimentConfig cfg = experiment::parse_config(config_path);
  if (!output_override.empty()) cfg.output_dir = output_override;
  const std::filesystem::path out = experiment::resolve_output_dir(cfg);

  int seed_index = 0;
  const auto on_round = [&](const metrics::RoundRecord& r) {
    if (quiet) return;
    std::printf("seed#%d round %3d  global_acc %.4f  mean_diff %.4f\n", seed_index, r.round, r.global_acc,
                metrics::mean(r.model_diff_l2));
    if (r.round + 1 == cfg.rounds) ++seed_index;
    std::fflush(stdout);
  };
  const experiment::ExperimentResult result = experiment::run_experiment(cfg, out, on_round);
  std::printf("%s final global accuracy: %s (%zu seed%s) -> %s\n", cfg.method.c_str(),
              experiment::format_mean_std(result.mean_final_acc, result.stddev_final_acc).c_str(), result.runs.size(),
              result.runs.size() == 1 ? "" : "s", out.string().c_str());
  return 0;
}

int cmd_gradcheck(std::size_t models, std::uint64_t seed) {
  bool ok = true;
  for (const auto& line : nn::run_gradcheck_suite(models, seed)) {
    std::printf("%-22s %s  checked=%zu failures=%zu max_rel=%.3e max_abs=%.3e\n", line.composition.c_str(),
                line.report.passed() ? "ok  " : "FAIL", line.report.checked, line.report.failures,
                line.report.max_rel_error, line.report.max_abs_error);
    ok = ok && line.report.passed();
  }
  return ok ? 0 : 1;
}

// Warm-starts a global model with FedAvg, then synthesizes one client's
// dataset and writes it as PGM images.
int cmd_demo_generate(const std::string& config_path, const std::string& output_override, int client,
                      int warmup_rounds) {
  experiment::ExperimentConfig cfg = experiment::parse_config(config_path);
  if (!output_override.empty()) cfg.output_dir = output_override;
  if (client < 0 || client >= cfg.clients) throw ConfigError("--client must lie in [0, clients)");

  const experiment::Datasets datasets = experiment::load_datasets(cfg);
  experiment::ExperimentConfig warm = cfg;
  warm.method = "fedavg";
  warm.rounds = warmup_rounds >= 0 ? warmup_rounds : std::max(1, cfg.fedcog_start_round);
  warm.fedcog_start_round = 0;
  const std::uint64_t seed = cfg.seeds.front();
  const experiment::RunResult run = experiment::run_seed(warm, datasets, seed);

  const auto& slot = run.clients[static_cast<std::size_t>(client)];
  const nn::ModelParams& global = run.final_state.global_model;
  const nn::ModelParams& local = slot.last_local ? *slot.last_local : global;
  const auto hist = data::label_histogram(slot.train);
  const std::uint64_t gen_seed = derive_seed(seed, {stream::kGenInit, static_cast<std::uint64_t>(client)});

  gen::GenConfig at_init = cfg.gen;
  at_init.steps = 0;
  const gen::GeneratedDataset before = gen::generate(global, local, hist, at_init, gen_seed);
  const gen::GeneratedDataset after = gen::generate(global, local, hist, cfg.gen, gen_seed);

  const std::filesystem::path dir = experiment::resolve_output_dir(cfg) / "generated";
  const auto files = gen::dump_images(after, cfg.dataset.image_side, dir);
  std::printf("warm-up rounds: %d, global accuracy %.4f\n", warm.rounds, run.summary.final_global_acc);
  std::printf("mean target probability: %.4f at initialization, %.4f after %d steps\n",
              gen::mean_target_probability(global, before), gen::mean_target_probability(global, after),
              cfg.gen.steps);
  std::printf("wrote %zu images to %s\n", files.size(), dir.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated learning simulator with consensus-oriented generation"};
  app.require_subcommand(1);

  std::string config_path;
  std::string output_dir;
  bool quiet = false;
  auto* run = app.add_subcommand("run", "Run every seed of an experiment and write its results");
  run->add_option("config", config_path, "INI configuration file")->required()->check(CLI::ExistingFile);
  run->add_option("-o,--output-dir", output_dir, "Output directory (FEDCOG_OUTPUT_DIR takes precedence)");
  run->add_flag("-q,--quiet", quiet, "Suppress per-round progress");

  std::size_t models = 20;
  std::uint64_t gc_seed = 0;
  auto* gradcheck = app.add_subcommand("gradcheck", "Compare analytic gradients with finite differences");
  gradcheck->add_option("-n,--models", models, "Random models per loss composition")->check(CLI::PositiveNumber);
  gradcheck->add_option("-s,--seed", gc_seed, "Seed for models and batches");

  int client = 0;
  int warmup = -1;
  auto* demo = app.add_subcommand("demo-generate", "Synthesize one client's dataset and export PGM images");
  demo->add_option("config", config_path, "INI configuration file")->required()->check(CLI::ExistingFile);
  demo->add_option("-o,--output-dir", output_dir, "Output directory (FEDCOG_OUTPUT_DIR takes precedence)");
  demo->add_option("-c,--client", client, "Client whose local model and histogram are used");
  demo->add_option("-w,--warmup-rounds", warmup,
                   "FedAvg rounds before generating (default: fedcog_start_round, at least 1)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return cmd_run(config_path, output_dir, quiet);
    if (*gradcheck) return cmd_gradcheck(models, gc_seed);
    if (*demo) return cmd_demo_generate(config_path, output_dir, client, warmup);
  } catch (const fedcog::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
  return 1;
}
