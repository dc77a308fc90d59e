#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "fedcog/data.hpp"
#include "fedcog/fed.hpp"
#include "fedcog/generation.hpp"
#include "fedcog/localtrain.hpp"
#include "fedcog/metrics.hpp"

namespace fedcog::experiment {

struct DatasetConfig {
  std::string source = "auto";  // auto | idx | synth
  std::string train_images = "data/fashion-mnist/train-images-idx3-ubyte";
  std::string train_labels = "data/fashion-mnist/train-labels-idx1-ubyte";
  std::string test_images = "data/fashion-mnist/t10k-images-idx3-ubyte";
  std::string test_labels = "data/fashion-mnist/t10k-labels-idx1-ubyte";
  int synth_classes = 10;
  std::size_t synth_train_per_class = 600;
  std::size_t synth_test_per_class = 100;
  std::size_t synth_dim = 784;
  double synth_spread = 0.5;
  std::size_t image_side = 28;

  friend bool operator==(const DatasetConfig&, const DatasetConfig&) = default;
};

enum class PartitionKind { Iid, Niid1, Niid2 };

struct ExperimentConfig {
  DatasetConfig dataset;

  PartitionKind partition = PartitionKind::Niid1;
  double beta = 0.1;
  int labels_per_client = 2;
  double personal_fraction = 0.2;

  std::string method = "fedavg";  // fedavg | fedprox | scaffold | fedcog
  double mu = 0.01;
  double lambda_kd = 0.01;
  bool adaptive_kd = false;
  bool fedavgm = false;
  double server_momentum = 0.1;

  int rounds = 70;
  int clients = 10;
  int participants = 0;  // 0: every client, every round
  int fedcog_start_round = 0;
  bool secagg = false;

  train::LocalRunConfig local;
  gen::GenConfig gen;
  std::vector<std::size_t> hidden{120, 84};

  std::vector<std::uint64_t> seeds{0};
  std::string output_dir = "results";
  unsigned threads = 0;  // 0: hardware concurrency
  bool record_wall_time = false;
  bool dump_images = false;

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;

  train::TrainerKind trainer() const;
  data::PartitionSpec partition_spec(std::uint64_t seed) const;

  /// Throws ConfigError describing the first invalid field.
  void validate() const;
};

/// Parses flat INI-style text ("[section]" headers, "key = value" lines).
/// Unknown sections or keys and malformed values raise ConfigError naming the
/// key path; absent keys keep their defaults.
ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig parse_config(const std::filesystem::path& path);

/// Serializes every field; parse_config_text(write_config(c)) == c.
std::string write_config(const ExperimentConfig& cfg);

// ---------------------------------------------------------------------------

struct Datasets {
  data::LabeledDataset train;
  data::LabeledDataset test;
  std::string description;
};

/// Loads the IDX files, or draws synthetic blobs when the source is synth
/// (or auto with the files absent).
Datasets load_datasets(const ExperimentConfig& cfg);

struct RunSummary {
  double final_global_acc = 0.0;
  double best_global_acc = 0.0;
  double mean_last5_global_acc = 0.0;
  double final_mean_model_diff = 0.0;
};

struct RunResult {
  ExperimentConfig config;
  std::uint64_t seed = 0;
  std::vector<metrics::RoundRecord> rounds;
  RunSummary summary;
  fed::GlobalState final_state;
  std::vector<fed::ClientSlot> clients;
};

RunSummary summarize(const std::vector<metrics::RoundRecord>& rounds);

/// Observer invoked after every completed round.
using RoundCallback = std::function<void(const metrics::RoundRecord&)>;

/// Runs all rounds for one seed. `partial` (when given) always holds the
/// rounds completed so far, including when an exception escapes.
RunResult run_seed(const ExperimentConfig& cfg, const Datasets& datasets, std::uint64_t seed,
                   const RoundCallback& on_round = {}, RunResult* partial = nullptr);

struct ExperimentResult {
  std::vector<RunResult> runs;
  double mean_final_acc = 0.0;
  double stddev_final_acc = 0.0;  // sample standard deviation across seeds
};

/// Every configured seed in sequence. When `output_dir` is non-empty, each
/// seed's results are written as soon as it finishes (or fails).
ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& output_dir = {},
                                const RoundCallback& on_round = {});

/// rounds.csv and summary.json for one seed.
std::vector<std::filesystem::path> write_results(const RunResult& result, const std::filesystem::path& dir);

/// Per-seed directories, config.ini and the cross-seed summary.json.
std::vector<std::filesystem::path> write_experiment(const ExperimentResult& result,
                                                    const std::filesystem::path& dir);

/// CSV text exactly as written to rounds.csv.
std::string rounds_csv(const RunResult& result);

/// "73.68 ± 0.38" (percent, two decimals).
std::string format_mean_std(double mean, double stddev);

/// FEDCOG_OUTPUT_DIR when set, otherwise the configured directory.
std::filesystem::path resolve_output_dir(const ExperimentConfig& cfg);

}  // namespace fedcog::experiment
