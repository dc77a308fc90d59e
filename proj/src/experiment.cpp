#include "fedcog/experiment.hpp"

#include <algorithm>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <thread>

#include "fedcog/error.hpp"
#include "fedcog/rng.hpp"
#include "json.hpp"

namespace fedcog::experiment {

namespace {

namespace pt = boost::property_tree;

// ---------------------------------------------------------------------------
// Scalar codecs. Every parser consumes the whole string or fails.

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& path, const std::string& value, const char* expected) {
  throw ConfigError(path + ": expected " + expected + ", got '" + value + "'");
}

template <typename T>
T parse_number(const std::string& path, const std::string& raw, const char* expected) {
  const std::string v = trim(raw);
  T out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc() || ptr != v.data() + v.size()) bad_value(path, v, expected);
  return out;
}

double parse_double(const std::string& path, const std::string& raw) {
  const double v = parse_number<double>(path, raw, "a real number");
  if (!std::isfinite(v)) bad_value(path, raw, "a finite real number");
  return v;
}

bool parse_bool(const std::string& path, const std::string& raw) {
  std::string v = trim(raw);
  std::transform(v.begin(), v.end(), v.begin(), [](unsigned char c) { return std::tolower(c); });
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  bad_value(path, raw, "a boolean");
}

template <typename T>
std::vector<T> parse_list(const std::string& path, const std::string& raw, const char* expected) {
  std::vector<T> out;
  std::stringstream ss(raw);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<T>(path, item, expected));
  return out;
}

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

template <typename T>
std::string join(const std::vector<T>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(values[i]);
  }
  return out;
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

// ---------------------------------------------------------------------------
// Field table: one entry per (section, key).

struct Field {
  const char* section;
  const char* key;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string& value, const std::string& path)> set;
};

template <typename Ref>
Field int_field(const char* section, const char* key, Ref ref) {
  using T = std::remove_reference_t<decltype(ref(std::declval<ExperimentConfig&>()))>;
  return {section, key,
          [ref](const ExperimentConfig& c) { return std::to_string(ref(const_cast<ExperimentConfig&>(c))); },
          [ref](ExperimentConfig& c, const std::string& v, const std::string& p) {
            ref(c) = parse_number<T>(p, v, "an integer");
          }};
}

template <typename Ref>
Field real_field(const char* section, const char* key, Ref ref) {
  return {section, key,
          [ref](const ExperimentConfig& c) { return format_double(ref(const_cast<ExperimentConfig&>(c))); },
          [ref](ExperimentConfig& c, const std::string& v, const std::string& p) { ref(c) = parse_double(p, v); }};
}

template <typename Ref>
Field bool_field(const char* section, const char* key, Ref ref) {
  return {section, key,
          [ref](const ExperimentConfig& c) {
            return std::string(ref(const_cast<ExperimentConfig&>(c)) ? "true" : "false");
          },
          [ref](ExperimentConfig& c, const std::string& v, const std::string& p) { ref(c) = parse_bool(p, v); }};
}

template <typename Ref>
Field string_field(const char* section, const char* key, Ref ref) {
  return {section, key, [ref](const ExperimentConfig& c) { return ref(const_cast<ExperimentConfig&>(c)); },
          [ref](ExperimentConfig& c, const std::string& v, const std::string&) { ref(c) = trim(v); }};
}

const std::vector<Field>& fields() {
  using C = ExperimentConfig;
  static const std::vector<Field> table = {
      string_field("dataset", "source", [](C& c) -> std::string& { return c.dataset.source; }),
      string_field("dataset", "train_images", [](C& c) -> std::string& { return c.dataset.train_images; }),
      string_field("dataset", "train_labels", [](C& c) -> std::string& { return c.dataset.train_labels; }),
      string_field("dataset", "test_images", [](C& c) -> std::string& { return c.dataset.test_images; }),
      string_field("dataset", "test_labels", [](C& c) -> std::string& { return c.dataset.test_labels; }),
      int_field("dataset", "synth_classes", [](C& c) -> int& { return c.dataset.synth_classes; }),
      int_field("dataset", "synth_train_per_class", [](C& c) -> std::size_t& { return c.dataset.synth_train_per_class; }),
      int_field("dataset", "synth_test_per_class", [](C& c) -> std::size_t& { return c.dataset.synth_test_per_class; }),
      int_field("dataset", "synth_dim", [](C& c) -> std::size_t& { return c.dataset.synth_dim; }),
      real_field("dataset", "synth_spread", [](C& c) -> double& { return c.dataset.synth_spread; }),
      int_field("dataset", "image_side", [](C& c) -> std::size_t& { return c.dataset.image_side; }),

      Field{"partition", "kind",
            [](const C& c) -> std::string {
              switch (c.partition) {
                case PartitionKind::Iid: return "iid";
                case PartitionKind::Niid1: return "niid1";
                case PartitionKind::Niid2: return "niid2";
              }
              return "niid1";
            },
            [](C& c, const std::string& v, const std::string& p) {
              const std::string k = lower(trim(v));
              if (k == "iid") c.partition = PartitionKind::Iid;
              else if (k == "niid1" || k == "niid-1" || k == "dirichlet") c.partition = PartitionKind::Niid1;
              else if (k == "niid2" || k == "niid-2" || k == "shards") c.partition = PartitionKind::Niid2;
              else bad_value(p, v, "one of iid, niid1, niid2");
            }},
      real_field("partition", "beta", [](C& c) -> double& { return c.beta; }),
      int_field("partition", "labels_per_client", [](C& c) -> int& { return c.labels_per_client; }),
      real_field("partition", "personal_fraction", [](C& c) -> double& { return c.personal_fraction; }),

      Field{"method", "name", [](const C& c) { return c.method; },
            [](C& c, const std::string& v, const std::string& p) {
              const std::string m = lower(trim(v));
              if (m != "fedavg" && m != "fedprox" && m != "scaffold" && m != "fedcog") {
                bad_value(p, v, "one of fedavg, fedprox, scaffold, fedcog");
              }
              c.method = m;
            }},
      real_field("method", "mu", [](C& c) -> double& { return c.mu; }),
      real_field("method", "lambda_kd", [](C& c) -> double& { return c.lambda_kd; }),
      bool_field("method", "adaptive_kd", [](C& c) -> bool& { return c.adaptive_kd; }),
      bool_field("method", "fedavgm", [](C& c) -> bool& { return c.fedavgm; }),
      real_field("method", "server_momentum", [](C& c) -> double& { return c.server_momentum; }),

      int_field("federation", "rounds", [](C& c) -> int& { return c.rounds; }),
      int_field("federation", "clients", [](C& c) -> int& { return c.clients; }),
      int_field("federation", "participants", [](C& c) -> int& { return c.participants; }),
      int_field("federation", "fedcog_start_round", [](C& c) -> int& { return c.fedcog_start_round; }),
      bool_field("federation", "secagg", [](C& c) -> bool& { return c.secagg; }),

      int_field("local", "tau", [](C& c) -> int& { return c.local.tau; }),
      real_field("local", "lr", [](C& c) -> double& { return c.local.lr; }),
      int_field("local", "batch_size", [](C& c) -> std::size_t& { return c.local.batch_size; }),

      int_field("generation", "num_samples", [](C& c) -> std::size_t& { return c.gen.num_samples; }),
      int_field("generation", "steps", [](C& c) -> int& { return c.gen.steps; }),
      real_field("generation", "lr", [](C& c) -> double& { return c.gen.lr; }),
      real_field("generation", "lambda_dis", [](C& c) -> double& { return c.gen.lambda_dis; }),
      Field{"generation", "labels",
            [](const C& c) -> std::string {
              return c.gen.labels == gen::LabelMode::Uniform ? "uniform" : "complementary";
            },
            [](C& c, const std::string& v, const std::string& p) {
              const std::string m = lower(trim(v));
              if (m == "uniform") c.gen.labels = gen::LabelMode::Uniform;
              else if (m == "complementary") c.gen.labels = gen::LabelMode::Complementary;
              else bad_value(p, v, "uniform or complementary");
            }},

      Field{"model", "hidden", [](const C& c) { return join(c.hidden); },
            [](C& c, const std::string& v, const std::string& p) {
              c.hidden = trim(v).empty() ? std::vector<std::size_t>{}
                                         : parse_list<std::size_t>(p, v, "comma-separated widths");
            }},

      Field{"run", "seeds", [](const C& c) { return join(c.seeds); },
            [](C& c, const std::string& v, const std::string& p) {
              c.seeds = parse_list<std::uint64_t>(p, v, "comma-separated unsigned seeds");
            }},
      string_field("run", "output_dir", [](C& c) -> std::string& { return c.output_dir; }),
      int_field("run", "threads", [](C& c) -> unsigned& { return c.threads; }),
      bool_field("run", "record_wall_time", [](C& c) -> bool& { return c.record_wall_time; }),
      bool_field("run", "dump_images", [](C& c) -> bool& { return c.dump_images; }),
  };
  return table;
}

const Field* find_field(const std::string& section, const std::string& key) {
  for (const Field& f : fields()) {
    if (section == f.section && key == f.key) return &f;
  }
  return nullptr;
}

nlohmann::json config_json(const ExperimentConfig& cfg) {
  nlohmann::json j = nlohmann::json::object();
  for (const Field& f : fields()) j[f.section][f.key] = f.get(cfg);
  return j;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  os << text;
  os.close();
  if (!os) throw Error("failed writing " + path.string());
}

std::string format_g6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

bool files_exist(const DatasetConfig& d) {
  namespace fs = std::filesystem;
  return fs::exists(d.train_images) && fs::exists(d.train_labels) && fs::exists(d.test_images) &&
         fs::exists(d.test_labels);
}

}  // namespace

// ---------------------------------------------------------------------------

train::TrainerKind ExperimentConfig::trainer() const {
  if (method == "fedprox") return train::FedProx{mu};
  if (method == "scaffold") return train::Scaffold{};
  if (method == "fedcog") return train::FedCog{lambda_kd, adaptive_kd};
  return train::FedAvg{};
}

data::PartitionSpec ExperimentConfig::partition_spec(std::uint64_t seed) const {
  data::PartitionSpec spec;
  spec.num_clients = clients;
  spec.seed = seed;
  switch (partition) {
    case PartitionKind::Iid: spec.kind = data::Iid{}; break;
    case PartitionKind::Niid1: spec.kind = data::Niid1{beta}; break;
    case PartitionKind::Niid2: spec.kind = data::Niid2{labels_per_client}; break;
  }
  return spec;
}

void ExperimentConfig::validate() const {
  if (rounds < 1) throw ConfigError("federation.rounds must be at least 1");
  if (clients < 1) throw ConfigError("federation.clients must be at least 1");
  if (participants < 0 || participants > clients) throw ConfigError("federation.participants must lie in [0, clients]");
  if (fedcog_start_round < 0 || fedcog_start_round > rounds) {
    throw ConfigError("federation.fedcog_start_round must lie in [0, rounds]");
  }
  if (!(beta > 0.0)) throw ConfigError("partition.beta must be positive");
  if (labels_per_client < 1) throw ConfigError("partition.labels_per_client must be at least 1");
  if (!(personal_fraction > 0.0 && personal_fraction < 1.0)) {
    throw ConfigError("partition.personal_fraction must lie in (0, 1)");
  }
  if (!(mu >= 0.0)) throw ConfigError("method.mu must be non-negative");
  if (!(lambda_kd >= 0.0)) throw ConfigError("method.lambda_kd must be non-negative");
  if (!(server_momentum >= 0.0 && server_momentum < 1.0)) throw ConfigError("method.server_momentum must lie in [0, 1)");
  if (dataset.source != "auto" && dataset.source != "idx" && dataset.source != "synth") {
    throw ConfigError("dataset.source must be auto, idx or synth");
  }
  if (dataset.synth_classes < 1 || dataset.synth_train_per_class < 1 || dataset.synth_test_per_class < 1 ||
      dataset.synth_dim < 1) {
    throw ConfigError("dataset.synth_* sizes must be positive");
  }
  if (!(dataset.synth_spread >= 0.0)) throw ConfigError("dataset.synth_spread must be non-negative");
  for (std::size_t h : hidden) {
    if (h == 0) throw ConfigError("model.hidden widths must be positive");
  }
  if (seeds.empty()) throw ConfigError("run.seeds must list at least one seed");
  try {
    local.validate();
    gen.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("local/generation: ") + e.what());
  }
}

ExperimentConfig parse_config_text(const std::string& text) {
  pt::ptree tree;
  try {
    std::istringstream in(text);
    pt::ini_parser::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config syntax: ") + e.what());
  }

  ExperimentConfig cfg;
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw ConfigError(section + ": key outside of any [section]");
    for (const auto& [key, value] : body) {
      const std::string path = section + "." + key;
      const Field* f = find_field(section, key);
      if (f == nullptr) throw ConfigError(path + ": unknown key");
      f->set(cfg, value.data(), path);
    }
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig parse_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config_text(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string write_config(const ExperimentConfig& cfg) {
  std::string out;
  std::string current;
  for (const Field& f : fields()) {
    if (current != f.section) {
      if (!current.empty()) out += '\n';
      current = f.section;
      out += '[' + current + "]\n";
    }
    out += std::string(f.key) + " = " + f.get(cfg) + '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------

Datasets load_datasets(const ExperimentConfig& cfg) {
  const DatasetConfig& d = cfg.dataset;
  const bool use_idx = d.source == "idx" || (d.source == "auto" && files_exist(d));
  Datasets out;
  if (use_idx) {
    out.train = data::load_idx(d.train_images, d.train_labels, 10);
    out.test = data::load_idx(d.test_images, d.test_labels, 10);
    out.description = "idx:" + d.train_images;
  } else {
    out.train = data::synth_blobs(d.synth_classes, d.synth_train_per_class, d.synth_dim, d.synth_spread,
                                  derive_seed(0, {stream::kSynthTrain}));
    out.test = data::synth_blobs(d.synth_classes, d.synth_test_per_class, d.synth_dim, d.synth_spread,
                                 derive_seed(0, {stream::kSynthTest}));
    out.description = "synth_blobs";
  }
  if (out.train.dim() != out.test.dim()) throw ConfigError("train and test feature widths differ");
  return out;
}

RunSummary summarize(const std::vector<metrics::RoundRecord>& rounds) {
  RunSummary s;
  if (rounds.empty()) return s;
  s.final_global_acc = rounds.back().global_acc;
  for (const auto& r : rounds) s.best_global_acc = std::max(s.best_global_acc, r.global_acc);
  const std::size_t k = std::min<std::size_t>(5, rounds.size());
  double acc = 0.0;
  for (std::size_t i = rounds.size() - k; i < rounds.size(); ++i) acc += rounds[i].global_acc;
  s.mean_last5_global_acc = acc / static_cast<double>(k);
  s.final_mean_model_diff = metrics::mean(rounds.back().model_diff_l2);
  return s;
}

RunResult run_seed(const ExperimentConfig& cfg, const Datasets& datasets, std::uint64_t seed,
                   const RoundCallback& on_round, RunResult* partial) {
  cfg.validate();
  RunResult local_result;
  RunResult& result = partial != nullptr ? *partial : local_result;
  result = RunResult{};
  result.config = cfg;
  result.seed = seed;

  const auto parts = data::partition(datasets.train, cfg.partition_spec(derive_seed(seed, {stream::kPartition})));
  std::vector<fed::ClientSlot>& clients = result.clients;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto split = metrics::personalized_split(parts[k], cfg.personal_fraction,
                                             derive_seed(seed, {stream::kPersonalSplit, k}));
    fed::ClientSlot slot;
    slot.id = static_cast<int>(k);
    slot.train = std::move(split.train);
    slot.personal_test = std::move(split.personal_test);
    clients.push_back(std::move(slot));
  }

  std::vector<std::size_t> widths{datasets.train.dim()};
  widths.insert(widths.end(), cfg.hidden.begin(), cfg.hidden.end());
  widths.push_back(static_cast<std::size_t>(datasets.train.num_classes));
  fed::GlobalState state;
  state.global_model = nn::make_mlp(widths, derive_seed(seed, {stream::kModelInit}));

  fed::RoundConfig rc;
  rc.method = cfg.trainer();
  rc.local = cfg.local;
  rc.gen = cfg.gen;
  rc.server_momentum = cfg.fedavgm ? cfg.server_momentum : 0.0;
  rc.secagg = cfg.secagg;
  rc.participants = cfg.participants;
  rc.seed = seed;
  rc.threads = cfg.threads == 0 ? std::max(1U, std::thread::hardware_concurrency()) : cfg.threads;

  for (int t = 0; t < cfg.rounds; ++t) {
    rc.generation_active = t >= cfg.fedcog_start_round;
    fed::RoundOutcome outcome = fed::run_round(state, clients, rc, datasets.test);
    if (!cfg.record_wall_time) {
      std::fill(outcome.record.gen_seconds.begin(), outcome.record.gen_seconds.end(), 0.0);
      std::fill(outcome.record.train_seconds.begin(), outcome.record.train_seconds.end(), 0.0);
    }
    state = std::move(outcome.state);
    result.rounds.push_back(std::move(outcome.record));
    result.final_state = state;
    result.summary = summarize(result.rounds);
    if (on_round) on_round(result.rounds.back());
  }
  return result;
}

ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& output_dir,
                                const RoundCallback& on_round) {
  cfg.validate();
  const Datasets datasets = load_datasets(cfg);
  ExperimentResult out;
  for (std::uint64_t seed : cfg.seeds) {
    RunResult partial;
    try {
      out.runs.push_back(run_seed(cfg, datasets, seed, on_round, &partial));
    } catch (...) {
      if (!output_dir.empty()) write_results(partial, output_dir / ("seed_" + std::to_string(seed)));
      throw;
    }
    if (!output_dir.empty()) write_results(out.runs.back(), output_dir / ("seed_" + std::to_string(seed)));
  }
  std::vector<double> finals;
  for (const auto& r : out.runs) finals.push_back(r.summary.final_global_acc);
  std::tie(out.mean_final_acc, out.stddev_final_acc) = metrics::mean_and_stddev(finals);
  if (!output_dir.empty()) write_experiment(out, output_dir);
  return out;
}

std::string rounds_csv(const RunResult& result) {
  std::string out =
      "round,global_acc,mean_local_general_acc,mean_local_personal_acc,mean_model_diff,mean_train_loss,gen_seconds,"
      "train_seconds\n";
  for (const auto& r : result.rounds) {
    const double values[] = {r.global_acc,
                             metrics::mean(r.per_client_general_acc),
                             metrics::mean(r.per_client_personal_acc),
                             metrics::mean(r.model_diff_l2),
                             metrics::mean(r.mean_train_loss),
                             metrics::mean(r.gen_seconds),
                             metrics::mean(r.train_seconds)};
    out += std::to_string(r.round);
    for (double v : values) out += ',' + format_g6(v);
    out += '\n';
  }
  return out;
}

std::vector<std::filesystem::path> write_results(const RunResult& result, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> paths;

  paths.push_back(dir / "rounds.csv");
  write_text(paths.back(), rounds_csv(result));

  nlohmann::json j;
  j["seed"] = result.seed;
  j["method"] = result.config.method;
  j["rounds_executed"] = result.rounds.size();
  j["final_global_acc"] = result.summary.final_global_acc;
  j["best_global_acc"] = result.summary.best_global_acc;
  j["mean_last5_global_acc"] = result.summary.mean_last5_global_acc;
  j["final_mean_model_diff"] = result.summary.final_mean_model_diff;
  std::vector<std::string> warnings;
  for (const auto& r : result.rounds) {
    for (const auto& w : r.warnings) warnings.push_back("round " + std::to_string(r.round) + ": " + w);
  }
  j["warnings"] = warnings;
  j["config"] = config_json(result.config);
  paths.push_back(dir / "summary.json");
  write_text(paths.back(), j.dump(2) + "\n");
  return paths;
}

std::vector<std::filesystem::path> write_experiment(const ExperimentResult& result, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> paths;
  if (result.runs.empty()) return paths;
  const ExperimentConfig& cfg = result.runs.front().config;

  paths.push_back(dir / "config.ini");
  write_text(paths.back(), write_config(cfg));

  nlohmann::json j;
  j["method"] = cfg.method;
  std::vector<std::uint64_t> seeds;
  std::vector<double> finals, last5;
  for (const auto& r : result.runs) {
    seeds.push_back(r.seed);
    finals.push_back(r.summary.final_global_acc);
    last5.push_back(r.summary.mean_last5_global_acc);
  }
  j["seeds"] = seeds;
  j["final_global_acc"] = finals;
  j["mean_last5_global_acc"] = last5;
  j["mean_final_global_acc"] = result.mean_final_acc;
  j["stddev_final_global_acc"] = result.stddev_final_acc;
  j["final_global_acc_percent"] = format_mean_std(result.mean_final_acc, result.stddev_final_acc);
  j["config"] = config_json(cfg);
  paths.push_back(dir / "summary.json");
  write_text(paths.back(), j.dump(2) + "\n");
  return paths;
}

std::string format_mean_std(double mean, double stddev) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "%.2f ± %.2f", 100.0 * mean, 100.0 * stddev);
  return buf;
}

std::filesystem::path resolve_output_dir(const ExperimentConfig& cfg) {
  if (const char* env = std::getenv("FEDCOG_OUTPUT_DIR"); env != nullptr && *env != '\0') return env;
  return cfg.output_dir;
}

}  // namespace fedcog::experiment
