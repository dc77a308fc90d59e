#include "fedcog/generation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <random>
#include <sstream>
#include <string>

#include "fedcog/error.hpp"
#include "fedcog/rng.hpp"

namespace fedcog::gen {

namespace {

nn::LossSpec generation_spec(const nn::ModelParams& local_model, std::span<const int> targets,
                             double lambda_dis) {
  nn::LossSpec spec;
  spec.cross_entropy(targets);
  if (lambda_dis != 0.0) spec.js_disagreement(local_model, lambda_dis);
  return spec;
}

void require_pair(const nn::ModelParams& global_model, const nn::ModelParams& local_model) {
  if (global_model.input_dim() != local_model.input_dim() ||
      global_model.output_dim() != local_model.output_dim()) {
    throw ShapeError("global and local models disagree on input/output widths");
  }
}

}  // namespace

void GenConfig::validate() const {
  if (num_samples == 0) throw ConfigError("generation num_samples must be positive");
  if (steps < 0) throw ConfigError("generation steps must be non-negative");
  if (!(lr > 0.0)) throw ConfigError("generation lr must be positive");
  if (!(lambda_dis >= 0.0)) throw ConfigError("lambda_dis must be non-negative");
}

Tensor init_inputs(std::size_t n, std::size_t dim, std::uint64_t seed) {
  if (n == 0 || dim == 0) throw InputError("init_inputs: sizes must be positive");
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor x({n, dim});
  for (double& v : x.data()) v = normal(rng);
  return x;
}

double generation_loss(const nn::ModelParams& global_model, const nn::ModelParams& local_model,
                       const Tensor& inputs, std::span<const int> targets, double lambda_dis) {
  require_pair(global_model, local_model);
  return nn::evaluate_loss(global_model, inputs, generation_spec(local_model, targets, lambda_dis));
}

GeneratedDataset generate(const nn::ModelParams& global_model, const nn::ModelParams& local_model,
                          const data::LabelHistogram& client_histogram, const GenConfig& cfg,
                          std::uint64_t seed) {
  cfg.validate();
  require_pair(global_model, local_model);
  const int classes = static_cast<int>(global_model.output_dim());

  data::LabelStrategy strategy = data::UniformLabels{};
  if (cfg.labels == LabelMode::Complementary) {
    if (client_histogram.size() != static_cast<std::size_t>(classes)) {
      throw ShapeError("client histogram length does not match the model's class count");
    }
    strategy = data::ComplementaryLabels{data::complementary_distribution(client_histogram)};
  }

  GeneratedDataset out;
  out.targets = data::allocate_target_labels(strategy, classes, cfg.num_samples);
  out.inputs = init_inputs(cfg.num_samples, global_model.input_dim(), seed);

  const nn::LossSpec spec = generation_spec(local_model, out.targets, cfg.lambda_dis);
  for (int step = 0; step < cfg.steps; ++step) {
    const auto result = nn::backward(global_model, out.inputs, spec, nn::Wrt::Inputs);
    if (step == 0) out.stats.initial_loss = result.loss;
    nn::sgd_step(out.inputs, *result.grads.inputs, cfg.lr);
  }
  out.stats.final_loss = nn::evaluate_loss(global_model, out.inputs, spec);
  if (cfg.steps == 0) out.stats.initial_loss = out.stats.final_loss;

  for (double& v : out.inputs.data()) v = std::clamp(v, 0.0, 1.0);
  out.teacher_probs = nn::softmax(nn::forward(global_model, out.inputs));
  return out;
}

double mean_target_probability(const nn::ModelParams& model, const GeneratedDataset& gen) {
  if (gen.empty()) throw InputError("mean_target_probability of an empty generated dataset");
  const Tensor probs = nn::softmax(nn::forward(model, gen.inputs));
  double s = 0.0;
  for (std::size_t i = 0; i < gen.size(); ++i) s += probs(i, static_cast<std::size_t>(gen.targets[i]));
  return s / static_cast<double>(gen.size());
}

unsigned char quantize_pixel(double v) {
  return static_cast<unsigned char>(std::lround(255.0 * std::clamp(v, 0.0, 1.0)));
}

std::vector<std::filesystem::path> dump_images(const GeneratedDataset& gen, std::size_t side,
                                               const std::filesystem::path& dir) {
  if (side == 0 || gen.inputs.cols() != side * side) {
    throw ConfigError("dump_images: sample width " + std::to_string(gen.inputs.cols()) + " is not " +
                      std::to_string(side) + " squared");
  }
  std::filesystem::create_directories(dir);
  const std::string header = "P5\n" + std::to_string(side) + " " + std::to_string(side) + "\n255\n";
  std::vector<std::filesystem::path> paths;
  std::vector<char> pixels(side * side);
  for (std::size_t i = 0; i < gen.size(); ++i) {
    const auto row = gen.inputs.row(i);
    std::transform(row.begin(), row.end(), pixels.begin(),
                   [](double v) { return static_cast<char>(quantize_pixel(v)); });
    auto path = dir / ("gen_" + std::to_string(i) + "_label" + std::to_string(gen.targets[i]) + ".pgm");
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    os.write(header.data(), static_cast<std::streamsize>(header.size()));
    os.write(pixels.data(), static_cast<std::streamsize>(pixels.size()));
    if (!os) throw Error("failed writing " + path.string());
    paths.push_back(std::move(path));
  }
  return paths;
}

GrayImage read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::string magic;
  int maxval = 0;
  GrayImage img;
  in >> magic >> img.width >> img.height >> maxval;
  if (magic != "P5" || maxval != 255 || !in) throw FormatError(path.string() + ": not an 8-bit P5 image");
  in.get();  // single whitespace after maxval
  img.pixels.resize(img.width * img.height);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.pixels.size())) {
    throw FormatError(path.string() + ": truncated pixel data");
  }
  return img;
}

}  // namespace fedcog::gen
