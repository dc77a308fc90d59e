#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "fedcog/data.hpp"
#include "fedcog/nn.hpp"

namespace fedcog::gen {

enum class LabelMode { Uniform, Complementary };

struct GenConfig {
  std::size_t num_samples = 256;
  int steps = 100;
  double lr = 0.1;
  double lambda_dis = 0.1;
  LabelMode labels = LabelMode::Uniform;

  /// Throws ConfigError on out-of-range values.
  void validate() const;

  friend bool operator==(const GenConfig&, const GenConfig&) = default;
};

struct GenerationStats {
  double initial_loss = 0.0;  // objective at the Gaussian initialization
  double final_loss = 0.0;    // objective after the last step, before clamping
};

/// Synthesized inputs with their target labels and the global model's soft
/// labels on the emitted (clamped) inputs.
struct GeneratedDataset {
  Tensor inputs;               // [N x D], values in [0, 1]
  std::vector<int> targets;    // N
  Tensor teacher_probs;        // [N x C]
  GenerationStats stats;

  std::size_t size() const { return targets.size(); }
  bool empty() const { return targets.empty(); }
};

/// I.i.d. standard normal [n x dim] tensor.
Tensor init_inputs(std::size_t n, std::size_t dim, std::uint64_t seed);

/// Mean task loss of the global model on (inputs, targets) plus lambda_dis
/// times the global/local disagreement loss. Both models are constants.
double generation_loss(const nn::ModelParams& global_model, const nn::ModelParams& local_model,
                       const Tensor& inputs, std::span<const int> targets, double lambda_dis);

/// Optimizes `cfg.num_samples` inputs by full-batch SGD on generation_loss
/// with respect to the inputs only, then clamps to [0, 1] and caches the
/// global model's probabilities.
GeneratedDataset generate(const nn::ModelParams& global_model, const nn::ModelParams& local_model,
                          const data::LabelHistogram& client_histogram, const GenConfig& cfg,
                          std::uint64_t seed);

/// Mean probability the given model assigns to each sample's target label.
double mean_target_probability(const nn::ModelParams& model, const GeneratedDataset& gen);

// ---------------------------------------------------------------------------
// Grayscale export.

/// Writes one binary PGM (P5, maxval 255) per sample as gen_{i}_label{y}.pgm.
std::vector<std::filesystem::path> dump_images(const GeneratedDataset& gen, std::size_t side,
                                               const std::filesystem::path& dir);

struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<unsigned char> pixels;
};

GrayImage read_pgm(const std::filesystem::path& path);

/// round(255 * clamp(v, 0, 1)).
unsigned char quantize_pixel(double v);

}  // namespace fedcog::gen
