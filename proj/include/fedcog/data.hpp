#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <variant>
#include <vector>

#include "fedcog/tensor.hpp"

namespace fedcog::data {

/// Feature rows in [0, 1] with integer class labels.
struct LabeledDataset {
  Tensor features;  // [N x D]
  std::vector<int> labels;
  int num_classes = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return features.cols(); }
  bool empty() const { return labels.empty(); }

  LabeledDataset subset(std::span<const std::size_t> indices) const;

  friend bool operator==(const LabeledDataset&, const LabeledDataset&) = default;
};

/// Reads an IDX image file (magic 0x00000803) and label file (0x00000801).
/// Pixels are scaled by 1/255. `num_classes` of 0 infers max(label) + 1.
LabeledDataset load_idx(const std::filesystem::path& images_path,
                        const std::filesystem::path& labels_path, int num_classes = 0);

/// Isotropic Gaussian blobs around fixed per-class centers, clamped to [0, 1].
/// Centers depend only on (num_classes, dim), so train and test draws made
/// with different seeds share them.
LabeledDataset synth_blobs(int num_classes, std::size_t per_class, std::size_t dim, double spread,
                           std::uint64_t seed);

// ---------------------------------------------------------------------------

struct Iid {};
struct Niid1 {
  double beta = 0.1;
};
struct Niid2 {
  int labels_per_client = 2;
};

struct PartitionSpec {
  std::variant<Iid, Niid1, Niid2> kind = Niid1{};
  int num_clients = 10;
  std::uint64_t seed = 0;
};

/// Client index lists. Disjoint, their union is 0..N-1, every list nonempty.
std::vector<std::vector<std::size_t>> partition_indices(const LabeledDataset& ds,
                                                        const PartitionSpec& spec);

std::vector<LabeledDataset> partition(const LabeledDataset& ds, const PartitionSpec& spec);

// ---------------------------------------------------------------------------

using LabelHistogram = std::vector<std::int64_t>;

LabelHistogram label_histogram(const LabeledDataset& ds);

/// max(d) - d, elementwise.
LabelHistogram complementary_distribution(const LabelHistogram& d);

struct UniformLabels {};
struct ComplementaryLabels {
  LabelHistogram deficit;  // output of complementary_distribution
};
using LabelStrategy = std::variant<UniformLabels, ComplementaryLabels>;

/// Target label list of length `n` in ascending blocks. Complementary
/// strategies apportion `n` by largest remainder and fall back to uniform
/// when the deficit is all zero.
std::vector<int> allocate_target_labels(const LabelStrategy& strategy, int num_classes, std::size_t n);

/// Integer apportionment of `total` proportional to `weights` (largest
/// remainder, ties to the lower index).
std::vector<std::int64_t> largest_remainder(std::span<const double> weights, std::int64_t total);

}  // namespace fedcog::data
