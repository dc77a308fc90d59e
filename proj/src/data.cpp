#include "fedcog/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>
#include <string>

#include "fedcog/error.hpp"
#include "fedcog/rng.hpp"

namespace fedcog::data {

namespace {

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<unsigned char>& bytes, std::size_t offset,
                        const std::filesystem::path& path) {
  if (bytes.size() < offset + 4) throw FormatError(path.string() + ": truncated IDX header");
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

std::vector<std::vector<std::size_t>> indices_by_class(const LabeledDataset& ds) {
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(ds.num_classes));
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);
  return by_class;
}

// Moves one sample from the largest client into each empty one.
void repair_empty_clients(std::vector<std::vector<std::size_t>>& clients) {
  for (auto& target : clients) {
    if (!target.empty()) continue;
    auto largest = std::max_element(clients.begin(), clients.end(),
                                     [](const auto& a, const auto& b) { return a.size() < b.size(); });
    if (largest->size() < 2) throw ConfigError("not enough samples to give every client at least one");
    target.push_back(largest->back());
    largest->pop_back();
  }
}

std::vector<std::vector<std::size_t>> partition_iid(const LabeledDataset& ds, const PartitionSpec& spec,
                                                    Rng& rng) {
  std::vector<std::size_t> perm(ds.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  const auto k = static_cast<std::size_t>(spec.num_clients);
  std::vector<std::vector<std::size_t>> clients(k);
  std::size_t pos = 0;
  for (std::size_t c = 0; c < k; ++c) {
    const std::size_t take = ds.size() / k + (c < ds.size() % k ? 1 : 0);
    clients[c].assign(perm.begin() + static_cast<std::ptrdiff_t>(pos),
                      perm.begin() + static_cast<std::ptrdiff_t>(pos + take));
    pos += take;
  }
  return clients;
}

std::vector<std::vector<std::size_t>> partition_dirichlet(const LabeledDataset& ds, const PartitionSpec& spec,
                                                          double beta, Rng& rng) {
  const auto k = static_cast<std::size_t>(spec.num_clients);
  std::vector<std::vector<std::size_t>> clients(k);
  std::gamma_distribution<double> gamma(beta, 1.0);
  for (auto& members : indices_by_class(ds)) {
    if (members.empty()) continue;
    std::shuffle(members.begin(), members.end(), rng);
    std::vector<double> props(k);
    double total = 0.0;
    for (double& p : props) total += (p = gamma(rng));
    if (!(total > 0.0)) {
      // All draws underflowed (tiny beta): the whole class goes to one client.
      std::fill(props.begin(), props.end(), 0.0);
      props[std::uniform_int_distribution<std::size_t>(0, k - 1)(rng)] = 1.0;
    }
    const auto counts = largest_remainder(props, static_cast<std::int64_t>(members.size()));
    std::size_t pos = 0;
    for (std::size_t c = 0; c < k; ++c) {
      for (std::int64_t j = 0; j < counts[c]; ++j) clients[c].push_back(members[pos++]);
    }
  }
  repair_empty_clients(clients);
  return clients;
}

std::vector<std::vector<std::size_t>> partition_shards(const LabeledDataset& ds, const PartitionSpec& spec,
                                                       int labels_per_client, Rng& rng) {
  const auto k = static_cast<std::size_t>(spec.num_clients);
  const auto q = static_cast<std::size_t>(labels_per_client);
  auto by_class = indices_by_class(ds);
  std::vector<std::size_t> present;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    if (!by_class[c].empty()) present.push_back(c);
  }
  if (q > present.size()) {
    throw ConfigError("NIID-2: " + std::to_string(q) + " labels per client but only " +
                      std::to_string(present.size()) + " classes present");
  }
  const std::size_t shards = q * k;
  if (shards < present.size()) {
    throw ConfigError("NIID-2: " + std::to_string(shards) + " shards cannot cover " +
                      std::to_string(present.size()) + " classes");
  }

  std::shuffle(present.begin(), present.end(), rng);
  // Shards per class, spread as evenly as possible. Each class ends up with
  // at most k shards, so stride-k dealing never hands a client the same class twice.
  std::vector<std::size_t> slots;
  for (std::size_t i = 0; i < present.size(); ++i) {
    const std::size_t count = shards / present.size() + (i < shards % present.size() ? 1 : 0);
    const std::size_t cls = present[i];
    if (by_class[cls].size() < count) {
      throw ConfigError("NIID-2: class " + std::to_string(cls) + " has " + std::to_string(by_class[cls].size()) +
                        " samples, fewer than its " + std::to_string(count) + " shards");
    }
    slots.insert(slots.end(), count, cls);
  }

  std::vector<std::size_t> next_shard(by_class.size(), 0);
  std::vector<std::size_t> shard_count(by_class.size(), 0);
  for (std::size_t cls : slots) ++shard_count[cls];
  for (auto& members : by_class) std::shuffle(members.begin(), members.end(), rng);

  std::vector<std::size_t> client_order(k);
  std::iota(client_order.begin(), client_order.end(), std::size_t{0});
  std::shuffle(client_order.begin(), client_order.end(), rng);

  std::vector<std::vector<std::size_t>> clients(k);
  for (std::size_t s = 0; s < slots.size(); ++s) {
    const std::size_t cls = slots[s];
    const auto& members = by_class[cls];
    const std::size_t j = next_shard[cls]++;
    const std::size_t m = shard_count[cls];
    const std::size_t begin = members.size() * j / m;
    const std::size_t end = members.size() * (j + 1) / m;
    auto& dst = clients[client_order[s % k]];
    dst.insert(dst.end(), members.begin() + static_cast<std::ptrdiff_t>(begin),
               members.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return clients;
}

}  // namespace

LabeledDataset LabeledDataset::subset(std::span<const std::size_t> indices) const {
  LabeledDataset out;
  out.num_classes = num_classes;
  out.features = indices.empty() ? Tensor({0, dim()}) : features.gather_rows(indices);
  out.labels.reserve(indices.size());
  for (std::size_t i : indices) out.labels.push_back(labels.at(i));
  return out;
}

LabeledDataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                        int num_classes) {
  const auto img = read_file(images_path);
  const auto lbl = read_file(labels_path);

  if (read_be32(img, 0, images_path) != kIdxImagesMagic) {
    throw FormatError(images_path.string() + ": bad magic number for IDX images");
  }
  if (read_be32(lbl, 0, labels_path) != kIdxLabelsMagic) {
    throw FormatError(labels_path.string() + ": bad magic number for IDX labels");
  }
  const std::size_t n = read_be32(img, 4, images_path);
  const std::size_t rows = read_be32(img, 8, images_path);
  const std::size_t cols = read_be32(img, 12, images_path);
  const std::size_t n_labels = read_be32(lbl, 4, labels_path);
  const std::size_t dim = rows * cols;
  if (img.size() != 16 + n * dim) {
    throw FormatError(images_path.string() + ": expected " + std::to_string(16 + n * dim) + " bytes, found " +
                      std::to_string(img.size()));
  }
  if (lbl.size() != 8 + n_labels) {
    throw FormatError(labels_path.string() + ": expected " + std::to_string(8 + n_labels) + " bytes, found " +
                      std::to_string(lbl.size()));
  }
  if (n != n_labels) {
    throw FormatError("IDX count mismatch: " + std::to_string(n) + " images vs " + std::to_string(n_labels) +
                      " labels");
  }

  LabeledDataset ds;
  ds.features = Tensor({n, dim});
  for (std::size_t i = 0; i < n * dim; ++i) ds.features[i] = static_cast<double>(img[16 + i]) / 255.0;
  ds.labels.resize(n);
  int max_label = -1;
  for (std::size_t i = 0; i < n; ++i) {
    ds.labels[i] = lbl[8 + i];
    max_label = std::max(max_label, ds.labels[i]);
  }
  if (num_classes > 0 && max_label >= num_classes) {
    throw FormatError(labels_path.string() + ": label " + std::to_string(max_label) + " exceeds class count");
  }
  ds.num_classes = num_classes > 0 ? num_classes : max_label + 1;
  return ds;
}

LabeledDataset synth_blobs(int num_classes, std::size_t per_class, std::size_t dim, double spread,
                           std::uint64_t seed) {
  if (num_classes <= 0 || per_class == 0 || dim == 0) throw InputError("synth_blobs: sizes must be positive");
  if (!(spread >= 0.0)) throw InputError("synth_blobs: spread must be non-negative");

  Rng center_rng(derive_seed(0x5EEDCE47E125ULL, {static_cast<std::uint64_t>(num_classes), dim}));
  std::uniform_real_distribution<double> center_dist(0.2, 0.8);
  Tensor centers({static_cast<std::size_t>(num_classes), dim});
  for (double& v : centers.data()) v = center_dist(center_rng);

  Rng rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  LabeledDataset ds;
  ds.num_classes = num_classes;
  ds.features = Tensor({static_cast<std::size_t>(num_classes) * per_class, dim});
  ds.labels.reserve(ds.features.rows());
  std::size_t r = 0;
  for (int c = 0; c < num_classes; ++c) {
    auto center = centers.row(static_cast<std::size_t>(c));
    for (std::size_t i = 0; i < per_class; ++i, ++r) {
      auto row = ds.features.row(r);
      for (std::size_t d = 0; d < dim; ++d) {
        const double v = spread == 0.0 ? center[d] : center[d] + spread * noise(rng);
        row[d] = std::clamp(v, 0.0, 1.0);
      }
      ds.labels.push_back(c);
    }
  }
  return ds;
}

std::vector<std::vector<std::size_t>> partition_indices(const LabeledDataset& ds, const PartitionSpec& spec) {
  if (ds.empty()) throw InputError("cannot partition an empty dataset");
  if (spec.num_clients < 1) throw ConfigError("num_clients must be at least 1");
  if (ds.size() < static_cast<std::size_t>(spec.num_clients)) {
    throw ConfigError("dataset has fewer samples than clients");
  }
  Rng rng(derive_seed(spec.seed, {stream::kPartition}));
  std::vector<std::vector<std::size_t>> clients;
  if (std::holds_alternative<Iid>(spec.kind)) {
    clients = partition_iid(ds, spec, rng);
  } else if (const auto* d = std::get_if<Niid1>(&spec.kind)) {
    if (!(d->beta > 0.0)) throw ConfigError("NIID-1 beta must be positive");
    clients = partition_dirichlet(ds, spec, d->beta, rng);
  } else {
    const int q = std::get<Niid2>(spec.kind).labels_per_client;
    if (q < 1 || q > ds.num_classes) throw ConfigError("NIID-2 labels_per_client must lie in [1, num_classes]");
    clients = partition_shards(ds, spec, q, rng);
  }
  for (auto& c : clients) std::sort(c.begin(), c.end());
  return clients;
}

std::vector<LabeledDataset> partition(const LabeledDataset& ds, const PartitionSpec& spec) {
  std::vector<LabeledDataset> out;
  for (const auto& idx : partition_indices(ds, spec)) out.push_back(ds.subset(idx));
  return out;
}

LabelHistogram label_histogram(const LabeledDataset& ds) {
  LabelHistogram counts(static_cast<std::size_t>(std::max(ds.num_classes, 0)), 0);
  for (int y : ds.labels) {
    if (y < 0 || y >= ds.num_classes) throw InputError("label " + std::to_string(y) + " out of range");
    ++counts[static_cast<std::size_t>(y)];
  }
  return counts;
}

LabelHistogram complementary_distribution(const LabelHistogram& d) {
  if (d.empty()) throw InputError("complementary_distribution of an empty histogram");
  const std::int64_t top = *std::max_element(d.begin(), d.end());
  LabelHistogram out(d.size());
  std::transform(d.begin(), d.end(), out.begin(), [top](std::int64_t v) { return top - v; });
  return out;
}

std::vector<std::int64_t> largest_remainder(std::span<const double> weights, std::int64_t total) {
  const double sum = std::accumulate(weights.begin(), weights.end(), 0.0);
  if (!(sum > 0.0)) throw InputError("largest_remainder needs positive total weight");
  std::vector<std::int64_t> counts(weights.size());
  std::vector<double> frac(weights.size());
  std::int64_t assigned = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double quota = static_cast<double>(total) * weights[i] / sum;
    counts[i] = static_cast<std::int64_t>(std::floor(quota));
    frac[i] = quota - static_cast<double>(counts[i]);
    assigned += counts[i];
  }
  std::vector<std::size_t> order(weights.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
  for (std::size_t i = 0; assigned < total; i = (i + 1) % order.size()) {
    ++counts[order[i]];
    ++assigned;
  }
  return counts;
}

std::vector<int> allocate_target_labels(const LabelStrategy& strategy, int num_classes, std::size_t n) {
  if (num_classes < 1) throw InputError("allocate_target_labels: num_classes must be positive");
  if (n == 0) throw InputError("allocate_target_labels: sample budget must be at least 1");
  const auto classes = static_cast<std::size_t>(num_classes);

  std::vector<std::int64_t> counts(classes);
  const auto* comp = std::get_if<ComplementaryLabels>(&strategy);
  const bool use_deficit =
      comp != nullptr && std::any_of(comp->deficit.begin(), comp->deficit.end(), [](auto v) { return v > 0; });
  if (use_deficit) {
    if (comp->deficit.size() != classes) throw ShapeError("deficit length does not match num_classes");
    std::vector<double> w(comp->deficit.begin(), comp->deficit.end());
    counts = largest_remainder(w, static_cast<std::int64_t>(n));
  } else {
    for (std::size_t c = 0; c < classes; ++c) counts[c] = static_cast<std::int64_t>(n / classes + (c < n % classes));
  }

  std::vector<int> labels;
  labels.reserve(n);
  for (std::size_t c = 0; c < classes; ++c) labels.insert(labels.end(), static_cast<std::size_t>(counts[c]), static_cast<int>(c));
  return labels;
}

}  // namespace fedcog::data
