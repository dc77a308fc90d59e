#include "fedcog/localtrain.hpp"

#include <algorithm>
#include <numeric>
#include <optional>
#include <string>
#include <tuple>

#include "fedcog/error.hpp"

namespace fedcog::train {

namespace {

struct StepOutcome {
  double loss;
  nn::ModelParams grads;
};

template <typename StepFn>
LocalResult run_local_sgd(const nn::ModelParams& theta_global, const data::LabeledDataset& local,
                          const LocalRunConfig& cfg, std::uint64_t seed, StepFn&& step) {
  cfg.validate();
  if (local.empty()) throw InputError("local dataset is empty");
  if (local.dim() != theta_global.input_dim()) throw ShapeError("local data width does not match the model");

  LocalResult out{theta_global, 0.0};
  MiniBatcher batcher(local.size(), cfg.batch_size, derive_seed(seed, {stream::kRealBatches}));
  std::vector<int> labels;
  double total = 0.0;
  for (int r = 0; r < cfg.tau; ++r) {
    const auto idx = batcher.next();
    const Tensor x = local.features.gather_rows(idx);
    labels.resize(idx.size());
    std::transform(idx.begin(), idx.end(), labels.begin(), [&](std::size_t i) { return local.labels[i]; });
    StepOutcome s = step(out.params, x, std::span<const int>(labels));
    nn::sgd_step(out.params, s.grads, cfg.lr);
    total += s.loss;
  }
  if (cfg.tau > 0) out.mean_loss = total / cfg.tau;
  if (!nn::all_finite(out.params)) throw NumericError("local training diverged (non-finite parameters)");
  return out;
}

}  // namespace

const char* trainer_name(const TrainerKind& kind) {
  struct Visitor {
    const char* operator()(const FedAvg&) const { return "fedavg"; }
    const char* operator()(const FedProx&) const { return "fedprox"; }
    const char* operator()(const Scaffold&) const { return "scaffold"; }
    const char* operator()(const FedCog&) const { return "fedcog"; }
  };
  return std::visit(Visitor{}, kind);
}

void LocalRunConfig::validate() const {
  if (tau < 0) throw ConfigError("tau must be non-negative");
  if (!(lr >= 0.0)) throw ConfigError("local lr must be non-negative");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
}

MiniBatcher::MiniBatcher(std::size_t n, std::size_t batch_size, std::uint64_t seed)
    : order_(n), batch_size_(std::min(batch_size, n)), rng_(seed) {
  if (n == 0) throw InputError("MiniBatcher over an empty dataset");
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  reshuffle();
}

void MiniBatcher::reshuffle() {
  std::shuffle(order_.begin(), order_.end(), rng_);
  cursor_ = 0;
}

std::span<const std::size_t> MiniBatcher::next() {
  if (cursor_ + batch_size_ > order_.size()) reshuffle();
  std::span<const std::size_t> out(order_.data() + cursor_, batch_size_);
  cursor_ += batch_size_;
  return out;
}

LocalResult local_train_fedavg(const nn::ModelParams& theta_global, const data::LabeledDataset& local,
                               const LocalRunConfig& cfg, std::uint64_t seed) {
  return run_local_sgd(theta_global, local, cfg, seed,
                       [](const nn::ModelParams& theta, const Tensor& x, std::span<const int> y) {
                         nn::LossSpec spec;
                         spec.cross_entropy(y);
                         auto r = nn::backward(theta, x, spec, nn::Wrt::Params);
                         return StepOutcome{r.loss, std::move(r.grads.params)};
                       });
}

LocalResult local_train_fedprox(const nn::ModelParams& theta_global, const data::LabeledDataset& local,
                                const LocalRunConfig& cfg, double mu, std::uint64_t seed) {
  if (!(mu >= 0.0)) throw ConfigError("FedProx mu must be non-negative");
  return run_local_sgd(theta_global, local, cfg, seed,
                       [&](const nn::ModelParams& theta, const Tensor& x, std::span<const int> y) {
                         nn::LossSpec spec;
                         spec.cross_entropy(y).l2_to_reference(theta_global, mu);
                         auto r = nn::backward(theta, x, spec, nn::Wrt::Params);
                         return StepOutcome{r.loss, std::move(r.grads.params)};
                       });
}

ScaffoldResult local_train_scaffold(const nn::ModelParams& theta_global, const data::LabeledDataset& local,
                                    const LocalRunConfig& cfg, const nn::ModelParams& c_global,
                                    const nn::ModelParams& c_local, std::uint64_t seed) {
  nn::require_congruent(theta_global, c_global, "scaffold global control variate");
  nn::require_congruent(theta_global, c_local, "scaffold local control variate");
  const nn::ModelParams correction = nn::difference(c_global, c_local);

  ScaffoldResult out;
  out.local = run_local_sgd(theta_global, local, cfg, seed,
                            [&](const nn::ModelParams& theta, const Tensor& x, std::span<const int> y) {
                              nn::LossSpec spec;
                              spec.cross_entropy(y);
                              auto r = nn::backward(theta, x, spec, nn::Wrt::Params);
                              nn::axpy(1.0, correction, r.grads.params);
                              return StepOutcome{r.loss, std::move(r.grads.params)};
                            });

  out.new_control = scaffold_control_update(c_local, c_global, theta_global, out.local.params, cfg.tau, cfg.lr);
  out.delta_control = nn::difference(out.new_control, c_local);
  return out;
}

nn::ModelParams scaffold_control_update(const nn::ModelParams& c_local, const nn::ModelParams& c_global,
                                        const nn::ModelParams& theta_global, const nn::ModelParams& theta_final,
                                        int tau, double lr) {
  // No steps taken: the update would divide by zero, keep the variate.
  if (tau == 0 || lr == 0.0) return c_local;
  nn::ModelParams c = nn::difference(c_local, c_global);
  nn::axpy(1.0 / (tau * lr), nn::difference(theta_global, theta_final), c);
  return c;
}

double kd_loss(const Tensor& teacher_probs, const Tensor& student_logits) {
  require_same_shape(teacher_probs, student_logits, "kd_loss");
  return nn::kl_divergence(teacher_probs, nn::softmax(student_logits));
}

std::pair<double, double> adaptive_kd_coefficients(std::int64_t n_real, std::int64_t n_gen) {
  if (n_real < 0 || n_gen < 0) throw ConfigError("sample counts must be non-negative");
  if (n_real + n_gen == 0) throw ConfigError("adaptive KD coefficients need at least one sample");
  const double total = static_cast<double>(n_real + n_gen);
  return {static_cast<double>(n_real) / total, static_cast<double>(n_gen) / total};
}

LocalResult local_train_fedcog(const nn::ModelParams& theta_global, const data::LabeledDataset& local,
                               const gen::GeneratedDataset& generated, const LocalRunConfig& cfg,
                               const FedCog& options, std::uint64_t seed) {
  if (!(options.lambda_kd >= 0.0)) throw ConfigError("lambda_kd must be non-negative");

  double w_task = 1.0;
  double w_kd = options.lambda_kd;
  if (options.adaptive_weights) {
    const auto hist = data::label_histogram(local);
    const auto deficit = data::complementary_distribution(hist);
    const std::int64_t n_gen = std::accumulate(deficit.begin(), deficit.end(), std::int64_t{0});
    std::tie(w_task, w_kd) = adaptive_kd_coefficients(static_cast<std::int64_t>(local.size()), n_gen);
  }
  const bool use_kd = w_kd > 0.0;
  if (use_kd && generated.empty()) throw InputError("FedCOG training with KD needs generated data");
  if (use_kd && generated.inputs.cols() != theta_global.input_dim()) {
    throw ShapeError("generated inputs do not match the model's input width");
  }

  std::optional<MiniBatcher> gen_batcher;
  if (use_kd) gen_batcher.emplace(generated.size(), cfg.batch_size, derive_seed(seed, {stream::kGenBatches}));

  return run_local_sgd(theta_global, local, cfg, seed,
                       [&](const nn::ModelParams& theta, const Tensor& x, std::span<const int> y) {
                         nn::LossSpec task;
                         task.cross_entropy(y, w_task);
                         auto r = nn::backward(theta, x, task, nn::Wrt::Params);
                         if (use_kd) {
                           const auto idx = gen_batcher->next();
                           const Tensor xg = generated.inputs.gather_rows(idx);
                           const Tensor teacher = generated.teacher_probs.gather_rows(idx);
                           nn::LossSpec kd;
                           kd.kl_to_teacher(teacher, w_kd);
                           const auto rk = nn::backward(theta, xg, kd, nn::Wrt::Params);
                           nn::axpy(1.0, rk.grads.params, r.grads.params);
                           r.loss += rk.loss;
                         }
                         return StepOutcome{r.loss, std::move(r.grads.params)};
                       });
}

}  // namespace fedcog::train
