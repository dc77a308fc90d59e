#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <variant>
#include <vector>

#include "fedcog/tensor.hpp"

namespace fedcog::nn {

/// Clamp applied inside every logarithm.
inline constexpr double kLogEpsilon = 1e-12;

struct DenseLayer {
  Tensor weight;  // [out x in]
  Tensor bias;    // [out]

  friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

/// Parameters of a fully connected network. Hidden layers use ReLU, the
/// final layer emits raw logits.
struct ModelParams {
  std::vector<DenseLayer> layers;

  std::size_t input_dim() const;
  std::size_t output_dim() const;
  std::size_t parameter_count() const;

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

/// Layer widths of the default topology: 784 -> 120 -> 84 -> classes.
std::vector<std::size_t> default_topology(std::size_t input_dim, std::size_t num_classes);

/// Builds an MLP with uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases.
ModelParams make_mlp(std::span<const std::size_t> widths, std::uint64_t seed);

/// Same topology, every entry zero.
ModelParams zeros_like(const ModelParams& model);

/// Throws ShapeError unless adjacent layer widths chain.
void validate(const ModelParams& model);

void require_congruent(const ModelParams& a, const ModelParams& b, const char* what);

// Elementwise parameter arithmetic used by aggregation and control variates.
void axpy(double alpha, const ModelParams& x, ModelParams& y);  // y += alpha * x
void scale(ModelParams& y, double alpha);
ModelParams difference(const ModelParams& a, const ModelParams& b);  // a - b
double squared_norm(const ModelParams& m);
bool all_zero(const ModelParams& m);
bool all_finite(const ModelParams& m);

/// Visits each (weight, bias) tensor pair in layer order.
void for_each_tensor(ModelParams& m, const std::function<void(Tensor&)>& fn);
void for_each_tensor(const ModelParams& m, const std::function<void(const Tensor&)>& fn);

// ---------------------------------------------------------------------------
// Forward pass and probability-space losses.

/// Logits [N x C] for a batch [N x D].
Tensor forward(const ModelParams& model, const Tensor& batch);

/// Row-wise softmax with max subtraction.
Tensor softmax(const Tensor& logits);

/// Mean over rows of -ln(max(p[label], eps)).
double cross_entropy(const Tensor& probs, std::span<const int> labels);

/// Mean over rows of sum_c p_c ln(max(p_c, eps) / max(q_c, eps)).
double kl_divergence(const Tensor& p, const Tensor& q);

/// Disagreement loss 1 - (KL(p_g, m) + KL(p_l, m)) / 2 with m = (p_g + p_l) / 2,
/// averaged over rows. Lies in [1 - ln 2, 1]; equals 1 iff the rows agree.
double js_disagreement(const Tensor& p_global, const Tensor& p_local);

// ---------------------------------------------------------------------------
// Composite objectives and their analytic gradients.

struct CrossEntropyTerm {
  std::span<const int> labels;
};

/// KL(teacher || softmax(logits)). The teacher is a constant.
struct KlToTeacherTerm {
  std::reference_wrapper<const Tensor> teacher_probs;
};

/// js_disagreement(softmax(model), softmax(other)). `other` is frozen: it
/// contributes input gradients through its own forward pass but never
/// receives parameter gradients.
struct JsDisagreementTerm {
  std::reference_wrapper<const ModelParams> other;
};

/// (mu / 2) * ||theta - reference||^2.
struct L2ToReferenceTerm {
  std::reference_wrapper<const ModelParams> reference;
  double mu;
};

struct LossTerm {
  double weight;
  std::variant<CrossEntropyTerm, KlToTeacherTerm, JsDisagreementTerm, L2ToReferenceTerm> kind;
};

/// Weighted sum of loss terms evaluated on one batch.
struct LossSpec {
  std::vector<LossTerm> terms;

  LossSpec& cross_entropy(std::span<const int> labels, double weight = 1.0);
  LossSpec& kl_to_teacher(const Tensor& teacher_probs, double weight = 1.0);
  LossSpec& js_disagreement(const ModelParams& other, double weight = 1.0);
  LossSpec& l2_to_reference(const ModelParams& reference, double mu, double weight = 1.0);
};

enum class Wrt { Params, Inputs, Both };

struct Gradients {
  ModelParams params;           // empty layers when not requested
  std::optional<Tensor> inputs;
};

struct BackwardResult {
  double loss = 0.0;
  Gradients grads;
};

/// Loss value only (no gradient bookkeeping).
double evaluate_loss(const ModelParams& model, const Tensor& batch, const LossSpec& spec);

/// Loss value and analytic gradients with respect to parameters, inputs, or both.
BackwardResult backward(const ModelParams& model, const Tensor& batch, const LossSpec& spec,
                        Wrt wrt);

// ---------------------------------------------------------------------------
// Plain SGD, x <- x - lr * g.

void sgd_step(Tensor& x, const Tensor& grad, double lr);
void sgd_step(ModelParams& params, const ModelParams& grads, double lr);

}  // namespace fedcog::nn
