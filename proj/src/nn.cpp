#include "fedcog/nn.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>

#include "fedcog/error.hpp"
#include "fedcog/rng.hpp"

namespace fedcog::nn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using ConstVecMap = Eigen::Map<const Eigen::RowVectorXd>;
using VecMap = Eigen::Map<Eigen::RowVectorXd>;

ConstMatMap as_matrix(const Tensor& t) {
  return {t.raw(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}
MatMap as_matrix(Tensor& t) {
  return {t.raw(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}

// Post-activation outputs of every layer; the last entry holds the logits.
struct ForwardTrace {
  const Tensor* input = nullptr;
  std::vector<Tensor> outputs;

  const Tensor& logits() const { return outputs.back(); }
  const Tensor& layer_input(std::size_t l) const { return l == 0 ? *input : outputs[l - 1]; }
};

void require_batch(const ModelParams& model, const Tensor& batch) {
  if (model.layers.empty()) throw ShapeError("model has no layers");
  if (batch.rank() != 2) throw ShapeError("batch must be rank 2, got " + shape_string(batch.shape()));
  if (batch.cols() != model.input_dim()) {
    throw ShapeError("batch width " + std::to_string(batch.cols()) + " does not match model input " +
                     std::to_string(model.input_dim()));
  }
}

ForwardTrace forward_trace(const ModelParams& model, const Tensor& batch) {
  require_batch(model, batch);
  ForwardTrace trace;
  trace.input = &batch;
  trace.outputs.reserve(model.layers.size());
  const std::size_t n = batch.rows();
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const DenseLayer& layer = model.layers[l];
    const Tensor& in = trace.layer_input(l);
    Tensor out({n, layer.weight.rows()});
    if (n > 0) {
      auto z = as_matrix(out);
      z.noalias() = as_matrix(in) * as_matrix(layer.weight).transpose();
      z.rowwise() += ConstVecMap(layer.bias.raw(), static_cast<Eigen::Index>(layer.bias.size()));
      if (l + 1 < model.layers.size()) z = z.cwiseMax(0.0);
    }
    trace.outputs.push_back(std::move(out));
  }
  if (!trace.logits().all_finite()) throw NumericError("forward produced non-finite logits");
  return trace;
}

// Propagates dL/dlogits back through the network. Parameter gradients are
// written (not accumulated) when `param_grads` is set; input gradients are
// accumulated into `input_grads` when set.
void backprop(const ModelParams& model, const ForwardTrace& trace, Tensor dz,
              ModelParams* param_grads, Tensor* input_grads) {
  for (std::size_t l = model.layers.size(); l-- > 0;) {
    const DenseLayer& layer = model.layers[l];
    const Tensor& a_prev = trace.layer_input(l);
    auto dz_m = as_matrix(dz);
    if (param_grads != nullptr) {
      DenseLayer& g = param_grads->layers[l];
      as_matrix(g.weight).noalias() = dz_m.transpose() * as_matrix(a_prev);
      VecMap(g.bias.raw(), static_cast<Eigen::Index>(g.bias.size())) = dz_m.colwise().sum();
    }
    if (l == 0 && input_grads == nullptr) break;
    Tensor da({dz.rows(), layer.weight.cols()});
    as_matrix(da).noalias() = dz_m * as_matrix(layer.weight);
    if (l == 0) {
      as_matrix(*input_grads) += as_matrix(da);
      break;
    }
    const Tensor& act = trace.outputs[l - 1];
    for (std::size_t i = 0; i < da.size(); ++i) {
      if (act[i] <= 0.0) da[i] = 0.0;
    }
    dz = std::move(da);
  }
}

double safe_log_ratio(double a, double b) {
  return std::log(std::max(a, kLogEpsilon) / std::max(b, kLogEpsilon));
}

void require_probs_rows(const Tensor& p, const char* what) {
  if (p.rank() != 2) throw ShapeError(std::string(what) + ": expected rank-2 probabilities");
}

// d(row-sum of g . softmax)/dz for one softmax row a: a * (g - <a, g>).
void softmax_vjp_accumulate(std::span<const double> a, std::span<const double> g,
                            std::span<double> dz, double scale) {
  double dot = 0.0;
  for (std::size_t c = 0; c < a.size(); ++c) dot += a[c] * g[c];
  for (std::size_t c = 0; c < a.size(); ++c) dz[c] += scale * a[c] * (g[c] - dot);
}

void check_labels(std::span<const int> labels, std::size_t n, std::size_t classes) {
  if (labels.size() != n) {
    throw ShapeError("label count " + std::to_string(labels.size()) + " does not match batch " +
                     std::to_string(n));
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw InputError("label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
    }
  }
}

double l2_distance_sq(const ModelParams& a, const ModelParams& b) {
  double s = 0.0;
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    const auto& la = a.layers[l];
    const auto& lb = b.layers[l];
    for (std::size_t i = 0; i < la.weight.size(); ++i) {
      const double d = la.weight[i] - lb.weight[i];
      s += d * d;
    }
    for (std::size_t i = 0; i < la.bias.size(); ++i) {
      const double d = la.bias[i] - lb.bias[i];
      s += d * d;
    }
  }
  return s;
}

void validate_spec(const ModelParams& model, const Tensor& batch, const LossSpec& spec) {
  if (spec.terms.empty()) throw InputError("loss spec has no terms");
  require_batch(model, batch);
  const std::size_t n = batch.rows();
  const std::size_t c = model.output_dim();
  for (const LossTerm& term : spec.terms) {
    if (const auto* ce = std::get_if<CrossEntropyTerm>(&term.kind)) {
      check_labels(ce->labels, n, c);
    } else if (const auto* kl = std::get_if<KlToTeacherTerm>(&term.kind)) {
      const Tensor& t = kl->teacher_probs.get();
      if (t.rank() != 2 || t.rows() != n || t.cols() != c) {
        throw ShapeError("teacher probabilities " + shape_string(t.shape()) + " do not match output [" +
                         std::to_string(n) + "x" + std::to_string(c) + "]");
      }
    } else if (const auto* js = std::get_if<JsDisagreementTerm>(&term.kind)) {
      const ModelParams& other = js->other.get();
      if (other.input_dim() != model.input_dim() || other.output_dim() != c) {
        throw ShapeError("disagreement model does not match the trained model's input/output widths");
      }
    } else if (const auto* l2 = std::get_if<L2ToReferenceTerm>(&term.kind)) {
      require_congruent(model, l2->reference.get(), "l2_to_reference");
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------

std::size_t ModelParams::input_dim() const {
  return layers.empty() ? 0 : layers.front().weight.cols();
}

std::size_t ModelParams::output_dim() const {
  return layers.empty() ? 0 : layers.back().weight.rows();
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.weight.size() + l.bias.size();
  return n;
}

std::vector<std::size_t> default_topology(std::size_t input_dim, std::size_t num_classes) {
  return {input_dim, 120, 84, num_classes};
}

ModelParams make_mlp(std::span<const std::size_t> widths, std::uint64_t seed) {
  if (widths.size() < 2) throw ConfigError("an MLP needs at least input and output widths");
  for (std::size_t w : widths) {
    if (w == 0) throw ConfigError("layer widths must be positive");
  }
  Rng rng(seed);
  ModelParams model;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    const std::size_t in = widths[i];
    const std::size_t out = widths[i + 1];
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    DenseLayer layer{Tensor({out, in}), Tensor({out})};
    for (double& w : layer.weight.data()) w = dist(rng);
    for (double& b : layer.bias.data()) b = dist(rng);
    model.layers.push_back(std::move(layer));
  }
  return model;
}

ModelParams zeros_like(const ModelParams& model) {
  ModelParams z;
  z.layers.reserve(model.layers.size());
  for (const auto& l : model.layers) {
    z.layers.push_back({Tensor(l.weight.shape()), Tensor(l.bias.shape())});
  }
  return z;
}

void validate(const ModelParams& model) {
  if (model.layers.empty()) throw ShapeError("model has no layers");
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const auto& layer = model.layers[l];
    if (layer.weight.rank() != 2 || layer.bias.rank() != 1 || layer.bias.size() != layer.weight.rows()) {
      throw ShapeError("layer " + std::to_string(l) + " has inconsistent weight/bias shapes");
    }
    if (l > 0 && model.layers[l - 1].weight.rows() != layer.weight.cols()) {
      throw ShapeError("layer " + std::to_string(l) + " input width does not chain with previous output");
    }
  }
}

void require_congruent(const ModelParams& a, const ModelParams& b, const char* what) {
  bool ok = a.layers.size() == b.layers.size();
  for (std::size_t l = 0; ok && l < a.layers.size(); ++l) {
    ok = a.layers[l].weight.same_shape(b.layers[l].weight) && a.layers[l].bias.same_shape(b.layers[l].bias);
  }
  if (!ok) throw ShapeError(std::string(what) + ": parameter shapes are not congruent");
}

void for_each_tensor(ModelParams& m, const std::function<void(Tensor&)>& fn) {
  for (auto& l : m.layers) {
    fn(l.weight);
    fn(l.bias);
  }
}

void for_each_tensor(const ModelParams& m, const std::function<void(const Tensor&)>& fn) {
  for (const auto& l : m.layers) {
    fn(l.weight);
    fn(l.bias);
  }
}

void axpy(double alpha, const ModelParams& x, ModelParams& y) {
  require_congruent(x, y, "axpy");
  for (std::size_t l = 0; l < x.layers.size(); ++l) {
    auto& yl = y.layers[l];
    const auto& xl = x.layers[l];
    for (std::size_t i = 0; i < xl.weight.size(); ++i) yl.weight[i] += alpha * xl.weight[i];
    for (std::size_t i = 0; i < xl.bias.size(); ++i) yl.bias[i] += alpha * xl.bias[i];
  }
}

void scale(ModelParams& y, double alpha) {
  for_each_tensor(y, [alpha](Tensor& t) {
    for (double& v : t.data()) v *= alpha;
  });
}

ModelParams difference(const ModelParams& a, const ModelParams& b) {
  require_congruent(a, b, "difference");
  ModelParams d = a;
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    for (std::size_t i = 0; i < a.layers[l].weight.size(); ++i) d.layers[l].weight[i] -= b.layers[l].weight[i];
    for (std::size_t i = 0; i < a.layers[l].bias.size(); ++i) d.layers[l].bias[i] -= b.layers[l].bias[i];
  }
  return d;
}

double squared_norm(const ModelParams& m) {
  double s = 0.0;
  for_each_tensor(m, [&s](const Tensor& t) {
    for (double v : t.data()) s += v * v;
  });
  return s;
}

bool all_zero(const ModelParams& m) {
  bool zero = true;
  for_each_tensor(m, [&zero](const Tensor& t) {
    for (double v : t.data()) zero = zero && v == 0.0;
  });
  return zero;
}

bool all_finite(const ModelParams& m) {
  bool finite = true;
  for_each_tensor(m, [&finite](const Tensor& t) { finite = finite && t.all_finite(); });
  return finite;
}

// ---------------------------------------------------------------------------

Tensor forward(const ModelParams& model, const Tensor& batch) {
  return std::move(forward_trace(model, batch).outputs.back());
}

Tensor softmax(const Tensor& logits) {
  if (logits.rank() != 2) throw ShapeError("softmax expects [N x C] logits");
  if (!logits.all_finite()) throw InputError("softmax input contains non-finite values");
  Tensor out(logits.shape());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto z = logits.row(r);
    auto p = out.row(r);
    const double mx = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (std::size_t c = 0; c < z.size(); ++c) {
      p[c] = std::exp(z[c] - mx);
      sum += p[c];
    }
    for (double& v : p) v /= sum;
  }
  return out;
}

double cross_entropy(const Tensor& probs, std::span<const int> labels) {
  require_probs_rows(probs, "cross_entropy");
  check_labels(labels, probs.rows(), probs.cols());
  if (probs.rows() == 0) return 0.0;
  double s = 0.0;
  for (std::size_t r = 0; r < probs.rows(); ++r) {
    s -= std::log(std::max(probs(r, static_cast<std::size_t>(labels[r])), kLogEpsilon));
  }
  return s / static_cast<double>(probs.rows());
}

double kl_divergence(const Tensor& p, const Tensor& q) {
  require_probs_rows(p, "kl_divergence");
  require_same_shape(p, q, "kl_divergence");
  if (p.rows() == 0) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0) s += p[i] * safe_log_ratio(p[i], q[i]);
  }
  return s / static_cast<double>(p.rows());
}

double js_disagreement(const Tensor& p_global, const Tensor& p_local) {
  require_probs_rows(p_global, "js_disagreement");
  require_same_shape(p_global, p_local, "js_disagreement");
  if (p_global.rows() == 0) return 1.0;
  double s = 0.0;
  for (std::size_t i = 0; i < p_global.size(); ++i) {
    const double a = p_global[i];
    const double b = p_local[i];
    const double m = 0.5 * (a + b);
    if (a > 0.0) s += a * safe_log_ratio(a, m);
    if (b > 0.0) s += b * safe_log_ratio(b, m);
  }
  return 1.0 - 0.5 * s / static_cast<double>(p_global.rows());
}

// ---------------------------------------------------------------------------

LossSpec& LossSpec::cross_entropy(std::span<const int> labels, double weight) {
  terms.push_back({weight, CrossEntropyTerm{labels}});
  return *this;
}

LossSpec& LossSpec::kl_to_teacher(const Tensor& teacher_probs, double weight) {
  terms.push_back({weight, KlToTeacherTerm{std::cref(teacher_probs)}});
  return *this;
}

LossSpec& LossSpec::js_disagreement(const ModelParams& other, double weight) {
  terms.push_back({weight, JsDisagreementTerm{std::cref(other)}});
  return *this;
}

LossSpec& LossSpec::l2_to_reference(const ModelParams& reference, double mu, double weight) {
  terms.push_back({weight, L2ToReferenceTerm{std::cref(reference), mu}});
  return *this;
}

double evaluate_loss(const ModelParams& model, const Tensor& batch, const LossSpec& spec) {
  validate_spec(model, batch, spec);
  const Tensor probs = softmax(forward(model, batch));
  double loss = 0.0;
  for (const LossTerm& term : spec.terms) {
    double value = 0.0;
    if (const auto* ce = std::get_if<CrossEntropyTerm>(&term.kind)) {
      value = cross_entropy(probs, ce->labels);
    } else if (const auto* kl = std::get_if<KlToTeacherTerm>(&term.kind)) {
      value = kl_divergence(kl->teacher_probs.get(), probs);
    } else if (const auto* js = std::get_if<JsDisagreementTerm>(&term.kind)) {
      value = nn::js_disagreement(probs, softmax(forward(js->other.get(), batch)));
    } else if (const auto* l2 = std::get_if<L2ToReferenceTerm>(&term.kind)) {
      value = 0.5 * l2->mu * l2_distance_sq(model, l2->reference.get());
    }
    loss += term.weight * value;
  }
  return loss;
}

BackwardResult backward(const ModelParams& model, const Tensor& batch, const LossSpec& spec, Wrt wrt) {
  validate_spec(model, batch, spec);
  const bool want_params = wrt != Wrt::Inputs;
  const bool want_inputs = wrt != Wrt::Params;

  const ForwardTrace trace = forward_trace(model, batch);
  const Tensor probs = softmax(trace.logits());
  const std::size_t n = batch.rows();
  const std::size_t classes = model.output_dim();
  const double inv_n = n > 0 ? 1.0 / static_cast<double>(n) : 0.0;

  BackwardResult result;
  if (want_inputs) result.grads.inputs = Tensor(batch.shape());
  Tensor dz(probs.shape());

  for (const LossTerm& term : spec.terms) {
    const double w = term.weight;
    if (const auto* ce = std::get_if<CrossEntropyTerm>(&term.kind)) {
      result.loss += w * cross_entropy(probs, ce->labels);
      for (std::size_t r = 0; r < n; ++r) {
        auto p = probs.row(r);
        auto d = dz.row(r);
        for (std::size_t c = 0; c < classes; ++c) d[c] += w * inv_n * p[c];
        d[static_cast<std::size_t>(ce->labels[r])] -= w * inv_n;
      }
    } else if (const auto* kl = std::get_if<KlToTeacherTerm>(&term.kind)) {
      const Tensor& teacher = kl->teacher_probs.get();
      result.loss += w * kl_divergence(teacher, probs);
      for (std::size_t r = 0; r < n; ++r) {
        auto t = teacher.row(r);
        auto p = probs.row(r);
        auto d = dz.row(r);
        double mass = 0.0;
        for (double v : t) mass += v;
        for (std::size_t c = 0; c < classes; ++c) d[c] += w * inv_n * (mass * p[c] - t[c]);
      }
    } else if (const auto* js = std::get_if<JsDisagreementTerm>(&term.kind)) {
      const ModelParams& other = js->other.get();
      const ForwardTrace other_trace = forward_trace(other, batch);
      const Tensor q = softmax(other_trace.logits());
      result.loss += w * nn::js_disagreement(probs, q);
      // dL/da_c = -ln(a_c / m_c) / 2, and symmetrically for the frozen model.
      Tensor dz_other(q.shape());
      std::vector<double> ga(classes), gb(classes);
      for (std::size_t r = 0; r < n; ++r) {
        auto a = probs.row(r);
        auto b = q.row(r);
        for (std::size_t c = 0; c < classes; ++c) {
          const double m = 0.5 * (a[c] + b[c]);
          ga[c] = -0.5 * safe_log_ratio(a[c], m);
          gb[c] = -0.5 * safe_log_ratio(b[c], m);
        }
        softmax_vjp_accumulate(a, ga, dz.row(r), w * inv_n);
        softmax_vjp_accumulate(b, gb, dz_other.row(r), w * inv_n);
      }
      if (want_inputs) backprop(other, other_trace, std::move(dz_other), nullptr, &*result.grads.inputs);
    } else if (const auto* l2 = std::get_if<L2ToReferenceTerm>(&term.kind)) {
      result.loss += w * 0.5 * l2->mu * l2_distance_sq(model, l2->reference.get());
    }
  }

  if (want_params) result.grads.params = zeros_like(model);
  backprop(model, trace, std::move(dz), want_params ? &result.grads.params : nullptr,
           want_inputs ? &*result.grads.inputs : nullptr);

  if (want_params) {
    for (const LossTerm& term : spec.terms) {
      if (const auto* l2 = std::get_if<L2ToReferenceTerm>(&term.kind)) {
        axpy(term.weight * l2->mu, difference(model, l2->reference.get()), result.grads.params);
      }
    }
  }
  if (!std::isfinite(result.loss)) throw NumericError("backward produced a non-finite loss");
  return result;
}

// ---------------------------------------------------------------------------

void sgd_step(Tensor& x, const Tensor& grad, double lr) {
  if (!(lr >= 0.0)) throw InputError("learning rate must be non-negative");
  require_same_shape(x, grad, "sgd_step");
  for (std::size_t i = 0; i < x.size(); ++i) x[i] -= lr * grad[i];
}

void sgd_step(ModelParams& params, const ModelParams& grads, double lr) {
  if (!(lr >= 0.0)) throw InputError("learning rate must be non-negative");
  require_congruent(params, grads, "sgd_step");
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    sgd_step(params.layers[l].weight, grads.layers[l].weight, lr);
    sgd_step(params.layers[l].bias, grads.layers[l].bias, lr);
  }
}

}  // namespace fedcog::nn
