#include "fedcog/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

#include "fedcog/rng.hpp"

namespace fedcog::nn {

namespace {

void compare(double analytic, double numeric, const GradCheckOptions& opt, GradCheckReport& rep) {
  const double abs_err = std::abs(analytic - numeric);
  const double denom = std::max(std::abs(analytic), std::abs(numeric));
  const double rel_err = denom > 0.0 ? abs_err / denom : 0.0;
  ++rep.checked;
  rep.max_abs_error = std::max(rep.max_abs_error, abs_err);
  if (abs_err <= opt.abs_floor) return;
  rep.max_rel_error = std::max(rep.max_rel_error, rel_err);
  if (rel_err >= opt.rel_tol) ++rep.failures;
}

Tensor random_probs(std::size_t n, std::size_t c, Rng& rng) {
  std::uniform_real_distribution<double> u(0.05, 1.0);
  Tensor p({n, c});
  for (std::size_t r = 0; r < n; ++r) {
    double s = 0.0;
    for (double& v : p.row(r)) s += (v = u(rng));
    for (double& v : p.row(r)) v /= s;
  }
  return p;
}

ModelParams perturbed(const ModelParams& m, Rng& rng, double sigma) {
  std::normal_distribution<double> nd(0.0, sigma);
  ModelParams out = m;
  for_each_tensor(out, [&](Tensor& t) {
    for (double& v : t.data()) v += nd(rng);
  });
  return out;
}

}  // namespace

void GradCheckReport::merge(const GradCheckReport& other) {
  checked += other.checked;
  failures += other.failures;
  max_rel_error = std::max(max_rel_error, other.max_rel_error);
  max_abs_error = std::max(max_abs_error, other.max_abs_error);
}

GradCheckReport check_gradients(const ModelParams& model, const Tensor& batch, const LossSpec& spec,
                                Wrt wrt, const GradCheckOptions& options) {
  const BackwardResult analytic = backward(model, batch, spec, wrt);
  GradCheckReport rep;
  const double h = options.step;

  if (wrt != Wrt::Inputs) {
    ModelParams probe = model;
    for (std::size_t l = 0; l < probe.layers.size(); ++l) {
      for (int which = 0; which < 2; ++which) {
        Tensor& t = which == 0 ? probe.layers[l].weight : probe.layers[l].bias;
        const Tensor& g = which == 0 ? analytic.grads.params.layers[l].weight
                                     : analytic.grads.params.layers[l].bias;
        for (std::size_t i = 0; i < t.size(); ++i) {
          const double saved = t[i];
          t[i] = saved + h;
          const double up = evaluate_loss(probe, batch, spec);
          t[i] = saved - h;
          const double down = evaluate_loss(probe, batch, spec);
          t[i] = saved;
          compare(g[i], (up - down) / (2.0 * h), options, rep);
        }
      }
    }
  }
  if (wrt != Wrt::Params) {
    Tensor probe = batch;
    const Tensor& g = *analytic.grads.inputs;
    for (std::size_t i = 0; i < probe.size(); ++i) {
      const double saved = probe[i];
      probe[i] = saved + h;
      const double up = evaluate_loss(model, probe, spec);
      probe[i] = saved - h;
      const double down = evaluate_loss(model, probe, spec);
      probe[i] = saved;
      compare(g[i], (up - down) / (2.0 * h), options, rep);
    }
  }
  return rep;
}

std::vector<GradCheckSuiteLine> run_gradcheck_suite(std::size_t num_models, std::uint64_t seed,
                                                    const GradCheckOptions& options) {
  const std::vector<std::string> names = {
      "cross_entropy",       "kl_to_teacher",         "js_disagreement",
      "l2_to_reference",     "ce+0.01*kd",            "0.6*ce+0.4*kd",
      "ce+0.1*js",           "ce+prox(mu=0.5)",       "ce+kd+js+prox",
  };
  std::map<std::string, GradCheckReport> reports;

  Rng rng(seed);
  std::uniform_int_distribution<int> depth_dist(1, 3);
  std::uniform_int_distribution<std::size_t> width_dist(2, 20);
  std::uniform_int_distribution<std::size_t> batch_dist(1, 6);
  std::normal_distribution<double> input_dist(0.0, 1.0);

  for (std::size_t m = 0; m < num_models; ++m) {
    const int depth = depth_dist(rng);
    std::vector<std::size_t> widths;
    for (int i = 0; i <= depth; ++i) widths.push_back(width_dist(rng));
    const ModelParams model = make_mlp(widths, rng());
    const ModelParams other = make_mlp(widths, rng());
    const ModelParams reference = perturbed(model, rng, 0.1);

    const std::size_t n = batch_dist(rng);
    Tensor batch({n, widths.front()});
    for (double& v : batch.data()) v = input_dist(rng);
    std::vector<int> labels(n);
    std::uniform_int_distribution<int> label_dist(0, static_cast<int>(widths.back()) - 1);
    for (int& y : labels) y = label_dist(rng);
    const Tensor teacher = random_probs(n, widths.back(), rng);

    std::vector<LossSpec> specs(names.size());
    specs[0].cross_entropy(labels);
    specs[1].kl_to_teacher(teacher);
    specs[2].js_disagreement(other);
    specs[3].l2_to_reference(reference, 0.5);
    specs[4].cross_entropy(labels).kl_to_teacher(teacher, 0.01);
    specs[5].cross_entropy(labels, 0.6).kl_to_teacher(teacher, 0.4);
    specs[6].cross_entropy(labels).js_disagreement(other, 0.1);
    specs[7].cross_entropy(labels).l2_to_reference(reference, 0.5);
    specs[8].cross_entropy(labels).kl_to_teacher(teacher, 0.3).js_disagreement(other, 0.2).l2_to_reference(
        reference, 0.05);

    for (std::size_t s = 0; s < specs.size(); ++s) {
      reports[names[s]].merge(check_gradients(model, batch, specs[s], Wrt::Both, options));
    }
  }

  std::vector<GradCheckSuiteLine> lines;
  for (const auto& name : names) lines.push_back({name, reports[name]});
  return lines;
}

}  // namespace fedcog::nn
