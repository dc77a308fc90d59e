// Python bindings. Arrays cross the boundary as float64 / int copies.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <optional>
#include <string>
#include <vector>

#include "fedcog/data.hpp"
#include "fedcog/error.hpp"
#include "fedcog/experiment.hpp"
#include "fedcog/fed.hpp"
#include "fedcog/generation.hpp"
#include "fedcog/gradcheck.hpp"
#include "fedcog/metrics.hpp"
#include "fedcog/nn.hpp"

namespace py = pybind11;
using namespace fedcog;

namespace {

using F64Array = py::array_t<double, py::array::c_style | py::array::forcecast>;
using I64Array = py::array_t<std::int64_t, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const F64Array& a) {
  if (a.ndim() == 1) return Tensor::vector(std::vector<double>(a.data(), a.data() + a.size()));
  if (a.ndim() != 2) throw ShapeError("expected a 1-d or 2-d array");
  return Tensor::matrix(static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)),
                        std::vector<double>(a.data(), a.data() + a.size()));
}

py::array_t<double> to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

std::vector<int> to_labels(const I64Array& a) {
  if (a.ndim() != 1) throw ShapeError("labels must be a 1-d array");
  return std::vector<int>(a.data(), a.data() + a.size());
}

py::array_t<std::int64_t> to_int_array(const std::vector<int>& v) {
  py::array_t<std::int64_t> out(static_cast<py::ssize_t>(v.size()));
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

data::LabeledDataset make_dataset(const F64Array& x, const I64Array& y, int num_classes) {
  data::LabeledDataset ds;
  ds.features = to_tensor(x);
  ds.labels = to_labels(y);
  if (ds.features.rows() != ds.labels.size()) throw ShapeError("features and labels differ in length");
  int max_label = -1;
  for (int l : ds.labels) max_label = std::max(max_label, l);
  ds.num_classes = num_classes > 0 ? num_classes : max_label + 1;
  return ds;
}

data::PartitionSpec partition_spec(const std::string& kind, int num_clients, double beta, int labels_per_client,
                                   std::uint64_t seed) {
  data::PartitionSpec spec;
  spec.num_clients = num_clients;
  spec.seed = seed;
  if (kind == "iid") {
    spec.kind = data::Iid{};
  } else if (kind == "niid1") {
    spec.kind = data::Niid1{beta};
  } else if (kind == "niid2") {
    spec.kind = data::Niid2{labels_per_client};
  } else {
    throw ConfigError("partition kind must be iid, niid1 or niid2");
  }
  return spec;
}

nn::Wrt parse_wrt(const std::string& s) {
  if (s == "params") return nn::Wrt::Params;
  if (s == "inputs") return nn::Wrt::Inputs;
  if (s == "both") return nn::Wrt::Both;
  throw ConfigError("wrt must be params, inputs or both");
}

std::vector<fed::ClientUpdate> make_updates(const std::vector<nn::ModelParams>& models,
                                            const std::vector<std::int64_t>& sizes, std::vector<int> ids) {
  if (models.size() != sizes.size()) throw ShapeError("one sample count per model is required");
  if (ids.empty()) {
    for (std::size_t k = 0; k < models.size(); ++k) ids.push_back(static_cast<int>(k));
  }
  if (ids.size() != models.size()) throw ShapeError("one client id per model is required");
  std::vector<fed::ClientUpdate> ups;
  for (std::size_t k = 0; k < models.size(); ++k) {
    fed::ClientUpdate u;
    u.client_id = ids[k];
    u.params = models[k];
    u.num_samples = sizes[k];
    ups.push_back(std::move(u));
  }
  return ups;
}

py::dict run_result_dict(const experiment::RunResult& r) {
  py::dict d;
  d["seed"] = r.seed;
  d["final_global_acc"] = r.summary.final_global_acc;
  d["best_global_acc"] = r.summary.best_global_acc;
  d["mean_last5_global_acc"] = r.summary.mean_last5_global_acc;
  d["final_mean_model_diff"] = r.summary.final_mean_model_diff;
  std::vector<double> acc;
  for (const auto& rec : r.rounds) acc.push_back(rec.global_acc);
  d["global_acc"] = acc;
  d["rounds_csv"] = experiment::rounds_csv(r);
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Deterministic federated-learning simulator with consensus-oriented generation";

  auto base = py::register_exception<Error>(m, "FedcogError", PyExc_RuntimeError);
  py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
  py::register_exception<InputError>(m, "InputError", base.ptr());
  py::register_exception<FormatError>(m, "FormatError", base.ptr());
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<ProtocolError>(m, "ProtocolError", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());

  py::class_<nn::ModelParams>(m, "Model")
      .def_static(
          "mlp",
          [](const std::vector<std::size_t>& widths, std::uint64_t seed) { return nn::make_mlp(widths, seed); },
          py::arg("widths"), py::arg("seed") = 0)
      .def_static(
          "from_layers",
          [](const std::vector<std::pair<F64Array, F64Array>>& layers) {
            nn::ModelParams model;
            for (const auto& [w, b] : layers) model.layers.push_back({to_tensor(w), to_tensor(b)});
            nn::validate(model);
            return model;
          },
          py::arg("layers"))
      .def_property_readonly("layers",
                             [](const nn::ModelParams& model) {
                               py::list out;
                               for (const auto& l : model.layers) out.append(py::make_tuple(to_array(l.weight), to_array(l.bias)));
                               return out;
                             })
      .def_property_readonly("input_dim", &nn::ModelParams::input_dim)
      .def_property_readonly("output_dim", &nn::ModelParams::output_dim)
      .def_property_readonly("parameter_count", &nn::ModelParams::parameter_count)
      .def("forward", [](const nn::ModelParams& model, const F64Array& x) { return to_array(nn::forward(model, to_tensor(x))); })
      .def("__eq__", [](const nn::ModelParams& a, const nn::ModelParams& b) { return a == b; })
      .def("__repr__", [](const nn::ModelParams& model) {
        std::string widths = std::to_string(model.input_dim());
        for (const auto& l : model.layers) widths += "-" + std::to_string(l.weight.rows());
        return "<Model " + widths + ">";
      });

  m.def("softmax", [](const F64Array& logits) { return to_array(nn::softmax(to_tensor(logits))); });
  m.def("cross_entropy",
        [](const F64Array& probs, const I64Array& labels) { return nn::cross_entropy(to_tensor(probs), to_labels(labels)); });
  m.def("kl_divergence", [](const F64Array& p, const F64Array& q) { return nn::kl_divergence(to_tensor(p), to_tensor(q)); });
  m.def("js_disagreement",
        [](const F64Array& pg, const F64Array& pl) { return nn::js_disagreement(to_tensor(pg), to_tensor(pl)); });
  m.def("model_difference", &metrics::model_difference);

  m.def(
      "backward",
      [](const nn::ModelParams& model, const F64Array& x, std::optional<I64Array> labels,
         std::optional<F64Array> teacher, std::optional<nn::ModelParams> other,
         std::optional<nn::ModelParams> reference, double ce_weight, double kd_weight, double js_weight, double mu,
         const std::string& wrt) {
        const Tensor batch = to_tensor(x);
        std::vector<int> y;
        Tensor t;
        nn::LossSpec spec;
        if (labels) spec.cross_entropy(y = to_labels(*labels), ce_weight);
        if (teacher) spec.kl_to_teacher(t = to_tensor(*teacher), kd_weight);
        if (other) spec.js_disagreement(*other, js_weight);
        if (reference) spec.l2_to_reference(*reference, mu);
        if (spec.terms.empty()) throw ConfigError("backward needs at least one loss term");
        const auto r = nn::backward(model, batch, spec, parse_wrt(wrt));
        py::object params = py::none();
        py::object inputs = py::none();
        if (!r.grads.params.layers.empty()) params = py::cast(r.grads.params);
        if (r.grads.inputs) inputs = to_array(*r.grads.inputs);
        return py::make_tuple(r.loss, params, inputs);
      },
      py::arg("model"), py::arg("x"), py::kw_only(), py::arg("labels") = py::none(), py::arg("teacher") = py::none(),
      py::arg("other") = py::none(), py::arg("reference") = py::none(), py::arg("ce_weight") = 1.0,
      py::arg("kd_weight") = 1.0, py::arg("js_weight") = 1.0, py::arg("mu") = 0.0, py::arg("wrt") = "params",
      "Loss and analytic gradients of a weighted objective. Returns (loss, param_grads, input_grads).");

  m.def(
      "gradcheck",
      [](std::size_t models, std::uint64_t seed) {
        py::list out;
        for (const auto& line : nn::run_gradcheck_suite(models, seed)) {
          py::dict d;
          d["composition"] = line.composition;
          d["passed"] = line.report.passed();
          d["checked"] = line.report.checked;
          d["max_abs_error"] = line.report.max_abs_error;
          out.append(d);
        }
        return out;
      },
      py::arg("models") = 20, py::arg("seed") = 0);

  m.def(
      "synth_blobs",
      [](int classes, std::size_t per_class, std::size_t dim, double spread, std::uint64_t seed) {
        const auto ds = data::synth_blobs(classes, per_class, dim, spread, seed);
        return py::make_tuple(to_array(ds.features), to_int_array(ds.labels));
      },
      py::arg("classes"), py::arg("per_class"), py::arg("dim"), py::arg("spread") = 0.5, py::arg("seed") = 0);

  m.def(
      "partition",
      [](const I64Array& labels, int num_clients, const std::string& kind, double beta, int labels_per_client,
         std::uint64_t seed, int num_classes) {
        data::LabeledDataset ds;
        ds.labels = to_labels(labels);
        ds.features = Tensor({ds.labels.size(), 1});
        int max_label = -1;
        for (int l : ds.labels) max_label = std::max(max_label, l);
        ds.num_classes = num_classes > 0 ? num_classes : max_label + 1;
        py::list out;
        for (const auto& idx : data::partition_indices(ds, partition_spec(kind, num_clients, beta, labels_per_client, seed))) {
          py::array_t<std::int64_t> a(static_cast<py::ssize_t>(idx.size()));
          std::copy(idx.begin(), idx.end(), a.mutable_data());
          out.append(a);
        }
        return out;
      },
      py::arg("labels"), py::arg("num_clients"), py::arg("kind") = "niid1", py::arg("beta") = 0.1,
      py::arg("labels_per_client") = 2, py::arg("seed") = 0, py::arg("num_classes") = 0,
      "Client index arrays for a label vector.");

  m.def("complementary_distribution", &data::complementary_distribution, py::arg("histogram"));

  m.def(
      "generate",
      [](const nn::ModelParams& global, const nn::ModelParams& local, const data::LabelHistogram& histogram,
         std::size_t num_samples, int steps, double lr, double lambda_dis, const std::string& labels,
         std::uint64_t seed) {
        gen::GenConfig cfg;
        cfg.num_samples = num_samples;
        cfg.steps = steps;
        cfg.lr = lr;
        cfg.lambda_dis = lambda_dis;
        if (labels == "uniform") {
          cfg.labels = gen::LabelMode::Uniform;
        } else if (labels == "complementary") {
          cfg.labels = gen::LabelMode::Complementary;
        } else {
          throw ConfigError("labels must be uniform or complementary");
        }
        const auto g = gen::generate(global, local, histogram, cfg, seed);
        py::dict d;
        d["inputs"] = to_array(g.inputs);
        d["targets"] = to_int_array(g.targets);
        d["teacher_probs"] = to_array(g.teacher_probs);
        d["initial_loss"] = g.stats.initial_loss;
        d["final_loss"] = g.stats.final_loss;
        d["mean_target_probability"] = gen::mean_target_probability(global, g);
        return d;
      },
      py::arg("global_model"), py::arg("local_model"), py::arg("histogram"), py::arg("num_samples") = 256,
      py::arg("steps") = 100, py::arg("lr") = 0.1, py::arg("lambda_dis") = 0.1, py::arg("labels") = "uniform",
      py::arg("seed") = 0);

  m.def(
      "aggregate",
      [](const std::vector<nn::ModelParams>& models, const std::vector<std::int64_t>& sizes) {
        return fed::aggregate(make_updates(models, sizes, {}));
      },
      py::arg("models"), py::arg("sizes"));

  m.def(
      "secure_aggregate",
      [](const std::vector<nn::ModelParams>& models, const std::vector<std::int64_t>& sizes, std::vector<int> ids,
         std::uint64_t round_seed, double mask_range) {
        const auto ups = make_updates(models, sizes, std::move(ids));
        const auto masked = fed::secagg_mask(ups, fed::aggregation_weights(ups), round_seed, {mask_range});
        std::vector<int> roster;
        for (const auto& u : ups) roster.push_back(u.client_id);
        fed::SecAggServer server(roster);
        for (const auto& mu : masked.masked) server.receive(mu);
        return server.finalize();
      },
      py::arg("models"), py::arg("sizes"), py::arg("ids") = std::vector<int>{}, py::arg("round_seed") = 0,
      py::arg("mask_range") = 1.0, "Size-weighted mean computed through pairwise-masked contributions.");

  m.def(
      "evaluate_accuracy",
      [](const nn::ModelParams& model, const F64Array& x, const I64Array& y) {
        return metrics::evaluate_accuracy(model, make_dataset(x, y, static_cast<int>(model.output_dim())));
      },
      py::arg("model"), py::arg("x"), py::arg("y"));

  m.def(
      "theorem_bound",
      [](double phi0_minus_inf, double L, double sigma, double kappa, double beta_sq, int tau, double eta, int T,
         std::vector<double> p) {
        metrics::TheoremInputs in{phi0_minus_inf, L, sigma, kappa, beta_sq, tau, eta, T, std::move(p)};
        const auto t = metrics::theorem_terms(in);
        py::dict d;
        d["optimization"] = t.optimization;
        d["noise"] = t.noise;
        d["local_noise"] = t.local_noise;
        d["heterogeneity"] = t.heterogeneity;
        d["total"] = t.total();
        return d;
      },
      py::arg("phi0_minus_inf"), py::arg("L"), py::arg("sigma"), py::arg("kappa"), py::arg("beta_sq") = 1.0,
      py::arg("tau") = 1, py::arg("eta") = 0.01, py::arg("T") = 1, py::arg("p") = std::vector<double>{1.0});

  m.def(
      "run_experiment",
      [](const std::string& config_text, const std::string& output_dir) {
        const auto cfg = experiment::parse_config_text(config_text);
        experiment::ExperimentResult res;
        {
          py::gil_scoped_release release;
          res = experiment::run_experiment(cfg, output_dir);
        }
        py::dict d;
        py::list runs;
        for (const auto& r : res.runs) runs.append(run_result_dict(r));
        d["runs"] = runs;
        d["mean_final_acc"] = res.mean_final_acc;
        d["stddev_final_acc"] = res.stddev_final_acc;
        d["summary"] = experiment::format_mean_std(res.mean_final_acc, res.stddev_final_acc);
        return d;
      },
      py::arg("config_text"), py::arg("output_dir") = "",
      "Runs every seed of an INI configuration. Results are written only when output_dir is given.");

  m.def(
      "normalize_config", [](const std::string& text) { return experiment::write_config(experiment::parse_config_text(text)); },
      py::arg("config_text"), "Parses and re-serializes a configuration with every field spelled out.");
}
