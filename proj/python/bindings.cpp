#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "branchnet/evaluation.hpp"
#include "branchnet/experiment.hpp"
#include "branchnet/ops.hpp"
#include "branchnet/training.hpp"

namespace py = pybind11;
using namespace branchnet;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

// Model configs cross the boundary as JSON text; the Python wrapper dumps dicts.
BranchedNetConfig model_config(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  return model_from_json(j.contains("model") ? j.at("model") : j);
}

}  // namespace

PYBIND11_MODULE(_branchnet, m) {
  m.doc() = "Branched residual network ensembles: core numerics";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_IOError);

  m.def("smooth_labels", &smooth_labels, py::arg("label"), py::arg("num_classes"), py::arg("epsilon"));

  m.def(
      "lr_at_epoch",
      [](int epoch, double base_lr, double factor, int interval) {
        TrainConfig c;
        c.base_lr = base_lr;
        c.lr_decay_factor = factor;
        c.lr_decay_interval_epochs = interval;
        return lr_at_epoch(c, epoch);
      },
      py::arg("epoch"), py::arg("base_lr") = 0.05, py::arg("decay_factor") = 0.1, py::arg("decay_interval") = 30);

  m.def(
      "relative_improvement",
      [](const std::vector<double>& branch_errors, double ensemble_error) {
        return relative_improvement(branch_errors, ensemble_error);
      },
      py::arg("branch_errors"), py::arg("ensemble_error"));

  m.def(
      "top_k_error",
      [](const Array& probs, const std::vector<int>& labels, int k) { return top_k_error(to_tensor(probs), labels, k); },
      py::arg("probs"), py::arg("labels"), py::arg("k"));

  m.def(
      "ensemble_probs",
      [](const std::vector<Array>& branches) {
        std::vector<Tensor> t;
        for (const auto& b : branches) t.push_back(to_tensor(b));
        return to_array(ensemble_probs(t));
      },
      py::arg("branch_probs"));

  m.def("softmax", [](const Array& logits) { return to_array(softmax(to_tensor(logits))); }, py::arg("logits"));

  m.def(
      "conv2d",
      [](const Array& input, const Array& weight, std::optional<Array> bias, int stride, int padding) {
        NoGradGuard guard;
        std::optional<Tensor> b;
        if (bias) b = to_tensor(*bias);
        return to_array(conv2d(to_tensor(input), to_tensor(weight), b, stride, padding));
      },
      py::arg("input"), py::arg("weight"), py::arg("bias") = py::none(), py::arg("stride") = 1, py::arg("padding") = 0);

  m.def(
      "epoch_shuffle",
      [](std::int64_t n, std::uint64_t epoch, std::uint64_t seed) { return epoch_shuffle(n, epoch, seed); },
      py::arg("n"), py::arg("epoch"), py::arg("seed"));

  m.def(
      "block_topology",
      [](const std::string& config) {
        const auto t = block_topology(model_config(config));
        const auto l = layer_counts(model_config(config));
        py::dict d;
        d["shared_blocks"] = t.shared_blocks;
        d["per_branch_blocks"] = t.per_branch_blocks;
        d["total_blocks"] = t.total_blocks_materialized;
        d["conv_layers"] = l.conv_layers;
        d["weighted_layers"] = l.weighted_layers;
        return d;
      },
      py::arg("config_json"));

  m.def(
      "count_parameters",
      [](const std::string& config) {
        const auto p = count_parameters(model_config(config));
        py::dict d;
        d["stem"] = p.stem_params;
        d["shared"] = p.shared_params;
        d["per_branch"] = p.per_branch_params;
        d["head"] = p.head_params;
        d["total"] = p.total_params;
        d["independent_ensemble"] = p.equivalent_independent_ensemble_params;
        d["sharing_ratio"] = p.sharing_ratio;
        return d;
      },
      py::arg("config_json"));

  m.def(
      "generate_synthetic",
      [](int num_classes, int samples_per_class, int image_size, double noise_std, std::uint64_t seed,
         const std::string& split) {
        SyntheticSpec s;
        s.num_classes = num_classes;
        s.samples_per_class = samples_per_class;
        s.image_size = image_size;
        s.noise_std = noise_std;
        const Dataset ds = generate_synthetic(s, seed, split);
        py::array_t<std::uint8_t> images({static_cast<py::ssize_t>(ds.size()), static_cast<py::ssize_t>(image_size),
                                          static_cast<py::ssize_t>(image_size), py::ssize_t{3}});
        auto* out = images.mutable_data();
        for (const auto& img : ds.images) out = std::copy(img.pixels.begin(), img.pixels.end(), out);
        return py::make_tuple(images, ds.labels);
      },
      py::arg("num_classes") = 10, py::arg("samples_per_class") = 50, py::arg("image_size") = 32,
      py::arg("noise_std") = 8.0, py::arg("seed") = 0, py::arg("split") = "train");
}
