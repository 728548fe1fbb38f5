#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "kda/experiment.hpp"
#include "kda/pipeline.hpp"

namespace py = pybind11;
using namespace kda;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Tensor::Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  Array out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.data(), t.data() + t.size(), out.mutable_data());
  return out;
}

ImageTensor to_image(const Array& a) {
  if (a.ndim() != 3) throw std::invalid_argument("expected a C x H x W array");
  return ImageTensor(to_tensor(a));
}

std::vector<ImageTensor> to_images(const Array& batch) {
  if (batch.ndim() != 4) throw std::invalid_argument("expected an N x C x H x W array");
  const Tensor t = to_tensor(batch);
  const std::size_t n = t.dim(0), per = t.size() / std::max<std::size_t>(n, 1);
  std::vector<ImageTensor> out;
  for (std::size_t i = 0; i < n; ++i) {
    Tensor img({t.dim(1), t.dim(2), t.dim(3)},
               std::vector<double>(t.data() + i * per, t.data() + (i + 1) * per));
    out.emplace_back(std::move(img));
  }
  return out;
}

Subband subband_from(const std::string& s) {
  if (s.size() != 1) throw std::invalid_argument("sub-band is one of L, V, H, D");
  return parse_subband(s[0]);
}

}  // namespace

PYBIND11_MODULE(_kda, m) {
  m.doc() = "Bindings for the kda C++ library";

  py::register_exception<DataError>(m, "DataError", PyExc_IOError);
  py::register_exception<SpecError>(m, "SpecError", PyExc_ValueError);

  py::class_<SecretKey>(m, "SecretKey")
      .def_static("from_seed", &SecretKey::from_seed, py::arg("seed"))
      .def_static("generate", &SecretKey::generate)
      .def_static("load", &SecretKey::load, py::arg("path"))
      .def("save", &SecretKey::save, py::arg("path"))
      .def("fingerprint", &SecretKey::fingerprint)
      .def("__eq__", [](const SecretKey& a, const SecretKey& b) { return a == b; });

  m.def("dct2", [](const Array& plane) { return to_array(dct2(to_tensor(plane))); }, py::arg("plane"),
        "Orthonormal 2D DCT-II of an H x W array.");
  m.def("idct2", [](const Array& coeffs) { return to_array(idct2(to_tensor(coeffs))); }, py::arg("coeffs"));

  py::class_<SignFlipMask>(m, "SignFlipMask")
      .def_property_readonly("subband", [](const SignFlipMask& k) { return std::string(1, subband_tag(k.subband)); })
      .def_property_readonly("signs",
                             [](const SignFlipMask& k) {
                               py::array_t<std::int8_t> a({k.height, k.width});
                               std::copy(k.signs.begin(), k.signs.end(), a.mutable_data());
                               return a;
                             })
      .def("flipped_count", &SignFlipMask::flipped_count);

  m.def(
      "sign_flip_mask",
      [](const SecretKey& master, std::size_t channel, std::size_t classifier, const std::string& subband,
         std::size_t height, std::size_t width, double flip_fraction) {
        return make_sign_flip(ChannelKey(master, channel, classifier), subband_from(subband), height, width,
                              flip_fraction);
      },
      py::arg("master"), py::arg("channel"), py::arg("classifier"), py::arg("subband"), py::arg("height") = 32,
      py::arg("width") = 32, py::arg("flip_fraction") = 1.0);

  m.def("apply_pipeline", [](const Array& chw, const SignFlipMask& mask) {
    return to_array(apply_pipeline(to_tensor(chw), mask));
  }, py::arg("image"), py::arg("mask"));

  m.def(
      "median_outlier_filter",
      [](const Array& chw, double tau, bool enabled) {
        return to_array(median_outlier_filter(to_image(chw), PrefilterConfig{enabled, tau}).tensor());
      },
      py::arg("image"), py::arg("tau") = 0.25, py::arg("enabled") = true);

  m.def(
      "toy_dataset",
      [](std::uint64_t seed, std::size_t per_class, const std::string& split) {
        if (split != "train" && split != "test") throw std::invalid_argument("split is train or test");
        const Dataset d = make_toy_dataset(seed, per_class, split == "train" ? Split::kTrain : Split::kTest);
        return py::make_tuple(to_array(d.batch()), d.labels);
      },
      py::arg("seed"), py::arg("per_class"), py::arg("split") = "train",
      "Returns (images N x 3 x 32 x 32, labels).");

  py::class_<nn::Classifier>(m, "Classifier")
      .def_property_readonly("class_count", &nn::Classifier::class_count)
      .def("predict_proba", [](const nn::Classifier& c, const Array& batch) {
        return to_array(nn::softmax(c.forward(to_tensor(batch))));
      }, py::arg("images"));
  m.def("load_checkpoint", py::overload_cast<const std::filesystem::path&>(&nn::load_checkpoint), py::arg("path"));

  py::class_<KdaModel>(m, "KdaModel")
      .def_property_readonly("channel_count", [](const KdaModel& k) { return k.channels.size(); })
      .def_readonly("class_count", &KdaModel::class_count)
      .def_readonly("key_fingerprint", &KdaModel::key_fingerprint)
      .def("subset_for", &KdaModel::subset_for, py::arg("classifiers_per_channel"))
      .def("predict_proba", [](const KdaModel& k, const Array& batch) {
        return to_array(predict_probabilities(k, to_images(batch)));
      }, py::arg("images"));
  m.def("load_bundle", &load_bundle, py::arg("directory"), py::arg("master"));

  m.def(
      "run_experiment",
      [](const std::map<std::string, std::string>& config) {
        KeyValueFile kv;
        for (const auto& [k, v] : config) kv.set(k, v);
        const ExperimentSpec spec = ExperimentSpec::from_config(kv);
        ExperimentResult r;
        {
          py::gil_scoped_release release;
          r = run_experiment(spec);
        }
        py::list rows;
        for (const auto& row : r.rows) {
          py::dict d;
          d["attack"] = row.attack;
          d["config"] = row.config;
          d["error_percent"] = row.error_percent;
          d["n"] = row.n;
          d["seed"] = row.seed;
          rows.append(d);
        }
        return rows;
      },
      py::arg("config"), "Runs an experiment from key=value settings; returns the CSV rows as dicts.");
}
