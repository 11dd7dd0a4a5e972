// Python bindings for the simulator core. The module exposes the main
// operations — experiment driver, dataset synthesis and partitioning, the
// stochastic quantizer, the pair-alignment loss, entropy gating math, and the
// transcript privacy auditor — mirroring the C++ surface one-to-one.

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <algorithm>
#include <cstring>
#include <string>
#include <vector>

#include "hsfl/coordination.hpp"
#include "hsfl/data.hpp"
#include "hsfl/quantize.hpp"
#include "hsfl/tape.hpp"
#include "hsfl/wire.hpp"

namespace py = pybind11;
using namespace hsfl;

namespace {

py::buffer_info tensor_buffer(Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape.begin(), t.shape.end());
  std::vector<py::ssize_t> strides(shape.size());
  py::ssize_t stride = static_cast<py::ssize_t>(sizeof(double));
  for (size_t i = shape.size(); i > 0; --i) {
    strides[i - 1] = stride;
    stride *= shape[i - 1];
  }
  return py::buffer_info(t.data.data(), sizeof(double), py::format_descriptor<double>::format(),
                         static_cast<py::ssize_t>(shape.size()), shape, strides);
}

// Loss value and input gradients of the pairwise alignment objective, for
// checking the server-side update from Python.
py::tuple csa_pair_loss_py(const Tensor& a, const Tensor& b, std::vector<uint8_t> same_class,
                           double margin) {
  Tape tape;
  const NodeId na = tape.input(a);
  const NodeId nb = tape.input(b);
  const NodeId loss = tape.csa_pair_loss(na, nb, std::move(same_class), margin);
  const Gradients grads = tape.backward(loss);
  return py::make_tuple(tape.value(loss).data[0], grads.or_zeros(na, a), grads.or_zeros(nb, b));
}

AuditReport audit_bytes(const py::bytes& raw) {
  std::string buf = raw;
  std::vector<uint8_t> transcript(buf.size());
  std::memcpy(transcript.data(), buf.data(), buf.size());
  return audit_privacy(transcript);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Deterministic desk-scale simulator of hybrid split-federated learning";
  m.attr("__version__") = "0.1.0";

  py::class_<Tensor>(m, "Tensor", py::buffer_protocol(),
                     "Dense row-major tensor of doubles (rank 1 or 2)")
      .def(py::init<>())
      .def_static("zeros", &Tensor::zeros, py::arg("shape"))
      .def_static("vec", &Tensor::vec, py::arg("values"))
      .def_static("matrix", &Tensor::matrix, py::arg("rows"), py::arg("cols"), py::arg("values"))
      .def_readwrite("shape", &Tensor::shape)
      .def_readwrite("data", &Tensor::data)
      .def_property_readonly("rank", &Tensor::rank)
      .def("rows", &Tensor::rows)
      .def("cols", &Tensor::cols)
      .def("at", [](const Tensor& t, int r, int c) { return t.at(r, c); }, py::arg("row"),
           py::arg("col"))
      .def("__len__", [](const Tensor& t) { return t.size(); })
      .def("__repr__", [](const Tensor& t) { return "Tensor(shape=" + t.shape_str() + ")"; })
      .def_buffer(&tensor_buffer);

  py::class_<Dataset>(m, "Dataset")
      .def_readonly("features", &Dataset::features)
      .def_readonly("labels", &Dataset::labels)
      .def_readonly("class_count", &Dataset::class_count)
      .def("__len__", &Dataset::size);

  py::class_<Shard>(m, "Shard")
      .def_readonly("owner", &Shard::owner)
      .def_readonly("indices", &Shard::indices)
      .def_readonly("weight", &Shard::weight)
      .def("__len__", [](const Shard& s) { return s.indices.size(); });

  py::class_<QuantizedTensor>(m, "QuantizedTensor")
      .def_readonly("shape", &QuantizedTensor::shape)
      .def_readonly("bits", &QuantizedTensor::bits)
      .def_readonly("lo", &QuantizedTensor::lo)
      .def_readonly("hi", &QuantizedTensor::hi)
      .def_readonly("codes", &QuantizedTensor::codes)
      .def("__len__", &QuantizedTensor::size);

  py::class_<RunConfig>(m, "RunConfig", "Full experiment configuration; defaults are the reference setup")
      .def(py::init<>())
      .def_readwrite("classes", &RunConfig::classes)
      .def_readwrite("dim", &RunConfig::dim)
      .def_readwrite("samples", &RunConfig::samples)
      .def_readwrite("concentration", &RunConfig::concentration)
      .def_readwrite("spread", &RunConfig::spread)
      .def_readwrite("depth", &RunConfig::depth)
      .def_readwrite("width", &RunConfig::width)
      .def_readwrite("exit_set", &RunConfig::exit_set)
      .def_readwrite("split_depths", &RunConfig::split_depths)
      .def_readwrite("clients", &RunConfig::clients)
      .def_readwrite("rounds", &RunConfig::rounds)
      .def_readwrite("local_steps", &RunConfig::local_steps)
      .def_readwrite("participation", &RunConfig::participation)
      .def_readwrite("gamma", &RunConfig::gamma)
      .def_readwrite("lambda_", &RunConfig::lambda)
      .def_readwrite("inner_lr", &RunConfig::inner_lr)
      .def_readwrite("outer_lr", &RunConfig::outer_lr)
      .def_readwrite("inner_steps", &RunConfig::inner_steps)
      .def_readwrite("batch_size", &RunConfig::batch_size)
      .def_readwrite("bits", &RunConfig::bits)
      .def_readwrite("margin", &RunConfig::margin)
      .def_readwrite("csa_weight", &RunConfig::csa_weight)
      .def_readwrite("csa_lr", &RunConfig::csa_lr)
      .def_readwrite("stochastic_depth", &RunConfig::stochastic_depth)
      .def_readwrite("entropy_threshold", &RunConfig::entropy_threshold)
      .def_readwrite("holdout_frac", &RunConfig::holdout_frac)
      .def_readwrite("personalize_steps", &RunConfig::personalize_steps)
      .def_readwrite("seed", &RunConfig::seed)
      .def_readwrite("workers", &RunConfig::workers)
      .def_readwrite("out_dir", &RunConfig::out_dir)
      .def_readwrite("record_transcript", &RunConfig::record_transcript)
      .def_readwrite("diagnostics", &RunConfig::diagnostics)
      .def_readwrite("export_data", &RunConfig::export_data)
      .def_readwrite("l_probe_pairs", &RunConfig::l_probe_pairs)
      .def_readwrite("noise_probes", &RunConfig::noise_probes)
      .def("validate", &RunConfig::validate,
           "Returns one problem description per violated invariant; empty means valid")
      .def("to_key_values", &RunConfig::to_key_values)
      .def("__repr__",
           [](const RunConfig& c) { return "RunConfig(\n" + c.to_key_values() + ")"; });

  py::class_<RoundMetrics>(m, "RoundMetrics")
      .def_readonly("round", &RoundMetrics::round)
      .def_readonly("objective", &RoundMetrics::objective)
      .def_readonly("grad_norm_sq", &RoundMetrics::grad_norm_sq)
      .def_readonly("loss_c", &RoundMetrics::loss_c)
      .def_readonly("loss_s", &RoundMetrics::loss_s)
      .def_readonly("loss_csa", &RoundMetrics::loss_csa)
      .def_readonly("bytes_up", &RoundMetrics::bytes_up)
      .def_readonly("bytes_down", &RoundMetrics::bytes_down)
      .def_readonly("local_exit_rate", &RoundMetrics::local_exit_rate)
      .def_readonly("wall_ms", &RoundMetrics::wall_ms);

  py::class_<ExperimentResult>(m, "ExperimentResult")
      .def_readonly("rounds", &ExperimentResult::rounds)
      .def_readonly("summary", &ExperimentResult::summary,
                    "Ordered key/value pairs, exactly what summary.txt contains")
      .def_readonly("metrics_path", &ExperimentResult::metrics_path)
      .def_readonly("summary_path", &ExperimentResult::summary_path)
      .def_readonly("checkpoint_path", &ExperimentResult::checkpoint_path)
      .def_readonly("transcript_path", &ExperimentResult::transcript_path);

  py::enum_<MsgKind>(m, "MsgKind")
      .value("FeaturePair", MsgKind::kFeaturePair)
      .value("TaskFeature", MsgKind::kTaskFeature)
      .value("TaskLogits", MsgKind::kTaskLogits)
      .value("UpstreamGrad", MsgKind::kUpstreamGrad)
      .value("CutGrad", MsgKind::kCutGrad)
      .value("ModelUpload", MsgKind::kModelUpload)
      .value("ModelDownload", MsgKind::kModelDownload)
      .value("InferenceFeature", MsgKind::kInferenceFeature)
      .value("InferenceLogits", MsgKind::kInferenceLogits);

  py::class_<AuditViolation>(m, "AuditViolation")
      .def_readonly("frame_index", &AuditViolation::frame_index)
      .def_readonly("offset", &AuditViolation::offset)
      .def_readonly("reason", &AuditViolation::reason);

  py::class_<AuditReport>(m, "AuditReport")
      .def_readonly("counts", &AuditReport::counts)
      .def_readonly("frames", &AuditReport::frames)
      .def_readonly("violations", &AuditReport::violations)
      .def_readonly("corrupt", &AuditReport::corrupt)
      .def_readonly("corrupt_offset", &AuditReport::corrupt_offset)
      .def_readonly("corrupt_reason", &AuditReport::corrupt_reason)
      .def("clean", &AuditReport::clean);

  m.def("gen_gaussian_mixture", &gen_gaussian_mixture, py::arg("class_count"), py::arg("dim"),
        py::arg("samples"), py::arg("spread"), py::arg("seed"),
        "Isotropic Gaussian mixture with +-unit-basis class means and balanced labels");
  m.def("dirichlet_partition", &dirichlet_partition, py::arg("dataset"), py::arg("clients"),
        py::arg("concentration"), py::arg("seed"),
        "Label-skew non-IID split with symmetric-Dirichlet per-class proportions");
  m.def(
      "quantize",
      [](const Tensor& z, int bits, uint64_t seed) {
        Rng rng(seed);
        return quantize(z, bits, rng);
      },
      py::arg("tensor"), py::arg("bits"), py::arg("seed"),
      "Unbiased stochastic uniform quantization on the tensor's [min, max] range");
  m.def("dequantize", &dequantize, py::arg("quantized"));
  m.def("softmax_entropy", &softmax_entropy, py::arg("logits"),
        "Shannon entropy (nats) of the softmax of a length-C logits vector");
  m.def("softmax_entropy_rows", &softmax_entropy_rows, py::arg("logits"));
  m.def("csa_pair_loss", &csa_pair_loss_py, py::arg("a"), py::arg("b"), py::arg("same_class"),
        py::arg("margin"),
        "Pairwise alignment loss and its gradients: (loss, grad_a, grad_b)");
  m.def("audit_privacy", &audit_bytes, py::arg("transcript"),
        "Scans raw transcript bytes; reports per-kind frame counts and schema violations");
  m.def("run_experiment", &run_experiment, py::arg("config"),
        py::call_guard<py::gil_scoped_release>(),
        "Runs the full pipeline and writes metrics/summary/checkpoint under config.out_dir");
}
