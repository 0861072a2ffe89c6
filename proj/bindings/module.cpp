// Python bindings for the distillation laboratory. The surface mirrors the
// CLI verbs: generate data, train the teacher, freeze representations, train
// experts, select an initialization, distill, pre-train on the result, and
// probe — plus the loss/variance primitives those pipelines are built from.
// Matrices cross the boundary as numpy float64 arrays (copied, never
// aliased); everything else is plain Python scalars and lists.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "mkdt/datagen.hpp"
#include "mkdt/distill.hpp"
#include "mkdt/eval.hpp"
#include "mkdt/losses.hpp"
#include "mkdt/models.hpp"
#include "mkdt/trajectories.hpp"
#include "mkdt/variance_lab.hpp"

namespace py = pybind11;
using namespace mkdt;

namespace {

using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const DoubleArray& array) {
  Shape shape(static_cast<std::size_t>(array.ndim()));
  for (py::ssize_t i = 0; i < array.ndim(); ++i)
    shape[static_cast<std::size_t>(i)] = static_cast<std::size_t>(array.shape(i));
  std::vector<double> data(array.data(), array.data() + array.size());
  return Tensor(std::move(shape), std::move(data));
}

py::array_t<double> to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape.begin(), t.shape.end());
  py::array_t<double> array(shape);
  std::copy(t.data.begin(), t.data.end(), array.mutable_data());
  return array;
}

LossKind parse_kind(const std::string& name) {
  if (name == "sl" || name == "supervised") return LossKind::kSupervised;
  if (name == "ssl" || name == "self-supervised") return LossKind::kSelfSupervised;
  if (name == "kd" || name == "distillation") return LossKind::kKnowledgeDistillation;
  throw std::invalid_argument("unknown loss kind '" + name + "' (use sl, ssl or kd)");
}

DistillConfig make_distill_config(std::size_t steps, std::size_t inner_steps,
                                  std::size_t expert_epochs, std::size_t max_start_epoch,
                                  double pixel_lr, double alpha_lr, double alpha_init,
                                  std::size_t batch_size, std::size_t ssl_views,
                                  double ssl_sigma_aug, double outer_momentum,
                                  std::uint64_t seed) {
  DistillConfig cfg;
  cfg.steps = steps;
  cfg.inner_steps = inner_steps;
  cfg.expert_epochs = expert_epochs;
  cfg.max_start_epoch = max_start_epoch;
  cfg.pixel_lr = pixel_lr;
  cfg.alpha_lr = alpha_lr;
  cfg.alpha_init = alpha_init;
  cfg.batch_size = batch_size;
  cfg.ssl_views = ssl_views;
  cfg.ssl_sigma_aug = ssl_sigma_aug;
  cfg.outer_momentum = outer_momentum;
  cfg.seed = seed;
  return cfg;
}

}  // namespace

PYBIND11_MODULE(_mkdtlab, m) {
  m.doc() = "Desk-scale laboratory for dataset distillation on self-supervised teachers";

  // -------------------------------------------------------------------------
  // Data.
  // -------------------------------------------------------------------------

  py::class_<LabeledDataset>(m, "Dataset")
      .def_property_readonly("inputs", [](const LabeledDataset& d) { return to_array(d.inputs); })
      .def_property_readonly("labels", [](const LabeledDataset& d) { return d.labels; })
      .def_property_readonly("n", &LabeledDataset::size)
      .def_property_readonly("dim", &LabeledDataset::dim)
      .def("save", [](const LabeledDataset& d, const std::string& path) { save_dataset(path, d); },
           py::arg("path"))
      .def_static("load", [](const std::string& path) { return load_dataset(path); },
                  py::arg("path"))
      .def("__repr__", [](const LabeledDataset& d) {
        return "Dataset(n=" + std::to_string(d.size()) + ", dim=" + std::to_string(d.dim()) + ")";
      });

  m.def(
      "generate_data",
      [](std::size_t d, std::size_t num_classes, std::size_t n, double sigma_noise,
         std::uint64_t seed) {
        SparseCodingConfig cfg;
        cfg.d = d;
        cfg.num_classes = num_classes;
        cfg.n = n;
        cfg.sigma_noise = sigma_noise;
        cfg.seed = seed;
        return generate_sparse_coding(cfg);
      },
      py::arg("d"), py::arg("num_classes"), py::arg("n"), py::arg("sigma_noise") = 0.1,
      py::arg("seed") = 0,
      "Class-major sparse-coding dataset: example of class k is e_k plus noise");

  // -------------------------------------------------------------------------
  // Encoders.
  // -------------------------------------------------------------------------

  py::class_<Encoder>(m, "Encoder")
      .def_property_readonly("in_dim", [](const Encoder& e) { return e.spec.in_dim(); })
      .def_property_readonly("out_dim", [](const Encoder& e) { return e.spec.out_dim(); })
      .def_property_readonly("parameter_count", &Encoder::parameter_count)
      .def(
          "encode",
          [](const Encoder& e, const DoubleArray& batch) {
            return to_array(forward(e, to_tensor(batch)));
          },
          py::arg("batch"), "Representations for a batch (rows are examples)")
      .def("save", [](const Encoder& e, const std::string& path) { save_encoder(path, e); },
           py::arg("path"))
      .def_static("load", [](const std::string& path) { return load_encoder(path); },
                  py::arg("path"));

  m.def(
      "init_student",
      [](std::size_t d_in, std::size_t r, std::uint64_t seed) {
        return init_encoder(student_spec(d_in, r), InitScheme::kFanIn, seed);
      },
      py::arg("d_in"), py::arg("r"), py::arg("seed") = 0,
      "Freshly initialized narrow student encoder");

  m.def(
      "train_teacher",
      [](const LabeledDataset& dataset, std::size_t r, std::size_t epochs,
         std::size_t batch_size, double lr, double lambda_offdiag, double sigma_aug,
         std::uint64_t seed) {
        SslTrainConfig cfg;
        cfg.epochs = epochs;
        cfg.batch_size = batch_size;
        cfg.lr = lr;
        cfg.lambda = lambda_offdiag;
        cfg.sigma_aug = sigma_aug;
        TeacherRun run = train_teacher_ssl(dataset, teacher_spec(dataset.dim(), r), cfg, seed);
        return py::make_tuple(run.encoder, run.loss_log);
      },
      py::arg("dataset"), py::arg("r"), py::arg("epochs") = 10, py::arg("batch_size") = 16,
      py::arg("lr") = 0.05, py::arg("lambda_offdiag") = 5e-3, py::arg("sigma_aug") = 0.1,
      py::arg("seed") = 0,
      "Self-supervised teacher pre-training; returns (encoder, per-epoch loss log)");

  m.def(
      "teacher_reps",
      [](const Encoder& teacher, const LabeledDataset& dataset) {
        return to_array(compute_teacher_reps(teacher, dataset).z);
      },
      py::arg("teacher"), py::arg("dataset"),
      "Frozen teacher representations, one row per example");

  // -------------------------------------------------------------------------
  // Expert trajectories.
  // -------------------------------------------------------------------------

  py::class_<ExpertTrajectory>(m, "ExpertTrajectory")
      .def_property_readonly("epoch_count", &ExpertTrajectory::epoch_count)
      .def_property_readonly("seed", [](const ExpertTrajectory& t) { return t.seed; })
      .def_property_readonly("loss_log", [](const ExpertTrajectory& t) { return t.loss_log; })
      .def("save",
           [](const ExpertTrajectory& t, const std::string& path) { save_trajectory(path, t); },
           py::arg("path"))
      .def_static("load", [](const std::string& path) { return load_trajectory(path); },
                  py::arg("path"));

  m.def(
      "train_experts",
      [](const LabeledDataset& dataset, const DoubleArray& reps, std::size_t r, std::size_t k,
         std::size_t epochs, std::size_t batch_size, double lr, double momentum,
         double weight_decay, std::uint64_t base_seed, std::size_t threads) {
        KdTrainConfig cfg;
        cfg.epochs = epochs;
        cfg.batch_size = batch_size;
        cfg.lr = lr;
        cfg.momentum = momentum;
        cfg.weight_decay = weight_decay;
        return train_experts(dataset, to_tensor(reps), student_spec(dataset.dim(), r), cfg, k,
                             base_seed, threads);
      },
      py::arg("dataset"), py::arg("reps"), py::arg("r"), py::arg("k"), py::arg("epochs") = 20,
      py::arg("batch_size") = 16, py::arg("lr") = 0.1, py::arg("momentum") = 0.9,
      py::arg("weight_decay") = 1e-4, py::arg("base_seed") = 0, py::arg("threads") = 1,
      "K expert trajectories distilling the frozen teacher representations");

  m.def(
      "train_experts_ssl",
      [](const LabeledDataset& dataset, std::size_t r, std::size_t k, std::size_t epochs,
         std::size_t batch_size, double lr, std::size_t views, double sigma_aug,
         std::uint64_t base_seed, std::size_t threads) {
        SslExpertConfig cfg;
        cfg.epochs = epochs;
        cfg.batch_size = batch_size;
        cfg.lr = lr;
        cfg.views = views;
        cfg.sigma_aug = sigma_aug;
        return train_experts_ssl(dataset, student_spec(dataset.dim(), r), cfg, k, base_seed,
                                 threads);
      },
      py::arg("dataset"), py::arg("r"), py::arg("k"), py::arg("epochs") = 20,
      py::arg("batch_size") = 16, py::arg("lr") = 0.05, py::arg("views") = 2,
      py::arg("sigma_aug") = 0.1, py::arg("base_seed") = 0, py::arg("threads") = 1,
      "Expert trajectories trained on the sampled self-supervised objective");

  // -------------------------------------------------------------------------
  // Subset selection and distillation.
  // -------------------------------------------------------------------------

  m.def(
      "select_high_loss",
      [](const LabeledDataset& dataset, const std::vector<ExpertTrajectory>& experts,
         const DoubleArray& reps, std::size_t size) {
        return select_high_loss_init(dataset, experts, to_tensor(reps), size);
      },
      py::arg("dataset"), py::arg("experts"), py::arg("reps"), py::arg("size"),
      "Indices of the examples the experts found hardest, descending");

  m.def("select_random", &select_random_init, py::arg("n"), py::arg("size"), py::arg("seed") = 0,
        "Uniform without-replacement baseline for the same job");

  py::class_<SyntheticDataset>(m, "SyntheticSet")
      .def_property_readonly("inputs",
                             [](const SyntheticDataset& s) { return to_array(s.d_syn); })
      .def_property_readonly("targets",
                             [](const SyntheticDataset& s) { return to_array(s.z_syn); })
      .def_property_readonly("alpha", [](const SyntheticDataset& s) { return s.alpha_syn; })
      .def_property_readonly("init_indices",
                             [](const SyntheticDataset& s) { return s.init_indices; })
      .def_property_readonly("n", &SyntheticDataset::size)
      .def("save",
           [](const SyntheticDataset& s, const std::string& path) { save_synthetic(path, s); },
           py::arg("path"))
      .def_static("load", [](const std::string& path) { return load_synthetic(path); },
                  py::arg("path"));

  py::class_<DistillLogRow>(m, "DistillLogRow")
      .def_readonly("step", &DistillLogRow::step)
      .def_readonly("expert_id", &DistillLogRow::expert_id)
      .def_readonly("start_epoch", &DistillLogRow::start_epoch)
      .def_readonly("mtt_loss", &DistillLogRow::mtt_loss)
      .def_readonly("alpha_syn", &DistillLogRow::alpha_syn)
      .def_readonly("pixel_change", &DistillLogRow::pixel_change);

  py::class_<DistillResult>(m, "DistillResult")
      .def_property_readonly("synthetic", [](const DistillResult& r) { return r.syn; })
      .def_property_readonly("log", [](const DistillResult& r) { return r.log; })
      .def_property_readonly("warnings", [](const DistillResult& r) { return r.warnings; });

  m.def(
      "distill",
      [](const std::vector<ExpertTrajectory>& experts, const std::vector<std::size_t>& init,
         const LabeledDataset& dataset, const DoubleArray& reps, std::size_t steps,
         std::size_t inner_steps, std::size_t expert_epochs, std::size_t max_start_epoch,
         double pixel_lr, double alpha_lr, double alpha_init, std::size_t batch_size,
         double outer_momentum, std::uint64_t seed) {
        const DistillConfig cfg =
            make_distill_config(steps, inner_steps, expert_epochs, max_start_epoch, pixel_lr,
                                alpha_lr, alpha_init, batch_size, 2, 0.1, outer_momentum, seed);
        return distill(experts, init, dataset, to_tensor(reps), cfg);
      },
      py::arg("experts"), py::arg("init_indices"), py::arg("dataset"), py::arg("reps"),
      py::arg("steps") = 300, py::arg("inner_steps") = 10, py::arg("expert_epochs") = 2,
      py::arg("max_start_epoch") = 2, py::arg("pixel_lr") = 0.05, py::arg("alpha_lr") = 1e-3,
      py::arg("alpha_init") = 0.1, py::arg("batch_size") = 5, py::arg("outer_momentum") = 0.5,
      py::arg("seed") = 0,
      "Trajectory matching over the distillation experts; returns synthetic data and a step log");

  m.def(
      "distill_naive_ssl",
      [](const std::vector<ExpertTrajectory>& experts, const std::vector<std::size_t>& init,
         const LabeledDataset& dataset, std::size_t steps, std::size_t inner_steps,
         std::size_t expert_epochs, std::size_t max_start_epoch, double pixel_lr,
         double alpha_lr, double alpha_init, std::size_t batch_size, std::size_t ssl_views,
         double ssl_sigma_aug, double outer_momentum, std::uint64_t seed) {
        const DistillConfig cfg = make_distill_config(
            steps, inner_steps, expert_epochs, max_start_epoch, pixel_lr, alpha_lr, alpha_init,
            batch_size, ssl_views, ssl_sigma_aug, outer_momentum, seed);
        return naive_mtt_ssl(experts, init, dataset, cfg);
      },
      py::arg("experts"), py::arg("init_indices"), py::arg("dataset"), py::arg("steps") = 300,
      py::arg("inner_steps") = 10, py::arg("expert_epochs") = 2, py::arg("max_start_epoch") = 2,
      py::arg("pixel_lr") = 0.05, py::arg("alpha_lr") = 1e-3, py::arg("alpha_init") = 0.1,
      py::arg("batch_size") = 5, py::arg("ssl_views") = 2, py::arg("ssl_sigma_aug") = 0.1,
      py::arg("outer_momentum") = 0.5, py::arg("seed") = 0,
      "The baseline that matches self-supervised expert trajectories directly");

  m.def(
      "subset_as_synthetic",
      [](const LabeledDataset& dataset, const DoubleArray& reps,
         const std::vector<std::size_t>& indices, double alpha) {
        return subset_as_synthetic(dataset, to_tensor(reps), indices, alpha);
      },
      py::arg("dataset"), py::arg("reps"), py::arg("indices"), py::arg("alpha") = 0.1,
      "Re-packages real rows so subset baselines run through the same pre-training");

  // -------------------------------------------------------------------------
  // Pre-training and probing.
  // -------------------------------------------------------------------------

  m.def(
      "pretrain",
      [](const SyntheticDataset& syn, std::size_t r, std::size_t epochs, std::uint64_t seed) {
        return pretrain_on_synthetic(syn, student_spec(syn.d_syn.cols(), r), epochs, seed);
      },
      py::arg("synthetic"), py::arg("r"), py::arg("epochs") = 20, py::arg("seed") = 0,
      "Fits a fresh student to the synthetic targets, one full-batch step per epoch");

  py::class_<ProbeResult>(m, "ProbeResult")
      .def_readonly("accuracy", &ProbeResult::accuracy)
      .def_readonly("err", &ProbeResult::err)
      .def_readonly("per_class_accuracy", &ProbeResult::per_class_accuracy)
      .def_readonly("train_labeled", &ProbeResult::train_labeled)
      .def_readonly("holdout_size", &ProbeResult::holdout_size)
      .def_readonly("iterations", &ProbeResult::iterations)
      .def("__repr__", [](const ProbeResult& r) {
        return "ProbeResult(accuracy=" + std::to_string(r.accuracy) + ")";
      });

  m.def(
      "probe",
      [](const Encoder& encoder, const LabeledDataset& dataset, double label_fraction,
         double holdout_fraction, double l2_weight, std::size_t max_iterations,
         double grad_tolerance, std::uint64_t seed) {
        ProbeConfig cfg;
        cfg.label_fraction = label_fraction;
        cfg.holdout_fraction = holdout_fraction;
        cfg.l2_weight = l2_weight;
        cfg.max_iterations = max_iterations;
        cfg.grad_tolerance = grad_tolerance;
        cfg.seed = seed;
        return linear_probe(encoder, dataset, cfg);
      },
      py::arg("encoder"), py::arg("dataset"), py::arg("label_fraction") = 1.0,
      py::arg("holdout_fraction") = 0.2, py::arg("l2_weight") = 1e-3,
      py::arg("max_iterations") = 100, py::arg("grad_tolerance") = 1e-7, py::arg("seed") = 0,
      "Linear probe on frozen representations; scores the held-out split");

  // -------------------------------------------------------------------------
  // Loss primitives.
  // -------------------------------------------------------------------------

  m.def(
      "spectral_matrix_loss",
      [](const DoubleArray& w, const DoubleArray& m, const DoubleArray& m_prime) {
        return spectral_matrix_loss(to_tensor(w), SecondMoment{to_tensor(m), to_tensor(m_prime)});
      },
      py::arg("w"), py::arg("m"), py::arg("m_prime"),
      "Population-form spectral loss of a linear encoder at the given moments");

  m.def(
      "spectral_grad",
      [](const DoubleArray& w, const DoubleArray& m) {
        const Tensor mt = to_tensor(m);
        return to_array(spectral_grad_closed_form(to_tensor(w), SecondMoment{mt, mt}));
      },
      py::arg("w"), py::arg("m"), "Closed-form spectral gradient at coinciding moments");

  m.def(
      "analytic_moments",
      [](const DoubleArray& batch) { return to_array(second_moment_analytic(to_tensor(batch)).m); },
      py::arg("batch"), "Infinite-augmentation second moment of a batch");

  m.def(
      "barlow_twins_loss",
      [](const DoubleArray& z1, const DoubleArray& z2, double lambda_offdiag) {
        return barlow_twins_from_embeddings(to_tensor(z1), to_tensor(z2), lambda_offdiag);
      },
      py::arg("z1"), py::arg("z2"), py::arg("lambda_offdiag") = 5e-3,
      "Redundancy-reduction loss of two embedding matrices");

  // -------------------------------------------------------------------------
  // Variance experiments.
  // -------------------------------------------------------------------------

  m.def(
      "grad_variance",
      [](const std::string& kind, const LabeledDataset& dataset, std::size_t batch_size,
         std::size_t n_samples, std::uint64_t seed) {
        const VarianceReport r = grad_variance_mc(parse_kind(kind), dataset, batch_size,
                                                  n_samples, seed);
        return py::make_tuple(r.estimate, r.standard_error);
      },
      py::arg("kind"), py::arg("dataset"), py::arg("batch_size"), py::arg("n_samples"),
      py::arg("seed") = 0,
      "Monte-Carlo minibatch gradient variance at identity weights: (estimate, stderr)");

  m.def(
      "grad_variance_exact",
      [](const std::string& kind, const LabeledDataset& dataset, std::size_t batch_size) {
        const VarianceReport r = grad_variance_exact(parse_kind(kind), dataset, batch_size);
        return py::make_tuple(r.estimate, r.standard_error);
      },
      py::arg("kind"), py::arg("dataset"), py::arg("batch_size"),
      "Exhaustive-subsets reference for grad_variance on small datasets");

  m.def(
      "partition_variance",
      [](const std::string& kind, const LabeledDataset& dataset, std::size_t batch_size,
         std::size_t n_partitions, double lr, std::uint64_t seed) {
        const VarianceReport r =
            partition_variance(parse_kind(kind), dataset, batch_size, n_partitions, lr, seed);
        return py::make_tuple(r.estimate, r.standard_error);
      },
      py::arg("kind"), py::arg("dataset"), py::arg("batch_size"), py::arg("n_partitions"),
      py::arg("lr"), py::arg("seed") = 0,
      "End-weight variance over random batch partitions after one synchronous epoch");

  m.def(
      "trajectory_variance",
      [](const std::string& kind, const LabeledDataset& dataset, const Encoder& init,
         std::size_t n_runs, const std::vector<std::size_t>& lengths, std::size_t batch_size,
         double lr, std::size_t views, double sigma_aug, const py::object& teacher_reps,
         std::uint64_t seed) {
        TrajectoryTrainConfig cfg;
        cfg.batch_size = batch_size;
        cfg.lr = lr;
        cfg.views = views;
        cfg.sigma_aug = sigma_aug;
        if (!teacher_reps.is_none()) cfg.teacher_reps = to_tensor(teacher_reps.cast<DoubleArray>());
        const auto reports =
            trajectory_variance(parse_kind(kind), dataset, init, n_runs, lengths, cfg, seed);
        py::list out;
        for (const VarianceReport& r : reports)
          out.append(py::make_tuple(r.estimate, r.standard_error));
        return out;
      },
      py::arg("kind"), py::arg("dataset"), py::arg("init"), py::arg("n_runs"),
      py::arg("lengths"), py::arg("batch_size") = 8, py::arg("lr") = 0.05, py::arg("views") = 2,
      py::arg("sigma_aug") = 0.1, py::arg("teacher_reps") = py::none(), py::arg("seed") = 0,
      "End-of-trajectory weight variance at each length: list of (estimate, stderr)");
}
