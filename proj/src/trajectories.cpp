#include "mkdt/trajectories.hpp"

#include <atomic>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <thread>

#include "json.hpp"
#include "mkdt/autodiff.hpp"
#include "mkdt/losses.hpp"
#include "mkdt/manifest.hpp"
#include "mkdt/rng.hpp"
#include "mkdt/serialize.hpp"

namespace mkdt {

namespace {

constexpr char kTrajectoryMagic[8] = {'M', 'K', 'D', 'T', 'T', 'R', 'A', 'J'};
constexpr std::uint32_t kTrajectoryVersion = 1;

std::vector<std::vector<std::size_t>> chop(const std::vector<std::size_t>& order,
                                           std::size_t batch_size) {
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t begin = 0; begin < order.size(); begin += batch_size) {
    const std::size_t end = std::min(begin + batch_size, order.size());
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(begin),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

// Tracked copies of the encoder parameters on a fresh graph, in flatten
// order (weights and bias of layer 0, then layer 1, ...).
struct TrackedParams {
  std::vector<Tensor> weights;
  std::vector<Tensor> biases;
  std::vector<Tensor> leaves;
};

TrackedParams track(Graph& g, const Encoder& enc) {
  TrackedParams p;
  for (std::size_t l = 0; l < enc.weights.size(); ++l) {
    p.weights.push_back(g.input(enc.weights[l]));
    p.leaves.push_back(p.weights.back());
    if (!enc.biases.empty()) {
      p.biases.push_back(g.input(enc.biases[l]));
      p.leaves.push_back(p.biases.back());
    }
  }
  return p;
}

// First-moment / second-moment accumulators for the optional Adam mode.
struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::size_t t = 0;

  // Buffers follow the flatten order (layer 0 weight, layer 0 bias, ...) so
  // they line up with the tracked-parameter and live-parameter lists.
  explicit AdamState(const Encoder& enc) {
    for (std::size_t l = 0; l < enc.weights.size(); ++l) {
      m.emplace_back(enc.weights[l].size(), 0.0);
      v.emplace_back(enc.weights[l].size(), 0.0);
      if (!enc.biases.empty()) {
        m.emplace_back(enc.biases[l].size(), 0.0);
        v.emplace_back(enc.biases[l].size(), 0.0);
      }
    }
  }
};

// Applies one optimizer step given gradients in flatten order. `params`
// points at the live encoder tensors in the same order.
void apply_step(std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads,
                const SslTrainConfig& cfg, AdamState* adam) {
  if (cfg.optimizer == Optimizer::kSgd) {
    for (std::size_t p = 0; p < params.size(); ++p) {
      for (std::size_t j = 0; j < params[p]->size(); ++j) {
        params[p]->data[j] -= cfg.lr * grads[p]->data[j];
      }
    }
    return;
  }
  adam->t += 1;
  const double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(adam->t));
  const double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(adam->t));
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (std::size_t j = 0; j < params[p]->size(); ++j) {
      const double g = grads[p]->data[j];
      double& m = adam->m[p][j];
      double& v = adam->v[p][j];
      m = cfg.adam_beta1 * m + (1.0 - cfg.adam_beta1) * g;
      v = cfg.adam_beta2 * v + (1.0 - cfg.adam_beta2) * g * g;
      params[p]->data[j] -= cfg.lr * (m / bc1) / (std::sqrt(v / bc2) + cfg.adam_eps);
    }
  }
}

std::vector<Tensor*> live_params(Encoder& enc) {
  std::vector<Tensor*> params;
  for (std::size_t l = 0; l < enc.weights.size(); ++l) {
    params.push_back(&enc.weights[l]);
    if (!enc.biases.empty()) params.push_back(&enc.biases[l]);
  }
  return params;
}

std::string activation_name(Activation a) { return a == Activation::kTanh ? "tanh" : "relu"; }

Activation activation_from_name(const std::string& name) {
  if (name == "tanh") return Activation::kTanh;
  if (name == "relu") return Activation::kRelu;
  throw std::runtime_error("trajectory config: unknown activation '" + name + "'");
}

}  // namespace

TeacherRun train_teacher_ssl(const LabeledDataset& dataset, const EncoderSpec& teacher_arch,
                             const SslTrainConfig& cfg, std::uint64_t seed) {
  validate(teacher_arch);
  if (teacher_arch.in_dim() != dataset.dim()) {
    throw std::invalid_argument("train_teacher_ssl: encoder input width does not match data");
  }
  if (cfg.batch_size < 2) {
    throw std::invalid_argument(
        "train_teacher_ssl: batch size must be >= 2 (the loss normalizes over the batch)");
  }

  TeacherRun run;
  run.encoder = init_encoder(teacher_arch, InitScheme::kFanIn, derive_seed(seed, 0));
  Rng rng(derive_seed(seed, 1));
  AdamState adam(run.encoder);
  std::vector<Tensor*> params = live_params(run.encoder);

  const std::size_t n = dataset.size();
  const std::size_t d = dataset.dim();
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (const std::vector<std::size_t>& batch : chop(rng.permutation(n), cfg.batch_size)) {
      // A trailing singleton batch cannot be batch-normalized; skip it. The
      // permutation stream is unaffected, so runs stay seed-deterministic.
      if (batch.size() < 2) continue;

      // Two sampled views per example, drawn per example as the first
      // view's coordinates then the second's.
      Tensor v1 = Tensor::zeros({batch.size(), d});
      Tensor v2 = Tensor::zeros({batch.size(), d});
      for (std::size_t i = 0; i < batch.size(); ++i) {
        for (std::size_t j = 0; j < d; ++j) {
          v1.at(i, j) = dataset.inputs.at(batch[i], j) + cfg.sigma_aug * rng.normal();
        }
        for (std::size_t j = 0; j < d; ++j) {
          v2.at(i, j) = dataset.inputs.at(batch[i], j) + cfg.sigma_aug * rng.normal();
        }
      }

      Graph g;
      TrackedParams tracked = track(g, run.encoder);
      const Tensor z1 =
          forward_layers(tracked.weights, tracked.biases, teacher_arch.activation, v1);
      const Tensor z2 =
          forward_layers(tracked.weights, tracked.biases, teacher_arch.activation, v2);
      const Tensor loss = barlow_twins_expr(z1, z2, cfg.lambda);
      loss_sum += loss.item();
      batches += 1;

      GradientMap grads = g.backward(loss, tracked.leaves);
      std::vector<const Tensor*> grad_ptrs;
      for (const Tensor& leaf : tracked.leaves) grad_ptrs.push_back(&grads.at(leaf));
      apply_step(params, grad_ptrs, cfg, &adam);
    }
    if (batches == 0) {
      throw std::invalid_argument("train_teacher_ssl: no usable batch (need >= 2 examples)");
    }
    run.loss_log.push_back(loss_sum / static_cast<double>(batches));
  }
  return run;
}

TeacherRepresentations compute_teacher_reps(const Encoder& teacher,
                                            const LabeledDataset& dataset) {
  if (teacher.spec.in_dim() != dataset.dim()) {
    throw std::invalid_argument("compute_teacher_reps: encoder input width does not match data");
  }
  TeacherRepresentations reps;
  reps.z = forward(teacher, dataset.inputs);
  if (!reps.z.all_finite()) {
    throw std::runtime_error("compute_teacher_reps: non-finite representation");
  }
  reps.teacher_hash = hash_encoder(teacher);
  return reps;
}

ExpertTrajectory train_expert_kd(const LabeledDataset& dataset, const Tensor& teacher_reps,
                                 const EncoderSpec& student_arch, const KdTrainConfig& cfg,
                                 std::uint64_t seed) {
  validate(student_arch);
  if (student_arch.in_dim() != dataset.dim()) {
    throw std::invalid_argument("train_expert_kd: encoder input width does not match data");
  }
  if (teacher_reps.rank() != 2 || teacher_reps.rows() != dataset.size()) {
    throw std::invalid_argument("train_expert_kd: teacher representations misaligned with data");
  }
  if (teacher_reps.cols() != student_arch.out_dim()) {
    throw std::invalid_argument(
        "train_expert_kd: student output width does not match teacher representations");
  }
  if (cfg.epochs < 1) {
    throw std::invalid_argument("train_expert_kd: need at least one epoch");
  }
  if (cfg.batch_size < 1 || cfg.batch_size > dataset.size()) {
    throw std::invalid_argument("train_expert_kd: batch size out of range");
  }

  ExpertTrajectory trajectory;
  trajectory.student = student_arch;
  trajectory.cfg = cfg;
  trajectory.seed = seed;

  Encoder enc = init_encoder(student_arch, cfg.init, derive_seed(seed, 0));
  Rng rng(derive_seed(seed, 1));
  std::vector<Tensor*> params = live_params(enc);
  std::vector<std::vector<double>> velocity;
  for (const Tensor* p : params) velocity.emplace_back(p->size(), 0.0);

  std::vector<std::size_t> all(dataset.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  const auto record = [&] {
    trajectory.checkpoints.push_back(flatten(enc));
    trajectory.loss_log.push_back(kd_mse(enc, dataset.inputs, teacher_reps, all));
  };
  record();

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (const std::vector<std::size_t>& batch :
         chop(rng.permutation(dataset.size()), cfg.batch_size)) {
      Graph g;
      TrackedParams tracked = track(g, enc);
      const Tensor reps = forward_layers(tracked.weights, tracked.biases,
                                         student_arch.activation, gather_rows(dataset.inputs, batch));
      const Tensor loss = kd_mse_expr(reps, gather_rows(teacher_reps, batch));
      GradientMap grads = g.backward(loss, tracked.leaves);

      // SGD with momentum; weight decay folds into the gradient.
      for (std::size_t p = 0; p < params.size(); ++p) {
        const Tensor& grad = grads.at(tracked.leaves[p]);
        for (std::size_t j = 0; j < params[p]->size(); ++j) {
          const double g_j = grad.data[j] + cfg.weight_decay * params[p]->data[j];
          velocity[p][j] = cfg.momentum * velocity[p][j] + g_j;
          params[p]->data[j] -= cfg.lr * velocity[p][j];
        }
      }
    }
    record();
  }
  return trajectory;
}

namespace {

// Experts are independent and write to disjoint slots, so a simple index
// dispenser keeps every thread busy without any ordering effects.
template <typename TrainOne>
std::vector<ExpertTrajectory> train_pool(std::size_t k, std::size_t n_threads,
                                         const TrainOne& train_one) {
  if (k == 0) throw std::invalid_argument("train_experts: need at least one expert");
  std::vector<ExpertTrajectory> experts(k);
  if (n_threads <= 1 || k == 1) {
    for (std::size_t e = 0; e < k; ++e) experts[e] = train_one(e);
    return experts;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> workers;
  const std::size_t worker_count = std::min(n_threads, k);
  workers.reserve(worker_count);
  for (std::size_t t = 0; t < worker_count; ++t) {
    workers.emplace_back([&] {
      while (true) {
        const std::size_t e = next.fetch_add(1);
        if (e >= k) return;
        experts[e] = train_one(e);
      }
    });
  }
  for (std::thread& w : workers) w.join();
  return experts;
}

}  // namespace

std::vector<ExpertTrajectory> train_experts(const LabeledDataset& dataset,
                                            const Tensor& teacher_reps,
                                            const EncoderSpec& student_arch,
                                            const KdTrainConfig& cfg, std::size_t k,
                                            std::uint64_t base_seed, std::size_t n_threads) {
  return train_pool(k, n_threads, [&](std::size_t e) {
    return train_expert_kd(dataset, teacher_reps, student_arch, cfg, derive_seed(base_seed, e));
  });
}

ExpertTrajectory train_expert_ssl(const LabeledDataset& dataset, const EncoderSpec& student_arch,
                                  const SslExpertConfig& cfg, std::uint64_t seed) {
  validate(student_arch);
  if (student_arch.in_dim() != dataset.dim()) {
    throw std::invalid_argument("train_expert_ssl: encoder input width does not match data");
  }
  if (cfg.epochs < 1) throw std::invalid_argument("train_expert_ssl: need at least one epoch");
  if (cfg.views < 2) throw std::invalid_argument("train_expert_ssl: need at least two views");
  if (cfg.batch_size < 1 || cfg.batch_size > dataset.size()) {
    throw std::invalid_argument("train_expert_ssl: batch size out of range");
  }

  ExpertTrajectory trajectory;
  trajectory.student = student_arch;
  trajectory.cfg.epochs = cfg.epochs;
  trajectory.cfg.batch_size = cfg.batch_size;
  trajectory.cfg.lr = cfg.lr;
  trajectory.cfg.momentum = 0.0;
  trajectory.cfg.weight_decay = 0.0;
  trajectory.cfg.init = cfg.init;
  trajectory.seed = seed;

  Encoder enc = init_encoder(student_arch, cfg.init, derive_seed(seed, 0));
  Rng rng(derive_seed(seed, 1));
  const std::uint64_t eval_seed = derive_seed(seed, 2);
  std::vector<Tensor*> params = live_params(enc);

  const std::size_t d = dataset.dim();
  const auto record = [&] {
    trajectory.checkpoints.push_back(flatten(enc));
    trajectory.loss_log.push_back(
        spectral_contrastive(enc, dataset.inputs, cfg.views, cfg.sigma_aug, eval_seed));
  };
  record();

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (const std::vector<std::size_t>& batch :
         chop(rng.permutation(dataset.size()), cfg.batch_size)) {
      // Stacked views, example-major: row views*i+a is view a of example i,
      // coordinates drawn per example, per view.
      Tensor stacked = Tensor::zeros({batch.size() * cfg.views, d});
      for (std::size_t i = 0; i < batch.size(); ++i) {
        for (std::size_t a = 0; a < cfg.views; ++a) {
          for (std::size_t j = 0; j < d; ++j) {
            stacked.data[(i * cfg.views + a) * d + j] =
                dataset.inputs.at(batch[i], j) + cfg.sigma_aug * rng.normal();
          }
        }
      }
      Graph g;
      TrackedParams tracked = track(g, enc);
      const Tensor reps =
          forward_layers(tracked.weights, tracked.biases, student_arch.activation, stacked);
      const Tensor loss = spectral_loss_from_reps(reps, batch.size(), cfg.views);
      GradientMap grads = g.backward(loss, tracked.leaves);
      for (std::size_t p = 0; p < params.size(); ++p) {
        const Tensor& grad = grads.at(tracked.leaves[p]);
        for (std::size_t j = 0; j < params[p]->size(); ++j) {
          params[p]->data[j] -= cfg.lr * grad.data[j];
        }
      }
    }
    record();
  }
  return trajectory;
}

std::vector<ExpertTrajectory> train_experts_ssl(const LabeledDataset& dataset,
                                                const EncoderSpec& student_arch,
                                                const SslExpertConfig& cfg, std::size_t k,
                                                std::uint64_t base_seed, std::size_t n_threads) {
  return train_pool(k, n_threads, [&](std::size_t e) {
    return train_expert_ssl(dataset, student_arch, cfg, derive_seed(base_seed, e));
  });
}

void save_trajectory(const std::string& path, const ExpertTrajectory& trajectory) {
  if (trajectory.checkpoints.size() < 2) {
    throw std::invalid_argument("save_trajectory: a trajectory has at least two checkpoints");
  }
  if (trajectory.loss_log.size() != trajectory.checkpoints.size()) {
    throw std::invalid_argument("save_trajectory: loss log and checkpoints disagree");
  }
  nlohmann::json config;
  config["student"] = {{"dims", trajectory.student.dims},
                       {"activation", activation_name(trajectory.student.activation)},
                       {"bias", trajectory.student.bias}};
  config["lr"] = trajectory.cfg.lr;
  config["momentum"] = trajectory.cfg.momentum;
  config["weight_decay"] = trajectory.cfg.weight_decay;
  config["batch_size"] = trajectory.cfg.batch_size;
  config["epochs"] = trajectory.cfg.epochs;
  config["init"] = trajectory.cfg.init == InitScheme::kIdentity ? "identity" : "fan_in";
  config["seed"] = trajectory.seed;
  config["loss_log"] = trajectory.loss_log;

  io::save_file(path, [&](std::ostream& out) {
    io::write_header(out, kTrajectoryMagic, kTrajectoryVersion);
    io::write_string(out, config.dump());
    io::write_u32(out, static_cast<std::uint32_t>(trajectory.checkpoints.size()));
    for (const FlatParams& checkpoint : trajectory.checkpoints) {
      io::write_tensor(out, checkpoint.values);
    }
  });
}

ExpertTrajectory load_trajectory(const std::string& path) {
  ExpertTrajectory trajectory;
  io::load_file(path, [&](std::istream& in) {
    io::check_header(in, kTrajectoryMagic, kTrajectoryVersion, "trajectory");
    nlohmann::json config;
    try {
      config = nlohmann::json::parse(io::read_string(in, "trajectory config"));
      trajectory.student.dims = config.at("student").at("dims").get<std::vector<std::size_t>>();
      trajectory.student.activation =
          activation_from_name(config.at("student").at("activation").get<std::string>());
      trajectory.student.bias = config.at("student").at("bias").get<bool>();
      trajectory.cfg.lr = config.at("lr").get<double>();
      trajectory.cfg.momentum = config.at("momentum").get<double>();
      trajectory.cfg.weight_decay = config.at("weight_decay").get<double>();
      trajectory.cfg.batch_size = config.at("batch_size").get<std::size_t>();
      trajectory.cfg.epochs = config.at("epochs").get<std::size_t>();
      const std::string init = config.at("init").get<std::string>();
      if (init != "identity" && init != "fan_in") {
        throw std::runtime_error("trajectory config: unknown init '" + init + "'");
      }
      trajectory.cfg.init = init == "identity" ? InitScheme::kIdentity : InitScheme::kFanIn;
      trajectory.seed = config.at("seed").get<std::uint64_t>();
      trajectory.loss_log = config.at("loss_log").get<std::vector<double>>();
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(std::string("trajectory config: ") + e.what());
    }
    validate(trajectory.student);

    const std::uint32_t count = io::read_u32(in, "trajectory checkpoint count");
    if (count < 2) throw std::runtime_error("trajectory: fewer than two checkpoints");
    if (trajectory.loss_log.size() != count) {
      throw std::runtime_error("trajectory: loss log and checkpoints disagree");
    }
    const std::vector<Shape> manifest = expected_manifest(trajectory.student);
    std::size_t total = 0;
    for (const Shape& s : manifest) total += shape_numel(s);
    for (std::uint32_t c = 0; c < count; ++c) {
      FlatParams flat;
      flat.values = io::read_tensor(in, "trajectory checkpoint");
      flat.manifest = manifest;
      if (flat.values.rank() != 1 || flat.values.size() != total) {
        throw std::runtime_error("trajectory: checkpoint does not match the architecture");
      }
      trajectory.checkpoints.push_back(std::move(flat));
    }
  });
  return trajectory;
}

namespace {

constexpr char kEncoderMagic[8] = {'M', 'K', 'D', 'T', 'E', 'N', 'C', 'R'};
constexpr std::uint32_t kEncoderVersion = 1;
constexpr char kRepsMagic[8] = {'M', 'K', 'D', 'T', 'R', 'E', 'P', 'S'};
constexpr std::uint32_t kRepsVersion = 1;

}  // namespace

void save_encoder(const std::string& path, const Encoder& encoder) {
  validate(encoder.spec);
  nlohmann::json config;
  config["dims"] = encoder.spec.dims;
  config["activation"] = activation_name(encoder.spec.activation);
  config["bias"] = encoder.spec.bias;

  io::save_file(path, [&](std::ostream& out) {
    io::write_header(out, kEncoderMagic, kEncoderVersion);
    io::write_string(out, config.dump());
    for (std::size_t l = 0; l < encoder.weights.size(); ++l) {
      io::write_tensor(out, encoder.weights[l]);
      if (encoder.spec.bias) io::write_tensor(out, encoder.biases[l]);
    }
  });
}

Encoder load_encoder(const std::string& path) {
  Encoder encoder;
  io::load_file(path, [&](std::istream& in) {
    io::check_header(in, kEncoderMagic, kEncoderVersion, "encoder");
    try {
      const nlohmann::json config = nlohmann::json::parse(io::read_string(in, "encoder config"));
      encoder.spec.dims = config.at("dims").get<std::vector<std::size_t>>();
      encoder.spec.activation = activation_from_name(config.at("activation").get<std::string>());
      encoder.spec.bias = config.at("bias").get<bool>();
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(std::string("encoder: malformed config: ") + e.what());
    }
    validate(encoder.spec);
    for (std::size_t l = 0; l + 1 < encoder.spec.dims.size(); ++l) {
      Tensor w = io::read_tensor(in, "encoder weight");
      if (w.rank() != 2 || w.rows() != encoder.spec.dims[l + 1] ||
          w.cols() != encoder.spec.dims[l]) {
        throw std::runtime_error("encoder: weight does not match the declared dims");
      }
      encoder.weights.push_back(std::move(w));
      if (encoder.spec.bias) {
        Tensor b = io::read_tensor(in, "encoder bias");
        if (b.rank() != 1 || b.size() != encoder.spec.dims[l + 1]) {
          throw std::runtime_error("encoder: bias does not match the declared dims");
        }
        encoder.biases.push_back(std::move(b));
      }
    }
  });
  return encoder;
}

void save_teacher_reps(const std::string& path, const TeacherRepresentations& reps) {
  if (reps.z.rank() != 2) {
    throw std::invalid_argument("save_teacher_reps: representations must be rank 2");
  }
  io::save_file(path, [&](std::ostream& out) {
    io::write_header(out, kRepsMagic, kRepsVersion);
    io::write_u64(out, reps.teacher_hash);
    io::write_tensor(out, reps.z);
  });
}

TeacherRepresentations load_teacher_reps(const std::string& path) {
  TeacherRepresentations reps;
  io::load_file(path, [&](std::istream& in) {
    io::check_header(in, kRepsMagic, kRepsVersion, "teacher representations");
    reps.teacher_hash = io::read_u64(in, "teacher hash");
    reps.z = io::read_tensor(in, "teacher representations");
    if (reps.z.rank() != 2) {
      throw std::runtime_error("teacher representations: expected a rank-2 tensor");
    }
  });
  return reps;
}

}  // namespace mkdt
