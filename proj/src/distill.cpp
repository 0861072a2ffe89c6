#include "mkdt/distill.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <stdexcept>

#include "mkdt/autodiff.hpp"
#include "mkdt/losses.hpp"
#include "mkdt/serialize.hpp"

namespace mkdt {

namespace {

constexpr char kSyntheticMagic[8] = {'M', 'K', 'D', 'T', 'S', 'Y', 'N', 'D'};
constexpr std::uint32_t kSyntheticVersion = 1;

std::string fmt(const char* pattern, ...) {
  char buf[256];
  va_list args;
  va_start(args, pattern);
  std::vsnprintf(buf, sizeof(buf), pattern, args);
  va_end(args);
  return buf;
}

// Shortest decimal form that round-trips to the same double.
std::string csv_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

// Exact squared distance between two checkpoints; zero means the expert
// segment is degenerate and the matching loss is undefined.
double segment_length_sq(const FlatParams& a, const FlatParams& b) {
  double sum = 0.0;
  for (std::size_t j = 0; j < a.values.size(); ++j) {
    const double diff = a.values.data[j] - b.values.data[j];
    sum += diff * diff;
  }
  return sum;
}

}  // namespace

void validate(const DistillConfig& cfg) {
  if (cfg.inner_steps < 1) throw std::invalid_argument("distill config: inner_steps must be >= 1");
  if (cfg.expert_epochs < 1) {
    throw std::invalid_argument("distill config: expert_epochs must be >= 1");
  }
  if (!(cfg.pixel_lr > 0.0)) throw std::invalid_argument("distill config: pixel_lr must be > 0");
  if (!(cfg.alpha_lr > 0.0)) throw std::invalid_argument("distill config: alpha_lr must be > 0");
  if (!(cfg.alpha_init > 0.0)) {
    throw std::invalid_argument("distill config: alpha_init must be > 0");
  }
  if (cfg.batch_size < 1) throw std::invalid_argument("distill config: batch_size must be >= 1");
  if (cfg.ssl_views < 2) throw std::invalid_argument("distill config: ssl_views must be >= 2");
  if (cfg.ssl_sigma_aug < 0.0) {
    throw std::invalid_argument("distill config: ssl_sigma_aug must be >= 0");
  }
  if (!(cfg.outer_momentum >= 0.0 && cfg.outer_momentum < 1.0)) {
    throw std::invalid_argument("distill config: outer_momentum must be in [0, 1)");
  }
  if (!(cfg.alpha_floor > 0.0)) {
    throw std::invalid_argument("distill config: alpha_floor must be > 0");
  }
}

std::vector<std::size_t> select_high_loss_init(const LabeledDataset& dataset,
                                               const std::vector<ExpertTrajectory>& experts,
                                               const Tensor& teacher_reps, std::size_t size) {
  const std::size_t n = dataset.size();
  if (size > n) {
    throw std::invalid_argument(fmt("select_high_loss_init: size %zu exceeds %zu examples",
                                    size, n));
  }
  if (experts.empty()) {
    throw std::invalid_argument("select_high_loss_init: need at least one expert");
  }
  if (teacher_reps.rank() != 2 || teacher_reps.rows() != n) {
    throw std::invalid_argument("select_high_loss_init: teacher representations misaligned");
  }

  // Mean over experts of the per-example squared distance to the teacher
  // row, each expert evaluated at its first post-initialization checkpoint.
  std::vector<double> loss(n, 0.0);
  for (const ExpertTrajectory& expert : experts) {
    if (expert.checkpoints.size() < 2) {
      throw std::invalid_argument("select_high_loss_init: expert lacks an epoch-1 checkpoint");
    }
    const Encoder enc = unflatten(expert.student, expert.checkpoints[1]);
    const Tensor reps = forward(enc, dataset.inputs);
    if (reps.cols() != teacher_reps.cols()) {
      throw std::invalid_argument("select_high_loss_init: representation widths differ");
    }
    for (std::size_t i = 0; i < n; ++i) {
      double d = 0.0;
      for (std::size_t j = 0; j < reps.cols(); ++j) {
        const double diff = reps.at(i, j) - teacher_reps.at(i, j);
        d += diff * diff;
      }
      loss[i] += d / static_cast<double>(experts.size());
    }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (loss[a] != loss[b]) return loss[a] > loss[b];
    return a < b;
  });
  order.resize(size);
  return order;
}

std::vector<std::size_t> select_random_init(std::size_t n, std::size_t size,
                                            std::uint64_t seed) {
  if (size > n) {
    throw std::invalid_argument(fmt("select_random_init: size %zu exceeds %zu examples",
                                    size, n));
  }
  Rng rng(seed);
  std::vector<std::size_t> order = rng.permutation(n);
  order.resize(size);
  std::sort(order.begin(), order.end());
  return order;
}

SyntheticBatchStream::SyntheticBatchStream(std::size_t set_size, std::size_t batch_size,
                                           std::uint64_t seed)
    : batch_size_(batch_size), rng_(seed), order_(set_size) {
  if (set_size == 0) throw std::invalid_argument("batch stream: empty synthetic set");
  if (batch_size == 0) throw std::invalid_argument("batch stream: batch size must be >= 1");
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  rng_.shuffle(order_);
}

std::vector<std::size_t> SyntheticBatchStream::next() {
  if (cursor_ >= order_.size()) {
    rng_.shuffle(order_);
    cursor_ = 0;
  }
  const std::size_t end = std::min(cursor_ + batch_size_, order_.size());
  std::vector<std::size_t> batch(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                                 order_.begin() + static_cast<std::ptrdiff_t>(end));
  cursor_ = end;
  return batch;
}

UnrollPlan make_unroll_plan(DistillMode mode, const DistillConfig& cfg, std::size_t input_dim,
                            Rng& rng, SyntheticBatchStream& stream) {
  UnrollPlan plan;
  plan.mode = mode;
  plan.segment_epochs = cfg.expert_epochs;
  plan.start_epoch = rng.below(cfg.max_start_epoch + 1);
  for (std::size_t step = 0; step < cfg.inner_steps; ++step) {
    plan.batches.push_back(stream.next());
    if (mode == DistillMode::kNaiveSsl) {
      plan.view_noise.push_back(rng.normal_tensor(
          {plan.batches.back().size() * cfg.ssl_views, input_dim}, 0.0, cfg.ssl_sigma_aug));
    }
  }
  return plan;
}

namespace {

// The unroll itself. The pixel tensor and the one-entry alpha tensor may be
// graph-tracked; everything else enters as constants, so when they are
// tracked the returned matching loss differentiates through every inner
// update.
Tensor build_unroll_loss(const Tensor& pixels, const Tensor& alpha, const Tensor& z_syn,
                         const ExpertTrajectory& expert, const UnrollPlan& plan) {
  if (plan.start_epoch + plan.segment_epochs > expert.epoch_count()) {
    throw std::invalid_argument(
        fmt("unroll: expert covers %zu epochs, segment [%zu, %zu] does not fit",
            expert.epoch_count(), plan.start_epoch, plan.start_epoch + plan.segment_epochs));
  }
  const Encoder start = unflatten(expert.student, expert.checkpoints[plan.start_epoch]);
  const FlatParams& target = expert.checkpoints[plan.start_epoch + plan.segment_epochs];

  std::vector<Tensor> w = start.weights;
  std::vector<Tensor> b = start.biases;
  for (std::size_t step = 0; step < plan.batches.size(); ++step) {
    const std::vector<std::size_t>& batch = plan.batches[step];
    Tensor input;
    std::size_t views = 1;
    if (plan.mode == DistillMode::kMkdt) {
      input = gather_rows(pixels, batch);
    } else {
      const Tensor& noise = plan.view_noise.at(step);
      views = noise.rows() / batch.size();
      std::vector<std::size_t> duplicated;
      duplicated.reserve(batch.size() * views);
      for (std::size_t i : batch) {
        for (std::size_t a = 0; a < views; ++a) duplicated.push_back(i);
      }
      input = add(gather_rows(pixels, duplicated), noise);
    }

    const ForwardTrace trace = forward_trace(w, b, expert.student.activation, input);
    const Tensor& reps = trace.layer_inputs.back();
    Tensor d_out;
    if (plan.mode == DistillMode::kMkdt) {
      const Tensor zb = gather_rows(z_syn, batch);
      d_out = scalar_mul(2.0 / static_cast<double>(batch.size()), sub(reps, zb));
    } else {
      d_out = spectral_d_reps(reps, batch.size(), views);
    }
    const LayerGrads grads = backprop_from_trace(trace, w, expert.student.activation, d_out);
    for (std::size_t l = 0; l < w.size(); ++l) {
      w[l] = sub(w[l], scale(alpha, grads.weights[l]));
      if (!b.empty()) b[l] = sub(b[l], scale(alpha, grads.biases[l]));
    }
  }

  // Flatten the ending student in checkpoint order: layer weight then bias.
  std::vector<Tensor> parts;
  for (std::size_t l = 0; l < w.size(); ++l) {
    parts.push_back(reshape(w[l], {w[l].size()}));
    if (!b.empty()) parts.push_back(reshape(b[l], {b[l].size()}));
  }
  const Tensor flat_end =
      parts.size() == 1 ? parts.front() : concat_rows(std::span<const Tensor>(parts));
  return mtt_loss_expr(flat_end, expert.checkpoints[plan.start_epoch].values, target.values);
}

}  // namespace

double unroll_match_loss(const Tensor& d_syn, const Tensor& z_syn, double alpha,
                         const ExpertTrajectory& expert, const UnrollPlan& plan) {
  return build_unroll_loss(d_syn, Tensor({1}, {alpha}), z_syn, expert, plan).item();
}

UnrollGradients unroll_match_gradients(const Tensor& d_syn, const Tensor& z_syn, double alpha,
                                       const ExpertTrajectory& expert, const UnrollPlan& plan) {
  Graph g;
  const Tensor pixels = g.input(d_syn);
  const Tensor alpha_scalar = g.input(Tensor({1}, {alpha}));
  const Tensor loss = build_unroll_loss(pixels, alpha_scalar, z_syn, expert, plan);

  UnrollGradients out;
  out.loss = loss.item();
  GradientMap grads = g.backward(loss, {pixels, alpha_scalar});
  out.d_pixels = grads.at(pixels);
  out.d_alpha = grads.at(alpha_scalar).item();
  return out;
}

StepOutcome distill_step(SyntheticDataset& syn, const ExpertTrajectory& expert,
                         const DistillConfig& cfg, DistillMode mode, Rng& rng,
                         SyntheticBatchStream& stream, OuterState& state) {
  const UnrollPlan plan = make_unroll_plan(mode, cfg, syn.d_syn.cols(), rng, stream);

  StepOutcome outcome;
  outcome.start_epoch = plan.start_epoch;
  if (segment_length_sq(expert.checkpoints.at(plan.start_epoch),
                        expert.checkpoints.at(plan.start_epoch + plan.segment_epochs)) == 0.0) {
    outcome.skipped = true;
    return outcome;
  }

  const UnrollGradients grads =
      unroll_match_gradients(syn.d_syn, syn.z_syn, syn.alpha_syn, expert, plan);
  outcome.mtt_loss = grads.loss;

  if (state.pixel_velocity.size() == 0) {
    state.pixel_velocity = Tensor::zeros(syn.d_syn.shape);
  }
  for (std::size_t j = 0; j < syn.d_syn.size(); ++j) {
    state.pixel_velocity.data[j] =
        cfg.outer_momentum * state.pixel_velocity.data[j] + grads.d_pixels.data[j];
    syn.d_syn.data[j] -= cfg.pixel_lr * state.pixel_velocity.data[j];
  }
  state.alpha_velocity = cfg.outer_momentum * state.alpha_velocity + grads.d_alpha;
  syn.alpha_syn = std::max(cfg.alpha_floor, syn.alpha_syn - cfg.alpha_lr * state.alpha_velocity);
  return outcome;
}

namespace {

DistillResult run_distill(const std::vector<ExpertTrajectory>& experts,
                          const std::vector<std::size_t>& init_indices,
                          const LabeledDataset& dataset, const Tensor* teacher_reps,
                          const DistillConfig& cfg, DistillMode mode) {
  validate(cfg);
  if (experts.empty()) throw std::invalid_argument("distill: need at least one expert");
  for (std::size_t e = 0; e < experts.size(); ++e) {
    if (!(experts[e].student == experts.front().student)) {
      throw std::invalid_argument("distill: experts disagree on the student architecture");
    }
    if (experts[e].epoch_count() < cfg.max_start_epoch + cfg.expert_epochs) {
      throw std::invalid_argument(
          fmt("distill: expert %zu covers %zu epochs, need max_start_epoch %zu + %zu", e,
              experts[e].epoch_count(), cfg.max_start_epoch, cfg.expert_epochs));
    }
  }
  if (init_indices.empty()) throw std::invalid_argument("distill: empty initialization");
  std::set<std::size_t> distinct(init_indices.begin(), init_indices.end());
  if (distinct.size() != init_indices.size()) {
    throw std::invalid_argument("distill: initialization indices repeat");
  }
  for (std::size_t i : init_indices) {
    if (i >= dataset.size()) {
      throw std::invalid_argument(fmt("distill: init index %zu out of range %zu", i,
                                      dataset.size()));
    }
  }
  const EncoderSpec& student = experts.front().student;
  if (student.in_dim() != dataset.dim()) {
    throw std::invalid_argument("distill: student input width does not match data");
  }

  DistillResult result;
  result.syn.init_indices = init_indices;
  result.syn.d_syn = gather_rows(dataset.inputs, init_indices);
  if (mode == DistillMode::kMkdt) {
    if (teacher_reps == nullptr || teacher_reps->rank() != 2 ||
        teacher_reps->rows() != dataset.size()) {
      throw std::invalid_argument("distill: teacher representations misaligned");
    }
    if (teacher_reps->cols() != student.out_dim()) {
      throw std::invalid_argument(
          "distill: teacher representation width does not match the student");
    }
    result.syn.z_syn = gather_rows(*teacher_reps, init_indices);
  } else {
    result.syn.z_syn = Tensor::zeros({init_indices.size(), student.out_dim()});
  }
  result.syn.alpha_syn = cfg.alpha_init;

  const Tensor init_snapshot = result.syn.d_syn;
  OuterState state;
  Rng rng(derive_seed(cfg.seed, 0));
  SyntheticBatchStream stream(init_indices.size(), cfg.batch_size, derive_seed(cfg.seed, 1));

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const std::size_t expert_id = rng.below(experts.size());
    const StepOutcome outcome =
        distill_step(result.syn, experts[expert_id], cfg, mode, rng, stream, state);
    if (outcome.skipped) {
      result.warnings.push_back(
          fmt("step %zu: expert %zu segment [%zu, %zu] is degenerate; skipped", step, expert_id,
              outcome.start_epoch, outcome.start_epoch + cfg.expert_epochs));
      continue;
    }
    DistillLogRow row;
    row.step = step;
    row.expert_id = expert_id;
    row.start_epoch = outcome.start_epoch;
    row.mtt_loss = outcome.mtt_loss;
    row.alpha_syn = result.syn.alpha_syn;
    row.pixel_change = pixel_change_metric(result.syn.d_syn, init_snapshot);
    result.log.push_back(row);
  }
  return result;
}

}  // namespace

DistillResult distill(const std::vector<ExpertTrajectory>& experts,
                      const std::vector<std::size_t>& init_indices,
                      const LabeledDataset& dataset, const Tensor& teacher_reps,
                      const DistillConfig& cfg) {
  return run_distill(experts, init_indices, dataset, &teacher_reps, cfg, DistillMode::kMkdt);
}

DistillResult naive_mtt_ssl(const std::vector<ExpertTrajectory>& experts_ssl,
                            const std::vector<std::size_t>& init_indices,
                            const LabeledDataset& dataset, const DistillConfig& cfg) {
  return run_distill(experts_ssl, init_indices, dataset, nullptr, cfg, DistillMode::kNaiveSsl);
}

double pixel_change_metric(const Tensor& current, const Tensor& init_snapshot) {
  if (!shapes_equal(current.shape, init_snapshot.shape)) {
    throw std::invalid_argument(fmt("pixel_change_metric: shapes %s vs %s",
                                    shape_str(current.shape).c_str(),
                                    shape_str(init_snapshot.shape).c_str()));
  }
  double sum = 0.0;
  for (std::size_t j = 0; j < current.size(); ++j) {
    sum += std::abs(current.data[j] - init_snapshot.data[j]);
  }
  return sum / static_cast<double>(current.size());
}

void save_synthetic(const std::string& path, const SyntheticDataset& syn) {
  if (syn.d_syn.rank() != 2 || syn.z_syn.rank() != 2 ||
      syn.d_syn.rows() != syn.z_syn.rows() || syn.init_indices.size() != syn.d_syn.rows()) {
    throw std::invalid_argument("save_synthetic: misaligned synthetic dataset");
  }
  if (!(syn.alpha_syn > 0.0)) {
    throw std::invalid_argument("save_synthetic: alpha must be positive");
  }
  io::save_file(path, [&](std::ostream& out) {
    io::write_header(out, kSyntheticMagic, kSyntheticVersion);
    std::vector<std::uint32_t> indices;
    indices.reserve(syn.init_indices.size());
    for (std::size_t i : syn.init_indices) indices.push_back(static_cast<std::uint32_t>(i));
    io::write_u32_vector(out, indices);
    io::write_tensor(out, syn.d_syn);
    io::write_tensor(out, syn.z_syn);
    io::write_f64(out, syn.alpha_syn);
  });
}

SyntheticDataset load_synthetic(const std::string& path) {
  SyntheticDataset syn;
  io::load_file(path, [&](std::istream& in) {
    io::check_header(in, kSyntheticMagic, kSyntheticVersion, "synthetic dataset");
    for (std::uint32_t i : io::read_u32_vector(in, "synthetic provenance")) {
      syn.init_indices.push_back(i);
    }
    syn.d_syn = io::read_tensor(in, "synthetic inputs");
    syn.z_syn = io::read_tensor(in, "synthetic targets");
    syn.alpha_syn = io::read_f64(in, "synthetic alpha");
    if (syn.d_syn.rank() != 2 || syn.z_syn.rank() != 2 ||
        syn.d_syn.rows() != syn.z_syn.rows() || syn.init_indices.size() != syn.d_syn.rows()) {
      throw std::runtime_error("synthetic dataset: misaligned records in " + path);
    }
    if (!(syn.alpha_syn > 0.0)) {
      throw std::runtime_error("synthetic dataset: non-positive alpha in " + path);
    }
  });
  return syn;
}

void write_distill_log(const std::string& path, const std::vector<DistillLogRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("write_distill_log: cannot open " + path);
  out << "step,expert_id,start_epoch,mtt_loss,alpha_syn,pixel_change\n";
  for (const DistillLogRow& row : rows) {
    out << row.step << ',' << row.expert_id << ',' << row.start_epoch << ','
        << csv_double(row.mtt_loss) << ',' << csv_double(row.alpha_syn) << ','
        << csv_double(row.pixel_change) << '\n';
  }
  if (!out.flush()) throw std::runtime_error("write_distill_log: write failed for " + path);
}

}  // namespace mkdt
