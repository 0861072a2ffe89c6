#include "mkdt/variance_lab.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "mkdt/autodiff.hpp"
#include "mkdt/losses.hpp"
#include "mkdt/rng.hpp"

namespace mkdt {

namespace {

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

std::vector<std::uint32_t> gather_labels(const LabeledDataset& dataset,
                                         const std::vector<std::size_t>& rows) {
  std::vector<std::uint32_t> out;
  out.reserve(rows.size());
  for (std::size_t r : rows) out.push_back(dataset.labels.at(r));
  return out;
}

// One deterministic gradient per batch, evaluated at the fixed linear map w.
// The batch is canonicalized to ascending index order first, so the gradient
// is a function of the batch as a set (bitwise, not just mathematically).
Tensor batch_gradient(LossKind kind, const LabeledDataset& dataset,
                      std::vector<std::size_t> rows, const Tensor& w) {
  std::sort(rows.begin(), rows.end());
  Tensor inputs = gather_rows(dataset.inputs, rows);
  switch (kind) {
    case LossKind::kSupervised:
      return supervised_mse_grad_linear(w, inputs, gather_labels(dataset, rows));
    case LossKind::kSelfSupervised:
      return spectral_grad_closed_form(w, second_moment_analytic(inputs));
    case LossKind::kKnowledgeDistillation:
      break;
  }
  throw std::invalid_argument(
      "batch_gradient: only the supervised and self-supervised kinds have a "
      "fixed-point gradient form");
}

// Uniform size-k subset of {0..n-1} via a partial Fisher-Yates pass.
std::vector<std::size_t> draw_subset(std::vector<std::size_t>& pool, std::size_t k, Rng& rng) {
  const std::size_t n = pool.size();
  for (std::size_t i = 0; i < k; ++i) {
    std::swap(pool[i], pool[i + rng.below(n - i)]);
  }
  std::vector<std::size_t> subset(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k));
  std::sort(subset.begin(), subset.end());
  return subset;
}

void check_batch_args(const LossKind kind, const LabeledDataset& dataset,
                      std::size_t batch_size) {
  if (batch_size == 0 || batch_size > dataset.size()) {
    throw std::invalid_argument(fmt("batch size %zu out of range for %zu examples",
                                    batch_size, dataset.size()));
  }
  if (kind == LossKind::kSupervised && !dataset.has_labels()) {
    throw std::invalid_argument("supervised experiments need a labeled dataset");
  }
}

std::vector<std::vector<std::size_t>> indices_by_class(const LabeledDataset& dataset) {
  if (!dataset.has_labels()) {
    throw std::invalid_argument("class-structured partitions need a labeled dataset");
  }
  std::uint32_t num_classes = 0;
  for (std::uint32_t y : dataset.labels) num_classes = std::max(num_classes, y + 1);
  std::vector<std::vector<std::size_t>> classes(num_classes);
  for (std::size_t i = 0; i < dataset.labels.size(); ++i) {
    classes[dataset.labels[i]].push_back(i);
  }
  return classes;
}

Partition chop(const std::vector<std::size_t>& order, std::size_t batch_size) {
  Partition partition;
  for (std::size_t begin = 0; begin < order.size(); begin += batch_size) {
    const std::size_t end = std::min(begin + batch_size, order.size());
    partition.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(begin),
                           order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return partition;
}

const char* kind_names[] = {"sl", "ssl", "kd"};

}  // namespace

std::string loss_kind_name(LossKind kind) { return kind_names[static_cast<int>(kind)]; }

VarianceReport scalar_variance(const std::vector<Tensor>& samples) {
  const std::size_t n = samples.size();
  if (n < 2) throw std::invalid_argument("scalar_variance: need at least two samples");
  for (const Tensor& s : samples) {
    if (!shapes_equal(s.shape, samples.front().shape)) {
      throw std::invalid_argument("scalar_variance: samples must share one shape");
    }
  }
  const std::size_t dim = samples.front().size();

  // Everything is measured relative to the first sample: the variance is
  // shift-invariant, the shifted pass is better conditioned, and a set of
  // identical samples comes out exactly zero.
  const Tensor& origin = samples.front();

  // Pass 1: the mean of the shifted samples.
  std::vector<double> mean(dim, 0.0);
  for (const Tensor& s : samples) {
    for (std::size_t j = 0; j < dim; ++j) mean[j] += s.data[j] - origin.data[j];
  }
  for (double& m : mean) m /= static_cast<double>(n);

  // Pass 2: per-sample squared deviations, scaled so their mean is the
  // unbiased variance estimate; their spread gives the standard error.
  const double correction = static_cast<double>(n) / static_cast<double>(n - 1);
  std::vector<double> dev_sq(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double d = 0.0;
    for (std::size_t j = 0; j < dim; ++j) {
      const double diff = (samples[i].data[j] - origin.data[j]) - mean[j];
      d += diff * diff;
    }
    dev_sq[i] = d * correction;
  }
  double estimate = 0.0;
  for (double d : dev_sq) estimate += d;
  estimate /= static_cast<double>(n);

  double spread = 0.0;
  for (double d : dev_sq) spread += (d - estimate) * (d - estimate);
  spread /= static_cast<double>(n - 1);

  VarianceReport report;
  report.estimate = estimate;
  report.standard_error = std::sqrt(spread / static_cast<double>(n));
  report.n_samples = n;
  return report;
}

VarianceReport grad_variance_mc(LossKind kind, const LabeledDataset& dataset,
                                std::size_t batch_size, std::size_t n_samples,
                                std::uint64_t seed) {
  check_batch_args(kind, dataset, batch_size);
  if (n_samples < 2) throw std::invalid_argument("grad_variance_mc: need at least two samples");

  const Tensor w = Tensor::identity(dataset.dim());
  Rng rng(seed);
  std::vector<std::size_t> pool(dataset.size());
  for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;

  std::vector<Tensor> grads;
  grads.reserve(n_samples);
  for (std::size_t s = 0; s < n_samples; ++s) {
    grads.push_back(batch_gradient(kind, dataset, draw_subset(pool, batch_size, rng), w));
  }
  VarianceReport report = scalar_variance(grads);
  report.config_echo = fmt("experiment=grad_mc kind=%s n=%zu batch_size=%zu seed=%llu",
                           loss_kind_name(kind).c_str(), dataset.size(), batch_size,
                           static_cast<unsigned long long>(seed));
  return report;
}

VarianceReport grad_variance_exact(LossKind kind, const LabeledDataset& dataset,
                                   std::size_t batch_size) {
  check_batch_args(kind, dataset, batch_size);
  const std::size_t n = dataset.size();

  // Walk every size-k combination in lexicographic order.
  std::vector<std::size_t> combo(batch_size);
  for (std::size_t i = 0; i < batch_size; ++i) combo[i] = i;
  const Tensor w = Tensor::identity(dataset.dim());
  std::vector<Tensor> grads;
  while (true) {
    grads.push_back(batch_gradient(kind, dataset, combo, w));
    if (grads.size() > 100000) {
      throw std::invalid_argument("grad_variance_exact: too many batches to enumerate");
    }
    // Advance: find the rightmost index that can still move up.
    std::size_t i = batch_size;
    while (i > 0 && combo[i - 1] == n - batch_size + i - 1) --i;
    if (i == 0) break;
    ++combo[i - 1];
    for (std::size_t j = i; j < batch_size; ++j) combo[j] = combo[j - 1] + 1;
  }

  // This is the whole batch distribution, so report the population variance
  // (mean squared deviation over all equally likely batches) with no
  // sampling error.
  const std::size_t count = grads.size();
  const std::size_t dim = grads.front().size();
  std::vector<double> mean(dim, 0.0);
  for (const Tensor& g : grads) {
    for (std::size_t j = 0; j < dim; ++j) mean[j] += g.data[j];
  }
  for (double& m : mean) m /= static_cast<double>(count);
  double estimate = 0.0;
  for (const Tensor& g : grads) {
    for (std::size_t j = 0; j < dim; ++j) {
      const double diff = g.data[j] - mean[j];
      estimate += diff * diff;
    }
  }
  estimate /= static_cast<double>(count);

  VarianceReport report;
  report.estimate = estimate;
  report.standard_error = 0.0;
  report.n_samples = count;
  report.config_echo = fmt("experiment=grad_exact kind=%s n=%zu batch_size=%zu",
                           loss_kind_name(kind).c_str(), n, batch_size);
  return report;
}

Tensor parallel_sgd_epoch(LossKind kind, const LabeledDataset& dataset,
                          const Partition& partition, double lr, const Tensor& w0) {
  check_partition(partition, dataset.size());
  Tensor w = w0;
  for (const std::vector<std::size_t>& batch : partition) {
    const Tensor grad = batch_gradient(kind, dataset, batch, w0);
    for (std::size_t j = 0; j < w.size(); ++j) w.data[j] -= lr * grad.data[j];
  }
  return w;
}

VarianceReport partition_variance(LossKind kind, const LabeledDataset& dataset,
                                  std::size_t batch_size, std::size_t n_partitions, double lr,
                                  std::uint64_t seed) {
  check_batch_args(kind, dataset, batch_size);
  if (n_partitions < 2) {
    throw std::invalid_argument("partition_variance: need at least two partitions");
  }
  const Tensor w0 = Tensor::identity(dataset.dim());
  std::vector<Tensor> ends;
  ends.reserve(n_partitions);
  for (std::size_t p = 0; p < n_partitions; ++p) {
    const Partition partition = make_partition(dataset.size(), batch_size, derive_seed(seed, p));
    ends.push_back(parallel_sgd_epoch(kind, dataset, partition, lr, w0));
  }
  VarianceReport report = scalar_variance(ends);
  report.config_echo =
      fmt("experiment=partition kind=%s n=%zu batch_size=%zu lr=%g seed=%llu",
          loss_kind_name(kind).c_str(), dataset.size(), batch_size, lr,
          static_cast<unsigned long long>(seed));
  return report;
}

Partition class_interleaved_partition(const LabeledDataset& dataset, std::size_t batch_size) {
  const std::vector<std::vector<std::size_t>> classes = indices_by_class(dataset);
  for (const auto& c : classes) {
    if (c.size() != classes.front().size()) {
      throw std::invalid_argument("class_interleaved_partition: classes must be equal-sized");
    }
  }
  if (batch_size % classes.size() != 0) {
    throw std::invalid_argument(
        "class_interleaved_partition: batch size must be a multiple of the class count");
  }
  std::vector<std::size_t> order;
  order.reserve(dataset.size());
  for (std::size_t i = 0; i < classes.front().size(); ++i) {
    for (const auto& c : classes) order.push_back(c[i]);
  }
  return chop(order, batch_size);
}

Partition class_blocked_partition(const LabeledDataset& dataset, std::size_t batch_size) {
  const std::vector<std::vector<std::size_t>> classes = indices_by_class(dataset);
  std::vector<std::size_t> order;
  order.reserve(dataset.size());
  for (const auto& c : classes) {
    if (c.size() % batch_size != 0) {
      throw std::invalid_argument(
          "class_blocked_partition: each class size must be a multiple of the batch size");
    }
    order.insert(order.end(), c.begin(), c.end());
  }
  return chop(order, batch_size);
}

namespace {

// One SGD step on a minibatch for the trajectory experiment, through the
// tape. Targets: sampled spectral views for the self-supervised kind,
// teacher rows for distillation, one-hot label rows for the supervised kind.
void trajectory_step(LossKind kind, Encoder& enc, const LabeledDataset& dataset,
                     const std::vector<std::size_t>& batch, const TrajectoryTrainConfig& cfg,
                     Rng& rng) {
  const Tensor rows = gather_rows(dataset.inputs, batch);

  Graph g;
  std::vector<Tensor> weights;
  std::vector<Tensor> biases;
  std::vector<Tensor> leaves;
  for (const Tensor& w : enc.weights) {
    weights.push_back(g.input(w));
    leaves.push_back(weights.back());
  }
  for (const Tensor& b : enc.biases) {
    biases.push_back(g.input(b));
    leaves.push_back(biases.back());
  }

  Tensor loss;
  switch (kind) {
    case LossKind::kSelfSupervised: {
      // Stacked views, example-major: row views*i+a is view a of example i.
      const std::size_t d = dataset.dim();
      Tensor stacked = Tensor::zeros({batch.size() * cfg.views, d});
      for (std::size_t i = 0; i < batch.size(); ++i) {
        for (std::size_t a = 0; a < cfg.views; ++a) {
          for (std::size_t j = 0; j < d; ++j) {
            stacked.data[(i * cfg.views + a) * d + j] =
                rows.at(i, j) + cfg.sigma_aug * rng.normal();
          }
        }
      }
      const Tensor reps = forward_layers(weights, biases, enc.spec.activation, stacked);
      loss = spectral_loss_from_reps(reps, batch.size(), cfg.views);
      break;
    }
    case LossKind::kKnowledgeDistillation: {
      const Tensor reps = forward_layers(weights, biases, enc.spec.activation, rows);
      loss = kd_mse_expr(reps, gather_rows(cfg.teacher_reps, batch));
      break;
    }
    case LossKind::kSupervised: {
      const Tensor reps = forward_layers(weights, biases, enc.spec.activation, rows);
      Tensor targets = Tensor::zeros({batch.size(), enc.spec.out_dim()});
      for (std::size_t i = 0; i < batch.size(); ++i) {
        const std::uint32_t y = dataset.labels.at(batch[i]);
        if (y >= enc.spec.out_dim()) {
          throw std::invalid_argument(fmt("label %u does not fit output width %zu", y,
                                          enc.spec.out_dim()));
        }
        targets.at(i, y) = 1.0;
      }
      loss = kd_mse_expr(reps, targets);  // mean squared distance to one-hot rows
      break;
    }
  }

  GradientMap grads = g.backward(loss, leaves);
  std::size_t leaf = 0;
  for (Tensor& w : enc.weights) {
    const Tensor& dw = grads.at(leaves[leaf++]);
    for (std::size_t j = 0; j < w.size(); ++j) w.data[j] -= cfg.lr * dw.data[j];
  }
  for (Tensor& b : enc.biases) {
    const Tensor& db = grads.at(leaves[leaf++]);
    for (std::size_t j = 0; j < b.size(); ++j) b.data[j] -= cfg.lr * db.data[j];
  }
}

}  // namespace

std::vector<VarianceReport> trajectory_variance(LossKind kind, const LabeledDataset& dataset,
                                                const Encoder& init, std::size_t n_runs,
                                                const std::vector<std::size_t>& lengths,
                                                const TrajectoryTrainConfig& cfg,
                                                std::uint64_t seed) {
  if (n_runs < 2) throw std::invalid_argument("trajectory_variance: need at least two runs");
  if (lengths.empty()) throw std::invalid_argument("trajectory_variance: lengths is empty");
  for (std::size_t i = 1; i < lengths.size(); ++i) {
    if (lengths[i] <= lengths[i - 1]) {
      throw std::invalid_argument("trajectory_variance: lengths must be strictly increasing");
    }
  }
  check_batch_args(kind, dataset, cfg.batch_size);
  if (kind == LossKind::kSelfSupervised && cfg.views < 2) {
    throw std::invalid_argument("trajectory_variance: the self-supervised kind needs >= 2 views");
  }
  if (kind == LossKind::kKnowledgeDistillation &&
      (cfg.teacher_reps.rank() != 2 || cfg.teacher_reps.rows() != dataset.size() ||
       cfg.teacher_reps.cols() != init.spec.out_dim())) {
    throw std::invalid_argument(
        "trajectory_variance: teacher_reps must be one row per example, "
        "matching the student output width");
  }

  const std::size_t max_len = lengths.back();
  // ends[l][r] = flattened weights of run r after lengths[l] epochs.
  std::vector<std::vector<Tensor>> ends(lengths.size());

  for (std::size_t r = 0; r < n_runs; ++r) {
    Encoder enc = init;
    Rng rng(derive_seed(seed, r));
    std::size_t next = 0;
    if (next < lengths.size() && lengths[next] == 0) {
      ends[next++].push_back(flatten(enc).values);
    }
    for (std::size_t epoch = 1; epoch <= max_len; ++epoch) {
      const std::vector<std::size_t> order = rng.permutation(dataset.size());
      for (const std::vector<std::size_t>& batch : chop(order, cfg.batch_size)) {
        trajectory_step(kind, enc, dataset, batch, cfg, rng);
      }
      if (next < lengths.size() && lengths[next] == epoch) {
        ends[next++].push_back(flatten(enc).values);
      }
    }
  }

  std::vector<VarianceReport> reports;
  for (std::size_t l = 0; l < lengths.size(); ++l) {
    VarianceReport report = scalar_variance(ends[l]);
    report.config_echo =
        fmt("experiment=trajectory kind=%s length=%zu n_runs=%zu batch_size=%zu lr=%g seed=%llu",
            loss_kind_name(kind).c_str(), lengths[l], n_runs, cfg.batch_size, cfg.lr,
            static_cast<unsigned long long>(seed));
    reports.push_back(std::move(report));
  }
  return reports;
}

void write_variance_csv(const std::string& path, const std::vector<VarianceCsvRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("write_variance_csv: cannot open " + path);
  out << "experiment,loss_kind,param,value,estimate,stderr,n_samples\n";
  for (const VarianceCsvRow& row : rows) {
    out << row.experiment << ',' << row.loss_kind << ',' << row.param << ','
        << csv_double(row.value) << ',' << csv_double(row.estimate) << ','
        << csv_double(row.standard_error) << ',' << row.n_samples << '\n';
  }
  if (!out.flush()) throw std::runtime_error("write_variance_csv: write failed for " + path);
}

}  // namespace mkdt
