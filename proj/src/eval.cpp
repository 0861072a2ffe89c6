#include "mkdt/eval.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <exception>
#include <fstream>
#include <limits>
#include <mutex>
#include <numeric>
#include <stdexcept>
#include <thread>

#include "mkdt/autodiff.hpp"
#include "mkdt/losses.hpp"
#include "mkdt/rng.hpp"

namespace mkdt {

namespace {

std::string fmt(const char* pattern, ...) {
  va_list args;
  va_start(args, pattern);
  char buffer[256];
  std::vsnprintf(buffer, sizeof(buffer), pattern, args);
  va_end(args);
  return buffer;
}

// Shortest decimal form that round-trips to the same double.
std::string csv_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace

void validate(const ProbeConfig& cfg) {
  if (cfg.l2_weight < 0.0) {
    throw std::invalid_argument(fmt("l2_weight must be >= 0, got %g", cfg.l2_weight));
  }
  if (!(cfg.label_fraction > 0.0) || cfg.label_fraction > 1.0) {
    throw std::invalid_argument(
        fmt("label_fraction must lie in (0, 1], got %g", cfg.label_fraction));
  }
  if (!(cfg.holdout_fraction > 0.0) || !(cfg.holdout_fraction < 1.0)) {
    throw std::invalid_argument(
        fmt("holdout_fraction must lie in (0, 1), got %g", cfg.holdout_fraction));
  }
  if (cfg.max_iterations == 0) {
    throw std::invalid_argument("max_iterations must be >= 1");
  }
  if (!(cfg.grad_tolerance > 0.0)) {
    throw std::invalid_argument(fmt("grad_tolerance must be > 0, got %g", cfg.grad_tolerance));
  }
}

// ---------------------------------------------------------------------------
// The convex classifier.
// ---------------------------------------------------------------------------

namespace {

// Packed parameter layout: the weight matrix row-major, then the biases.
struct Objective {
  const Tensor& features;
  const std::vector<std::uint32_t>& labels;
  std::size_t num_classes;
  double l2_weight;

  std::size_t dim() const { return num_classes * (features.cols() + 1); }

  // Loss value and gradient at x. The log-sum-exp is max-shifted, so large
  // logits never overflow.
  double evaluate(const std::vector<double>& x, std::vector<double>* grad) const {
    const std::size_t n = features.rows();
    const std::size_t d = features.cols();
    const std::size_t k = num_classes;
    const double inv_n = 1.0 / static_cast<double>(n);
    if (grad != nullptr) grad->assign(dim(), 0.0);

    double loss = 0.0;
    std::vector<double> logits(k);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t c = 0; c < k; ++c) {
        double l = x[k * d + c];  // bias
        for (std::size_t j = 0; j < d; ++j) l += x[c * d + j] * features.at(i, j);
        logits[c] = l;
      }
      const double peak = *std::max_element(logits.begin(), logits.end());
      double sum = 0.0;
      for (double l : logits) sum += std::exp(l - peak);
      loss += inv_n * (std::log(sum) + peak - logits[labels[i]]);
      if (grad == nullptr) continue;
      for (std::size_t c = 0; c < k; ++c) {
        const double residual = std::exp(logits[c] - peak) / sum -
                                (labels[i] == c ? 1.0 : 0.0);
        for (std::size_t j = 0; j < d; ++j) {
          (*grad)[c * d + j] += inv_n * residual * features.at(i, j);
        }
        (*grad)[k * d + c] += inv_n * residual;
      }
    }
    for (std::size_t e = 0; e < k * d; ++e) {
      loss += l2_weight * x[e] * x[e];
      if (grad != nullptr) (*grad)[e] += 2.0 * l2_weight * x[e];
    }
    return loss;
  }
};

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

double norm(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

}  // namespace

LogisticModel fit_multinomial_logistic(const Tensor& features,
                                       const std::vector<std::uint32_t>& labels,
                                       std::size_t num_classes, double l2_weight,
                                       std::size_t max_iterations, double grad_tolerance,
                                       std::size_t* iterations_out, double* grad_norm_out) {
  if (features.rank() != 2) {
    throw std::invalid_argument("probe features must be a rank-2 tensor");
  }
  if (labels.size() != features.rows()) {
    throw std::invalid_argument(fmt("got %zu labels for %zu feature rows", labels.size(),
                                    features.rows()));
  }
  if (labels.empty()) throw std::invalid_argument("cannot fit a probe on zero examples");
  if (num_classes < 2) throw std::invalid_argument("the probe needs at least two classes");
  for (std::uint32_t label : labels) {
    if (label >= num_classes) {
      throw std::invalid_argument(fmt("label %u out of range for %zu classes", label,
                                      num_classes));
    }
  }

  const Objective objective{features, labels, num_classes, l2_weight};
  std::vector<double> x(objective.dim(), 0.0);
  std::vector<double> grad;
  double loss = objective.evaluate(x, &grad);

  // Limited-memory quasi-Newton with a backtracking line search. History
  // pairs are only kept while they preserve positive curvature, so the
  // two-loop direction stays a descent direction on this convex objective.
  constexpr std::size_t kHistory = 10;
  std::vector<std::vector<double>> s_hist;
  std::vector<std::vector<double>> y_hist;
  std::vector<double> rho_hist;

  std::size_t iterations = 0;
  while (norm(grad) >= grad_tolerance && iterations < max_iterations) {
    ++iterations;

    // Two-loop recursion for the search direction.
    std::vector<double> direction = grad;
    std::vector<double> alpha(s_hist.size());
    for (std::size_t h = s_hist.size(); h-- > 0;) {
      alpha[h] = rho_hist[h] * dot(s_hist[h], direction);
      for (std::size_t e = 0; e < direction.size(); ++e) {
        direction[e] -= alpha[h] * y_hist[h][e];
      }
    }
    if (!s_hist.empty()) {
      const double gamma = dot(s_hist.back(), y_hist.back()) / dot(y_hist.back(), y_hist.back());
      for (double& e : direction) e *= gamma;
    }
    for (std::size_t h = 0; h < s_hist.size(); ++h) {
      const double beta = rho_hist[h] * dot(y_hist[h], direction);
      for (std::size_t e = 0; e < direction.size(); ++e) {
        direction[e] += (alpha[h] - beta) * s_hist[h][e];
      }
    }
    for (double& e : direction) e = -e;
    double slope = dot(grad, direction);
    if (!(slope < 0.0)) {  // numerical corner: fall back to steepest descent
      direction = grad;
      for (double& e : direction) e = -e;
      slope = -dot(grad, grad);
    }

    double step = 1.0;
    std::vector<double> x_next(x.size());
    std::vector<double> grad_next;
    double loss_next = loss;
    bool moved = false;
    for (int probe = 0; probe < 60; ++probe) {
      for (std::size_t e = 0; e < x.size(); ++e) x_next[e] = x[e] + step * direction[e];
      loss_next = objective.evaluate(x_next, &grad_next);
      if (loss_next <= loss + 1e-4 * step * slope) {
        moved = true;
        break;
      }
      step *= 0.5;
    }
    if (!moved) break;  // the line search hit floating-point resolution

    std::vector<double> s(x.size());
    std::vector<double> y(x.size());
    for (std::size_t e = 0; e < x.size(); ++e) {
      s[e] = x_next[e] - x[e];
      y[e] = grad_next[e] - grad[e];
    }
    const double curvature = dot(s, y);
    if (curvature > 1e-12) {
      if (s_hist.size() == kHistory) {
        s_hist.erase(s_hist.begin());
        y_hist.erase(y_hist.begin());
        rho_hist.erase(rho_hist.begin());
      }
      s_hist.push_back(std::move(s));
      y_hist.push_back(std::move(y));
      rho_hist.push_back(1.0 / curvature);
    }
    x = std::move(x_next);
    grad = std::move(grad_next);
    loss = loss_next;
  }

  if (iterations_out != nullptr) *iterations_out = iterations;
  if (grad_norm_out != nullptr) *grad_norm_out = norm(grad);

  LogisticModel model;
  const std::size_t d = features.cols();
  model.w = Tensor::zeros({num_classes, d});
  model.b = Tensor::zeros({1, num_classes});
  for (std::size_t c = 0; c < num_classes; ++c) {
    for (std::size_t j = 0; j < d; ++j) model.w.at(c, j) = x[c * d + j];
    model.b.at(0, c) = x[num_classes * d + c];
  }
  return model;
}

std::vector<std::uint32_t> predict(const LogisticModel& model, const Tensor& features) {
  if (features.rank() != 2 || features.cols() != model.w.cols()) {
    throw std::invalid_argument("prediction features do not match the probe's input width");
  }
  std::vector<std::uint32_t> labels(features.rows());
  for (std::size_t i = 0; i < features.rows(); ++i) {
    std::uint32_t best = 0;
    double best_logit = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < model.w.rows(); ++c) {
      double logit = model.b.at(0, c);
      for (std::size_t j = 0; j < model.w.cols(); ++j) {
        logit += model.w.at(c, j) * features.at(i, j);
      }
      if (logit > best_logit) {
        best_logit = logit;
        best = static_cast<std::uint32_t>(c);
      }
    }
    labels[i] = best;
  }
  return labels;
}

// ---------------------------------------------------------------------------
// Pre-training.
// ---------------------------------------------------------------------------

SyntheticDataset subset_as_synthetic(const LabeledDataset& dataset, const Tensor& teacher_reps,
                                     const std::vector<std::size_t>& indices, double alpha) {
  if (teacher_reps.rank() != 2 || teacher_reps.rows() != dataset.size()) {
    throw std::invalid_argument("teacher representations are not aligned with the dataset");
  }
  if (indices.empty()) throw std::invalid_argument("subset must be nonempty");
  for (std::size_t i : indices) {
    if (i >= dataset.size()) {
      throw std::invalid_argument(fmt("subset index %zu out of range for %zu examples", i,
                                      dataset.size()));
    }
  }
  if (!(alpha > 0.0)) throw std::invalid_argument("subset step size must be positive");

  SyntheticDataset syn;
  syn.init_indices = indices;
  syn.d_syn = gather_rows(dataset.inputs, indices);
  syn.z_syn = gather_rows(teacher_reps, indices);
  syn.alpha_syn = alpha;
  return syn;
}

Encoder pretrain_on_synthetic(const SyntheticDataset& syn, const EncoderSpec& arch,
                              std::size_t epochs, std::uint64_t seed) {
  if (arch.dims.empty() || arch.dims.front() != syn.d_syn.cols()) {
    throw std::invalid_argument("encoder input width does not match the synthetic data");
  }
  if (arch.dims.back() != syn.z_syn.cols()) {
    throw std::invalid_argument("encoder output width does not match the synthetic targets");
  }
  if (syn.d_syn.rows() != syn.z_syn.rows()) {
    throw std::invalid_argument("synthetic data and targets disagree on the example count");
  }
  if (!(syn.alpha_syn > 0.0)) {
    throw std::invalid_argument("synthetic step size must be positive");
  }

  Encoder enc = init_encoder(arch, InitScheme::kFanIn, derive_seed(seed, 0));
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    Graph g;
    std::vector<Tensor> weights;
    std::vector<Tensor> biases;
    std::vector<Tensor> leaves;
    for (std::size_t l = 0; l < enc.weights.size(); ++l) {
      weights.push_back(g.input(enc.weights[l]));
      leaves.push_back(weights.back());
      if (!enc.biases.empty()) {
        biases.push_back(g.input(enc.biases[l]));
        leaves.push_back(biases.back());
      }
    }
    const Tensor reps = forward_layers(weights, biases, arch.activation, syn.d_syn);
    const Tensor loss = kd_mse_expr(reps, syn.z_syn);
    GradientMap grads = g.backward(loss, leaves);

    std::size_t leaf = 0;
    for (std::size_t l = 0; l < enc.weights.size(); ++l) {
      Tensor* targets[2] = {&enc.weights[l],
                            enc.biases.empty() ? nullptr : &enc.biases[l]};
      for (Tensor* param : targets) {
        if (param == nullptr) continue;
        const Tensor& grad = grads.at(leaves[leaf++]);
        for (std::size_t j = 0; j < param->size(); ++j) {
          param->data[j] -= syn.alpha_syn * grad.data[j];
        }
      }
    }
  }
  return enc;
}

// ---------------------------------------------------------------------------
// The probe.
// ---------------------------------------------------------------------------

ProbeResult linear_probe(const Encoder& encoder, const LabeledDataset& dataset,
                         const ProbeConfig& cfg) {
  validate(cfg);
  if (dataset.size() == 0) throw std::invalid_argument("cannot probe an empty dataset");
  if (!dataset.has_labels()) throw std::invalid_argument("the probe needs a labeled dataset");

  const std::uint32_t num_classes =
      1 + *std::max_element(dataset.labels.begin(), dataset.labels.end());
  if (num_classes < 2) throw std::invalid_argument("the probe needs at least two classes");

  // Stratified split: per class, a shuffled holdout share (at least one
  // example) and the rest for training.
  std::vector<std::vector<std::size_t>> by_class(num_classes);
  for (std::size_t i = 0; i < dataset.size(); ++i) by_class[dataset.labels[i]].push_back(i);

  Rng rng(derive_seed(cfg.seed, 0));
  std::vector<std::size_t> labeled_train;
  std::vector<std::size_t> holdout;
  for (std::uint32_t c = 0; c < num_classes; ++c) {
    std::vector<std::size_t>& members = by_class[c];
    if (members.empty()) continue;  // an absent class index is not represented
    rng.shuffle(members);
    const auto hold = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::llround(cfg.holdout_fraction *
                                              static_cast<double>(members.size()))),
        1, members.size());
    const std::size_t train = members.size() - hold;
    if (train == 0) {
      throw std::invalid_argument(fmt("class %u has no training examples after the split", c));
    }
    holdout.insert(holdout.end(), members.begin(), members.begin() + hold);
    const auto labeled = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::llround(cfg.label_fraction * static_cast<double>(train))),
        1, train);
    labeled_train.insert(labeled_train.end(), members.begin() + hold,
                         members.begin() + hold + labeled);
  }

  const Tensor reps = forward(encoder, dataset.inputs);
  std::vector<std::uint32_t> train_labels(labeled_train.size());
  for (std::size_t i = 0; i < labeled_train.size(); ++i) {
    train_labels[i] = dataset.labels[labeled_train[i]];
  }

  ProbeResult result;
  result.config = cfg;
  result.train_labeled = labeled_train.size();
  result.holdout_size = holdout.size();
  const LogisticModel model = fit_multinomial_logistic(
      gather_rows(reps, labeled_train), train_labels, num_classes, cfg.l2_weight,
      cfg.max_iterations, cfg.grad_tolerance, &result.iterations, &result.grad_norm);

  const std::vector<std::uint32_t> predicted = predict(model, gather_rows(reps, holdout));
  std::vector<std::size_t> class_total(num_classes, 0);
  std::vector<std::size_t> class_correct(num_classes, 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < holdout.size(); ++i) {
    const std::uint32_t truth = dataset.labels[holdout[i]];
    class_total[truth] += 1;
    if (predicted[i] == truth) {
      class_correct[truth] += 1;
      correct += 1;
    }
  }
  result.accuracy = static_cast<double>(correct) / static_cast<double>(holdout.size());
  result.err = 1.0 - result.accuracy;
  result.per_class_accuracy.assign(num_classes,
                                   std::numeric_limits<double>::quiet_NaN());
  for (std::uint32_t c = 0; c < num_classes; ++c) {
    if (class_total[c] > 0) {
      result.per_class_accuracy[c] =
          static_cast<double>(class_correct[c]) / static_cast<double>(class_total[c]);
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Method comparison.
// ---------------------------------------------------------------------------

std::vector<MethodReport> compare_methods(const LabeledDataset& dataset,
                                          const std::vector<MethodSpec>& methods,
                                          const ProbeConfig& probe_cfg, std::size_t n_seeds,
                                          std::size_t n_threads) {
  validate(probe_cfg);
  if (methods.empty()) throw std::invalid_argument("no methods to compare");
  if (n_seeds == 0) throw std::invalid_argument("n_seeds must be >= 1");
  for (const MethodSpec& method : methods) {
    if (!method.make_encoder) {
      throw std::invalid_argument(fmt("method '%s' has no encoder factory",
                                      method.name.c_str()));
    }
  }

  // One independent probe per (method, seed) cell; a shared index dispenser
  // keeps the workers busy and the output slots fixed.
  std::vector<std::vector<ProbeResult>> cells(methods.size(),
                                              std::vector<ProbeResult>(n_seeds));
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  const auto worker = [&] {
    for (;;) {
      const std::size_t task = next.fetch_add(1);
      if (task >= methods.size() * n_seeds) return;
      try {
        const std::size_t m = task / n_seeds;
        const std::size_t s = task % n_seeds;
        ProbeConfig cell_cfg = probe_cfg;
        cell_cfg.seed = derive_seed(probe_cfg.seed, s);
        const Encoder enc = methods[m].make_encoder(cell_cfg.seed);
        cells[m][s] = linear_probe(enc, dataset, cell_cfg);
      } catch (...) {
        const std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        return;
      }
    }
  };
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (std::size_t t = 0; t < n_threads; ++t) threads.emplace_back(worker);
    for (std::thread& t : threads) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  std::vector<MethodReport> reports;
  for (std::size_t m = 0; m < methods.size(); ++m) {
    MethodReport report;
    report.method = methods[m].name;
    report.per_seed = std::move(cells[m]);
    double mean = 0.0;
    for (const ProbeResult& r : report.per_seed) {
      mean += r.accuracy / static_cast<double>(n_seeds);
    }
    double var = 0.0;
    if (n_seeds > 1) {
      for (const ProbeResult& r : report.per_seed) {
        var += (r.accuracy - mean) * (r.accuracy - mean) /
               static_cast<double>(n_seeds - 1);
      }
    }
    report.mean_accuracy = mean;
    report.std_accuracy = std::sqrt(var);
    reports.push_back(std::move(report));
  }
  return reports;
}

void write_compare_csv(const std::string& path, const std::vector<MethodReport>& reports) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error(fmt("cannot open '%s' for writing", path.c_str()));
  out << "method,seed,label_fraction,accuracy,err\n";
  for (const MethodReport& report : reports) {
    for (std::size_t s = 0; s < report.per_seed.size(); ++s) {
      const ProbeResult& r = report.per_seed[s];
      out << report.method << ',' << s << ',' << csv_double(r.config.label_fraction) << ','
          << csv_double(r.accuracy) << ',' << csv_double(r.err) << '\n';
    }
  }
  if (!out) throw std::runtime_error(fmt("failed while writing '%s'", path.c_str()));
}

}  // namespace mkdt
