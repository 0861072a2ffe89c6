#include "mkdt/datagen.hpp"

#include <istream>
#include <ostream>
#include <stdexcept>

#include "mkdt/serialize.hpp"

namespace mkdt {

namespace {
constexpr char kDatasetMagic[8] = {'M', 'K', 'D', 'T', 'D', 'A', 'T', 'A'};
constexpr std::uint32_t kDatasetVersion = 1;
}  // namespace

void validate(const SparseCodingConfig& cfg) {
  if (cfg.d == 0) throw std::invalid_argument("sparse coding config: d must be positive");
  if (cfg.num_classes == 0) {
    throw std::invalid_argument("sparse coding config: num_classes must be positive");
  }
  if (cfg.num_classes > cfg.d) {
    throw std::invalid_argument("sparse coding config: num_classes " +
                                std::to_string(cfg.num_classes) + " exceeds dimension " +
                                std::to_string(cfg.d) + " (one basis vector per class)");
  }
  if (cfg.n == 0 || cfg.n % cfg.num_classes != 0) {
    throw std::invalid_argument("sparse coding config: n=" + std::to_string(cfg.n) +
                                " must be a positive multiple of num_classes=" +
                                std::to_string(cfg.num_classes));
  }
  if (cfg.sigma_noise < 0 || cfg.sigma_aug < 0) {
    throw std::invalid_argument("sparse coding config: noise scales must be nonnegative");
  }
  if (cfg.m == 0) throw std::invalid_argument("sparse coding config: m must be at least 1");
}

LabeledDataset generate_sparse_coding(const SparseCodingConfig& cfg) {
  validate(cfg);
  Rng rng(derive_seed(cfg.seed, 0));

  LabeledDataset out;
  out.inputs = Tensor::zeros({cfg.n, cfg.d});
  out.labels.resize(cfg.n);
  const std::size_t per_class = cfg.n / cfg.num_classes;
  for (std::size_t i = 0; i < cfg.n; ++i) {
    const std::size_t k = i / per_class;
    out.labels[i] = static_cast<std::uint32_t>(k);
    double* row = out.inputs.data.data() + i * cfg.d;
    for (std::size_t j = 0; j < cfg.d; ++j) row[j] = rng.normal(0.0, cfg.sigma_noise);
    row[k] += 1.0;
  }
  out.metadata = "sparse-coding d=" + std::to_string(cfg.d) +
                 " classes=" + std::to_string(cfg.num_classes) + " n=" + std::to_string(cfg.n) +
                 " seed=" + std::to_string(cfg.seed);
  return out;
}

Tensor augment(const Tensor& x, std::size_t m, double sigma_aug, Rng& rng) {
  if (x.rank() != 1) {
    throw std::invalid_argument("augment: expected a rank-1 example, got shape " +
                                shape_str(x.shape));
  }
  if (m == 0) throw std::invalid_argument("augment: need at least one view");
  const std::size_t d = x.size();
  Tensor views = Tensor::zeros({m, d});
  for (std::size_t v = 0; v < m; ++v)
    for (std::size_t j = 0; j < d; ++j) views.data[v * d + j] = x.data[j] + rng.normal(0.0, sigma_aug);
  return views;
}

Tensor augment(const Tensor& x, std::size_t m, double sigma_aug, std::uint64_t seed) {
  Rng rng(seed);
  return augment(x, m, sigma_aug, rng);
}

Partition make_partition(std::size_t n, std::size_t batch_size, std::uint64_t seed) {
  if (n == 0 || batch_size == 0 || n % batch_size != 0) {
    throw std::invalid_argument("make_partition: batch size " + std::to_string(batch_size) +
                                " must divide dataset size " + std::to_string(n));
  }
  Rng rng(seed);
  std::vector<std::size_t> order = rng.permutation(n);
  Partition batches(n / batch_size);
  for (std::size_t b = 0; b < batches.size(); ++b) {
    batches[b].assign(order.begin() + static_cast<std::ptrdiff_t>(b * batch_size),
                      order.begin() + static_cast<std::ptrdiff_t>((b + 1) * batch_size));
  }
  return batches;
}

Partition make_partition(const LabeledDataset& dataset, std::size_t batch_size,
                         std::uint64_t seed) {
  return make_partition(dataset.size(), batch_size, seed);
}

void check_partition(const Partition& partition, std::size_t n) {
  std::vector<bool> seen(n, false);
  std::size_t count = 0;
  const std::size_t batch = partition.empty() ? 0 : partition[0].size();
  for (const auto& b : partition) {
    if (b.size() != batch) throw std::logic_error("partition: unequal batch sizes");
    for (std::size_t i : b) {
      if (i >= n) throw std::logic_error("partition: index out of range");
      if (seen[i]) throw std::logic_error("partition: index " + std::to_string(i) + " repeated");
      seen[i] = true;
      ++count;
    }
  }
  if (count != n) throw std::logic_error("partition: does not cover the dataset");
}

void save_dataset(const std::string& path, const LabeledDataset& dataset) {
  if (!dataset.inputs.all_finite()) {
    throw std::invalid_argument("save_dataset: inputs contain non-finite entries");
  }
  if (dataset.has_labels() && dataset.labels.size() != dataset.size()) {
    throw std::invalid_argument("save_dataset: label count does not match example count");
  }
  io::save_file(path, [&](std::ostream& out) {
    io::write_header(out, kDatasetMagic, kDatasetVersion);
    io::write_u32(out, dataset.has_labels() ? 1u : 0u);
    io::write_u32(out, static_cast<std::uint32_t>(dataset.size()));
    io::write_tensor(out, dataset.inputs);
    if (dataset.has_labels()) {
      for (std::uint32_t l : dataset.labels) io::write_u32(out, l);
    }
  });
}

LabeledDataset load_dataset(const std::string& path) {
  LabeledDataset dataset;
  io::load_file(path, [&](std::istream& in) {
    io::check_header(in, kDatasetMagic, kDatasetVersion, "dataset");
    const std::uint32_t flags = io::read_u32(in, "dataset flags");
    const std::uint32_t n = io::read_u32(in, "dataset size");
    dataset.inputs = io::read_tensor(in, "dataset inputs");
    if (dataset.size() != n) {
      throw io::TruncatedError("dataset: header count " + std::to_string(n) +
                               " disagrees with inputs tensor rows");
    }
    if (flags & 1u) {
      dataset.labels.resize(n);
      for (std::uint32_t i = 0; i < n; ++i) dataset.labels[i] = io::read_u32(in, "dataset labels");
    }
  });
  return dataset;
}

}  // namespace mkdt
