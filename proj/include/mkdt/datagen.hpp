#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mkdt/rng.hpp"
#include "mkdt/tensor.hpp"

namespace mkdt {

/// Sparse-coding data model: example i of class k is e_k + noise, where e_k
/// is the k-th standard basis vector of R^d.
struct SparseCodingConfig {
  std::size_t d = 8;            // ambient dimension
  std::size_t num_classes = 2;  // K; class k uses basis vector e_k
  std::size_t n = 100;          // total examples, split evenly across classes
  double sigma_noise = 0.1;     // per-coordinate std of the data noise
  double sigma_aug = 0.1;       // per-coordinate std of augmentation noise
  std::size_t m = 2;            // augmented views per example
  std::uint64_t seed = 0;
};

/// Throws std::invalid_argument naming the violated constraint.
void validate(const SparseCodingConfig& cfg);

struct LabeledDataset {
  Tensor inputs;                      // n x d
  std::vector<std::uint32_t> labels;  // empty when the dataset is unlabeled
  std::string metadata;               // provenance note; not persisted

  std::size_t size() const { return inputs.rank() == 0 ? 0 : inputs.shape[0]; }
  std::size_t dim() const { return inputs.rank() < 2 ? 0 : inputs.shape[1]; }
  bool has_labels() const { return !labels.empty(); }
};

/// Ordered disjoint mini-batches covering 0..n-1, all the same size.
using Partition = std::vector<std::vector<std::size_t>>;

/// Class-major dataset: the first n/K rows belong to class 0, and so on.
/// Noise is drawn row by row, coordinate by coordinate, from the seeded
/// stream, so a config is reproducible bit for bit.
LabeledDataset generate_sparse_coding(const SparseCodingConfig& cfg);

/// m augmented views of a single example (rows of the result), each
/// x + sigma_aug * z with independent standard-normal z.
Tensor augment(const Tensor& x, std::size_t m, double sigma_aug, Rng& rng);
Tensor augment(const Tensor& x, std::size_t m, double sigma_aug, std::uint64_t seed);

/// Uniformly random partition into consecutive equal batches of a shuffled
/// index range. n must be divisible by batch_size.
Partition make_partition(std::size_t n, std::size_t batch_size, std::uint64_t seed);
Partition make_partition(const LabeledDataset& dataset, std::size_t batch_size, std::uint64_t seed);

/// Verifies disjointness, coverage and equal batch sizes; throws otherwise.
void check_partition(const Partition& partition, std::size_t n);

void save_dataset(const std::string& path, const LabeledDataset& dataset);
LabeledDataset load_dataset(const std::string& path);

}  // namespace mkdt
