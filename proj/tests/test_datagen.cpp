#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "doctest.h"
#include "mkdt/datagen.hpp"
#include "mkdt/serialize.hpp"

using namespace mkdt;

namespace {

SparseCodingConfig small_config() {
  SparseCodingConfig cfg;
  cfg.d = 4;
  cfg.num_classes = 2;
  cfg.n = 4;
  cfg.sigma_noise = 0.0;
  cfg.seed = 7;
  return cfg;
}

// Canonical form of an unordered partition: sort within batches, then sort
// batches, then flatten.
std::vector<std::size_t> canonical(Partition p) {
  for (auto& b : p) std::sort(b.begin(), b.end());
  std::sort(p.begin(), p.end());
  std::vector<std::size_t> flat;
  for (const auto& b : p) flat.insert(flat.end(), b.begin(), b.end());
  return flat;
}

}  // namespace

TEST_CASE("zero-noise generation produces exact basis vectors, class-major") {
  LabeledDataset data = generate_sparse_coding(small_config());
  CHECK(data.size() == 4);
  CHECK(data.dim() == 4);
  Tensor expected({4, 4}, {1, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0});
  CHECK(tensors_equal(data.inputs, expected));
  CHECK(data.labels == std::vector<std::uint32_t>{0, 0, 1, 1});
}

TEST_CASE("classes are balanced") {
  SparseCodingConfig cfg = small_config();
  cfg.n = 60;
  cfg.sigma_noise = 0.3;
  LabeledDataset data = generate_sparse_coding(cfg);
  std::size_t per_class[2] = {0, 0};
  for (auto l : data.labels) per_class[l]++;
  CHECK(per_class[0] == 30);
  CHECK(per_class[1] == 30);
}

TEST_CASE("per-class sample statistics match the generative model") {
  SparseCodingConfig cfg;
  cfg.d = 4;
  cfg.num_classes = 2;
  cfg.n = 10000;
  cfg.sigma_noise = 0.5;
  cfg.seed = 123;
  LabeledDataset data = generate_sparse_coding(cfg);

  for (std::size_t k = 0; k < 2; ++k) {
    std::vector<double> mean(cfg.d, 0.0);
    std::size_t count = 0;
    for (std::size_t i = 0; i < cfg.n; ++i) {
      if (data.labels[i] != k) continue;
      ++count;
      for (std::size_t j = 0; j < cfg.d; ++j) mean[j] += data.inputs.at(i, j);
    }
    for (double& v : mean) v /= static_cast<double>(count);
    for (std::size_t j = 0; j < cfg.d; ++j) {
      const double target = (j == k) ? 1.0 : 0.0;
      CHECK(std::abs(mean[j] - target) < 0.02);
    }

    // Empirical covariance should be close to sigma^2 I.
    for (std::size_t a = 0; a < cfg.d; ++a)
      for (std::size_t b = 0; b < cfg.d; ++b) {
        double cov = 0.0;
        for (std::size_t i = 0; i < cfg.n; ++i) {
          if (data.labels[i] != k) continue;
          cov += (data.inputs.at(i, a) - mean[a]) * (data.inputs.at(i, b) - mean[b]);
        }
        cov /= static_cast<double>(count);
        const double target = (a == b) ? 0.25 : 0.0;
        CHECK(std::abs(cov - target) < 0.05);
      }
  }
}

TEST_CASE("zero noise means zero within-class scatter") {
  SparseCodingConfig cfg = small_config();
  cfg.n = 40;
  LabeledDataset data = generate_sparse_coding(cfg);
  for (std::size_t i = 1; i < 20; ++i)
    for (std::size_t j = 0; j < cfg.d; ++j)
      CHECK(data.inputs.at(i, j) == data.inputs.at(0, j));
}

TEST_CASE("generation is deterministic per seed") {
  SparseCodingConfig cfg = small_config();
  cfg.sigma_noise = 0.7;
  LabeledDataset a = generate_sparse_coding(cfg);
  LabeledDataset b = generate_sparse_coding(cfg);
  CHECK(tensors_equal(a.inputs, b.inputs));
  cfg.seed = 8;
  LabeledDataset c = generate_sparse_coding(cfg);
  CHECK_FALSE(tensors_equal(a.inputs, c.inputs));
}

TEST_CASE("config validation") {
  SparseCodingConfig cfg = small_config();
  cfg.n = 5;  // not divisible by 2 classes
  CHECK_THROWS_AS(generate_sparse_coding(cfg), std::invalid_argument);
  cfg = small_config();
  cfg.num_classes = 5;  // more classes than dimensions
  CHECK_THROWS_AS(generate_sparse_coding(cfg), std::invalid_argument);
  cfg = small_config();
  cfg.sigma_noise = -0.1;
  CHECK_THROWS_AS(generate_sparse_coding(cfg), std::invalid_argument);
}

TEST_CASE("augmentation views") {
  Tensor x({3}, {1.0, -2.0, 0.5});

  SUBCASE("zero augmentation noise copies the example") {
    Tensor views = augment(x, 4, 0.0, std::uint64_t{5});
    for (std::size_t v = 0; v < 4; ++v)
      for (std::size_t j = 0; j < 3; ++j) CHECK(views.at(v, j) == x.data[j]);
  }

  SUBCASE("view mean approaches the example") {
    Tensor views = augment(x, 10000, 0.4, std::uint64_t{11});
    for (std::size_t j = 0; j < 3; ++j) {
      double mean = 0.0;
      for (std::size_t v = 0; v < 10000; ++v) mean += views.at(v, j);
      mean /= 10000.0;
      CHECK(std::abs(mean - x.data[j]) < 0.03);
    }
  }

  SUBCASE("distinct seeds give distinct views") {
    Tensor a = augment(x, 3, 0.2, std::uint64_t{1});
    Tensor b = augment(x, 3, 0.2, std::uint64_t{2});
    CHECK_FALSE(tensors_equal(a, b));
  }
}

TEST_CASE("partitions are exact set partitions") {
  SUBCASE("two batches of two") {
    Partition p = make_partition(4, 2, 3);
    REQUIRE(p.size() == 2);
    CHECK(p[0].size() == 2);
    CHECK(p[1].size() == 2);
    check_partition(p, 4);
  }
  SUBCASE("single batch covers everything") {
    Partition p = make_partition(4, 4, 3);
    REQUIRE(p.size() == 1);
    check_partition(p, 4);
  }
  SUBCASE("divisibility enforced") {
    CHECK_THROWS_AS(make_partition(5, 2, 0), std::invalid_argument);
  }
  SUBCASE("property sweep") {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
      check_partition(make_partition(24, 4, seed), 24);
    }
  }
}

TEST_CASE("seeded partitions are uniform over the 15 pairings of six items") {
  // All ways to split {0..5} into three unordered pairs.
  std::map<std::vector<std::size_t>, int> counts;
  const int trials = 3000;
  for (int seed = 0; seed < trials; ++seed) {
    counts[canonical(make_partition(6, 2, static_cast<std::uint64_t>(seed)))]++;
  }
  REQUIRE(counts.size() == 15);
  const double p = 1.0 / 15.0;
  const double sigma = std::sqrt(trials * p * (1 - p));
  for (const auto& [key, count] : counts) {
    CHECK(std::abs(count - trials * p) < 3.5 * sigma);
  }
}

TEST_CASE("dataset container round trip and error handling") {
  SparseCodingConfig cfg = small_config();
  cfg.sigma_noise = 0.25;
  cfg.n = 12;
  LabeledDataset data = generate_sparse_coding(cfg);
  const std::string path = "test_dataset.bin";

  save_dataset(path, data);
  LabeledDataset back = load_dataset(path);
  CHECK(tensors_equal(back.inputs, data.inputs));
  CHECK(back.labels == data.labels);

  SUBCASE("unlabeled round trip") {
    LabeledDataset unlabeled{data.inputs, {}, ""};
    save_dataset(path, unlabeled);
    LabeledDataset u = load_dataset(path);
    CHECK_FALSE(u.has_labels());
    CHECK(tensors_equal(u.inputs, data.inputs));
  }

  SUBCASE("bad magic is reported as such") {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << "NOTMAGIC" << std::string(64, '\0');
    out.close();
    CHECK_THROWS_AS(load_dataset(path), io::BadMagicError);
  }

  SUBCASE("version mismatch is reported as such") {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << "MKDTDATA";
    const unsigned char version9[4] = {9, 0, 0, 0};
    out.write(reinterpret_cast<const char*>(version9), 4);
    out.close();
    CHECK_THROWS_AS(load_dataset(path), io::BadVersionError);
  }

  SUBCASE("truncation is reported as such") {
    save_dataset(path, data);
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    out.close();
    CHECK_THROWS_AS(load_dataset(path), io::TruncatedError);
  }

  std::remove(path.c_str());
}
