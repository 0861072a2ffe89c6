#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "mkdt/tensor.hpp"

namespace mkdt {

struct Encoder;

/// FNV-1a over a byte range, seedable so hashes can be chained.
std::uint64_t fnv1a_64(const void* data, std::size_t size,
                       std::uint64_t h = 0xcbf29ce484222325ULL);
std::uint64_t hash_bytes(std::string_view bytes);

/// Hash of a tensor's serialized form (shape and payload), so the value is
/// stable across runs and matches what lands on disk.
std::uint64_t hash_tensor(const Tensor& t);

/// Hash of an encoder: spec (dims, activation, bias flag) plus parameters.
std::uint64_t hash_encoder(const Encoder& encoder);

/// Content hash of a file on disk. Throws std::runtime_error if unreadable.
std::uint64_t hash_file(const std::string& path);

/// One artifact produced by a pipeline run.
struct ManifestEntry {
  std::string path;
  std::uint64_t content_hash = 0;
  std::uint64_t bytes = 0;
};

/// JSON manifest of produced artifacts, keyed by path, with content hashes.
/// Contains nothing run-dependent beyond the listed files, so reruns of a
/// deterministic pipeline write byte-identical manifests.
void write_run_manifest(const std::string& path, const std::vector<ManifestEntry>& entries);
ManifestEntry manifest_entry_for(const std::string& path);

}  // namespace mkdt
