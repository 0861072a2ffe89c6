#include "mkdt/manifest.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "mkdt/models.hpp"
#include "mkdt/serialize.hpp"

namespace mkdt {

std::uint64_t fnv1a_64(const void* data, std::size_t size, std::uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t hash_bytes(std::string_view bytes) { return fnv1a_64(bytes.data(), bytes.size()); }

std::uint64_t hash_tensor(const Tensor& t) {
  std::ostringstream buf(std::ios::binary);
  io::write_tensor(buf, t);
  const std::string bytes = buf.str();
  return hash_bytes(bytes);
}

std::uint64_t hash_encoder(const Encoder& encoder) {
  std::ostringstream buf(std::ios::binary);
  io::write_u32(buf, static_cast<std::uint32_t>(encoder.spec.dims.size()));
  for (std::size_t d : encoder.spec.dims) io::write_u64(buf, d);
  io::write_u32(buf, static_cast<std::uint32_t>(encoder.spec.activation));
  io::write_u32(buf, encoder.spec.bias ? 1 : 0);
  for (const Tensor& w : encoder.weights) io::write_tensor(buf, w);
  for (const Tensor& b : encoder.biases) io::write_tensor(buf, b);
  const std::string bytes = buf.str();
  return hash_bytes(bytes);
}

std::uint64_t hash_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("hash_file: cannot open " + path);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char chunk[65536];
  while (in.read(chunk, sizeof(chunk)) || in.gcount() > 0) {
    h = fnv1a_64(chunk, static_cast<std::size_t>(in.gcount()), h);
  }
  return h;
}

ManifestEntry manifest_entry_for(const std::string& path) {
  ManifestEntry entry;
  entry.path = path;
  entry.content_hash = hash_file(path);
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  entry.bytes = static_cast<std::uint64_t>(in.tellg());
  return entry;
}

void write_run_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  std::vector<ManifestEntry> sorted = entries;
  std::sort(sorted.begin(), sorted.end(),
            [](const ManifestEntry& a, const ManifestEntry& b) { return a.path < b.path; });
  nlohmann::json doc;
  doc["artifacts"] = nlohmann::json::array();
  for (const ManifestEntry& e : sorted) {
    char hex[17];
    std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(e.content_hash));
    doc["artifacts"].push_back({{"path", e.path}, {"hash", hex}, {"bytes", e.bytes}});
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("write_run_manifest: cannot open " + path);
  out << doc.dump(2) << '\n';
  if (!out.flush()) throw std::runtime_error("write_run_manifest: write failed for " + path);
}

}  // namespace mkdt
