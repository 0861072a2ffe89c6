#include "mkdt/serialize.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>

namespace mkdt::io {

namespace {

[[noreturn]] void fail_truncated(const std::string& what) {
  throw TruncatedError("truncated or unreadable stream while reading " + what);
}

void put_bytes(std::ostream& out, const unsigned char* bytes, std::size_t n) {
  out.write(reinterpret_cast<const char*>(bytes), static_cast<std::streamsize>(n));
  if (!out) throw std::runtime_error("write failed");
}

void get_bytes(std::istream& in, unsigned char* bytes, std::size_t n, const std::string& what) {
  in.read(reinterpret_cast<char*>(bytes), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) fail_truncated(what);
}

}  // namespace

void write_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  put_bytes(out, b, 4);
}

void write_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  put_bytes(out, b, 8);
}

void write_f64(std::ostream& out, double v) {
  write_u64(out, std::bit_cast<std::uint64_t>(v));
}

std::uint32_t read_u32(std::istream& in, const std::string& what) {
  unsigned char b[4];
  get_bytes(in, b, 4, what);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

std::uint64_t read_u64(std::istream& in, const std::string& what) {
  unsigned char b[8];
  get_bytes(in, b, 8, what);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

double read_f64(std::istream& in, const std::string& what) {
  return std::bit_cast<double>(read_u64(in, what));
}

void write_string(std::ostream& out, const std::string& s) {
  write_u64(out, s.size());
  if (!s.empty()) put_bytes(out, reinterpret_cast<const unsigned char*>(s.data()), s.size());
}

std::string read_string(std::istream& in, const std::string& what) {
  const std::uint64_t n = read_u64(in, what);
  std::string s(n, '\0');
  if (n > 0) get_bytes(in, reinterpret_cast<unsigned char*>(s.data()), n, what);
  return s;
}

void write_tensor(std::ostream& out, const Tensor& t) {
  write_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t e : t.shape) {
    if (e > std::numeric_limits<std::uint32_t>::max()) {
      throw std::invalid_argument("write_tensor: extent too large for the on-disk format");
    }
    write_u32(out, static_cast<std::uint32_t>(e));
  }
  for (double v : t.data) write_f64(out, v);
}

Tensor read_tensor(std::istream& in, const std::string& what) {
  const std::uint32_t rank = read_u32(in, what + " (tensor rank)");
  if (rank > 8) {
    throw TruncatedError("implausible tensor rank " + std::to_string(rank) + " while reading " +
                         what);
  }
  Shape shape(rank);
  for (std::uint32_t i = 0; i < rank; ++i) {
    shape[i] = read_u32(in, what + " (tensor extents)");
  }
  const std::size_t n = shape_numel(shape);
  if (n > (std::size_t{1} << 31)) {
    throw TruncatedError("implausible tensor size while reading " + what);
  }
  std::vector<double> data(n);
  for (std::size_t i = 0; i < n; ++i) data[i] = read_f64(in, what + " (tensor entries)");
  return Tensor(std::move(shape), std::move(data));
}

void write_header(std::ostream& out, const char magic[8], std::uint32_t version) {
  put_bytes(out, reinterpret_cast<const unsigned char*>(magic), 8);
  write_u32(out, version);
}

void check_header(std::istream& in, const char magic[8], std::uint32_t version,
                  const std::string& what) {
  char got[8];
  in.read(got, 8);
  if (in.gcount() != 8) fail_truncated(what + " header");
  if (std::memcmp(got, magic, 8) != 0) {
    throw BadMagicError("not a " + what + " file: expected magic \"" + std::string(magic, 8) +
                        "\", found \"" + std::string(got, 8) + "\"");
  }
  const std::uint32_t got_version = read_u32(in, what + " version");
  if (got_version != version) {
    throw BadVersionError("unsupported " + what + " version " + std::to_string(got_version) +
                          " (this build reads version " + std::to_string(version) + ")");
  }
}

void write_u32_vector(std::ostream& out, const std::vector<std::uint32_t>& v) {
  write_u64(out, v.size());
  for (std::uint32_t x : v) write_u32(out, x);
}

std::vector<std::uint32_t> read_u32_vector(std::istream& in, const std::string& what) {
  const std::uint64_t n = read_u64(in, what);
  std::vector<std::uint32_t> v(n);
  for (std::uint64_t i = 0; i < n; ++i) v[i] = read_u32(in, what);
  return v;
}

void save_file(const std::string& path, const std::function<void(std::ostream&)>& writer) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  writer(out);
  out.flush();
  if (!out) throw std::runtime_error("write to " + path + " failed");
}

void load_file(const std::string& path, const std::function<void(std::istream&)>& reader) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path + " for reading");
  reader(in);
}

}  // namespace mkdt::io
