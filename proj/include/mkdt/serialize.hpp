#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "mkdt/tensor.hpp"

namespace mkdt::io {

/// The stream does not start with the expected container magic.
struct BadMagicError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// The container magic matched but the format version is unsupported.
struct BadVersionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// The stream ended (or failed) before the declared payload was read.
struct TruncatedError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// All integers and floats are stored little-endian regardless of host order.

void write_u32(std::ostream& out, std::uint32_t v);
void write_u64(std::ostream& out, std::uint64_t v);
void write_f64(std::ostream& out, double v);
std::uint32_t read_u32(std::istream& in, const std::string& what);
std::uint64_t read_u64(std::istream& in, const std::string& what);
double read_f64(std::istream& in, const std::string& what);

/// Length-prefixed (u64) byte string.
void write_string(std::ostream& out, const std::string& s);
std::string read_string(std::istream& in, const std::string& what);

/// Tensor record: rank (u32), one extent (u32) per axis, entries as f64.
void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in, const std::string& what);

/// Container header: 8 magic bytes followed by a u32 version.
void write_header(std::ostream& out, const char magic[8], std::uint32_t version);
/// Throws BadMagicError / BadVersionError / TruncatedError as appropriate.
void check_header(std::istream& in, const char magic[8], std::uint32_t version,
                  const std::string& what);

void write_u32_vector(std::ostream& out, const std::vector<std::uint32_t>& v);
std::vector<std::uint32_t> read_u32_vector(std::istream& in, const std::string& what);

/// Opens the file, runs the writer, and flushes; throws on any I/O failure.
void save_file(const std::string& path, const std::function<void(std::ostream&)>& writer);
/// Opens the file for binary reading; throws if it cannot be opened.
void load_file(const std::string& path, const std::function<void(std::istream&)>& reader);

}  // namespace mkdt::io
