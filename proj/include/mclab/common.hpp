#ifndef MCLAB_COMMON_HPP
#define MCLAB_COMMON_HPP

#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mclab {

namespace fs = std::filesystem;

/// Base class for all library errors.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Malformed or missing input data (bad corpus root, bad manifest, ...).
struct DataError : Error {
  explicit DataError(const std::string& msg) : Error(msg) {}
};

/// Tensor shape violations (mismatched matmul dims, bad conv geometry, ...).
struct ShapeError : Error {
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};

/// Training produced a non-finite loss.
struct DivergenceError : Error {
  explicit DivergenceError(const std::string& msg) : Error(msg) {}
};

inline std::string strf(const char* fmt, ...) {
  va_list args;
  va_start(args, fmt);
  char buf[1024];
  std::vsnprintf(buf, sizeof(buf), fmt, args);
  va_end(args);
  return std::string(buf);
}

inline std::vector<std::uint8_t> read_file_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open file: " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (in.bad()) throw DataError("read failed: " + path.string());
  return bytes;
}

inline std::string read_file_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open file: " + path.string());
  return std::string((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
}

inline void write_file_bytes(const fs::path& path, const void* data, std::size_t len) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write file: " + path.string());
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(len));
  if (!out) throw DataError("write failed: " + path.string());
}

inline void write_file_text(const fs::path& path, const std::string& text) {
  write_file_bytes(path, text.data(), text.size());
}

}  // namespace mclab

#endif  // MCLAB_COMMON_HPP
