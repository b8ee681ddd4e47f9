#ifndef MCLAB_IMAGING_HPP
#define MCLAB_IMAGING_HPP

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mclab/common.hpp"
#include "mclab/tensor.hpp"

namespace mclab {

struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // row-major
};

enum class ResizeMethod { nearest, bilinear };

struct ImagingConfig {
  int image_dim = 128;        // square mode: N
  bool flat = false;          // true: 1xL row instead of NxN square
  int flat_length = 4096;     // L for flat mode
  ResizeMethod resize = ResizeMethod::nearest;
  std::uint8_t pad_value = 0;  // fill for the partial final row
};

/// Lays bytes out row-major at width N (partial final row filled with
/// pad_value), then resizes the resulting H x N image to N x N. The default
/// nearest-neighbor resize is out[r][c] = in[floor(r*H/N)][c]; bilinear
/// interpolates between the two nearest source rows and rounds half up.
inline GrayImage bytes_to_square_image(std::span<const std::uint8_t> bytes, int n,
                                       ResizeMethod method = ResizeMethod::nearest,
                                       std::uint8_t pad_value = 0) {
  if (bytes.empty()) throw DataError("bytes_to_square_image: empty input");
  if (n <= 0) throw DataError("bytes_to_square_image: non-positive dimension");
  const std::size_t width = static_cast<std::size_t>(n);
  const std::size_t rows = (bytes.size() + width - 1) / width;
  auto source = [&](std::size_t row, std::size_t col) -> std::uint8_t {
    const std::size_t idx = row * width + col;
    return idx < bytes.size() ? bytes[idx] : pad_value;
  };

  GrayImage out;
  out.width = n;
  out.height = n;
  out.pixels.resize(width * width);
  for (std::size_t r = 0; r < width; ++r) {
    if (method == ResizeMethod::nearest) {
      const std::size_t src_row = r * rows / width;
      for (std::size_t c = 0; c < width; ++c)
        out.pixels[r * width + c] = source(src_row, c);
    } else {
      // sample position in source-row space, edge-clamped
      const double pos = (static_cast<double>(r) + 0.5) * static_cast<double>(rows) /
                             static_cast<double>(width) -
                         0.5;
      const double clamped = std::max(0.0, std::min(pos, static_cast<double>(rows - 1)));
      const std::size_t r0 = static_cast<std::size_t>(clamped);
      const std::size_t r1 = std::min(r0 + 1, rows - 1);
      const double frac = clamped - static_cast<double>(r0);
      for (std::size_t c = 0; c < width; ++c) {
        const double v = (1.0 - frac) * source(r0, c) + frac * source(r1, c);
        out.pixels[r * width + c] = static_cast<std::uint8_t>(v + 0.5);
      }
    }
  }
  return out;
}

/// Nearest-neighbor resample of the whole byte stream to a 1 x L row:
/// out[c] = in[floor(c*len/L)].
inline GrayImage bytes_to_flat_image(std::span<const std::uint8_t> bytes, int l) {
  if (bytes.empty()) throw DataError("bytes_to_flat_image: empty input");
  if (l <= 0) throw DataError("bytes_to_flat_image: non-positive length");
  GrayImage out;
  out.width = l;
  out.height = 1;
  out.pixels.resize(static_cast<std::size_t>(l));
  const std::size_t len = bytes.size();
  for (std::size_t c = 0; c < static_cast<std::size_t>(l); ++c)
    out.pixels[c] = bytes[c * len / static_cast<std::size_t>(l)];
  return out;
}

inline GrayImage bytes_to_image(std::span<const std::uint8_t> bytes, const ImagingConfig& cfg) {
  return cfg.flat ? bytes_to_flat_image(bytes, cfg.flat_length)
                  : bytes_to_square_image(bytes, cfg.image_dim, cfg.resize, cfg.pad_value);
}

/// Intensities scaled into [0,1] as f32, shape [height, width].
inline Tensor normalize(const GrayImage& img) {
  std::vector<float> data(img.pixels.size());
  for (std::size_t i = 0; i < img.pixels.size(); ++i)
    data[i] = static_cast<float>(img.pixels[i]) / 255.0f;
  return Tensor::from({img.height, img.width}, std::move(data));
}

/// Binary PGM (P5, maxval 255); byte-exact on round trip.
inline void write_pgm(const fs::path& path, const GrayImage& img) {
  std::string header = strf("P5\n%d %d\n255\n", img.width, img.height);
  std::string payload = header;
  payload.append(reinterpret_cast<const char*>(img.pixels.data()), img.pixels.size());
  write_file_text(path, payload);
}

inline GrayImage read_pgm(const fs::path& path) {
  const auto bytes = read_file_bytes(path);
  // Header: "P5" whitespace width whitespace height whitespace maxval single-ws
  std::size_t pos = 0;
  auto skip_ws = [&] { while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos; };
  auto read_token = [&] {
    skip_ws();
    std::string tok;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) tok += static_cast<char>(bytes[pos++]);
    return tok;
  };
  if (read_token() != "P5") throw DataError("not a binary PGM: " + path.string());
  GrayImage img;
  img.width = std::stoi(read_token());
  img.height = std::stoi(read_token());
  const int maxval = std::stoi(read_token());
  if (maxval != 255) throw DataError("unsupported PGM maxval in " + path.string());
  ++pos;  // single whitespace after maxval
  const std::size_t n = static_cast<std::size_t>(img.width) * img.height;
  if (bytes.size() - pos < n) throw DataError("truncated PGM payload: " + path.string());
  img.pixels.assign(bytes.begin() + pos, bytes.begin() + pos + n);
  return img;
}

}  // namespace mclab

#endif  // MCLAB_IMAGING_HPP
