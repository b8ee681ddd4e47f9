#include <gtest/gtest.h>

#include <numeric>

#include "mclab/imaging.hpp"
#include "mclab/rng.hpp"
#include "testutil.hpp"

using namespace mclab;

TEST(SquareImage, ConstantBytesStayConstant) {
  std::vector<std::uint8_t> bytes(16384, 0x41);
  const auto img = bytes_to_square_image(bytes, 128);
  EXPECT_EQ(img.width, 128);
  EXPECT_EQ(img.height, 128);
  for (const auto p : img.pixels) EXPECT_EQ(p, 0x41);
}

TEST(SquareImage, NearestNeighborRowSelection) {
  // 8 bytes at width 2 form rows [[0,1],[2,3],[4,5],[6,7]]; resizing 4 -> 2
  // keeps rows floor(0*4/2)=0 and floor(1*4/2)=2.
  const std::vector<std::uint8_t> bytes = {0, 1, 2, 3, 4, 5, 6, 7};
  const auto img = bytes_to_square_image(bytes, 2);
  EXPECT_EQ(img.pixels, (std::vector<std::uint8_t>{0, 1, 4, 5}));
}

TEST(SquareImage, PartialRowZeroPadded) {
  // 5 bytes at width 2: intermediate [[9,9],[9,9],[9,0]]; rows 0 and 1 survive.
  const std::vector<std::uint8_t> bytes = {9, 9, 9, 9, 9};
  const auto img = bytes_to_square_image(bytes, 2);
  EXPECT_EQ(img.pixels, (std::vector<std::uint8_t>{9, 9, 9, 9}));

  // With N=3: H=2, rows [[9,9,9],[9,9,0]]; out rows map to 0,0,1 -> pad visible.
  const auto img3 = bytes_to_square_image(bytes, 3);
  EXPECT_EQ(img3.pixels, (std::vector<std::uint8_t>{9, 9, 9, 9, 9, 9, 9, 9, 0}));
}

TEST(SquareImage, AlwaysNxN) {
  Rng rng(3);
  for (int trial = 0; trial < 40; ++trial) {
    const int n = 1 + static_cast<int>(rng.next_below(40));
    const std::size_t len = 1 + rng.next_below(5000);
    std::vector<std::uint8_t> bytes(len);
    for (auto& b : bytes) b = static_cast<std::uint8_t>(rng.next_below(256));
    const auto img = bytes_to_square_image(bytes, n);
    EXPECT_EQ(img.width, n);
    EXPECT_EQ(img.height, n);
    EXPECT_EQ(img.pixels.size(), static_cast<std::size_t>(n) * n);
  }
}

TEST(SquareImage, MonotoneSourceRows) {
  const std::vector<std::uint8_t> bytes(997, 1);
  const int n = 31;
  const std::size_t rows = (bytes.size() + n - 1) / n;
  std::size_t prev = 0;
  for (int r = 0; r < n; ++r) {
    const std::size_t src = static_cast<std::size_t>(r) * rows / n;
    EXPECT_GE(src, prev);
    prev = src;
  }
}

TEST(SquareImage, EmptyInputThrows) {
  EXPECT_THROW(bytes_to_square_image({}, 4), DataError);
  EXPECT_THROW(bytes_to_flat_image({}, 4), DataError);
}

TEST(FlatImage, NearestNeighborColumns) {
  const std::vector<std::uint8_t> bytes = {0, 1, 2, 3, 4, 5, 6, 7};
  const auto img = bytes_to_flat_image(bytes, 4);
  EXPECT_EQ(img.height, 1);
  EXPECT_EQ(img.pixels, (std::vector<std::uint8_t>{0, 2, 4, 6}));
}

TEST(FlatImage, IdentityWhenLengthMatches) {
  std::vector<std::uint8_t> bytes(64);
  std::iota(bytes.begin(), bytes.end(), 0);
  const auto img = bytes_to_flat_image(bytes, 64);
  EXPECT_EQ(img.pixels, bytes);
}

TEST(FlatImage, ConstantInvariance) {
  const std::vector<std::uint8_t> bytes(100, 77);
  for (const int l : {1, 3, 100, 1000}) {
    const auto img = bytes_to_flat_image(bytes, l);
    for (const auto p : img.pixels) EXPECT_EQ(p, 77);
  }
}

TEST(Normalize, ScalesInto01) {
  GrayImage img;
  img.width = 3;
  img.height = 1;
  img.pixels = {255, 0, 51};
  const Tensor t = normalize(img);
  EXPECT_EQ(t.shape(), (Shape{1, 3}));
  EXPECT_FLOAT_EQ(t.data()[0], 1.0f);
  EXPECT_FLOAT_EQ(t.data()[1], 0.0f);
  EXPECT_FLOAT_EQ(t.data()[2], 0.2f);  // 51/255 exactly
}

TEST(Pgm, RoundTripBitExact) {
  testutil::ScopedTempDir tmp("pgm");
  Rng rng(9);
  GrayImage img;
  img.width = 37;
  img.height = 11;
  img.pixels.resize(37 * 11);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng.next_below(256));

  const auto path = tmp.path() / "x.pgm";
  write_pgm(path, img);
  const auto back = read_pgm(path);
  EXPECT_EQ(back.width, img.width);
  EXPECT_EQ(back.height, img.height);
  EXPECT_EQ(back.pixels, img.pixels);

  const auto path2 = tmp.path() / "y.pgm";
  write_pgm(path2, img);
  EXPECT_EQ(read_file_bytes(path), read_file_bytes(path2));
}

TEST(SquareImage, BilinearOption) {
  // rows [[0,1],[2,3],[4,5],[6,7]]: output rows sample at positions 0.5 and
  // 2.5, so each output pixel is the midpoint of two source rows.
  const std::vector<std::uint8_t> bytes = {0, 1, 2, 3, 4, 5, 6, 7};
  const auto img = bytes_to_square_image(bytes, 2, ResizeMethod::bilinear);
  EXPECT_EQ(img.pixels, (std::vector<std::uint8_t>{1, 2, 5, 6}));

  // constant input stays constant under interpolation (exact fill, so the
  // zero-padded partial row never blends in)
  const std::vector<std::uint8_t> flat(49, 42);
  for (const auto p : bytes_to_square_image(flat, 7, ResizeMethod::bilinear).pixels)
    EXPECT_EQ(p, 42);
}

TEST(SquareImage, PadValueOption) {
  const std::vector<std::uint8_t> bytes = {9, 9, 9, 9, 9};
  const auto img = bytes_to_square_image(bytes, 3, ResizeMethod::nearest, 255);
  EXPECT_EQ(img.pixels.back(), 255);  // padded corner carries the fill value
}

TEST(Imaging, DeterministicAcrossCalls) {
  Rng rng(4);
  std::vector<std::uint8_t> bytes(4099);
  for (auto& b : bytes) b = static_cast<std::uint8_t>(rng.next_below(256));
  const auto a = bytes_to_square_image(bytes, 64);
  const auto b = bytes_to_square_image(bytes, 64);
  EXPECT_EQ(a.pixels, b.pixels);
}
