#include <gtest/gtest.h>

#include <fstream>

#include "test_util.hpp"

using namespace cqlab;

TEST(Png, BitDepthFollowsPaletteSize)
{
  EXPECT_EQ(indexed_bit_depth(1), 1);
  EXPECT_EQ(indexed_bit_depth(2), 1);
  EXPECT_EQ(indexed_bit_depth(3), 2);
  EXPECT_EQ(indexed_bit_depth(4), 2);
  EXPECT_EQ(indexed_bit_depth(5), 4);
  EXPECT_EQ(indexed_bit_depth(16), 4);
  EXPECT_EQ(indexed_bit_depth(17), 8);
  EXPECT_EQ(indexed_bit_depth(256), 8);
  EXPECT_THROW(indexed_bit_depth(257), InputError);
}

TEST(Png, IndexedRoundTripIsExact)
{
  Rng rng(50);
  const auto dir = tu::scratch_dir("png_roundtrip");
  for (int colours : {2, 3, 4, 16, 64}) {
    // Odd widths exercise the packed-row padding for sub-byte depths.
    const auto img = tu::random_image(7, 13, rng);
    auto q = median_cut(img, colours);
    q.palette = snap_to_8bit(q.palette);
    const auto path = (dir / ("c" + std::to_string(colours) + ".png")).string();
    write_indexed_png(path, q.indices, q.palette);
    const auto back = read_indexed_png(path);
    EXPECT_EQ(back.indices, q.indices);
    EXPECT_EQ(back.palette, q.palette);
    EXPECT_EQ(back.image(), q.image());
  }
}

TEST(Png, RgbRoundTripOnByteGrid)
{
  Rng rng(51);
  auto img = tu::random_image(5, 6, rng);
  for (auto& v : img.data()) v = to_byte(v) / 255.0;
  const auto path = (tu::scratch_dir("png_rgb") / "x.png").string();
  write_png(path, img);
  EXPECT_EQ(read_png(path), img);
}

TEST(Png, SnapIsIdempotent)
{
  const Palette p{{{0.1234, 0.5, 0.999}, {0.0, 1.0, 0.3333}}};
  const auto once = snap_to_8bit(p);
  EXPECT_EQ(snap_to_8bit(once), once);
  EXPECT_DOUBLE_EQ(once.colours[0].g, 128 / 255.0);
}

TEST(Png, Errors)
{
  const auto dir = tu::scratch_dir("png_errors");
  EXPECT_THROW(read_png((dir / "missing.png").string()), LoadError);
  EXPECT_THROW(read_indexed_png((dir / "missing.png").string()), LoadError);
  std::ofstream((dir / "junk.png").string()) << "not a png";
  EXPECT_THROW(read_indexed_png((dir / "junk.png").string()), LoadError);
  const auto rgb = (dir / "rgb.png").string();
  write_png(rgb, RGBImage(2, 2, 0.5));
  EXPECT_THROW(read_indexed_png(rgb), LoadError);
  EXPECT_THROW(write_indexed_png((dir / "e.png").string(), IndexMap{1, 1, {0}}, Palette{}), InputError);
}
