#include <gtest/gtest.h>

#include <fstream>

#include "test_util.hpp"

using namespace cqlab;

namespace {
void write_cifar(const std::filesystem::path& p, const std::vector<int>& labels, int label_bytes)
{
  std::ofstream out(p, std::ios::binary);
  for (std::size_t r = 0; r < labels.size(); ++r) {
    for (int b = 0; b < label_bytes - 1; ++b) out.put(static_cast<char>(9));  // coarse label
    out.put(static_cast<char>(labels[r]));
    for (int c = 0; c < 3; ++c)
      for (int i = 0; i < 1024; ++i) out.put(static_cast<char>((i + 50 * c + static_cast<int>(r)) % 256));
  }
}
}  // namespace

TEST(Cifar, ParsesPlanarRecords)
{
  const auto dir = tu::scratch_dir("cifar");
  write_cifar(dir / "b.bin", {3, 7}, 1);
  const auto d = load_cifar_binary((dir / "b.bin").string());
  ASSERT_EQ(d.size(), 2u);
  EXPECT_EQ(d[0].label, 3);
  EXPECT_EQ(d[1].label, 7);
  EXPECT_EQ(d[1].image.height(), 32);
  // Pixel (0, 5) of record 1: R plane byte 6, G 56, B 106.
  EXPECT_DOUBLE_EQ(d[1].image(0, 5, 0), 6 / 255.0);
  EXPECT_DOUBLE_EQ(d[1].image(0, 5, 1), 56 / 255.0);
  EXPECT_DOUBLE_EQ(d[1].image(0, 5, 2), 106 / 255.0);
}

TEST(Cifar, TwoByteLabelsUseTheFineLabel)
{
  const auto dir = tu::scratch_dir("cifar100");
  write_cifar(dir / "b.bin", {42}, 2);
  EXPECT_EQ(load_cifar_binary((dir / "b.bin").string(), 2)[0].label, 42);
}

TEST(Cifar, Errors)
{
  const auto dir = tu::scratch_dir("cifar_err");
  write_cifar(dir / "b.bin", {1, 12}, 1);
  EXPECT_THROW(load_cifar_binary((dir / "b.bin").string(), 1, 10), LoadError);
  EXPECT_THROW(load_cifar_binary((dir / "b.bin").string(), 3), ConfigError);
  EXPECT_THROW(load_cifar_binary((dir / "none.bin").string()), LoadError);
  std::ofstream((dir / "short.bin"), std::ios::binary) << std::string(3073 + 10, 'x');
  try {
    load_cifar_binary((dir / "short.bin").string());
    FAIL();
  } catch (const LoadError& e) {
    EXPECT_NE(std::string(e.what()).find("offset 3073"), std::string::npos);
  }
}

TEST(ImageDirectory, LabelsFromManifestAndClassNames)
{
  const auto dir = tu::scratch_dir("imgdir");
  write_png((dir / "a.png").string(), RGBImage(4, 4, 0.2));
  write_png((dir / "b.png").string(), RGBImage(4, 4, 0.8));
  std::ofstream(dir / "classes.txt") << "cat\ndog\n";
  std::ofstream(dir / "labels.csv") << "file,label\na.png,dog\nb.png,cat\n";
  const auto d = load_image_directory(dir.string());
  ASSERT_EQ(d.size(), 2u);
  EXPECT_EQ(d[0].label, 1);
  EXPECT_EQ(d[1].label, 0);
  std::ofstream(dir / "labels.csv") << "file,label\na.png,bird\n";
  EXPECT_THROW(load_image_directory(dir.string()), LoadError);
}

TEST(Seeds, DerivedSeedsAreDistinct)
{
  std::set<std::uint64_t> seen;
  for (std::uint64_t s = 0; s < 4; ++s)
    for (std::uint64_t stream = 0; stream < 4; ++stream)
      for (std::uint64_t i = 0; i < 16; ++i) seen.insert(derive_seed(s, stream, i));
  EXPECT_EQ(seen.size(), 4u * 4u * 16u);
  EXPECT_EQ(derive_seed(7, 1, 2), derive_seed(7, 1, 2));
}

TEST(Shuffle, IsAPermutationAndDeterministic)
{
  auto a = shuffled_order(100, 3);
  EXPECT_EQ(a, shuffled_order(100, 3));
  EXPECT_NE(a, shuffled_order(100, 4));
  std::sort(a.begin(), a.end());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], i);
}

TEST(Augment, DeterministicAndValueRange)
{
  Rng rng(70);
  const auto img = tu::random_image(8, 8, rng);
  Rng a(5), b(5);
  const auto x = augment(img, 2, a), y = augment(img, 2, b);
  EXPECT_EQ(x, y);
  EXPECT_EQ(x.height(), 8);
  // Every output pixel is copied from the source image.
  for (std::size_t i = 0; i < x.pixel_count(); ++i) {
    bool found = false;
    for (std::size_t j = 0; j < img.pixel_count() && !found; ++j) found = x.pixel(i) == img.pixel(j);
    EXPECT_TRUE(found);
  }
}

TEST(Synthetic, ColourClassesAreBalancedAndReproducible)
{
  const auto d = make_colour_classes(40, 16, 9);
  ASSERT_EQ(d.size(), 40u);
  std::vector<int> per(4, 0);
  for (const auto& s : d) ++per[s.label];
  EXPECT_EQ(per, (std::vector<int>{10, 10, 10, 10}));
  const auto again = make_colour_classes(40, 16, 9);
  for (std::size_t i = 0; i < d.size(); ++i) EXPECT_EQ(d[i].image, again[i].image);
  EXPECT_NE(make_colour_classes(4, 16, 10)[0].image, d[0].image);
  EXPECT_THROW(make_colour_classes(4, 4, 0), InputError);
}

TEST(Synthetic, ChipRangeIsInclusive)
{
  const auto r = chip_range(1, 2, 9, 12);
  EXPECT_EQ(r.size(), 8u);
  EXPECT_EQ(r.front(), (Chip{1, 9}));
  EXPECT_EQ(r.back(), (Chip{2, 12}));
}

TEST(Synthetic, TermMosaicsUseTermRegions)
{
  const auto hmap = load_human_map(default_human_map_path().string());
  const auto d = make_term_mosaics(hmap, 6, 16, 3);
  ASSERT_EQ(d.size(), 6u);
  for (const auto& s : d) EXPECT_EQ(s.image.height(), 16);
}
