#include <gtest/gtest.h>

#include <fstream>

#include "test_util.hpp"

using namespace cqlab;

TEST(Checkpoint, EncodeDecodeIsBitExact)
{
  Checkpoint ck;
  ck.meta["note"] = "x";
  ck.put("a", Tensor<double>({2, 2}, std::vector<double>{1.5, -0.0, 1e-308, std::numeric_limits<double>::max()}));
  ck.put("b", Tensor<float>({3}, std::vector<float>{0.1f, 0.2f, 0.3f}));
  const std::string bytes = encode_checkpoint(ck);
  EXPECT_EQ(bytes.substr(0, 8), "CQLABCK1");
  const auto back = decode_checkpoint(bytes);
  EXPECT_EQ(back.meta, ck.meta);
  ASSERT_EQ(back.tensors.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(back.tensors[i].first, ck.tensors[i].first);
    EXPECT_EQ(back.tensors[i].second.shape(), ck.tensors[i].second.shape());
    EXPECT_EQ(0, std::memcmp(back.tensors[i].second.data(), ck.tensors[i].second.data(),
                             ck.tensors[i].second.size() * sizeof(double)));
  }
  EXPECT_EQ(encode_checkpoint(back), bytes);
}

TEST(Checkpoint, CorruptionIsDetected)
{
  Checkpoint ck;
  ck.put("w", Tensor<double>({4}, std::vector<double>{1, 2, 3, 4}));
  const std::string good = encode_checkpoint(ck);
  EXPECT_THROW(decode_checkpoint("short"), LoadError);
  std::string bad = good;
  bad[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad), LoadError);
  EXPECT_THROW(decode_checkpoint(good.substr(0, good.size() - 8)), LoadError);  // tensor out of bounds
  EXPECT_THROW(decode_checkpoint(good.substr(0, good.size() - 3)), LoadError);  // ragged payload
  bad = good;
  bad[8] = static_cast<char>(0xff);  // manifest length beyond file
  EXPECT_THROW(decode_checkpoint(bad), LoadError);
  bad = good;
  bad[16] = '!';
  EXPECT_THROW(decode_checkpoint(bad), LoadError);
}

TEST(Checkpoint, ModelsRoundTripThroughFiles)
{
  Rng rng(80);
  CQFormer<float> q({4, 8, 4, PaletteMode::attention}, 3);
  RecognitionNet<float> f({5, 4}, 4);
  const auto path = (tu::scratch_dir("ckpt") / "m.ckpt").string();
  save_checkpoint(path, make_model_checkpoint(q, f));
  auto [q2, f2] = load_models<float>(load_checkpoint(path));
  const auto img = tu::random_image(8, 8, rng);
  EXPECT_EQ(q2.quantise_train(img, 0.1).quantised, q.quantise_train(img, 0.1).quantised);
  EXPECT_EQ(f2.num_classes(), 5);
  EXPECT_THROW(load_checkpoint(path + ".missing"), LoadError);
}

TEST(Checkpoint, MissingTensorIsAnError)
{
  CQFormer<float> q({2, 8, 4, PaletteMode::attention}, 3);
  RecognitionNet<float> f({2, 4}, 4);
  auto ck = make_model_checkpoint(q, f);
  ck.tensors.pop_back();
  EXPECT_THROW(load_models<float>(ck), LoadError);
}
