#include <gtest/gtest.h>

#include <sstream>

#include "test_util.hpp"

using namespace cqlab;

namespace {

RecognitionNet<double> resnet(int classes, int width, std::uint64_t seed)
{
  return RecognitionNet<double>({classes, width, ClassifierArch::resnet18}, seed);
}

}  // namespace

TEST(Recognition, BothArchitecturesScoreEveryClass)
{
  Rng rng(3);
  const auto img = tu::random_image(12, 9, rng);
  for (auto arch : {ClassifierArch::small_cnn, ClassifierArch::resnet18}) {
    RecognitionNet<double> net({5, 4, arch}, 1);
    const auto s = net.scores(img);
    ASSERT_EQ(s.size(), 5u) << to_string(arch);
    for (double v : s) EXPECT_TRUE(std::isfinite(v));
  }
}

TEST(Recognition, ResNetLayout)
{
  auto net = resnet(10, 2, 0);
  // stem, 16 block convs, 3 projection shortcuts, head; each with a bias
  EXPECT_EQ(net.parameters().items().size(), 2u * (1 + 16 + 3 + 1));
  EXPECT_TRUE(net.parameters().find("classifier.layer4.1.conv2.weight").defined());
  EXPECT_TRUE(net.parameters().find("classifier.layer2.0.shortcut.weight").defined());
  EXPECT_FALSE(net.parameters().find("classifier.layer1.0.shortcut.weight").defined());
  EXPECT_EQ(net.parameters().find("classifier.fc.weight").value().shape(), (Shape{16, 10}));
}

TEST(Recognition, ResidualBranchesStartAtZero)
{
  auto net = resnet(4, 2, 9);
  int checked = 0;
  for (auto& p : net.parameters().items()) {
    if (!p.name.ends_with(".weight")) continue;
    const bool last_conv = p.name.find(".conv2.weight") != std::string::npos;
    const auto& v = p.var.value().storage();
    const bool all_zero = std::ranges::all_of(v, [](double x) { return x == 0.0; });
    EXPECT_EQ(all_zero, last_conv) << p.name;
    checked += last_conv;
  }
  EXPECT_EQ(checked, 8);
}

TEST(Recognition, ResNetGradientsMatchFiniteDifferences)
{
  Rng rng(5);
  auto net = resnet(3, 1, 4);
  // Move off the zero initialisation so every branch contributes.
  std::normal_distribution<double> n(0.0, 0.3);
  for (auto& p : net.parameters().items())
    for (auto& v : p.var.value().storage()) v += n(rng);
  const auto x = ad::constant(to_batch<double>(tu::random_image(5, 5, rng)));
  auto loss = [&] { return ad::cross_entropy(net(x), std::vector<int>{2}); };

  for (auto& p : net.parameters().items()) p.var.zero_grad();
  ad::backward(loss());
  for (auto& p : net.parameters().items()) {
    auto& v = p.var.value();
    std::vector<double> analytic(p.var.grad().values().begin(), p.var.grad().values().end()), numeric(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double keep = v[i], h = 1e-6;
      v[i] = keep + h;
      const double up = loss().item();
      v[i] = keep - h;
      const double down = loss().item();
      v[i] = keep;
      numeric[i] = (up - down) / (2 * h);
    }
    EXPECT_LT(tu::relative_error(analytic, numeric), 1e-4) << p.name;
  }
}

TEST(Recognition, CloneCopiesArchitectureAndWeights)
{
  Rng rng(8);
  auto net = resnet(4, 2, 6);
  net.parameters().items().front().var.value()[0] = 0.25;
  const auto copy = net.clone();
  EXPECT_EQ(copy.config().arch, ClassifierArch::resnet18);
  const auto img = tu::random_image(8, 8, rng);
  EXPECT_EQ(copy.scores(img), net.scores(img));
}

TEST(Recognition, ArchNames)
{
  EXPECT_EQ(classifier_arch_from_string("resnet18"), ClassifierArch::resnet18);
  EXPECT_EQ(to_string(ClassifierArch::small_cnn), "small_cnn");
  EXPECT_THROW(classifier_arch_from_string("vgg"), ConfigError);
  EXPECT_THROW(RecognitionNet<double>({1, 4}, 0), ConfigError);
}

TEST(Recognition, CheckpointKeepsArchitecture)
{
  CQFormer<float> q({2, 8, 4, PaletteMode::attention}, 1);
  RecognitionNet<float> f({4, 2, ClassifierArch::resnet18}, 2);
  const auto path = tu::scratch_dir("recognition_ck") / "m.ckpt";
  save_checkpoint(path.string(), make_model_checkpoint(q, f));
  const auto [q2, f2] = load_models<float>(load_checkpoint(path.string()));
  EXPECT_EQ(f2.config().arch, ClassifierArch::resnet18);
  Rng rng(1);
  const auto img = tu::random_image(8, 8, rng);
  EXPECT_EQ(f2.scores(img), f.scores(img));
}

TEST(Recognition, OlderCheckpointsDefaultToSmallCnn)
{
  const json j{{"num_classes", 7}, {"width", 3}};
  EXPECT_EQ(classifier_config_from_json(j).arch, ClassifierArch::small_cnn);
}

TEST(Recognition, TrainConfigSelectsClassifier)
{
  std::istringstream good("classifier = resnet18\n"), vgg("classifier = vgg\n");
  auto kv = KeyValueConfig::parse(good);
  TrainConfig c;
  read_train_config(kv, c);
  EXPECT_EQ(c.classifier, ClassifierArch::resnet18);
  EXPECT_EQ(to_json(c).at("classifier"), "resnet18");
  auto bad = KeyValueConfig::parse(vgg);
  EXPECT_THROW(read_train_config(bad, c), ConfigError);
}
