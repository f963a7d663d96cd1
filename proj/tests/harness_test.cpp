#include <gtest/gtest.h>

#include <algorithm>
#include <numbers>

#include "test_util.hpp"

using namespace cqlab;

TEST(Config, ParsesTypedValuesAndRejectsUnknownKeys)
{
  auto kv = KeyValueConfig::parse_string("# run\ncolours = 8\n tau=0.5 # inline\naugment = true\nname = a b\n");
  TrainConfig c;
  kv.take_into("colours", c.colours);
  kv.take_into("tau", c.tau);
  kv.take_into("augment", c.augment);
  std::string name;
  kv.take_into("name", name);
  EXPECT_EQ(c.colours, 8);
  EXPECT_EQ(c.tau, 0.5);
  EXPECT_TRUE(c.augment);
  EXPECT_EQ(name, "a b");
  EXPECT_NO_THROW(kv.finish());

  auto extra = KeyValueConfig::parse_string("colours = 2\nlearning_rate = 1\n");
  read_train_config(extra, c);
  try {
    extra.finish();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("learning_rate"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
}

TEST(Config, MalformedInput)
{
  EXPECT_THROW(KeyValueConfig::parse_string("novalue\n"), ConfigError);
  EXPECT_THROW(KeyValueConfig::parse_string("a = 1\na = 2\n"), ConfigError);
  EXPECT_THROW(KeyValueConfig::parse_string(" = 2\n"), ConfigError);
  auto kv = KeyValueConfig::parse_string("epochs = 3x\n");
  int e = 0;
  EXPECT_THROW(kv.take_into("epochs", e), ConfigError);
}

TEST(Config, BitsSetColoursAndValidationCatchesBadValues)
{
  auto kv = KeyValueConfig::parse_string("bits = 3\n");
  TrainConfig c;
  read_train_config(kv, c);
  EXPECT_EQ(c.colours, 8);
  c.tau = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.momentum = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.weights.beta = -1;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Schedule, CosineWithWarmRestarts)
{
  TrainConfig c;
  c.lr = 0.1;
  c.restart_period = 4;
  EXPECT_DOUBLE_EQ(scheduled_lr(c, 0), 0.1);
  EXPECT_NEAR(scheduled_lr(c, 2), 0.05, 1e-15);
  EXPECT_NEAR(scheduled_lr(c, 3), 0.05 * (1 + std::cos(3 * std::numbers::pi / 4)), 1e-15);
  EXPECT_DOUBLE_EQ(scheduled_lr(c, 4), 0.1);
  EXPECT_DOUBLE_EQ(scheduled_lr(c, 5.5), scheduled_lr(c, 1.5));
  c.scheduler = Scheduler::constant;
  EXPECT_EQ(scheduled_lr(c, 3), 0.1);
}

// sum(3 w) has gradient 3 everywhere, so two steps can be written out by hand.
TEST(Sgd, MomentumAndWeightDecayMatchHandComputation)
{
  auto w = ad::parameter(Tensor<double>({2}, std::vector<double>{1.0, -2.0}));
  Sgd<double> opt({w}, 0.5, 0.1);
  std::vector<double> ref{1.0, -2.0}, buf{0, 0};
  for (int step = 0; step < 2; ++step) {
    opt.zero_grad();
    ad::backward(ad::sum(ad::scale(w, 3.0)));
    opt.step(0.2);
    for (int k = 0; k < 2; ++k) {
      buf[k] = 0.5 * buf[k] + 3.0 + 0.1 * ref[k];
      ref[k] -= 0.2 * buf[k];
    }
  }
  EXPECT_NEAR(w.value()[0], ref[0], 1e-15);
  EXPECT_NEAR(w.value()[1], ref[1], 1e-15);
}

TEST(Sgd, GradientScaleAndNorm)
{
  auto w = ad::parameter(Tensor<double>({2}, std::vector<double>{1.0, -2.0}));
  Sgd<double> opt({w}, 0.0, 0.0);
  opt.zero_grad();
  ad::backward(ad::sum(ad::scale(w, 3.0)));
  EXPECT_DOUBLE_EQ(opt.grad_norm(), 3.0 * std::sqrt(2.0));
  opt.step(1.0, 0.5);
  EXPECT_DOUBLE_EQ(w.value()[0], 1.0 - 1.5);
  EXPECT_DOUBLE_EQ(w.value()[1], -2.0 - 1.5);
}

namespace {
TrainConfig tiny_config()
{
  TrainConfig c;
  c.colours = 2;
  c.epochs = 3;
  c.batch_size = 8;
  c.restart_period = 3;
  c.encoder_width = 4;
  c.classifier_width = 4;
  c.query_dim = 8;
  c.augment = true;
  c.seed = 11;
  return c;
}
}  // namespace

TEST(Training, ResumeReplaysTheUninterruptedRun)
{
  const auto data = make_colour_classes(24, 8, 2);
  const auto cfg = tiny_config();
  auto full = initial_state<float>(cfg, 4);
  train_epochs(full, cfg, data, standard_loss<float>(cfg.weights));

  const auto dir = tu::scratch_dir("resume");
  TrainConfig first = cfg;
  first.epochs = 2;
  auto part = initial_state<float>(cfg, 4);
  TrainOptions opts;
  opts.checkpoint_dir = dir.string();
  train_epochs(part, first, data, standard_loss<float>(cfg.weights), opts);
  auto resumed = training_state_from_checkpoint<float>(load_checkpoint((dir / epoch_checkpoint_name(2)).string()));
  EXPECT_EQ(resumed.epochs_done, 2);
  train_epochs(resumed, cfg, data, standard_loss<float>(cfg.weights));

  ASSERT_EQ(resumed.history.size(), 3u);
  for (int e = 0; e < 3; ++e) {
    EXPECT_EQ(resumed.history[e].total, full.history[e].total);
    EXPECT_EQ(resumed.history[e].top1, full.history[e].top1);
  }
  const auto a = full.quantiser.parameters().items(), b = resumed.quantiser.parameters().items();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(std::ranges::equal(a[i].var.value().values(), b[i].var.value().values()));
}

TEST(Training, SameSeedIsDeterministic)
{
  const auto data = make_colour_classes(16, 8, 3);
  auto cfg = tiny_config();
  cfg.epochs = 1;
  const auto a = train_joint<float>(cfg, data), b = train_joint<float>(cfg, data);
  EXPECT_EQ(a.history[0].total, b.history[0].total);
}

TEST(Training, StepHookSeesEveryStepAndClippingBoundsUpdates)
{
  const auto data = make_colour_classes(20, 8, 3);
  auto cfg = tiny_config();
  cfg.epochs = 2;
  std::vector<double> norms;
  TrainOptions o;
  o.on_step = [&](int epoch, std::size_t step, double loss, double norm) {
    EXPECT_EQ(step, norms.size() % 3);
    EXPECT_EQ(epoch, static_cast<int>(norms.size() / 3) + 1);
    EXPECT_TRUE(std::isfinite(loss));
    norms.push_back(norm);
  };
  train_joint<float>(cfg, data, o);
  ASSERT_EQ(norms.size(), 6u);  // ceil(20 / 8) steps per epoch
  for (double n : norms) EXPECT_GT(n, 0);

  // A tiny cap limits every step to about lr * cap, so the weights barely move.
  cfg.grad_clip = 1e-6;
  cfg.weight_decay = 0;
  cfg.epochs = 1;
  const auto before = initial_state<float>(cfg, 4);
  const auto after = train_joint<float>(cfg, data);
  const auto& p0 = before.quantiser.parameters().items();
  const auto& p1 = after.quantiser.parameters().items();
  double moved = 0;
  for (std::size_t i = 0; i < p0.size(); ++i)
    for (std::size_t k = 0; k < p0[i].var.value().size(); ++k)
      moved = std::max(moved, std::abs(double(p1[i].var.value()[k]) - double(p0[i].var.value()[k])));
  EXPECT_LT(moved, 3 * cfg.lr * 1e-6 / (1 - cfg.momentum));
  EXPECT_THROW(
      [] {
        TrainConfig c;
        c.grad_clip = -1;
        c.validate();
      }(),
      ConfigError);
}

TEST(Training, RejectsBadData)
{
  auto cfg = tiny_config();
  auto s = initial_state<float>(cfg, 2);
  EXPECT_THROW(train_epochs(s, cfg, Dataset{}, standard_loss<float>(cfg.weights)), InputError);
  Dataset bad{{RGBImage(8, 8), 5}};
  EXPECT_THROW(train_epochs(s, cfg, bad, standard_loss<float>(cfg.weights)), InputError);
}

TEST(Metrics, CsvHeaderAndRows)
{
  std::ostringstream out;
  EpochMetrics m;
  m.epoch = 1;
  m.top1 = 0.5;
  write_metrics_csv(out, {m});
  const auto text = out.str();
  EXPECT_EQ(text.substr(0, text.find('\n')).substr(0, 6), "epoch,");
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 2);
}
