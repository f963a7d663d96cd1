#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cqlab/cqformer.hpp"
#include "cqlab/layers.hpp"

namespace cqlab {

enum class ClassifierArch { small_cnn, resnet18 };

struct ClassifierConfig {
  int num_classes = 10;
  int width = 16;  // first-stage channels; doubled at each later stage
  ClassifierArch arch = ClassifierArch::small_cnn;
};

inline std::string to_string(ClassifierArch a) { return a == ClassifierArch::resnet18 ? "resnet18" : "small_cnn"; }

inline ClassifierArch classifier_arch_from_string(const std::string& s)
{
  if (s == "small_cnn") return ClassifierArch::small_cnn;
  if (s == "resnet18") return ClassifierArch::resnet18;
  throw ConfigError("unknown classifier '" + s + "' (expected small_cnn or resnet18)");
}

// small_cnn: three conv stages (3x3 conv + ReLU, 2x2 max-pool after the first
// two), global average pooling, linear head.
//
// resnet18: the CIFAR-style ResNet-18 layout (3x3 stem, four stages of two
// basic blocks, widths w/2w/4w/8w, stride 2 from stage two on). There is no
// batch norm; the last conv of every residual branch starts at zero so each
// block is the identity at initialisation.
//
// Either takes any input of at least 4x4.
template <class T>
class RecognitionNet {
 public:
  RecognitionNet(const RecognitionNet&) = delete;
  RecognitionNet& operator=(const RecognitionNet&) = delete;
  RecognitionNet(RecognitionNet&&) noexcept = default;
  RecognitionNet& operator=(RecognitionNet&&) noexcept = default;

  RecognitionNet(ClassifierConfig cfg, std::uint64_t seed) : cfg_(cfg)
  {
    if (cfg.num_classes < 2) throw ConfigError("classifier: need at least two classes");
    if (cfg.width < 1) throw ConfigError("classifier: width must be >= 1");
    Rng rng(seed);
    const int w = cfg.width;
    if (cfg.arch == ClassifierArch::small_cnn) {
      conv1_ = Conv2d<T>(params_, "classifier.conv1", 3, w, 3, 1, rng);
      conv2_ = Conv2d<T>(params_, "classifier.conv2", w, 2 * w, 3, 1, rng);
      conv3_ = Conv2d<T>(params_, "classifier.conv3", 2 * w, 4 * w, 3, 1, rng);
      fc_ = Linear<T>(params_, "classifier.fc", 4 * w, cfg.num_classes, rng);
      return;
    }
    conv1_ = Conv2d<T>(params_, "classifier.stem", 3, w, 3, 1, rng);
    int in = w;
    for (int stage = 0; stage < 4; ++stage) {
      const int out = w << stage;
      for (int b = 0; b < 2; ++b) {
        const std::string name = "classifier.layer" + std::to_string(stage + 1) + "." + std::to_string(b);
        const int stride = stage > 0 && b == 0 ? 2 : 1;
        Block blk;
        blk.conv1 = Conv2d<T>(params_, name + ".conv1", in, out, 3, stride, rng);
        blk.conv2 = Conv2d<T>(params_, name + ".conv2", out, out, 3, 1, rng);
        blk.conv2.weight().value().fill(T(0));
        if (stride != 1 || in != out) {
          blk.shortcut = Conv2d<T>(params_, name + ".shortcut", in, out, 1, stride, rng);
          blk.project = true;
        }
        blocks_.push_back(std::move(blk));
        in = out;
      }
    }
    fc_ = Linear<T>(params_, "classifier.fc", in, cfg.num_classes, rng);
  }

  RecognitionNet clone() const
  {
    RecognitionNet out(cfg_, 0);
    for (std::size_t i = 0; i < params_.items().size(); ++i)
      out.params_.items()[i].var.value() = params_.items()[i].var.value();
    return out;
  }

  const ClassifierConfig& config() const noexcept { return cfg_; }
  int num_classes() const noexcept { return cfg_.num_classes; }
  ParameterList<T>& parameters() noexcept { return params_; }
  const ParameterList<T>& parameters() const noexcept { return params_; }

  // x: [N, 3, H, W] pixels in [0, 1] (may carry gradient). Returns [N, K].
  ad::Var<T> operator()(const ad::Var<T>& x) const
  {
    if (cfg_.arch == ClassifierArch::small_cnn) {
      auto h = ad::maxpool2x2(ad::relu(conv1_(centre_pixels(x))));
      h = ad::maxpool2x2(ad::relu(conv2_(h)));
      h = ad::relu(conv3_(h));
      return fc_(ad::global_avg_pool(h));
    }
    auto h = ad::relu(conv1_(centre_pixels(x)));
    for (const auto& b : blocks_) {
      auto r = b.conv2(ad::relu(b.conv1(h)));
      h = ad::relu(ad::add(r, b.project ? b.shortcut(h) : h));
    }
    return fc_(ad::global_avg_pool(h));
  }

  std::vector<double> scores(const RGBImage& img) const
  {
    ad::NoGradGuard guard;
    auto out = (*this)(ad::constant(to_batch<T>(img)));
    return std::vector<double>(out.value().storage().begin(), out.value().storage().end());
  }

 private:
  struct Block {
    Conv2d<T> conv1, conv2, shortcut;
    bool project = false;
  };

  ClassifierConfig cfg_;
  ParameterList<T> params_;
  Conv2d<T> conv1_, conv2_, conv3_;
  std::vector<Block> blocks_;
  Linear<T> fc_;
};

template <class T>
RecognitionNet<T> small_cnn_classifier(int num_classes, std::uint64_t seed, int width = 16)
{
  return RecognitionNet<T>({num_classes, width}, seed);
}

struct LabelledImage {
  RGBImage image;
  int label = 0;
};

struct EvalResult {
  double top1 = 0;
  std::vector<double> per_class;  // NaN-free: classes without samples report 0
  std::vector<std::size_t> per_class_count;
  std::size_t samples = 0;
};

// A quantiser maps an image to the image the classifier sees.
using Quantiser = std::function<RGBImage(const RGBImage&)>;
using Classifier = std::function<std::vector<double>(const RGBImage&)>;

inline RGBImage bypass_quantiser(const RGBImage& img) { return img; }

inline int argmax(const std::vector<double>& v)
{
  int best = 0;
  for (int i = 1; i < static_cast<int>(v.size()); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

inline EvalResult evaluate_top1(const Classifier& model, const Quantiser& quantiser,
                                const std::vector<LabelledImage>& dataset, int num_classes)
{
  if (dataset.empty()) throw InputError("evaluate_top1: empty dataset");
  if (num_classes < 1) throw InputError("evaluate_top1: need at least one class");
  EvalResult r;
  r.per_class.assign(num_classes, 0.0);
  r.per_class_count.assign(num_classes, 0);
  std::size_t correct = 0;
  for (const auto& s : dataset) {
    if (s.label < 0 || s.label >= num_classes) throw InputError("evaluate_top1: label out of range");
    const int pred = argmax(model(quantiser(s.image)));
    ++r.per_class_count[s.label];
    if (pred == s.label) {
      ++correct;
      r.per_class[s.label] += 1.0;
    }
  }
  for (int c = 0; c < num_classes; ++c)
    if (r.per_class_count[c]) r.per_class[c] /= static_cast<double>(r.per_class_count[c]);
  r.samples = dataset.size();
  r.top1 = static_cast<double>(correct) / static_cast<double>(r.samples);
  return r;
}

template <class T>
Classifier as_classifier(const RecognitionNet<T>& net)
{
  return [&net](const RGBImage& img) { return net.scores(img); };
}

template <class T>
Quantiser as_quantiser(const CQFormer<T>& q)
{
  return [&q](const RGBImage& img) { return q.quantise_test(img).quantised; };
}

}  // namespace cqlab
