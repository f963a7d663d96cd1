#pragma once

// Joint training of quantiser and classifier, configuration files, and the
// two-stage embedding/evolution protocol.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cqlab/checkpoint.hpp"
#include "cqlab/cqformer.hpp"
#include "cqlab/data.hpp"
#include "cqlab/objectives.hpp"
#include "cqlab/recognition.hpp"
#include "cqlab/wcs.hpp"

namespace cqlab {

// ------------------------------------------------------------ config files

// `key = value` lines; `#` starts a comment. Parsers take() the keys they
// understand and finish() rejects anything left over.
class KeyValueConfig {
 public:
  KeyValueConfig() = default;

  static KeyValueConfig parse(std::istream& in)
  {
    KeyValueConfig cfg;
    std::string line;
    long lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const auto first = line.find_first_not_of(" \t\r");
      if (first == std::string::npos) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
      auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        const auto e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
      };
      const std::string key = trim(line.substr(0, eq));
      if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
      if (cfg.entries_.count(key)) throw ConfigError("config line " + std::to_string(lineno) + ": duplicate key " + key);
      cfg.entries_[key] = {trim(line.substr(eq + 1)), lineno};
    }
    return cfg;
  }

  static KeyValueConfig parse_string(const std::string& text)
  {
    std::istringstream in(text);
    return parse(in);
  }

  static KeyValueConfig load(const std::string& path)
  {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path);
    return parse(in);
  }

  void set(const std::string& key, const std::string& value) { entries_[key] = {value, 0}; }
  bool has(const std::string& key) const { return entries_.count(key) > 0; }

  std::optional<std::string> take(const std::string& key)
  {
    auto it = entries_.find(key);
    if (it == entries_.end()) return std::nullopt;
    taken_.insert(key);
    return it->second.value;
  }

  template <class V>
  void take_into(const std::string& key, V& out)
  {
    auto v = take(key);
    if (!v) return;
    std::istringstream is(*v);
    V parsed{};
    if constexpr (std::is_same_v<V, bool>) {
      if (*v == "true" || *v == "1") parsed = true;
      else if (*v == "false" || *v == "0") parsed = false;
      else fail(key, "expected true/false");
    } else if constexpr (std::is_same_v<V, std::string>) {
      parsed = *v;
    } else {
      if (!(is >> parsed) || !(is >> std::ws).eof()) fail(key, "malformed value '" + *v + "'");
    }
    out = parsed;
  }

  [[noreturn]] void fail(const std::string& key, const std::string& why) const
  {
    auto it = entries_.find(key);
    const long line = it == entries_.end() ? 0 : it->second.line;
    throw ConfigError("config key '" + key + "'" + (line ? " (line " + std::to_string(line) + ")" : "") + ": " + why);
  }

  void finish() const
  {
    for (const auto& [key, entry] : entries_)
      if (!taken_.count(key)) fail(key, "unknown key");
  }

  std::map<std::string, std::string> resolved() const
  {
    std::map<std::string, std::string> out;
    for (const auto& [k, e] : entries_) out[k] = e.value;
    return out;
  }

 private:
  struct Entry {
    std::string value;
    long line = 0;
  };
  std::map<std::string, Entry> entries_;
  std::set<std::string> taken_;
};

enum class Scheduler { cosine_restart, constant };

struct TrainConfig {
  int colours = 4;
  double tau = 0.01;
  LossWeights weights;
  int epochs = 5;
  int batch_size = 32;
  double lr = 0.05;
  double momentum = 0.5;
  double weight_decay = 1e-3;
  double grad_clip = 0;  // global L2 norm cap; 0 disables
  Scheduler scheduler = Scheduler::cosine_restart;
  int restart_period = 10;  // epochs
  std::uint64_t seed = 0;
  // Desk-scale network sizes.
  int query_dim = 32;
  int encoder_width = 8;
  int classifier_width = 8;
  ClassifierArch classifier = ClassifierArch::small_cnn;
  PaletteMode palette = PaletteMode::attention;
  bool augment = false;

  void validate() const
  {
    if (colours < 1) throw ConfigError("colours must be >= 1");
    if (!(tau > 0)) throw ConfigError("tau must be positive");
    weights.validate();
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be positive");
    if (!(lr > 0)) throw ConfigError("lr must be positive");
    if (!(momentum >= 0 && momentum < 1)) throw ConfigError("momentum must lie in [0,1)");
    if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be >= 0");
    if (!(grad_clip >= 0)) throw ConfigError("grad_clip must be >= 0");
    if (restart_period < 1) throw ConfigError("restart_period must be >= 1");
  }

  CQFormerConfig quantiser() const { return {colours, query_dim, encoder_width, palette}; }
};

inline void read_train_config(KeyValueConfig& kv, TrainConfig& c)
{
  kv.take_into("colours", c.colours);
  if (auto bits = kv.take("bits")) {
    int b = 0;
    if (!detail::parse_int(*bits, b) || b < 0 || b > 8) kv.fail("bits", "expected an integer in [0,8]");
    if (kv.has("colours")) kv.fail("bits", "give either bits or colours, not both");
    c.colours = 1 << b;
  }
  kv.take_into("tau", c.tau);
  kv.take_into("alpha", c.weights.alpha);
  kv.take_into("beta", c.weights.beta);
  kv.take_into("gamma", c.weights.gamma);
  kv.take_into("epochs", c.epochs);
  kv.take_into("batch_size", c.batch_size);
  kv.take_into("lr", c.lr);
  kv.take_into("momentum", c.momentum);
  kv.take_into("weight_decay", c.weight_decay);
  kv.take_into("grad_clip", c.grad_clip);
  if (auto s = kv.take("scheduler")) {
    if (*s == "cosine_restart") c.scheduler = Scheduler::cosine_restart;
    else if (*s == "constant") c.scheduler = Scheduler::constant;
    else kv.fail("scheduler", "expected cosine_restart or constant");
  }
  kv.take_into("restart_period", c.restart_period);
  kv.take_into("seed", c.seed);
  kv.take_into("query_dim", c.query_dim);
  kv.take_into("encoder_width", c.encoder_width);
  kv.take_into("classifier_width", c.classifier_width);
  if (auto a = kv.take("classifier")) {
    if (*a != "small_cnn" && *a != "resnet18") kv.fail("classifier", "expected small_cnn or resnet18");
    c.classifier = classifier_arch_from_string(*a);
  }
  if (auto p = kv.take("palette")) {
    if (*p == "attention") c.palette = PaletteMode::attention;
    else if (*p == "fixed") c.palette = PaletteMode::fixed_centroids;
    else kv.fail("palette", "expected attention or fixed");
  }
  kv.take_into("augment", c.augment);
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("invalid training config: ") + e.what());
  }
}

inline json to_json(const TrainConfig& c)
{
  return {{"colours", c.colours},
          {"tau", c.tau},
          {"alpha", c.weights.alpha},
          {"beta", c.weights.beta},
          {"gamma", c.weights.gamma},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"lr", c.lr},
          {"momentum", c.momentum},
          {"weight_decay", c.weight_decay},
          {"grad_clip", c.grad_clip},
          {"scheduler", c.scheduler == Scheduler::cosine_restart ? "cosine_restart" : "constant"},
          {"restart_period", c.restart_period},
          {"seed", c.seed},
          {"query_dim", c.query_dim},
          {"encoder_width", c.encoder_width},
          {"classifier_width", c.classifier_width},
          {"classifier", to_string(c.classifier)},
          {"palette", c.palette == PaletteMode::attention ? "attention" : "fixed"},
          {"augment", c.augment}};
}

enum class LossCombination { machine, machine_diversity, full };
enum class EmbeddingKind { full_map, central };

struct EvolutionConfig {
  TrainConfig train = [] {
    TrainConfig t;
    t.colours = 3;
    t.tau = 1.0;
    return t;
  }();
  int embed_epochs = 40;
  int evolve_epochs = 20;
  double tau_embed = 1.0;
  std::optional<double> tau_evolve;  // defaults to tau_embed
  std::string parent = "wOO";
  LossCombination combination = LossCombination::full;
  EmbeddingKind embedding = EmbeddingKind::full_map;
  double split_noise = 1e-3;

  double evolve_tau() const { return tau_evolve.value_or(tau_embed); }
};

inline void read_evolution_config(KeyValueConfig& kv, EvolutionConfig& c)
{
  kv.take_into("embed_epochs", c.embed_epochs);
  kv.take_into("evolve_epochs", c.evolve_epochs);
  kv.take_into("tau_embed", c.tau_embed);
  if (kv.has("tau_evolve")) {
    double t = 0;
    kv.take_into("tau_evolve", t);
    c.tau_evolve = t;
  }
  kv.take_into("parent", c.parent);
  if (auto s = kv.take("losses")) {
    if (*s == "M") c.combination = LossCombination::machine;
    else if (*s == "M+Div") c.combination = LossCombination::machine_diversity;
    else if (*s == "M+Colour+Div+Perceptual") c.combination = LossCombination::full;
    else kv.fail("losses", "expected M, M+Div or M+Colour+Div+Perceptual");
  }
  if (auto s = kv.take("embedding")) {
    if (*s == "full") c.embedding = EmbeddingKind::full_map;
    else if (*s == "central") c.embedding = EmbeddingKind::central;
    else kv.fail("embedding", "expected full or central");
  }
  kv.take_into("split_noise", c.split_noise);
  if (!kv.has("colours") && !kv.has("bits")) kv.set("colours", "3");
  if (!kv.has("tau")) kv.set("tau", "1.0");
  read_train_config(kv, c.train);
  if (c.embed_epochs < 0 || c.evolve_epochs < 0) throw ConfigError("stage epochs must be >= 0");
  if (!(c.tau_embed > 0) || !(c.evolve_tau() > 0)) throw ConfigError("stage temperatures must be positive");
  if (!(c.split_noise >= 0)) throw ConfigError("split_noise must be >= 0");
}

// --------------------------------------------------------------- optimiser

// SGD with momentum and L2 weight decay: g += wd * p; b = mu * b + g; p -= lr * b.
template <class T>
class Sgd {
 public:
  Sgd(std::vector<ad::Var<T>> params, double momentum, double weight_decay)
      : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay)
  {
    for (const auto& p : params_) buffers_.emplace_back(p.value().shape());
  }

  // `grad_scale` multiplies the gradient before momentum and decay.
  void step(double lr, double grad_scale = 1.0)
  {
    const T mu = static_cast<T>(momentum_), wd = static_cast<T>(weight_decay_), eta = static_cast<T>(lr);
    const T gs = static_cast<T>(grad_scale);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (!p.has_grad()) continue;
      auto& w = p.value();
      const auto& g = p.node()->grad;
      auto& b = buffers_[i];
      for (std::size_t k = 0; k < w.size(); ++k) {
        b[k] = mu * b[k] + gs * g[k] + wd * w[k];
        w[k] -= eta * b[k];
      }
    }
  }

  void zero_grad()
  {
    for (auto& p : params_) p.zero_grad();
  }

  double grad_norm() const
  {
    double sq = 0;
    for (const auto& p : params_)
      if (p.has_grad())
        for (T g : p.node()->grad.storage()) sq += static_cast<double>(g) * static_cast<double>(g);
    return std::sqrt(sq);
  }

  std::vector<Tensor<T>>& buffers() noexcept { return buffers_; }

 private:
  std::vector<ad::Var<T>> params_;
  std::vector<Tensor<T>> buffers_;
  double momentum_, weight_decay_;
};

// Cosine annealing with warm restarts every `period` epochs; `progress` is
// the fractional epoch.
inline double scheduled_lr(const TrainConfig& c, double progress)
{
  if (c.scheduler == Scheduler::constant) return c.lr;
  const double t = std::fmod(progress, static_cast<double>(c.restart_period));
  return 0.5 * c.lr * (1.0 + std::cos(std::numbers::pi * t / c.restart_period));
}

// ---------------------------------------------------------------- training

struct EpochMetrics {
  int epoch = 0;
  LossParts parts;
  double total = 0;
  double top1 = 0;
};

inline json to_json(const EpochMetrics& m)
{
  return {{"epoch", m.epoch},     {"L_M", m.parts.machine},         {"R_Colour", m.parts.colour},
          {"R_Diversity", m.parts.diversity}, {"L_Perceptual", m.parts.perceptual}, {"L_total", m.total},
          {"top1", m.top1}};
}

inline EpochMetrics epoch_metrics_from_json(const json& j)
{
  EpochMetrics m;
  m.epoch = j.at("epoch").get<int>();
  m.parts = {j.at("L_M").get<double>(), j.at("R_Colour").get<double>(), j.at("R_Diversity").get<double>(),
             j.at("L_Perceptual").get<double>()};
  m.total = j.at("L_total").get<double>();
  m.top1 = j.at("top1").get<double>();
  return m;
}

inline void write_metrics_csv(std::ostream& out, const std::vector<EpochMetrics>& history)
{
  out << "epoch,L_M,R_Colour,R_Diversity,L_Perceptual,L_total,top1\n";
  out << std::setprecision(10);
  for (const auto& m : history)
    out << m.epoch << ',' << m.parts.machine << ',' << m.parts.colour << ',' << m.parts.diversity << ','
        << m.parts.perceptual << ',' << m.total << ',' << m.top1 << '\n';
}

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Batched top-1 evaluation. Consecutive images of equal size share a batch.
// Passing no quantiser evaluates the raw images (the upper-bound path).
template <class T>
EvalResult evaluate_batched(const CQFormer<T>* quantiser, const RecognitionNet<T>& classifier, const Dataset& data,
                            int num_classes, int batch = 64)
{
  if (data.empty()) throw InputError("evaluate: empty dataset");
  ad::NoGradGuard no_grad;
  ad::FlushDenormalsGuard ftz;
  EvalResult r;
  r.per_class.assign(num_classes, 0.0);
  r.per_class_count.assign(num_classes, 0);
  std::size_t correct = 0;
  std::size_t i = 0;
  while (i < data.size()) {
    std::size_t j = i + 1;
    while (j < data.size() && j - i < static_cast<std::size_t>(batch) && data[j].image.height() == data[i].image.height() &&
           data[j].image.width() == data[i].image.width())
      ++j;
    std::vector<RGBImage> images;
    for (std::size_t k = i; k < j; ++k) images.push_back(data[k].image);
    Tensor<T> x = to_batch<T>(std::span<const RGBImage>(images));
    if (quantiser) x = quantiser->forward_test(x).quantised;
    const auto scores = classifier(ad::constant(x)).value();
    const int k_classes = scores.dim(1);
    for (std::size_t k = i; k < j; ++k) {
      const int label = data[k].label;
      if (label < 0 || label >= num_classes) throw InputError("evaluate: label out of range");
      const T* row = scores.data() + (k - i) * k_classes;
      int pred = 0;
      for (int c = 1; c < k_classes; ++c)
        if (row[c] > row[pred]) pred = c;
      ++r.per_class_count[label];
      if (pred == label) {
        ++correct;
        r.per_class[label] += 1;
      }
    }
    i = j;
  }
  for (int c = 0; c < num_classes; ++c)
    if (r.per_class_count[c]) r.per_class[c] /= static_cast<double>(r.per_class_count[c]);
  r.samples = data.size();
  r.top1 = static_cast<double>(correct) / static_cast<double>(r.samples);
  return r;
}

// Everything a loss function sees for one batch.
template <class T>
struct Batch {
  Tensor<T> pixels;  // [N, 3, H, W]
  std::vector<int> labels;
  std::vector<const RGBImage*> images;  // after augmentation
};

template <class T>
struct StepLoss {
  ad::Var<T> total;
  LossParts parts;
};

template <class T>
using LossFunction = std::function<StepLoss<T>(const Batch<T>&, const typename CQFormer<T>::TrainPass&, const ad::Var<T>&)>;

// L_M + alpha R_Colour + beta R_Diversity + gamma L_Perceptual at temperature-
// softened assignments. Every term is always evaluated so the metrics report
// all of them; zero weights contribute exactly nothing to the gradient.
template <class T>
LossFunction<T> standard_loss(LossWeights w)
{
  return [w](const Batch<T>& b, const typename CQFormer<T>::TrainPass& pass, const ad::Var<T>& logits) {
    auto lm = ad::cross_entropy(logits, b.labels);
    auto colour = loss::cluster_dispersion(pass.probs, loss::cone_coordinates(b.pixels));
    auto div = loss::diversity(pass.probs);
    auto perc = ad::mse(pass.quantised, ad::constant(b.pixels));
    StepLoss<T> out;
    out.total = ad::weighted_sum<T>({lm, colour, div, perc},
                                    {T(1), static_cast<T>(w.alpha), static_cast<T>(w.beta), static_cast<T>(w.gamma)});
    out.parts = {lm.item(), colour.item(), div.item(), perc.item()};
    return out;
  };
}

template <class T>
struct TrainState {
  CQFormer<T> quantiser;
  RecognitionNet<T> classifier;
  std::vector<EpochMetrics> history;
  std::vector<Tensor<T>> momentum;  // empty until the optimiser has run
  int epochs_done = 0;
};

struct TrainOptions {
  std::string checkpoint_dir;  // per-epoch archives when non-empty
  const Dataset* eval = nullptr;  // top1 is measured here (training set otherwise)
  std::function<void(const EpochMetrics&)> on_epoch;
  // (epoch, step, L_total, gradient norm before clipping)
  std::function<void(int, std::size_t, double, double)> on_step;
  std::string stage = "train";    // tag stored in checkpoints
  double tau_override = 0;        // > 0 replaces cfg.tau (used by the evolution protocol)
};

template <class T>
std::vector<ad::Var<T>> trainable(CQFormer<T>& q, RecognitionNet<T>& f)
{
  std::vector<ad::Var<T>> out;
  for (auto& p : q.parameters().items()) out.push_back(p.var);
  for (auto& p : f.parameters().items()) out.push_back(p.var);
  return out;
}

template <class T>
Checkpoint make_training_checkpoint(const TrainState<T>& s, const TrainConfig& cfg, const std::string& stage)
{
  Checkpoint ck = make_model_checkpoint(s.quantiser, s.classifier);
  ck.meta["stage"] = stage;
  ck.meta["epochs_done"] = s.epochs_done;
  ck.meta["train_config"] = to_json(cfg);
  json hist = json::array();
  for (const auto& m : s.history) hist.push_back(to_json(m));
  ck.meta["history"] = hist;
  for (std::size_t i = 0; i < s.momentum.size(); ++i) ck.put("optim.momentum." + std::to_string(i), s.momentum[i]);
  return ck;
}

template <class T>
TrainState<T> training_state_from_checkpoint(const Checkpoint& ck)
{
  auto [q, f] = load_models<T>(ck);
  TrainState<T> s{std::move(q), std::move(f), {}, {}, ck.meta.value("epochs_done", 0)};
  if (ck.meta.contains("history"))
    for (const auto& m : ck.meta["history"]) s.history.push_back(epoch_metrics_from_json(m));
  for (std::size_t i = 0;; ++i) {
    const Tensor<double>* t = ck.find("optim.momentum." + std::to_string(i));
    if (!t) break;
    s.momentum.push_back(t->template cast<T>());
  }
  return s;
}

inline std::string epoch_checkpoint_name(int epoch)
{
  std::ostringstream os;
  os << "epoch_" << std::setw(3) << std::setfill('0') << epoch << ".ckpt";
  return os.str();
}

// Runs epochs [state.epochs_done, cfg.epochs). Each epoch draws its batch order
// and augmentation from a generator seeded by (seed, epoch), so resuming from
// a checkpoint replays the uninterrupted run exactly.
template <class T>
void train_epochs(TrainState<T>& state, const TrainConfig& cfg, const Dataset& data, const LossFunction<T>& loss_fn,
                  const TrainOptions& opts = {})
{
  cfg.validate();
  if (data.empty()) throw InputError("train: empty dataset");
  const int num_classes = state.classifier.num_classes();
  for (const auto& s : data)
    if (s.label < 0 || s.label >= num_classes) throw InputError("train: label out of range");
  ad::FlushDenormalsGuard ftz;
  const T tau = static_cast<T>(opts.tau_override > 0 ? opts.tau_override : cfg.tau);
  Sgd<T> opt(trainable(state.quantiser, state.classifier), cfg.momentum, cfg.weight_decay);
  if (!state.momentum.empty()) {
    if (state.momentum.size() != opt.buffers().size()) throw LoadError("checkpoint optimiser state does not match model");
    opt.buffers() = state.momentum;
  }
  if (!opts.checkpoint_dir.empty()) std::filesystem::create_directories(opts.checkpoint_dir);
  const std::size_t n = data.size();
  const std::size_t steps = (n + cfg.batch_size - 1) / cfg.batch_size;

  for (int epoch = state.epochs_done; epoch < cfg.epochs; ++epoch) {
    const auto order = shuffled_order(n, derive_seed(cfg.seed, 0x5eed, static_cast<std::uint64_t>(epoch)));
    Rng aug_rng(derive_seed(cfg.seed, 0xa06, static_cast<std::uint64_t>(epoch)));
    LossParts sum;
    double total_sum = 0;
    for (std::size_t step = 0; step < steps; ++step) {
      const std::size_t lo = step * cfg.batch_size, hi = std::min(n, lo + cfg.batch_size);
      std::vector<RGBImage> images;
      Batch<T> batch;
      for (std::size_t k = lo; k < hi; ++k) {
        const auto& s = data[order[k]];
        images.push_back(cfg.augment ? augment(s.image, 4, aug_rng) : s.image);
        batch.labels.push_back(s.label);
      }
      for (const auto& img : images) batch.images.push_back(&img);
      batch.pixels = to_batch<T>(std::span<const RGBImage>(images));

      opt.zero_grad();
      auto pass = state.quantiser.forward_train(batch.pixels, tau);
      auto logits = state.classifier(pass.quantised);
      StepLoss<T> l = loss_fn(batch, pass, logits);
      const double value = static_cast<double>(l.total.item());
      if (!std::isfinite(value)) {
        if (!opts.checkpoint_dir.empty())
          save_checkpoint((std::filesystem::path(opts.checkpoint_dir) / "diverged.ckpt").string(),
                          make_training_checkpoint(state, cfg, opts.stage));
        throw TrainingDiverged("training diverged at epoch " + std::to_string(epoch) + ", step " +
                               std::to_string(step) + " (L_total = " + std::to_string(value) + ")");
      }
      ad::backward(l.total);
      const double norm = opt.grad_norm();
      const double scale = cfg.grad_clip > 0 && norm > cfg.grad_clip ? cfg.grad_clip / norm : 1.0;
      opt.step(scheduled_lr(cfg, epoch + static_cast<double>(step) / static_cast<double>(steps)), scale);
      if (opts.on_step) opts.on_step(epoch + 1, step, value, norm);

      const double w = static_cast<double>(hi - lo);
      sum.machine += w * l.parts.machine;
      sum.colour += w * l.parts.colour;
      sum.diversity += w * l.parts.diversity;
      sum.perceptual += w * l.parts.perceptual;
      total_sum += w * value;
    }
    EpochMetrics m;
    m.epoch = epoch + 1;
    const double dn = static_cast<double>(n);
    m.parts = {sum.machine / dn, sum.colour / dn, sum.diversity / dn, sum.perceptual / dn};
    m.total = total_sum / dn;
    m.top1 = evaluate_batched(&state.quantiser, state.classifier, opts.eval ? *opts.eval : data, num_classes).top1;
    state.history.push_back(m);
    state.epochs_done = epoch + 1;
    state.momentum = opt.buffers();
    if (!opts.checkpoint_dir.empty())
      save_checkpoint((std::filesystem::path(opts.checkpoint_dir) / epoch_checkpoint_name(epoch + 1)).string(),
                      make_training_checkpoint(state, cfg, opts.stage));
    if (opts.on_epoch) opts.on_epoch(m);
  }
}

template <class T>
TrainState<T> initial_state(const TrainConfig& cfg, int num_classes)
{
  cfg.validate();
  return {CQFormer<T>(cfg.quantiser(), derive_seed(cfg.seed, 0x9a)),
          RecognitionNet<T>({num_classes, cfg.classifier_width, cfg.classifier}, derive_seed(cfg.seed, 0xc1)),
          {},
          {},
          0};
}

template <class T = float>
TrainState<T> train_joint(const TrainConfig& cfg, const Dataset& data, const TrainOptions& opts = {})
{
  auto state = initial_state<T>(cfg, std::max(2, class_count(data)));
  train_epochs(state, cfg, data, standard_loss<T>(cfg.weights), opts);
  return state;
}

// ------------------------------------------------------- embedding/evolution

template <class T>
Tensor<T> human_targets(const std::vector<const RGBImage*>& images, const HumanWCSMap& hmap)
{
  const int n = static_cast<int>(images.size()), c = hmap.colours();
  const int h = images[0]->height(), w = images[0]->width();
  Tensor<T> out({n, c, h, w});
  for (int b = 0; b < n; ++b) {
    const auto m = project_human_map(*images[b], hmap);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int k = 0; k < c; ++k) out.at(b, k, y, x) = static_cast<T>(m(y, x, k));
  }
  return out;
}

template <class T>
MachineWCSMap machine_map(const CQFormer<T>& q, const Dataset& data)
{
  ad::FlushDenormalsGuard ftz;
  MachineMapBuilder builder(q.colours());
  for (const auto& s : data) builder.add(s.image, q.quantise_test(s.image).indices);
  return builder.build();
}

template <class T = float>
struct EmbeddingResult {
  TrainState<T> state;
  MachineWCSMap map;
  double agreement = 0;
};

// L_M plus the per-pixel cross-entropy to the projected human map (full) or
// the soft cluster dispersion around the human term centres (central).
template <class T = float>
EmbeddingResult<T> run_embedding_stage(const EvolutionConfig& cfg, const HumanWCSMap& hmap, const Dataset& data,
                                       TrainOptions opts = {})
{
  if (cfg.train.colours != hmap.colours())
    throw ConfigError("embedding: colours = " + std::to_string(cfg.train.colours) + " but the human map has " +
                      std::to_string(hmap.colours()) + " terms");
  TrainConfig tc = cfg.train;
  tc.epochs = cfg.embed_epochs;
  tc.tau = cfg.tau_embed;
  auto state = initial_state<T>(tc, std::max(2, class_count(data)));
  LossFunction<T> fn;
  if (cfg.embedding == EmbeddingKind::full_map) {
    fn = [&hmap, tau = static_cast<T>(cfg.tau_embed)](const Batch<T>& b, const typename CQFormer<T>::TrainPass& pass,
                                                      const ad::Var<T>& logits) {
      auto lm = ad::cross_entropy(logits, b.labels);
      auto ce = loss::soft_target_cross_entropy(pass.logits, human_targets<T>(b.images, hmap), tau);
      StepLoss<T> out{ad::add(lm, ce), {lm.item(), 0, 0, 0}};
      return out;
    };
  } else {
    Tensor<T> centres({hmap.colours(), 3});
    const auto hv = human_term_centres(hmap);
    for (int k = 0; k < hmap.colours(); ++k) {
      const Cone z = hsv_to_cone({hv[k].hue, 1.0, hv[k].value});
      for (int j = 0; j < 3; ++j) centres[k * 3 + j] = static_cast<T>(z[j]);
    }
    fn = [centres](const Batch<T>& b, const typename CQFormer<T>::TrainPass& pass, const ad::Var<T>& logits) {
      auto lm = ad::cross_entropy(logits, b.labels);
      auto reg = loss::cluster_dispersion(pass.probs, loss::cone_coordinates(b.pixels, true),
                                          std::optional<Tensor<T>>(centres));
      StepLoss<T> out{ad::add(lm, reg), {lm.item(), reg.item(), 0, 0}};
      return out;
    };
  }
  opts.stage = "embedding";
  train_epochs(state, tc, data, fn, opts);
  EmbeddingResult<T> out{std::move(state), {}, 0};
  out.map = machine_map(out.state.quantiser, opts.eval ? *opts.eval : data);
  out.agreement = map_agreement(out.map, hmap);
  return out;
}

template <class T = float>
struct EvolutionReport {
  MachineWCSMap pre_map, post_map;
  std::vector<double> pre_share, post_share;  // pixel share per colour index
  int parent = 0;
  int new_colour = 0;
  double new_colour_share = 0;
  bool regions_disjoint = false;
  int nonempty_regions = 0;
  std::vector<EpochMetrics> history;
  std::string split_mechanism = "clone-and-perturb";
  std::optional<TrainState<T>> state;
};

// Splits colour `parent` in two (the clone gets index C) and keeps training
// with the selected loss combination.
template <class T = float>
EvolutionReport<T> run_evolution_stage(const TrainState<T>& embedded, const EvolutionConfig& cfg,
                                       const HumanWCSMap& hmap, const Dataset& data, TrainOptions opts = {})
{
  const int parent = hmap.term_index(cfg.parent);
  if (parent < 0) throw ConfigError("evolution: unknown parent term '" + cfg.parent + "'");
  if (embedded.quantiser.colours() != hmap.colours())
    throw ConfigError("evolution: embedded quantiser does not match the human map");
  const Dataset& probe = opts.eval ? *opts.eval : data;

  EvolutionReport<T> rep{};
  rep.parent = parent;
  rep.new_colour = embedded.quantiser.colours();
  rep.pre_map = machine_map(embedded.quantiser, probe);
  rep.pre_share = rep.pre_map.pixel_share();

  Rng split_rng(derive_seed(cfg.train.seed, 0x5b11));
  TrainState<T> state{embedded.quantiser.expanded(parent, cfg.split_noise, split_rng), embedded.classifier.clone(),
                      {}, {}, 0};
  TrainConfig tc = cfg.train;
  tc.colours = embedded.quantiser.colours() + 1;
  tc.epochs = cfg.evolve_epochs;
  LossWeights w = cfg.train.weights;
  if (cfg.combination == LossCombination::machine) w = {0, 0, 0};
  if (cfg.combination == LossCombination::machine_diversity) w = {0, w.beta, 0};
  opts.stage = "evolution";
  opts.tau_override = cfg.evolve_tau();
  train_epochs(state, tc, data, standard_loss<T>(w), opts);

  rep.post_map = machine_map(state.quantiser, probe);
  rep.post_share = rep.post_map.pixel_share();
  rep.new_colour_share = rep.post_share[rep.new_colour];
  // Each chip carries one modal index, so regions can only overlap through a
  // bookkeeping error; the check guards the report's contract.
  std::vector<int> owner(WCSGrid::kChips, -1);
  rep.regions_disjoint = true;
  for (int c = 0; c < rep.post_map.colours; ++c) {
    const auto chips = rep.post_map.region(c);
    if (!chips.empty()) ++rep.nonempty_regions;
    for (int chip : chips) {
      if (owner[chip] != -1) rep.regions_disjoint = false;
      owner[chip] = c;
    }
  }
  rep.history = state.history;
  rep.state = std::move(state);
  return rep;
}

}  // namespace cqlab
