#pragma once

// Loss terms. Each term has a value-level form on image types (used for
// analysis, reporting and tests) and, where it takes part in training, a
// differentiable form on batch tensors.
//
//   L_total = L_M + alpha * R_Colour + beta * R_Diversity + gamma * L_Perceptual

#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cqlab/colour.hpp"
#include "cqlab/cqformer.hpp"
#include "cqlab/ops.hpp"

namespace cqlab {

struct LossWeights {
  double alpha = 1.0;  // intra-cluster colour similarity
  double beta = 0.3;   // diversity
  double gamma = 1.0;  // perceptual MSE

  void validate() const
  {
    if (!(alpha >= 0) || !(beta >= 0) || !(gamma >= 0)) throw ConfigError("loss weights must be non-negative");
  }
};

struct LossParts {
  double machine = 0;
  double colour = 0;
  double diversity = 0;
  double perceptual = 0;
};

struct LossReport {
  LossParts parts;
  double total = 0;
  // L2 norm of the total-loss gradient per parameter group, when computed.
  std::map<std::string, double> grad_norms;
};

inline LossReport total_loss(const LossParts& parts, const LossWeights& w)
{
  w.validate();
  LossReport r;
  r.parts = parts;
  r.total = parts.machine + w.alpha * parts.colour + w.beta * parts.diversity + w.gamma * parts.perceptual;
  return r;
}

// Cross-entropy of softmax(logits) against label y.
inline double machine_loss(std::span<const double> logits, int y)
{
  if (logits.empty()) throw InputError("machine_loss: empty logits");
  if (y < 0 || static_cast<std::size_t>(y) >= logits.size()) throw InputError("machine_loss: label out of range");
  const double mx = *std::max_element(logits.begin(), logits.end());
  double s = 0;
  for (double z : logits) s += std::exp(z - mx);
  return mx + std::log(s) - logits[static_cast<std::size_t>(y)];
}

// Mean over clusters of the mean squared HSV distance to the cluster centroid.
// Centroids are cone-space means; empty clusters contribute zero.
inline double intra_cluster_colour_reg(std::span<const HSVPixel> pixels, std::span<const int> assignment, int colours)
{
  if (pixels.size() != assignment.size()) throw InputError("intra_cluster_colour_reg: size mismatch");
  if (colours < 1) throw InputError("intra_cluster_colour_reg: colour count must be >= 1");
  std::vector<Cone> sums(colours, Cone{0, 0, 0}), z(pixels.size());
  std::vector<std::size_t> counts(colours, 0);
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    const int c = assignment[i];
    if (c < 0 || c >= colours) throw InputError("intra_cluster_colour_reg: index out of range");
    z[i] = hsv_to_cone(pixels[i]);
    for (int k = 0; k < 3; ++k) sums[c][k] += z[i][k];
    ++counts[c];
  }
  // Cone-space Euclidean distance equals the HSV distance, and unlike the
  // law-of-cosines form it does not cancel for pixels near their centroid.
  std::vector<Cone> centroids(colours, Cone{0, 0, 0});
  for (int c = 0; c < colours; ++c)
    if (counts[c])
      for (int k = 0; k < 3; ++k) centroids[c][k] = sums[c][k] / static_cast<double>(counts[c]);
  std::vector<double> within(colours, 0.0);
  for (std::size_t i = 0; i < pixels.size(); ++i)
    within[assignment[i]] += squared_distance(z[i], centroids[assignment[i]]);
  double r = 0;
  for (int c = 0; c < colours; ++c)
    if (counts[c]) r += within[c] / static_cast<double>(counts[c]);
  return r / colours;
}

inline double intra_cluster_colour_reg(std::span<const HSVPixel> pixels, const IndexMap& m, int colours)
{
  return intra_cluster_colour_reg(pixels, std::span<const int>(m.data), colours);
}

// Hard membership derived from the probability map by argmax.
inline double intra_cluster_colour_reg(std::span<const HSVPixel> pixels, const ProbabilityMap& m)
{
  return intra_cluster_colour_reg(pixels, argmax_index_map(m), m.colours);
}

// log2(C) * (1 - mean over colours of the spatial max probability).
inline double diversity_reg(const ProbabilityMap& m)
{
  if (m.colours < 1) throw InputError("diversity_reg: no colours");
  std::vector<double> best(m.colours, 0.0);
  const std::size_t pixels = static_cast<std::size_t>(m.height) * m.width;
  for (std::size_t p = 0; p < pixels; ++p)
    for (int c = 0; c < m.colours; ++c) best[c] = std::max(best[c], m.data[p * m.colours + c]);
  double s = 0;
  for (double b : best) s += b;
  return std::log2(static_cast<double>(m.colours)) * (1.0 - s / m.colours);
}

inline double perceptual_loss(const RGBImage& quantised, const RGBImage& original)
{
  if (quantised.height() != original.height() || quantised.width() != original.width())
    throw InputError("perceptual_loss: dimension mismatch");
  double s = 0;
  for (std::size_t i = 0; i < original.data().size(); ++i) {
    const double d = quantised.data()[i] - original.data()[i];
    s += d * d;
  }
  return s / static_cast<double>(original.data().size());
}

// Pixel-averaged cross-entropy -sum_c target * log(pred).
inline double embedding_cross_entropy(const ProbabilityMap& pred, const ProbabilityMap& target)
{
  if (pred.height != target.height || pred.width != target.width || pred.colours != target.colours)
    throw InputError("embedding_cross_entropy: shape mismatch");
  const std::size_t pixels = static_cast<std::size_t>(pred.height) * pred.width;
  double s = 0;
  for (std::size_t i = 0; i < pixels * pred.colours; ++i)
    if (target.data[i] > 0) s -= target.data[i] * std::log(pred.data[i]);
  return s / static_cast<double>(pixels);
}

inline double full_embedding_loss(const ProbabilityMap& pred, const ProbabilityMap& human,
                                  std::span<const double> logits, int y)
{
  return machine_loss(logits, y) + embedding_cross_entropy(pred, human);
}

// (hue, value) centre of a human colour term.
struct HueValue {
  double hue = 0;
  double value = 0;
};

// Intra-cluster term with fixed centres and saturation forced to 1.
inline double central_colour_reg(std::span<const HSVPixel> pixels, std::span<const int> assignment,
                                 std::span<const HueValue> centres)
{
  if (pixels.size() != assignment.size()) throw InputError("central_colour_reg: size mismatch");
  const int colours = static_cast<int>(centres.size());
  std::vector<double> within(colours, 0.0);
  std::vector<std::size_t> counts(colours, 0);
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    const int c = assignment[i];
    if (c < 0 || c >= colours) throw InputError("central_colour_reg: index out of range");
    within[c] += hsv_squared_distance({pixels[i].h, 1.0, pixels[i].v}, {centres[c].hue, 1.0, centres[c].value});
    ++counts[c];
  }
  double r = 0;
  for (int c = 0; c < colours; ++c)
    if (counts[c]) r += within[c] / static_cast<double>(counts[c]);
  return r / colours;
}

inline double central_embedding_loss(std::span<const HSVPixel> pixels, const IndexMap& assignment,
                                     std::span<const HueValue> centres, std::span<const double> logits, int y)
{
  return machine_loss(logits, y) + central_colour_reg(pixels, std::span<const int>(assignment.data), centres);
}

// ============================================================ training forms

namespace loss {

// Batch cone coordinates [N, H*W, 3] of NCHW pixels, optionally with s = 1.
template <class T>
Tensor<T> cone_coordinates(const Tensor<T>& x, bool unit_saturation = false)
{
  const int n = x.dim(0), h = x.dim(2), w = x.dim(3);
  const int plane = h * w;
  Tensor<T> out({n, plane, 3});
  for (int b = 0; b < n; ++b)
    for (int p = 0; p < plane; ++p) {
      const RGB px{static_cast<double>(x[(b * 3 + 0) * plane + p]), static_cast<double>(x[(b * 3 + 1) * plane + p]),
                   static_cast<double>(x[(b * 3 + 2) * plane + p])};
      HSVPixel hsv = rgb_to_hsv(px);
      if (unit_saturation) hsv.s = 1.0;
      const Cone z = hsv_to_cone(hsv);
      for (int k = 0; k < 3; ++k) out[(static_cast<std::size_t>(b) * plane + p) * 3 + k] = static_cast<T>(z[k]);
    }
  return out;
}

// Soft-membership cluster dispersion. probs: [N, C, H, W]; cone: [N, H*W, 3].
// Cluster c weights pixel i by probs[c, i]; its centre is the weighted cone
// mean, or centres[c] ([C, 3]) when given. Returns the batch mean of
// (1/C) sum_c sum_i w_ci |z_i - mu_c|^2 / sum_i w_ci. Converges to the hard
// form as the probabilities approach one-hot.
template <class T>
ad::Var<T> cluster_dispersion(const ad::Var<T>& probs, const Tensor<T>& cone,
                              const std::optional<Tensor<T>>& centres = std::nullopt)
{
  const int n = probs.dim(0), c = probs.dim(1);
  const int plane = probs.dim(2) * probs.dim(3);
  if (cone.dim(0) != n || cone.dim(1) != plane) throw InputError("cluster_dispersion: shape mismatch");
  const T empty_mass = T(1e-8);
  // Per (n, c): total mass, centre, dispersion.
  auto mass = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n) * c, T(0));
  auto mu = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n) * c * 3, T(0));
  auto disp = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n) * c, T(0));
  const auto& m = probs.value();
  T total = 0;
  for (int b = 0; b < n; ++b)
    for (int k = 0; k < c; ++k) {
      const std::size_t nc = static_cast<std::size_t>(b) * c + k;
      const T* w = m.data() + nc * plane;
      const T* z = cone.data() + static_cast<std::size_t>(b) * plane * 3;
      T wsum = 0;
      for (int i = 0; i < plane; ++i) wsum += w[i];
      (*mass)[nc] = wsum;
      if (wsum <= empty_mass) continue;
      T* centre = mu->data() + nc * 3;
      if (centres) {
        for (int j = 0; j < 3; ++j) centre[j] = (*centres)[static_cast<std::size_t>(k) * 3 + j];
      } else {
        for (int i = 0; i < plane; ++i)
          for (int j = 0; j < 3; ++j) centre[j] += w[i] * z[i * 3 + j];
        for (int j = 0; j < 3; ++j) centre[j] /= wsum;
      }
      T acc = 0;
      for (int i = 0; i < plane; ++i) {
        T d = 0;
        for (int j = 0; j < 3; ++j) d += (z[i * 3 + j] - centre[j]) * (z[i * 3 + j] - centre[j]);
        acc += w[i] * d;
      }
      (*disp)[nc] = acc / wsum;
      total += (*disp)[nc];
    }
  const T scale = T(1) / (static_cast<T>(n) * c);
  Tensor<T> cone_copy = cone;
  return ad::make_result<T>(Tensor<T>({1}, total * scale), {probs}, [=](ad::Node<T>& self) {
    auto& g = probs.node()->ensure_grad();
    const T up = self.grad[0] * scale;
    // d/dw_i of sum w d_i / W is (d_i - R) / W for both free and fixed centres
    // (the free centre is stationary).
    for (int b = 0; b < n; ++b)
      for (int k = 0; k < c; ++k) {
        const std::size_t nc = static_cast<std::size_t>(b) * c + k;
        const T wsum = (*mass)[nc];
        if (wsum <= empty_mass) continue;
        const T* centre = mu->data() + nc * 3;
        const T* z = cone_copy.data() + static_cast<std::size_t>(b) * plane * 3;
        T* gw = g.data() + nc * plane;
        for (int i = 0; i < plane; ++i) {
          T d = 0;
          for (int j = 0; j < 3; ++j) d += (z[i * 3 + j] - centre[j]) * (z[i * 3 + j] - centre[j]);
          gw[i] += up * (d - (*disp)[nc]) / wsum;
        }
      }
  });
}

// Batch mean of log2(C) * (1 - (1/C) sum_c max_position probs[c]).
template <class T>
ad::Var<T> diversity(const ad::Var<T>& probs)
{
  const int n = probs.dim(0), c = probs.dim(1);
  const int plane = probs.dim(2) * probs.dim(3);
  const T log2c = static_cast<T>(std::log2(static_cast<double>(c)));
  auto where = std::make_shared<std::vector<std::size_t>>(static_cast<std::size_t>(n) * c);
  T total = 0;
  for (int b = 0; b < n; ++b) {
    T s = 0;
    for (int k = 0; k < c; ++k) {
      const std::size_t base = (static_cast<std::size_t>(b) * c + k) * plane;
      std::size_t best = base;
      for (int i = 1; i < plane; ++i)
        if (probs.value()[base + i] > probs.value()[best]) best = base + i;
      (*where)[static_cast<std::size_t>(b) * c + k] = best;
      s += probs.value()[best];
    }
    total += log2c * (T(1) - s / c);
  }
  return ad::make_result<T>(Tensor<T>({1}, total / n), {probs}, [=](ad::Node<T>& self) {
    auto& g = probs.node()->ensure_grad();
    const T up = -self.grad[0] * log2c / (static_cast<T>(n) * c);
    for (std::size_t idx : *where) g[idx] += up;
  });
}

// Mean over pixels of the cross-entropy between Softmax(logits / tau) and a
// target distribution. logits, target: [N, C, H, W].
template <class T>
ad::Var<T> soft_target_cross_entropy(const ad::Var<T>& logits, const Tensor<T>& target, T tau)
{
  if (logits.shape() != target.shape()) throw InputError("soft_target_cross_entropy: shape mismatch");
  const int n = logits.dim(0), c = logits.dim(1);
  const std::size_t plane = static_cast<std::size_t>(logits.dim(2)) * logits.dim(3);
  auto probs = std::make_shared<Tensor<T>>(logits.shape());
  T total = 0;
  for (int b = 0; b < n; ++b)
    for (std::size_t p = 0; p < plane; ++p) {
      auto at = [&](int k) { return (static_cast<std::size_t>(b) * c + k) * plane + p; };
      T mx = -std::numeric_limits<T>::infinity();
      for (int k = 0; k < c; ++k) mx = std::max(mx, logits.value()[at(k)] / tau);
      T s = 0;
      for (int k = 0; k < c; ++k) s += std::exp(logits.value()[at(k)] / tau - mx);
      const T lse = mx + std::log(s);
      for (int k = 0; k < c; ++k) {
        const T logp = logits.value()[at(k)] / tau - lse;
        (*probs)[at(k)] = std::exp(logp);
        total -= target[at(k)] * logp;
      }
    }
  const T count = static_cast<T>(n * plane);
  Tensor<T> tgt = target;
  return ad::make_result<T>(Tensor<T>({1}, total / count), {logits}, [=](ad::Node<T>& self) {
    auto& g = logits.node()->ensure_grad();
    const T up = self.grad[0] / (count * tau);
    for (int b = 0; b < n; ++b)
      for (std::size_t p = 0; p < plane; ++p) {
        T tsum = 0;
        for (int k = 0; k < c; ++k) tsum += tgt[(static_cast<std::size_t>(b) * c + k) * plane + p];
        for (int k = 0; k < c; ++k) {
          const std::size_t i = (static_cast<std::size_t>(b) * c + k) * plane + p;
          g[i] += up * ((*probs)[i] * tsum - tgt[i]);
        }
      }
  });
}

}  // namespace loss
}  // namespace cqlab
