#pragma once

// Checkpoint archive: a single file holding named tensors plus a JSON manifest.
//
//   bytes 0..7   magic "CQLABCK1"
//   bytes 8..15  manifest length L, little-endian uint64
//   next L bytes UTF-8 JSON: {"meta": {...}, "tensors": [{"name", "shape", "offset"}]}
//   remainder    tensor payloads, little-endian IEEE-754 float64, concatenated
//
// Tensors are widened to float64, so float32 parameters round-trip exactly.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "cqlab/common.hpp"
#include "cqlab/cqformer.hpp"
#include "cqlab/layers.hpp"
#include "cqlab/recognition.hpp"

namespace cqlab {

using json = nlohmann::json;

struct Checkpoint {
  json meta = json::object();
  std::vector<std::pair<std::string, Tensor<double>>> tensors;

  const Tensor<double>* find(const std::string& name) const
  {
    for (const auto& [n, t] : tensors)
      if (n == name) return &t;
    return nullptr;
  }

  template <class T>
  void put(const std::string& name, const Tensor<T>& t)
  {
    tensors.emplace_back(name, t.template cast<double>());
  }
};

namespace detail {
inline constexpr char kCheckpointMagic[8] = {'C', 'Q', 'L', 'A', 'B', 'C', 'K', '1'};

inline void put_u64(std::string& out, std::uint64_t v)
{
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline std::uint64_t get_u64(const char* p)
{
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}
}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ck)
{
  json index = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : ck.tensors) {
    index.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.size();
  }
  const std::string manifest = json{{"meta", ck.meta}, {"tensors", index}}.dump();
  std::string out(detail::kCheckpointMagic, 8);
  detail::put_u64(out, manifest.size());
  out += manifest;
  for (const auto& [name, t] : ck.tensors)
    for (double v : t.values()) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes, const std::string& origin = "checkpoint")
{
  if (bytes.size() < 16 || std::memcmp(bytes.data(), detail::kCheckpointMagic, 8) != 0)
    throw LoadError(origin + ": not a checkpoint archive");
  const std::uint64_t len = detail::get_u64(bytes.data() + 8);
  if (len > bytes.size() - 16) throw LoadError(origin + ": truncated manifest");
  json manifest;
  try {
    manifest = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(len));
  } catch (const json::exception& e) {
    throw LoadError(origin + ": bad manifest: " + e.what());
  }
  const std::size_t payload = 16 + len;
  const std::size_t values = (bytes.size() - payload) / 8;
  if ((bytes.size() - payload) % 8) throw LoadError(origin + ": payload is not a whole number of float64 values");
  Checkpoint ck;
  ck.meta = manifest.value("meta", json::object());
  for (const auto& entry : manifest.at("tensors")) {
    Shape shape = entry.at("shape").get<Shape>();
    const std::uint64_t off = entry.at("offset").get<std::uint64_t>();
    const std::size_t n = numel(shape);
    if (off + n > values) throw LoadError(origin + ": tensor " + entry.at("name").get<std::string>() + " out of bounds");
    std::vector<double> data(n);
    for (std::size_t i = 0; i < n; ++i) data[i] = std::bit_cast<double>(detail::get_u64(bytes.data() + payload + 8 * (off + i)));
    ck.tensors.emplace_back(entry.at("name").get<std::string>(), Tensor<double>(std::move(shape), std::move(data)));
  }
  return ck;
}

// Written to a temporary sibling and renamed, so a crash never leaves a
// half-written archive under the final name.
inline void save_checkpoint(const std::string& path, const Checkpoint& ck)
{
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw LoadError("cannot write " + tmp);
    const std::string bytes = encode_checkpoint(ck);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw LoadError("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::string& path)
{
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open checkpoint " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes, path);
}

template <class T>
void store_parameters(Checkpoint& ck, const std::string& prefix, const ParameterList<T>& params)
{
  for (const auto& p : params.items()) ck.put(prefix + p.name, p.var.value());
}

template <class T>
void restore_parameters(const Checkpoint& ck, const std::string& prefix, ParameterList<T>& params)
{
  for (auto& p : params.items()) {
    const Tensor<double>* t = ck.find(prefix + p.name);
    if (!t) throw LoadError("checkpoint is missing tensor " + prefix + p.name);
    if (t->shape() != p.var.value().shape())
      throw LoadError("checkpoint tensor " + prefix + p.name + " has shape " + to_string(t->shape()) + ", expected " +
                      to_string(p.var.value().shape()));
    p.var.value() = t->template cast<T>();
  }
}

inline json to_json(const CQFormerConfig& c)
{
  return {{"colours", c.colours},
          {"query_dim", c.query_dim},
          {"encoder_width", c.encoder_width},
          {"palette", c.palette == PaletteMode::attention ? "attention" : "fixed"}};
}

inline CQFormerConfig quantiser_config_from_json(const json& j)
{
  CQFormerConfig c;
  c.colours = j.at("colours").get<int>();
  c.query_dim = j.at("query_dim").get<int>();
  c.encoder_width = j.at("encoder_width").get<int>();
  c.palette = j.at("palette").get<std::string>() == "fixed" ? PaletteMode::fixed_centroids : PaletteMode::attention;
  return c;
}

inline json to_json(const ClassifierConfig& c)
{
  return {{"num_classes", c.num_classes}, {"width", c.width}, {"arch", to_string(c.arch)}};
}

inline ClassifierConfig classifier_config_from_json(const json& j)
{
  return {j.at("num_classes").get<int>(), j.at("width").get<int>(),
          classifier_arch_from_string(j.value("arch", std::string("small_cnn")))};
}

// Quantiser + classifier pair under "quantiser." / "classifier." prefixes.
template <class T>
Checkpoint make_model_checkpoint(const CQFormer<T>& q, const RecognitionNet<T>& f)
{
  Checkpoint ck;
  ck.meta["quantiser"] = to_json(q.config());
  ck.meta["classifier"] = to_json(f.config());
  store_parameters(ck, "quantiser.", q.parameters());
  store_parameters(ck, "classifier.", f.parameters());
  return ck;
}

template <class T>
std::pair<CQFormer<T>, RecognitionNet<T>> load_models(const Checkpoint& ck)
{
  if (!ck.meta.contains("quantiser") || !ck.meta.contains("classifier"))
    throw LoadError("checkpoint does not describe a quantiser/classifier pair");
  CQFormer<T> q(quantiser_config_from_json(ck.meta["quantiser"]), 0);
  RecognitionNet<T> f(classifier_config_from_json(ck.meta["classifier"]), 0);
  restore_parameters(ck, "quantiser.", q.parameters());
  restore_parameters(ck, "classifier.", f.parameters());
  return {std::move(q), std::move(f)};
}

}  // namespace cqlab
