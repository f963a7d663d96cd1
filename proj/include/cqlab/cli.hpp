#pragma once

// Library side of the command-line tool. Each command validates its inputs,
// does the work, and leaves a run directory holding a manifest.json plus the
// command's artefacts. The tools/ executable only parses flags.

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cqlab/baselines.hpp"
#include "cqlab/checkpoint.hpp"
#include "cqlab/data.hpp"
#include "cqlab/harness.hpp"
#include "cqlab/png.hpp"
#include "cqlab/wcs.hpp"

namespace cqlab {

namespace fs = std::filesystem;

// Bad flags or flag combinations; reported before any compute.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ------------------------------------------------------------------ hashing

inline std::string sha1_hex(const std::string& bytes)
{
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha1(), nullptr))
    throw std::runtime_error("SHA-1 digest failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  return os.str();
}

// Same id `git hash-object` prints for a file with these contents.
inline std::string git_blob_hash(const std::string& bytes)
{
  return sha1_hex("blob " + std::to_string(bytes.size()) + '\0' + bytes);
}

inline std::string read_file(const fs::path& p)
{
  std::ifstream in(p, std::ios::binary);
  if (!in) throw LoadError("cannot read " + p.string());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

// Files hash as git blobs; directories hash the sorted list of
// "relative-path blob-hash" lines of every file below them.
inline std::string content_hash(const fs::path& p)
{
  if (fs::is_regular_file(p)) return git_blob_hash(read_file(p));
  if (!fs::is_directory(p)) throw LoadError("no such input: " + p.string());
  std::vector<std::string> lines;
  for (const auto& e : fs::recursive_directory_iterator(p))
    if (e.is_regular_file())
      lines.push_back(fs::relative(e.path(), p).generic_string() + ' ' + git_blob_hash(read_file(e.path())));
  std::sort(lines.begin(), lines.end());
  std::string listing;
  for (const auto& l : lines) listing += l + '\n';
  return sha1_hex("tree " + listing);
}

// ----------------------------------------------------------------- manifest

inline std::string utc_timestamp()
{
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

struct RunManifest {
  std::string command;
  json config = json::object();
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, std::string>> inputs;  // (path, content hash)
  std::vector<std::string> outputs;
  std::string started = utc_timestamp();
  std::string finished;

  void add_input(const fs::path& p) { inputs.emplace_back(p.string(), content_hash(p)); }

  json to_json() const
  {
    json in = json::array();
    for (const auto& [p, h] : inputs) in.push_back({{"path", p}, {"hash", h}});
    return {{"command", command}, {"config", config},     {"seed", seed},         {"inputs", in},
            {"outputs", outputs}, {"started", started}, {"finished", finished}};
  }

  void write(const fs::path& dir)
  {
    finished = utc_timestamp();
    std::ofstream out(dir / "manifest.json");
    out << to_json().dump(2) << '\n';
  }
};

inline fs::path output_root()
{
  const char* env = std::getenv("CQLAB_OUT_ROOT");
  return env && *env ? fs::path(env) : fs::path("runs");
}

inline fs::path prepare_out_dir(const std::string& requested, const std::string& command)
{
  fs::path dir = requested.empty() ? output_root() / command : fs::path(requested);
  fs::create_directories(dir);
  return dir;
}

inline fs::path default_human_map_path()
{
#ifdef CQLAB_DATA_DIR
  return fs::path(CQLAB_DATA_DIR) / "nafaanra_1978.csv";
#else
  return fs::path("data") / "nafaanra_1978.csv";
#endif
}

// ------------------------------------------------------------------ datasets

struct DataBundle {
  Dataset train, test;
  std::optional<HumanWCSMap> human;
  std::vector<fs::path> sources;  // files the data came from (for hashing)
};

// Dataset keys:
//   dataset      = synthetic-colour | synthetic-terms | synthetic-evolution | cifar | directory
//   train_size, test_size, image_size, data_seed           (synthetic sets)
//   distractors  = rectangles beside the class object      (synthetic-colour)
//   human_map    = CSV path (synthetic-terms/-evolution; default: shipped fixture)
//   latent_rows  = r0-r1, latent_cols = c0-c1, parent       (synthetic-evolution)
//   train_path, test_path, label_bytes, num_classes         (cifar, directory)
inline DataBundle load_data(KeyValueConfig& kv)
{
  std::string kind = "synthetic-colour";
  kv.take_into("dataset", kind);
  int train_size = 2000, test_size = 1000, size = 32;
  std::uint64_t data_seed = 1;
  kv.take_into("train_size", train_size);
  kv.take_into("test_size", test_size);
  kv.take_into("image_size", size);
  kv.take_into("data_seed", data_seed);
  if (train_size < 1 || test_size < 1) throw ConfigError("train_size and test_size must be positive");
  DataBundle b;
  auto human = [&]() {
    std::string path = default_human_map_path().string();
    kv.take_into("human_map", path);
    b.sources.emplace_back(path);
    return load_human_map(path);
  };
  auto range = [&](const std::string& key, int lo, int hi) {
    std::pair<int, int> r{lo, hi};
    if (auto v = kv.take(key)) {
      const auto dash = v->find('-');
      if (dash == std::string::npos || !detail::parse_int(v->substr(0, dash), r.first) ||
          !detail::parse_int(v->substr(dash + 1), r.second) || r.first > r.second)
        kv.fail(key, "expected a range like 1-2");
    }
    return r;
  };
  if (kind == "synthetic-colour") {
    int distractors = 3;
    kv.take_into("distractors", distractors);
    b.train = make_colour_classes(train_size, size, derive_seed(data_seed, 1), distractors);
    b.test = make_colour_classes(test_size, size, derive_seed(data_seed, 2), distractors);
  } else if (kind == "synthetic-terms") {
    b.human = human();
    b.train = make_term_mosaics(*b.human, train_size, size, derive_seed(data_seed, 1));
    b.test = make_term_mosaics(*b.human, test_size, size, derive_seed(data_seed, 2));
  } else if (kind == "synthetic-evolution") {
    b.human = human();
    const auto rows = range("latent_rows", 1, 2), cols = range("latent_cols", 9, 12);
    std::string parent = "wOO";
    if (kv.has("parent")) {
      // shared with the evolution config; peek without consuming
      KeyValueConfig copy = kv;
      copy.take_into("parent", parent);
    }
    const int p = b.human->term_index(parent);
    if (p < 0) throw ConfigError("unknown parent term '" + parent + "'");
    const auto latent = chip_range(rows.first, rows.second, cols.first, cols.second);
    b.train = make_latent_split_mosaics(*b.human, p, latent, train_size, size, derive_seed(data_seed, 1));
    b.test = make_latent_split_mosaics(*b.human, p, latent, test_size, size, derive_seed(data_seed, 2));
  } else if (kind == "cifar" || kind == "directory") {
    std::string train_path, test_path;
    int label_bytes = 1, num_classes = 0;
    kv.take_into("train_path", train_path);
    kv.take_into("test_path", test_path);
    kv.take_into("label_bytes", label_bytes);
    kv.take_into("num_classes", num_classes);
    if (train_path.empty()) throw ConfigError("dataset " + kind + " needs train_path");
    if (test_path.empty()) test_path = train_path;
    auto load = [&](const std::string& p) {
      return kind == "cifar" ? load_cifar_binary(p, label_bytes, num_classes) : load_image_directory(p);
    };
    b.train = load(train_path);
    b.test = test_path == train_path ? b.train : load(test_path);
    b.sources.emplace_back(train_path);
    if (test_path != train_path) b.sources.emplace_back(test_path);
  } else {
    kv.fail("dataset", "unknown dataset kind '" + kind + "'");
  }
  return b;
}

// ------------------------------------------------------------------ helpers

inline int bits_for(int colours)
{
  int b = 0;
  while ((1 << b) < colours) ++b;
  return b;
}

inline void write_text(const fs::path& p, const std::string& s)
{
  std::ofstream out(p, std::ios::binary);
  if (!out) throw LoadError("cannot write " + p.string());
  out << s;
}

inline void write_palette_csv(const fs::path& p, const Palette& palette)
{
  std::ostringstream os;
  os << "index,r,g,b\n";
  for (std::size_t i = 0; i < palette.size(); ++i)
    os << i << ',' << int(to_byte(palette.colours[i].r)) << ',' << int(to_byte(palette.colours[i].g)) << ','
       << int(to_byte(palette.colours[i].b)) << '\n';
  write_text(p, os.str());
}

inline std::vector<fs::path> collect_pngs(const std::vector<std::string>& inputs)
{
  std::vector<fs::path> out;
  for (const auto& in : inputs) {
    if (fs::is_directory(in)) {
      std::vector<fs::path> found;
      for (const auto& e : fs::directory_iterator(in))
        if (e.is_regular_file() && e.path().extension() == ".png") found.push_back(e.path());
      std::sort(found.begin(), found.end());
      out.insert(out.end(), found.begin(), found.end());
    } else if (fs::is_regular_file(in)) {
      out.emplace_back(in);
    } else {
      throw UsageError("no such input: " + in);
    }
  }
  if (out.empty()) throw UsageError("no PNG inputs found");
  return out;
}

inline const std::vector<std::string>& quantise_methods()
{
  static const std::vector<std::string> m{"cqformer", "mediancut", "mediancut-dither", "octree"};
  return m;
}

// ------------------------------------------------------------------ quantise

struct QuantiseOptions {
  std::vector<std::string> inputs;
  std::string method = "mediancut";
  int bits = 1;
  std::string checkpoint;
  std::string out;
};

inline fs::path cmd_quantise(const QuantiseOptions& o, std::ostream& log)
{
  if (o.bits < 1 || o.bits > 6) throw UsageError("--bits must lie in 1..6");
  if (std::find(quantise_methods().begin(), quantise_methods().end(), o.method) == quantise_methods().end())
    throw UsageError("unknown --method " + o.method);
  if (o.method == "cqformer" && o.checkpoint.empty()) throw UsageError("--method cqformer needs --checkpoint");
  const auto files = collect_pngs(o.inputs);
  const int colours = 1 << o.bits;
  std::optional<CQFormer<float>> q;
  RunManifest man;
  man.command = "quantise";
  man.config = {{"method", o.method}, {"bits", o.bits}};
  if (o.method == "cqformer") {
    auto ck = load_checkpoint(o.checkpoint);
    q.emplace(std::move(load_models<float>(ck).first));
    if (q->colours() > colours)
      throw UsageError("checkpoint has " + std::to_string(q->colours()) + " colours, more than --bits allows");
    man.add_input(o.checkpoint);
  }
  const fs::path dir = prepare_out_dir(o.out, "quantise");
  for (const auto& f : files) {
    man.add_input(f);
    const RGBImage img = read_png(f.string());
    QuantisedIndex r;
    if (o.method == "cqformer") {
      ad::FlushDenormalsGuard ftz;
      auto t = q->quantise_test(img);
      r = {t.palette, t.indices};
    } else if (o.method == "mediancut") {
      r = median_cut(img, colours);
    } else if (o.method == "mediancut-dither") {
      r = median_cut(img, colours);
      r.indices = floyd_steinberg_dither(img, r.palette);
    } else {
      r = octree_quantise(img, colours);
    }
    r.palette = snap_to_8bit(r.palette);
    const std::string stem = f.stem().string();
    write_indexed_png((dir / (stem + ".png")).string(), r.indices, r.palette);
    write_palette_csv(dir / (stem + ".palette.csv"), r.palette);
    man.outputs.push_back(stem + ".png");
    man.outputs.push_back(stem + ".palette.csv");
    log << f.string() << " -> " << (dir / (stem + ".png")).string() << " (" << r.palette.size() << " colours)\n";
  }
  man.write(dir);
  return dir;
}

// --------------------------------------------------------------------- train

struct TrainCommandOptions {
  std::string config;
  std::string out;
  std::string resume;  // checkpoint to continue from
  std::optional<std::uint64_t> seed;
};

inline void write_eval_csv(const fs::path& p, const std::string& method, int bits, const EvalResult& r)
{
  std::ostringstream os;
  os << "method,bits,top1,samples\n" << std::setprecision(10) << method << ',' << bits << ',' << r.top1 << ','
     << r.samples << '\n';
  write_text(p, os.str());
}

inline void write_map_artefacts(const fs::path& dir, const std::string& stem, const MachineWCSMap& m)
{
  std::ostringstream os;
  write_machine_map_csv(os, m);
  write_text(dir / (stem + ".csv"), os.str());
  write_png((dir / (stem + ".png")).string(), render_machine_map(m));
}

inline fs::path cmd_train(const TrainCommandOptions& o, std::ostream& log)
{
  if (o.config.empty()) throw UsageError("train needs --config");
  auto kv = KeyValueConfig::load(o.config);
  if (o.seed) kv.set("seed", std::to_string(*o.seed));
  TrainConfig cfg;
  read_train_config(kv, cfg);
  DataBundle data = load_data(kv);
  kv.finish();

  const fs::path dir = prepare_out_dir(o.out, "train");
  RunManifest man;
  man.command = "train";
  man.config = to_json(cfg);
  for (const auto& [k, v] : kv.resolved()) man.config["file"][k] = v;
  man.seed = cfg.seed;
  man.add_input(o.config);
  for (const auto& s : data.sources) man.add_input(s);

  TrainState<float> state = [&] {
    if (o.resume.empty()) return initial_state<float>(cfg, std::max(2, class_count(data.train)));
    man.add_input(o.resume);
    return training_state_from_checkpoint<float>(load_checkpoint(o.resume));
  }();
  TrainOptions opts;
  opts.checkpoint_dir = (dir / "checkpoints").string();
  opts.eval = &data.test;
  opts.on_epoch = [&](const EpochMetrics& m) {
    log << "epoch " << m.epoch << ": L_total " << m.total << ", top1 " << m.top1 << '\n';
  };
  train_epochs(state, cfg, data.train, standard_loss<float>(cfg.weights), opts);

  std::ostringstream csv;
  write_metrics_csv(csv, state.history);
  write_text(dir / "metrics.csv", csv.str());
  save_checkpoint((dir / "final.ckpt").string(), make_model_checkpoint(state.quantiser, state.classifier));
  const auto eval = evaluate_batched(&state.quantiser, state.classifier, data.test, state.classifier.num_classes());
  write_eval_csv(dir / "eval.csv", "cqformer", bits_for(cfg.colours), eval);
  write_map_artefacts(dir, "wcs_map", machine_map(state.quantiser, data.test));
  man.outputs = {"metrics.csv", "eval.csv", "final.ckpt", "wcs_map.csv", "wcs_map.png", "checkpoints/"};
  man.write(dir);
  return dir;
}

// ---------------------------------------------------------------------- eval

struct EvalOptions {
  std::string checkpoint;
  std::string config;  // dataset keys
  std::string method = "cqformer";  // also: bypass, mediancut, mediancut-dither, octree
  bool upper_bound = false;         // same as --method bypass
  int bits = 0;                     // baselines only; 0 = the checkpoint's colour count
  std::string out;
};

inline fs::path cmd_eval(const EvalOptions& o, std::ostream& log)
{
  if (o.checkpoint.empty() || o.config.empty()) throw UsageError("eval needs --checkpoint and --config");
  const std::string method = o.upper_bound ? "bypass" : o.method;
  static const std::vector<std::string> known{"cqformer", "bypass", "mediancut", "mediancut-dither", "octree"};
  if (std::find(known.begin(), known.end(), method) == known.end()) throw UsageError("unknown --method " + method);
  if (o.bits < 0 || o.bits > 6) throw UsageError("--bits must lie in 1..6");
  auto kv = KeyValueConfig::load(o.config);
  // Training keys may share the file; they are accepted and ignored here.
  TrainConfig ignored;
  read_train_config(kv, ignored);
  DataBundle data = load_data(kv);
  kv.finish();
  auto ck = load_checkpoint(o.checkpoint);
  auto [q, f] = load_models<float>(ck);
  const int num_classes = f.num_classes();

  EvalResult r;
  int bits = o.bits ? o.bits : bits_for(q.colours());
  if (method == "cqformer") {
    bits = bits_for(q.colours());
    r = evaluate_batched(&q, f, data.test, num_classes);
  } else if (method == "bypass") {
    bits = 24;
    r = evaluate_batched<float>(nullptr, f, data.test, num_classes);
  } else {
    Dataset quantised;
    for (const auto& s : data.test) {
      QuantisedIndex qi = method == "octree" ? octree_quantise(s.image, 1 << bits) : median_cut(s.image, 1 << bits);
      if (method == "mediancut-dither") qi.indices = floyd_steinberg_dither(s.image, qi.palette);
      quantised.push_back({qi.image(), s.label});
    }
    r = evaluate_batched<float>(nullptr, f, quantised, num_classes);
  }
  const fs::path dir = prepare_out_dir(o.out, "eval");
  RunManifest man;
  man.command = "eval";
  man.config = {{"method", method}, {"bits", bits}};
  for (const auto& [k, v] : kv.resolved()) man.config["file"][k] = v;
  man.add_input(o.checkpoint);
  man.add_input(o.config);
  for (const auto& s : data.sources) man.add_input(s);
  write_eval_csv(dir / "eval.csv", method, bits, r);
  man.outputs = {"eval.csv"};
  man.write(dir);
  log << method << " (" << bits << " bits): top1 " << r.top1 << " over " << r.samples << " images\n";
  return dir;
}

// ------------------------------------------------------------------- wcs map

struct WcsMapOptions {
  std::string checkpoint;
  std::vector<std::string> images;  // PNG files/dirs; or
  std::string config;               // dataset keys (test split is used)
  std::string out;
};

inline fs::path cmd_wcs_map(const WcsMapOptions& o, std::ostream& log)
{
  if (o.checkpoint.empty()) throw UsageError("wcs-map needs --checkpoint");
  if (o.images.empty() == o.config.empty()) throw UsageError("wcs-map needs exactly one of --input or --config");
  RunManifest man;
  man.command = "wcs-map";
  std::vector<RGBImage> images;
  if (!o.images.empty()) {
    for (const auto& f : collect_pngs(o.images)) {
      images.push_back(read_png(f.string()));
      man.add_input(f);
    }
  } else {
    auto kv = KeyValueConfig::load(o.config);
    TrainConfig ignored;
    read_train_config(kv, ignored);
    DataBundle data = load_data(kv);
    kv.finish();
    for (auto& s : data.test) images.push_back(std::move(s.image));
    man.add_input(o.config);
    for (const auto& s : data.sources) man.add_input(s);
  }
  auto ck = load_checkpoint(o.checkpoint);
  man.add_input(o.checkpoint);
  auto q = std::move(load_models<float>(ck).first);
  ad::FlushDenormalsGuard ftz;
  MachineMapBuilder builder(q.colours());
  for (const auto& img : images) builder.add(img, q.quantise_test(img).indices);
  const MachineWCSMap m = builder.build();
  const fs::path dir = prepare_out_dir(o.out, "wcs-map");
  write_map_artefacts(dir, "wcs_map", m);
  std::ostringstream shares;
  shares << "index,share\n" << std::setprecision(10);
  const auto share = m.pixel_share();
  for (std::size_t c = 0; c < share.size(); ++c) shares << c << ',' << share[c] << '\n';
  write_text(dir / "shares.csv", shares.str());
  man.outputs = {"wcs_map.csv", "wcs_map.png", "shares.csv"};
  man.write(dir);
  log << "observed chips: " << m.observed() << " of " << WCSGrid::kChips << '\n';
  return dir;
}

// -------------------------------------------------------------------- evolve

struct EvolveOptions {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
};

inline fs::path cmd_evolve(const EvolveOptions& o, std::ostream& log)
{
  if (o.config.empty()) throw UsageError("evolve needs --config");
  auto kv = KeyValueConfig::load(o.config);
  if (o.seed) kv.set("seed", std::to_string(*o.seed));
  if (!kv.has("dataset")) kv.set("dataset", "synthetic-evolution");
  DataBundle data = load_data(kv);
  EvolutionConfig cfg;
  read_evolution_config(kv, cfg);
  kv.finish();
  if (!data.human) {
    const std::string path = default_human_map_path().string();
    data.human = load_human_map(path);
    data.sources.emplace_back(path);
  }
  const HumanWCSMap& hmap = *data.human;
  const fs::path dir = prepare_out_dir(o.out, "evolve");
  RunManifest man;
  man.command = "evolve";
  man.config = to_json(cfg.train);
  man.config["embed_epochs"] = cfg.embed_epochs;
  man.config["evolve_epochs"] = cfg.evolve_epochs;
  man.config["tau_embed"] = cfg.tau_embed;
  man.config["tau_evolve"] = cfg.evolve_tau();
  man.config["parent"] = cfg.parent;
  for (const auto& [k, v] : kv.resolved()) man.config["file"][k] = v;
  man.seed = cfg.train.seed;
  man.add_input(o.config);
  for (const auto& s : data.sources) man.add_input(s);

  TrainOptions opts;
  opts.eval = &data.test;
  opts.on_epoch = [&](const EpochMetrics& m) { log << "epoch " << m.epoch << ": top1 " << m.top1 << '\n'; };
  auto emb = run_embedding_stage<float>(cfg, hmap, data.train, opts);
  auto rep = run_evolution_stage<float>(emb.state, cfg, hmap, data.train, opts);

  std::ostringstream a, b;
  write_metrics_csv(a, emb.state.history);
  write_metrics_csv(b, rep.history);
  write_text(dir / "embedding_metrics.csv", a.str());
  write_text(dir / "evolution_metrics.csv", b.str());
  write_map_artefacts(dir, "pre_map", rep.pre_map);
  write_map_artefacts(dir, "post_map", rep.post_map);
  write_png((dir / "human_map.png").string(), render_human_map(hmap));
  save_checkpoint((dir / "embedding.ckpt").string(), make_model_checkpoint(emb.state.quantiser, emb.state.classifier));
  save_checkpoint((dir / "evolution.ckpt").string(), make_model_checkpoint(rep.state->quantiser, rep.state->classifier));
  json report = {{"agreement", emb.agreement},
                 {"parent", cfg.parent},
                 {"new_colour", rep.new_colour},
                 {"new_colour_share", rep.new_colour_share},
                 {"pre_share", rep.pre_share},
                 {"post_share", rep.post_share},
                 {"regions_disjoint", rep.regions_disjoint},
                 {"nonempty_regions", rep.nonempty_regions},
                 {"split_mechanism", rep.split_mechanism}};
  write_text(dir / "report.json", report.dump(2) + "\n");
  man.outputs = {"embedding_metrics.csv", "evolution_metrics.csv", "pre_map.csv", "pre_map.png", "post_map.csv",
                 "post_map.png",          "human_map.png",         "embedding.ckpt", "evolution.ckpt", "report.json"};
  man.write(dir);
  log << "embedding agreement " << emb.agreement << "; new colour share " << rep.new_colour_share << '\n';
  return dir;
}

// -------------------------------------------------------------------- report

struct ReportRow {
  std::string method;
  int bits = 0;
  double top1 = 0;
  std::string run;
};

struct ReportOptions {
  std::vector<std::string> runs;
  std::string out;
};

// Reads eval.csv rows from each run directory. Missing files are reported
// through warn() and skipped.
inline std::vector<ReportRow> collect_report_rows(const std::vector<std::string>& runs)
{
  std::vector<ReportRow> rows;
  for (const auto& run : runs) {
    const fs::path p = fs::path(run) / "eval.csv";
    std::ifstream in(p);
    if (!in) {
      warn("report: " + p.string() + " is missing; skipping run");
      continue;
    }
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      const auto cells = detail::split_csv_line(line);
      ReportRow r;
      if (cells.size() < 3 || !detail::parse_int(cells[1], r.bits) || !detail::parse_double(cells[2], r.top1)) {
        warn("report: malformed row in " + p.string());
        continue;
      }
      r.method = cells[0];
      r.run = run;
      rows.push_back(r);
    }
  }
  std::stable_sort(rows.begin(), rows.end(), [](const ReportRow& a, const ReportRow& b) {
    return std::tie(a.method, a.bits) < std::tie(b.method, b.bits);
  });
  return rows;
}

// Per method: true when accuracy never drops as bits increase.
inline std::map<std::string, bool> non_decreasing_by_method(const std::vector<ReportRow>& rows)
{
  std::map<std::string, bool> flag;
  std::map<std::string, double> last;
  for (const auto& r : rows) {
    auto [it, fresh] = flag.try_emplace(r.method, true);
    if (!fresh && r.top1 < last[r.method]) it->second = false;
    last[r.method] = r.top1;
  }
  return flag;
}

namespace detail {
inline void draw_line(RGBImage& img, int x0, int y0, int x1, int y1, RGB c)
{
  const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
  const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  for (;;) {
    if (x0 >= 0 && y0 >= 0 && x0 < img.width() && y0 < img.height()) img.set_pixel(y0, x0, c);
    if (x0 == x1 && y0 == y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
}
}  // namespace detail

// Accuracy (0..1, vertical) against bits (horizontal), one polyline per
// method, white background with grey axes and tick marks per bit level.
inline RGBImage render_curve(const std::vector<ReportRow>& rows, int width = 480, int height = 320)
{
  RGBImage img(height, width, 1.0);
  const int left = 40, right = width - 20, top = 20, bottom = height - 40;
  const RGB axis{0.4, 0.4, 0.4};
  detail::draw_line(img, left, bottom, right, bottom, axis);
  detail::draw_line(img, left, bottom, left, top, axis);
  int max_bits = 1;
  for (const auto& r : rows) max_bits = std::max(max_bits, std::min(r.bits, 8));
  auto px = [&](int bits) { return left + (right - left) * std::clamp(bits, 0, max_bits) / max_bits; };
  auto py = [&](double acc) { return bottom - static_cast<int>(std::lround((bottom - top) * std::clamp(acc, 0.0, 1.0))); };
  for (int b = 0; b <= max_bits; ++b) detail::draw_line(img, px(b), bottom, px(b), bottom + 5, axis);
  for (int t = 0; t <= 10; ++t) detail::draw_line(img, left - 5, py(t / 10.0), left, py(t / 10.0), axis);
  static const RGB palette[] = {{0.85, 0.1, 0.1}, {0.1, 0.45, 0.85}, {0.1, 0.6, 0.2}, {0.8, 0.5, 0.0}, {0.5, 0.2, 0.7}};
  std::map<std::string, std::vector<const ReportRow*>> by_method;
  for (const auto& r : rows) by_method[r.method].push_back(&r);
  int k = 0;
  for (const auto& [method, pts] : by_method) {
    const RGB c = palette[k++ % 5];
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const int x = px(std::min(pts[i]->bits, 8)), y = py(pts[i]->top1);
      for (int d = -2; d <= 2; ++d) detail::draw_line(img, x - 2, y + d, x + 2, y + d, c);
      if (i) detail::draw_line(img, px(std::min(pts[i - 1]->bits, 8)), py(pts[i - 1]->top1), x, y, c);
    }
  }
  return img;
}

inline fs::path cmd_report(const ReportOptions& o, std::ostream& log)
{
  if (o.runs.empty()) throw UsageError("report needs at least one run directory");
  const auto rows = collect_report_rows(o.runs);
  if (rows.empty()) throw UsageError("report: no completed eval runs among the inputs");
  const fs::path dir = prepare_out_dir(o.out, "report");
  std::ostringstream table;
  table << "method,bits,top1,run\n" << std::setprecision(10);
  for (const auto& r : rows) table << r.method << ',' << r.bits << ',' << r.top1 << ',' << r.run << '\n';
  write_text(dir / "report.csv", table.str());
  std::ostringstream flags;
  flags << "method,non_decreasing\n";
  for (const auto& [m, ok] : non_decreasing_by_method(rows)) flags << m << ',' << (ok ? "true" : "false") << '\n';
  write_text(dir / "curve.csv", flags.str());
  write_png((dir / "curve.png").string(), render_curve(rows));
  RunManifest man;
  man.command = "report";
  for (const auto& r : o.runs)
    if (fs::exists(fs::path(r) / "eval.csv")) man.add_input(fs::path(r) / "eval.csv");
  man.outputs = {"report.csv", "curve.csv", "curve.png"};
  man.write(dir);
  log << rows.size() << " rows -> " << (dir / "report.csv").string() << '\n';
  return dir;
}

}  // namespace cqlab
