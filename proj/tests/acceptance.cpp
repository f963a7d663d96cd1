// Acceptance checks. `cqlab_acceptance N` runs check N and prints one
// "PASS criterion N: ..." or "FAIL criterion N: ..." line; without an argument
// every check runs in order. An optional second argument names the cqlab CLI
// binary, which the determinism check re-runs in fresh processes.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "test_util.hpp"

using namespace cqlab;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args)
{
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double median3(std::vector<double> v)
{
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

void progress(const std::string& s)
{
  std::cerr << "  " << s << std::endl;
}

// ------------------------------------------------------------------ oracles

Outcome formula_oracles()
{
  Rng rng(101);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  constexpr double tol = 1e-9;
  int failures = 0;
  double worst = 0;
  auto check = [&](double got, double want) {
    const double rel = std::abs(got - want) / std::max(std::abs(want), 1e-300);
    if (got != want) worst = std::max(worst, rel);
    if (!oracle::close(got, want, tol)) ++failures;
  };
  auto random_hsv = [&] { return HSVPixel{u(rng) * kTwoPi, u(rng), u(rng)}; };

  for (int t = 0; t < 200; ++t) {
    const HSVPixel a = random_hsv(), b = random_hsv();
    check(hsv_squared_distance(a, b), oracle::hsv_distance(a, b));

    const int h = 1 + t % 4, w = 1 + (t / 4) % 5, colours = 1 + t % 7;
    const auto pm = oracle::random_probability_map(h, w, colours, rng);
    check(diversity_reg(pm), oracle::diversity(pm));

    std::vector<HSVPixel> px(static_cast<std::size_t>(h) * w);
    std::vector<int> assign(px.size());
    std::uniform_int_distribution<int> pick(0, colours - 1);
    for (std::size_t i = 0; i < px.size(); ++i) {
      px[i] = random_hsv();
      assign[i] = pick(rng);
    }
    check(intra_cluster_colour_reg(px, assign, colours), oracle::intra_cluster(px, assign, colours));

    const auto x = tu::random_image(h, w, rng), y = tu::random_image(h, w, rng);
    check(perceptual_loss(x, y), oracle::perceptual(x, y));

    const LossParts parts{u(rng) * 5, u(rng), u(rng) * 3, u(rng)};
    const LossWeights lw{u(rng) * 2, u(rng), u(rng) * 2};
    check(total_loss(parts, lw).total,
          oracle::total(parts.machine, parts.colour, parts.diversity, parts.perceptual, lw.alpha, lw.beta, lw.gamma));
  }
  return {failures == 0, fmt("1000 comparisons, %d outside 1e-9, worst relative error %.2e", failures, worst)};
}

// ---------------------------------------------------------------- gradients

Outcome gradient_check()
{
  Rng rng(102);
  CQFormer<double> q({2, 8, 8, PaletteMode::attention}, 7);
  RecognitionNet<double> f({4, 8}, 8);
  const RGBImage img = tu::random_image(4, 4, rng);
  const std::vector<RGBImage> images{img};
  Batch<double> batch;
  batch.images = {&images[0]};
  batch.labels = {1};
  batch.pixels = to_batch<double>(std::span<const RGBImage>(images));
  const TrainConfig defaults;
  const auto loss_fn = standard_loss<double>(defaults.weights);
  auto loss = [&] {
    auto pass = q.forward_train(batch.pixels, defaults.tau);
    return loss_fn(batch, pass, f(pass.quantised)).total;
  };

  std::vector<NamedParameter<double>> groups;
  for (auto& p : q.parameters().items()) groups.push_back({"quantiser." + p.name, p.var});
  for (auto& p : f.parameters().items()) groups.push_back({"classifier." + p.name, p.var});
  for (auto& g : groups) g.var.zero_grad();
  ad::backward(loss());

  double worst = 0;
  std::string worst_name;
  for (auto& g : groups) {
    auto& v = g.var.value();
    const auto& grad = g.var.grad();
    std::vector<double> analytic(grad.values().begin(), grad.values().end()), numeric(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double keep = v[i], h = 1e-6;
      v[i] = keep + h;
      const double up = loss().item();
      v[i] = keep - h;
      const double down = loss().item();
      v[i] = keep;
      numeric[i] = (up - down) / (2 * h);
    }
    const double err = tu::relative_error(analytic, numeric);
    if (err > worst) {
      worst = err;
      worst_name = g.name;
    }
  }
  return {worst <= 1e-4, fmt("%zu parameter groups, worst relative L2 error %.2e (%s)", groups.size(), worst,
                             worst_name.c_str())};
}

// ------------------------------------------------------ quantisation outputs

Outcome quantisation_invariant()
{
  Rng rng(103);
  std::uniform_int_distribution<int> side(4, 14);
  const fs::path dir = tu::scratch_dir("acceptance_png");
  int bad_colours = 0, bad_rows = 0, bad_png = 0, checked = 0;
  for (int colours : {2, 4, 8}) {
    CQFormer<float> q({colours, 32, 8, PaletteMode::attention}, 30 + colours);
    for (int i = 0; i < 50; ++i) {
      const auto img = tu::random_image(side(rng), side(rng), rng);
      const auto r = q.quantise_test(img);
      if (tu::distinct_colours(r.quantised) > static_cast<std::size_t>(colours)) ++bad_colours;
      for (std::size_t p = 0; p < img.pixel_count(); ++p)
        if (r.quantised.pixel(p) != r.palette.colours.at(r.indices.data[p])) {
          ++bad_rows;
          break;
        }
      const Palette snapped = snap_to_8bit(r.palette);
      const auto path = (dir / "q.png").string();
      write_indexed_png(path, r.indices, snapped);
      const auto back = read_indexed_png(path);
      if (back.indices != r.indices || back.palette != snapped || back.image() != apply_palette(r.indices, snapped))
        ++bad_png;
      ++checked;
    }
  }
  return {bad_colours + bad_rows + bad_png == 0,
          fmt("%d images: %d over colour budget, %d off-palette, %d PNG round-trip mismatches", checked, bad_colours,
              bad_rows, bad_png)};
}

Outcome temperature_limit()
{
  Rng rng(104);
  double worst = 0;
  for (int colours : {2, 4, 8}) {
    CQFormer<double> q({colours, 32, 8, PaletteMode::attention}, 40 + colours);
    for (int i = 0; i < 10; ++i) {
      const auto img = tu::random_image(8, 8, rng);
      const auto soft = q.quantise_train(img, 1e-4).quantised;
      const auto hard = q.quantise_test(img).quantised;
      for (std::size_t k = 0; k < soft.data().size(); ++k)
        worst = std::max(worst, std::abs(soft.data()[k] - hard.data()[k]));
    }
  }
  return {worst < 1e-3, fmt("max pixel deviation %.3e over 30 images", worst)};
}

Outcome baseline_exactness()
{
  Rng rng(105);
  std::uniform_int_distribution<int> side(2, 20);
  int failures = 0, trials = 0;
  for (int colours : {1, 2, 4, 8, 16, 64}) {
    std::uniform_int_distribution<int> count(1, std::min(colours, 64));
    for (int t = 0; t < 30; ++t) {
      const auto img = tu::few_colour_image(side(rng), side(rng), count(rng), rng);
      if (perceptual_loss(median_cut(img, colours).image(), img) != 0.0) ++failures;
      if (perceptual_loss(octree_quantise(img, colours).image(), img) != 0.0) ++failures;
      trials += 2;
    }
  }
  const Palette bw{{{0, 0, 0}, {1, 1, 1}}};
  const auto idx = floyd_steinberg_dither(RGBImage(64, 64, 0.5), bw);
  const double white = static_cast<double>(std::count(idx.data.begin(), idx.data.end(), 1)) / idx.data.size();
  const bool dither_ok = std::abs(white - 0.5) <= 0.02;
  return {failures == 0 && dither_ok,
          fmt("%d/%d exact reproductions; dithered grey is %.2f%% white", trials - failures, trials, 100 * white)};
}

// ------------------------------------------------------------ training runs

struct ColourTask {
  Dataset train = make_colour_classes(2000, 32, 1000, 4);
  Dataset test = make_colour_classes(1000, 32, 777, 4);
};

TrainConfig desk_config(int bits, std::uint64_t seed)
{
  TrainConfig c;
  c.colours = 1 << bits;
  c.epochs = 5;
  c.batch_size = 8;
  c.restart_period = 5;
  c.grad_clip = 10;
  c.seed = seed;
  return c;
}

double train_and_score(const ColourTask& task, const TrainConfig& c, const std::string& label)
{
  const auto t0 = std::chrono::steady_clock::now();
  TrainOptions o;
  o.eval = &task.test;
  const auto state = train_joint<float>(c, task.train, o);
  const double top1 = state.history.back().top1;
  progress(fmt("%s seed %llu: top1 %.4f (%.0f s)", label.c_str(), static_cast<unsigned long long>(c.seed), top1,
               std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()));
  return top1;
}

Outcome accuracy_curve()
{
  const ColourTask task;
  std::vector<double> medians;
  for (int bits = 1; bits <= 3; ++bits) {
    std::vector<double> acc;
    for (std::uint64_t seed = 0; seed < 3; ++seed)
      acc.push_back(train_and_score(task, desk_config(bits, seed), fmt("%d-bit", bits)));
    medians.push_back(median3(acc));
  }
  const bool monotone = medians[0] <= medians[1] && medians[1] <= medians[2];
  return {monotone && medians[1] >= 0.95,
          fmt("median top1 1-bit %.4f, 2-bit %.4f, 3-bit %.4f", medians[0], medians[1], medians[2])};
}

// Accuracy never drops as the palette grows from one to two to four colours.
Outcome capacity_property()
{
  const ColourTask task;
  std::vector<double> medians;
  for (int bits = 0; bits <= 2; ++bits) {
    std::vector<double> acc;
    for (std::uint64_t seed = 0; seed < 3; ++seed)
      acc.push_back(train_and_score(task, desk_config(bits, seed), fmt("C=%d", 1 << bits)));
    medians.push_back(median3(acc));
  }
  return {medians[0] <= medians[1] && medians[1] <= medians[2],
          fmt("median top1 C=1 %.4f, C=2 %.4f, C=4 %.4f", medians[0], medians[1], medians[2])};
}

Outcome ablations()
{
  const ColourTask task;
  std::vector<double> base, warm, fixed;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    auto c = desk_config(1, seed);
    base.push_back(train_and_score(task, c, "default"));
    c.tau = 1.0;
    warm.push_back(train_and_score(task, c, "tau=1"));
    c = desk_config(1, seed);
    c.palette = PaletteMode::fixed_centroids;
    fixed.push_back(train_and_score(task, c, "fixed palette"));
  }
  const double b = median3(base), t = median3(warm), f = median3(fixed);
  const bool tau_ok = b - t >= 0.05, fixed_ok = b - f >= 0.03;
  return {tau_ok && fixed_ok,
          fmt("median top1 default %.4f; tau=1 %.4f (drop %.1f pts, need 5: %s); fixed palette %.4f (drop %.1f pts, "
              "need 3: %s)",
              b, t, 100 * (b - t), tau_ok ? "ok" : "not met", f, 100 * (b - f), fixed_ok ? "ok" : "not met")};
}

HumanWCSMap one_hot_fixture()
{
  const auto fixture = load_human_map(default_human_map_path().string());
  return one_hot_human_map(fixture.terms, [&](Chip c) { return fixture.argmax(WCSGrid::index(c)); });
}

TrainOptions with_progress(const Dataset& eval)
{
  TrainOptions o;
  o.eval = &eval;
  o.on_epoch = [](const EpochMetrics& m) { progress(fmt("epoch %d: total %.4f top1 %.4f", m.epoch, m.total, m.top1)); };
  return o;
}

Outcome embedding_fidelity()
{
  const auto hmap = one_hot_fixture();
  const auto train = make_term_mosaics(hmap, 1000, 32, 11);
  const auto test = make_term_mosaics(hmap, 500, 32, 12);
  EvolutionConfig cfg;
  cfg.embed_epochs = 5;
  const auto emb = run_embedding_stage<float>(cfg, hmap, train, with_progress(test));
  return {emb.agreement >= 0.9, fmt("map agreement %.4f over %d observed chips", emb.agreement, emb.map.observed())};
}

Outcome evolution_split()
{
  const auto hmap = one_hot_fixture();
  const int dark = hmap.term_index("wOO");
  const auto latent = chip_range(1, 2, 9, 12);
  const auto train = make_latent_split_mosaics(hmap, dark, latent, 1000, 32, 11);
  const auto test = make_latent_split_mosaics(hmap, dark, latent, 500, 32, 12);
  EvolutionConfig cfg;
  cfg.embed_epochs = 8;
  cfg.evolve_epochs = 10;
  cfg.combination = LossCombination::full;
  const auto opts = with_progress(test);
  const auto emb = run_embedding_stage<float>(cfg, hmap, train, opts);
  const auto rep = run_evolution_stage<float>(emb.state, cfg, hmap, train, opts);
  const bool ok = rep.new_colour_share > 0.05 && rep.regions_disjoint && rep.nonempty_regions == 4;
  return {ok, fmt("new colour share %.4f, %d non-empty regions, pairwise disjoint: %s", rep.new_colour_share,
                  rep.nonempty_regions, rep.regions_disjoint ? "yes" : "no")};
}

// -------------------------------------------------------------- determinism

std::string slurp(const fs::path& p)
{
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Manifests differ only in timestamps and output paths.
json comparable_manifest(const fs::path& p)
{
  json j = json::parse(slurp(p));
  j.erase("started");
  j.erase("finished");
  j.erase("outputs");
  return j;
}

Outcome determinism(const std::string& cli)
{
  const fs::path dir = tu::scratch_dir("acceptance_determinism");
  {
    std::ofstream(dir / "run.cfg") << "dataset = synthetic-colour\ntrain_size = 200\ntest_size = 100\n"
                                      "colours = 4\nepochs = 2\nbatch_size = 16\nrestart_period = 2\nseed = 3\n";
  }
  std::ostringstream log;
  std::vector<std::string> problems;
  int compared = 0;
  auto same = [&](const fs::path& a, const fs::path& b) {
    ++compared;
    if (slurp(a).empty() || slurp(a) != slurp(b)) problems.push_back(a.filename().string() + " differs");
  };
  auto same_manifest = [&](const fs::path& a, const fs::path& b) {
    if (comparable_manifest(a / "manifest.json") != comparable_manifest(b / "manifest.json"))
      problems.push_back("manifests of " + a.filename().string() + " and " + b.filename().string() + " differ");
  };

  for (const char* run : {"train_a", "train_b"}) {
    TrainCommandOptions t;
    t.config = (dir / "run.cfg").string();
    t.out = (dir / run).string();
    cmd_train(t, log);
  }
  same_manifest(dir / "train_a", dir / "train_b");
  for (const char* f : {"metrics.csv", "eval.csv", "wcs_map.csv"}) same(dir / "train_a" / f, dir / "train_b" / f);

  for (const std::string method : {"cqformer", "mediancut", "octree"})
    for (const char* run : {"a", "b"}) {
      EvalOptions e;
      e.checkpoint = (dir / "train_a" / "final.ckpt").string();
      e.config = (dir / "run.cfg").string();
      e.method = method;
      e.out = (dir / ("eval_" + method + "_" + run)).string();
      cmd_eval(e, log);
      if (std::string(run) == "b") {
        same_manifest(dir / ("eval_" + method + "_a"), dir / ("eval_" + method + "_b"));
        same(dir / ("eval_" + method + "_a") / "eval.csv", dir / ("eval_" + method + "_b") / "eval.csv");
      }
    }

  // A fresh process sees a different heap and environment.
  if (!cli.empty()) {
    const std::string cmd = "\"" + cli + "\" train --config \"" + (dir / "run.cfg").string() + "\" --out \"" +
                            (dir / "train_cli").string() + "\" > \"" + (dir / "cli.log").string() + "\" 2>&1";
    if (std::system(cmd.c_str()) != 0) {
      problems.push_back("cli train failed");
    } else {
      same_manifest(dir / "train_a", dir / "train_cli");
      for (const char* f : {"metrics.csv", "eval.csv"}) same(dir / "train_a" / f, dir / "train_cli" / f);
    }
  }

  std::string detail = fmt("%d CSV pairs compared%s", compared, cli.empty() ? " (in-process only)" : "");
  for (const auto& p : problems) detail += "; " + p;
  return {problems.empty(), detail};
}

}  // namespace

int main(int argc, char** argv)
{
  const std::string cli = argc > 2 ? argv[2] : "";
  const std::vector<std::function<Outcome()>> checks{
      formula_oracles,   gradient_check, quantisation_invariant, temperature_limit, baseline_exactness,
      accuracy_curve,    ablations,      embedding_fidelity,     evolution_split,   [&] { return determinism(cli); },
  };
  if (argc > 1 && std::string(argv[1]) == "capacity") {
    const auto r = capacity_property();
    std::cout << (r.pass ? "PASS" : "FAIL") << " capacity property: " << r.detail << std::endl;
    return r.pass ? 0 : 1;
  }
  std::vector<int> which;
  if (argc > 1) {
    const int n = std::atoi(argv[1]);
    if (n < 1 || n > static_cast<int>(checks.size())) {
      std::cerr << "usage: cqlab_acceptance [1-" << checks.size() << " | capacity] [cqlab-cli]\n";
      return 2;
    }
    which.push_back(n);
  } else {
    for (int n = 1; n <= static_cast<int>(checks.size()); ++n) which.push_back(n);
  }
  bool all = true;
  for (int n : which) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome r;
    try {
      r = checks[n - 1]();
    } catch (const std::exception& e) {
      r = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << (r.pass ? "PASS" : "FAIL") << " criterion " << n << ": " << r.detail << fmt(" [%.1f s]", secs)
              << std::endl;
    all = all && r.pass;
  }
  return all ? 0 : 1;
}
