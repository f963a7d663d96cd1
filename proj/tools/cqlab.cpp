// cqlab: quantise, train, evolve, wcs-map, eval, report.
// Exit codes: 0 ok, 2 bad usage or config, 1 anything else.

#include <iostream>

#include "CLI11.hpp"

#include "cqlab/cli.hpp"

int main(int argc, char** argv)
{
  using namespace cqlab;
  CLI::App app{"Task-driven colour quantisation lab"};
  app.require_subcommand(1);

  QuantiseOptions qo;
  auto* quantise = app.add_subcommand("quantise", "Quantise PNG images to an indexed palette");
  quantise->add_option("inputs", qo.inputs, "PNG files or directories")->required();
  quantise->add_option("--method", qo.method, "cqformer | mediancut | mediancut-dither | octree");
  quantise->add_option("--bits", qo.bits, "palette size 2^bits (1..6)");
  quantise->add_option("--checkpoint", qo.checkpoint, "model checkpoint (cqformer only)");
  quantise->add_option("--out", qo.out, "output directory");

  TrainCommandOptions to;
  std::uint64_t train_seed = 0;
  auto* train = app.add_subcommand("train", "Jointly train the quantiser and classifier");
  train->add_option("--config", to.config, "key=value config file")->required();
  train->add_option("--resume", to.resume, "continue from a training checkpoint");
  auto* train_seed_opt = train->add_option("--seed", train_seed, "override the config seed");
  train->add_option("--out", to.out, "output directory");

  EvolveOptions vo;
  std::uint64_t evolve_seed = 0;
  auto* evolve = app.add_subcommand("evolve", "Embed a human colour map, then add one colour");
  evolve->add_option("--config", vo.config, "key=value config file")->required();
  auto* evolve_seed_opt = evolve->add_option("--seed", evolve_seed, "override the config seed");
  evolve->add_option("--out", vo.out, "output directory");

  WcsMapOptions wo;
  auto* wcs = app.add_subcommand("wcs-map", "Project a trained quantiser onto the WCS chip grid");
  wcs->add_option("--checkpoint", wo.checkpoint, "model checkpoint")->required();
  wcs->add_option("--input", wo.images, "PNG files or directories");
  wcs->add_option("--config", wo.config, "dataset config (test split is used)");
  wcs->add_option("--out", wo.out, "output directory");

  EvalOptions eo;
  auto* eval = app.add_subcommand("eval", "Top-1 accuracy of a trained classifier behind a quantiser");
  eval->add_option("--checkpoint", eo.checkpoint, "model checkpoint")->required();
  eval->add_option("--config", eo.config, "dataset config")->required();
  eval->add_option("--method", eo.method, "cqformer | bypass | mediancut | mediancut-dither | octree");
  eval->add_option("--bits", eo.bits, "palette bits for the classical methods");
  eval->add_flag("--upper-bound", eo.upper_bound, "skip quantisation entirely");
  eval->add_option("--out", eo.out, "output directory");

  ReportOptions ro;
  auto* report = app.add_subcommand("report", "Collect eval results into a table and accuracy curve");
  report->add_option("runs", ro.runs, "run directories")->required();
  report->add_option("--out", ro.out, "output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    std::filesystem::path dir;
    if (*quantise) dir = cmd_quantise(qo, std::cout);
    if (*train) {
      if (*train_seed_opt) to.seed = train_seed;
      dir = cmd_train(to, std::cout);
    }
    if (*evolve) {
      if (*evolve_seed_opt) vo.seed = evolve_seed;
      dir = cmd_evolve(vo, std::cout);
    }
    if (*wcs) dir = cmd_wcs_map(wo, std::cout);
    if (*eval) dir = cmd_eval(eo, std::cout);
    if (*report) dir = cmd_report(ro, std::cout);
    std::cout << "outputs in " << dir.string() << '\n';
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
