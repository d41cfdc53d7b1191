// Command-line front end: scenario runs, the capability matrix, and the two
// offline training entry points.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "aes/aes.hpp"

namespace fs = std::filesystem;

namespace {

int cmd_run(const std::string& scenario_path, std::uint64_t seed, int cycles,
            const std::string& out_dir) {
  aes::scenario::ScenarioConfig cfg = aes::scenario::load_scenario(scenario_path);
  aes::scenario::RunResult r =
      aes::scenario::run_scenario(cfg, seed, cycles, out_dir);
  std::cout << aes::scenario::format_report(r.summary);
  std::cout << "outputs: " << out_dir << "/{events.jsonl,cycles.csv,metrics.json,report.txt}\n";
  return r.exit_code;
}

int cmd_matrix(const std::string& scenario_dir, std::uint64_t seed, int cycles,
               const std::string& out_dir) {
  std::vector<std::string> paths;
  for (int i = 1; i <= 8; ++i) {
    fs::path p = fs::path(scenario_dir) / ("scenario" + std::to_string(i) + ".json");
    if (!fs::exists(p))
      throw aes::ConfigError("scenarios", "missing " + p.string());
    paths.push_back(p.string());
  }
  aes::scenario::MatrixResult m =
      aes::scenario::run_matrix(paths, seed, cycles, out_dir);
  std::cout << m.table;
  std::cout << (m.all_ok ? "matrix: all scenarios conform\n"
                         : "matrix: FAILURES above\n");
  return m.all_ok ? 0 : 1;
}

int cmd_learn_weights(const std::string& demo_dir, const std::string& out_path,
                      int samples, std::uint64_t seed) {
  std::vector<std::string> files;
  for (const auto& entry : fs::directory_iterator(demo_dir)) {
    if (entry.path().extension() == ".csv") files.push_back(entry.path().string());
  }
  std::sort(files.begin(), files.end());
  if (files.empty())
    throw aes::EmptyInput("learn-weights: no .csv trajectories in " + demo_dir);
  std::vector<aes::motion::Trajectory> demos;
  for (const std::string& f : files)
    demos.push_back(aes::motion::read_trajectory_csv(f));
  aes::motion::IrlResult res = aes::motion::learn_weights(demos, samples, seed);
  aes::motion::write_weights_json(out_path, res.weights);
  std::cout << "learned weights from " << demos.size() << " demos ("
            << (res.converged ? "converged" : "max iterations") << ", objective "
            << res.objective << ", " << res.iterations << " iterations)\n"
            << "wrote " << out_path << "\n";
  return res.converged ? 0 : 1;
}

int cmd_train_selector(const std::string& demo_file, const std::string& out_path,
                       int epochs, std::uint64_t seed) {
  std::vector<aes::selection::Demonstration> demos =
      aes::selection::read_demos_jsonl(demo_file);
  aes::selection::SelectionConfig cfg;
  aes::selection::SelectionNet net(cfg, seed);
  aes::selection::TrainParams params;
  params.epochs = epochs;
  std::vector<double> curve = aes::selection::train(net, demos, params);
  std::ofstream out(out_path);
  if (!out) throw aes::Error("train-selector: cannot open " + out_path);
  out << net.to_json().dump(2) << "\n";
  std::cout << "trained on " << demos.size() << " demos for " << epochs
            << " epochs, final loss " << curve.back() << "\n"
            << "wrote " << out_path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"excavation planning and simulation toolkit"};
  app.require_subcommand(1);

  std::string scenario_path, out_dir = "out";
  std::uint64_t seed = 0;
  int cycles = 10;

  CLI::App* run = app.add_subcommand("run", "run one scenario");
  run->add_option("--scenario", scenario_path, "scenario JSON file")->required();
  run->add_option("--seed", seed, "RNG seed")->required();
  run->add_option("--cycles", cycles, "scoop-dump cycles to complete")->required();
  run->add_option("--out", out_dir, "output directory")->required();

  std::string scenario_dir = "scenarios", matrix_out = "out/matrix";
  std::uint64_t matrix_seed = 7;
  int matrix_cycles = 3;
  CLI::App* matrix = app.add_subcommand("matrix", "run the 8-scenario capability matrix");
  matrix->add_option("--scenarios", scenario_dir, "directory with scenario1..8.json");
  matrix->add_option("--seed", matrix_seed, "base RNG seed");
  matrix->add_option("--cycles", matrix_cycles, "cycles per scenario");
  matrix->add_option("--out", matrix_out, "output directory");

  std::string demo_dir, weights_out = "weights.json";
  int irl_samples = 8;
  std::uint64_t irl_seed = 7;
  CLI::App* learn = app.add_subcommand("learn-weights",
                                       "learn motion pattern weights from demo trajectories");
  learn->add_option("--demos", demo_dir, "directory of trajectory .csv files")->required();
  learn->add_option("--out", weights_out, "output weights JSON");
  learn->add_option("--samples", irl_samples, "perturbed samples per demo");
  learn->add_option("--seed", irl_seed, "RNG seed");

  std::string demo_file, selector_out = "selector.json";
  int epochs = 500;
  std::uint64_t sel_seed = 7;
  CLI::App* train = app.add_subcommand("train-selector",
                                       "train the scoop target selector from demos");
  train->add_option("--demos", demo_file, "demonstrations JSONL file")->required();
  train->add_option("--out", selector_out, "output network JSON");
  train->add_option("--epochs", epochs, "training epochs");
  train->add_option("--seed", sel_seed, "RNG seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) return cmd_run(scenario_path, seed, cycles, out_dir);
    if (matrix->parsed())
      return cmd_matrix(scenario_dir, matrix_seed, matrix_cycles, matrix_out);
    if (learn->parsed())
      return cmd_learn_weights(demo_dir, weights_out, irl_samples, irl_seed);
    if (train->parsed())
      return cmd_train_selector(demo_file, selector_out, epochs, sel_seed);
  } catch (const aes::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const aes::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
