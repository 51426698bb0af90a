#include <CLI11.hpp>
#include <iostream>

#include "emask/cli/commands.hpp"
#include "emask/log.hpp"

using namespace emask;
using namespace emask::cli;

int main(int argc, char** argv) {
  CLI::App app{"Exemplar masking for multimodal class-incremental learning"};
  app.require_subcommand(1);
  bool verbose = false, quiet = false;
  app.add_flag("-v,--verbose", verbose, "Log progress per phase");
  app.add_flag("-q,--quiet", quiet, "Suppress warnings");

  std::string config_path, out_dir, seeds_arg, axis_arg, buffer_path, in_dir;
  int threads = 1;
  std::optional<std::size_t> index;
  std::optional<std::string> pgm_path, data_dir;
  std::optional<std::uint64_t> data_seed;

  auto* gen = app.add_subcommand("gen-data", "Render the synthetic dataset to a directory");
  gen->add_option("--config", config_path, "Config file ([dataset] section is used)")->check(CLI::ExistingFile);
  gen->add_option("--out", out_dir, "Output directory")->required();
  gen->add_option("--seed", data_seed, "Override dataset.seed");

  auto* run = app.add_subcommand("run", "Run an experiment for every seed");
  run->add_option("--config", config_path, "Config file")->required();
  run->add_option("--out", out_dir, "Output directory")->required();
  run->add_option("--seeds", seeds_arg, "Comma-separated seeds (overrides experiment.seeds)");
  run->add_option("--threads", threads, "Seeds run in parallel")->check(CLI::PositiveNumber);

  auto* sweep = app.add_subcommand("sweep", "Run an ablation grid");
  sweep->add_option("--axis", axis_arg, "threshold | reference | memory | order")->required();
  sweep->add_option("--config", config_path, "Base config file")->required();
  sweep->add_option("--out", out_dir, "Output directory")->required();
  sweep->add_option("--seeds", seeds_arg, "Comma-separated seeds (overrides experiment.seeds)");
  sweep->add_option("--threads", threads, "Cells run in parallel")->check(CLI::PositiveNumber);

  auto* inspect = app.add_subcommand("inspect-buffer", "Show stored exemplars");
  inspect->add_option("buffer", buffer_path, "Buffer file")->required();
  inspect->add_option("--index", index, "Exemplar index across classes");
  inspect->add_option("--pgm", pgm_path, "Write the patch mask as PGM");
  inspect->add_option("--data", data_dir, "Dataset directory, for token words");

  auto* report = app.add_subcommand("report", "Charts and tables from a run or sweep directory");
  report->add_option("--in", in_dir, "Run or sweep output directory")->required();
  report->add_option("--out", out_dir, "Report directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }
  set_log_level(quiet ? LogLevel::Quiet : verbose ? LogLevel::Info : LogLevel::Warning);

  try {
    if (*gen) {
      RunConfig cfg = config_path.empty() ? RunConfig{} : load_run_config(config_path, false);
      if (data_seed) cfg.spec.seed = *data_seed;
      cfg.spec.validate();
      return cmd_gen_data(cfg, out_dir, std::cout);
    }
    if (*run || *sweep) {
      const IniDocument doc = IniDocument::load(config_path);
      RunConfig cfg = parse_run_config(doc);
      if (!seeds_arg.empty()) cfg.seeds = parse_seed_list(seeds_arg);
      const Dataset data = resolve_dataset(cfg);
      if (*run) {
        const auto results = run_seeds(cfg, data, out_dir, threads, seeds_arg.empty() ? doc.text() : std::string());
        for (const auto& r : results)
          std::cout << "seed " << r.seed << ": A_bar = " << r.log.a_bar() << "\n";
        std::cout << "results in " << out_dir << "\n";
      } else {
        const auto rows = run_sweep(parse_sweep_axis(axis_arg), cfg, data, out_dir, threads);
        write_grid_csv(std::cout, rows);
      }
      return kExitOk;
    }
    if (*inspect) return cmd_inspect_buffer(buffer_path, index, pgm_path, data_dir, std::cout);
    if (*report) return cmd_report(in_dir, out_dir, std::cout);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitRuntime;
}
