#include <functional>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "wmcap/errors.hpp"
#include "wmcap/experiment.hpp"

namespace {

struct CommonArgs {
  std::string config_path;
  int jobs = 1;
  std::uint64_t seed_offset = 0;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("config", args.config_path, "experiment config JSON")->required();
  cmd->add_option("--jobs", args.jobs, "worker threads for grid cells")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--seed-offset", args.seed_offset,
                  "added to every configured seed (CI sharding)");
}

int dispatch(const CommonArgs& args,
             const std::function<int(const wmcap::ExperimentConfig&, int)>& run) {
  try {
    wmcap::ExperimentConfig cfg = wmcap::load_experiment_config(args.config_path);
    if (args.seed_offset != 0)
      for (auto& s : cfg.seeds) s += args.seed_offset;
    return run(cfg, args.jobs);
  } catch (const wmcap::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const wmcap::InfeasibleError& e) {
    std::cerr << "infeasible: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"watermark capacity measurement toolkit"};
  app.require_subcommand(1);

  struct Sub {
    const char* name;
    const char* help;
    int (*fn)(const wmcap::ExperimentConfig&, int);
  };
  const Sub subs[] = {
      {"embed", "train a clean model and embed an identity message", wmcap::cmd_embed},
      {"attack", "run removal attacks and store round logs", wmcap::cmd_attack},
      {"estimate", "estimate capacity curves over the configured grid",
       wmcap::cmd_estimate},
      {"minlength", "solve for the minimal identity message length",
       wmcap::cmd_minlength},
      {"mrov", "compare one-shot, MROV-V-1 and MROV-V-2 verification",
       wmcap::cmd_mrov},
      {"transfer", "fit the key-perturbation generator", wmcap::cmd_transfer},
      {"check", "run the built-in invariant suites", wmcap::cmd_check},
  };

  std::vector<std::pair<CommonArgs, const Sub*>> bound;
  bound.reserve(std::size(subs));
  for (const auto& sub : subs) bound.emplace_back(CommonArgs{}, &sub);
  for (auto& [args, sub] : bound) add_common(app.add_subcommand(sub->name, sub->help), args);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  for (auto& [args, sub] : bound)
    if (app.get_subcommand(sub->name)->parsed()) return dispatch(args, sub->fn);
  return 2;
}
