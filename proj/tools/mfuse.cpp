#include <CLI11.hpp>

#include "mfuse/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Mutual-learning image/text fusion experiments"};
  app.require_subcommand(1);

  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::vector<std::string> regimes;
  bool quiet = false;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("config", config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "training seed (overrides the config)");
    sub->add_option("--out", out, "output directory");
    sub->add_flag("--quiet", quiet, "suppress progress output");
  };
  CLI::App* run = app.add_subcommand("run", "train one regime and evaluate it");
  CLI::App* compare = app.add_subcommand("compare", "train several regimes over several seeds");
  CLI::App* validate = app.add_subcommand("validate", "check a config without training");
  for (CLI::App* sub : {run, compare, validate}) add_common(sub);
  for (CLI::App* sub : {run, compare})
    sub->add_option("--regime", regimes, "IL | ML_KLD | ML_TrKLD | EAML_TrKLD (repeatable for compare)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : mfuse::kExitInvalid;
  }

  mfuse::RunOptions opt;
  opt.seed = seed;
  if (out) opt.out = *out;
  opt.quiet = quiet;
  for (const auto& r : regimes) {
    const auto parsed = mfuse::parse_regime(r);
    if (!parsed) {
      std::cerr << "error: unknown regime '" << r << "'\n";
      return mfuse::kExitInvalid;
    }
    opt.regimes.push_back(*parsed);
  }
  if (run->parsed() && opt.regimes.size() > 1) {
    std::cerr << "error: run takes at most one --regime\n";
    return mfuse::kExitInvalid;
  }
  if (run->parsed()) return mfuse::cmd_run(config, opt);
  if (compare->parsed()) return mfuse::cmd_compare(config, opt);
  return mfuse::cmd_validate(config, opt);
}
