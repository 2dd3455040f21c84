#include <iostream>

#include "CLI11.hpp"
#include "commands.hpp"

int main(int argc, char** argv) {
  using namespace mshift::cli;
  namespace fs = std::filesystem;

  CLI::App app{"mshift: multi-source domain adaptation with disentangled branches"};
  app.require_subcommand(1);

  RunOptions run;
  fs::path out;
  std::uint64_t seed = 0;
  std::string ablation;
  std::string inject_fault;
  std::vector<fs::path> run_dirs;

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic multi-domain vector file");
  gen->add_option("--config", run.config, "synthetic spec or run config (JSON)")->required()->check(CLI::ExistingFile);
  gen->add_option("--out", out, "output vector file")->required();
  gen->add_option("--seed", seed, "override the data seed");

  auto add_run_flags = [&](CLI::App* cmd) {
    cmd->add_option("--config", run.config, "run config (JSON)")->required()->check(CLI::ExistingFile);
    cmd->add_option("--out", out, "override output_dir");
    cmd->add_option("--seed", seed, "override the root seed");
    cmd->add_option("--ablation", ablation, "full|no_fcd|no_cpa|cpa_language_mmd|cpa_scl|erm");
  };
  auto* train = app.add_subcommand("train", "train, evaluate and write run outputs");
  add_run_flags(train);
  auto* eval = app.add_subcommand("eval", "re-evaluate a checkpoint");
  add_run_flags(eval);
  fs::path checkpoint;
  eval->add_option("--checkpoint", checkpoint, "checkpoint file (default <output_dir>/checkpoint.json)");

  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every loss gradient");
  grad->add_option("--inject-fault", inject_fault)->group("");

  auto* report = app.add_subcommand("report", "CSV comparison of run directories");
  report->add_option("dirs", run_dirs, "run directories")->required();
  report->add_option("--out", out, "CSV file (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? exit_ok : exit_config_error;
  }

  const Console io{std::cout, std::cerr};
  auto given = [](CLI::App* cmd, const char* flag) { return cmd->count(flag) > 0; };

  if (*gen) {
    return cmd_gen_data(run.config, out, given(gen, "--seed") ? std::optional(seed) : std::nullopt, io);
  }
  if (*train || *eval) {
    CLI::App* cmd = *train ? train : eval;
    if (given(cmd, "--out")) run.out = out;
    if (given(cmd, "--seed")) run.seed = seed;
    if (given(cmd, "--ablation")) run.ablation = ablation;
    if (*train) return cmd_train(run, io);
    if (given(eval, "--checkpoint")) run.checkpoint = checkpoint;
    return cmd_eval(run, io);
  }
  if (*grad) {
    return cmd_gradcheck(given(grad, "--inject-fault") ? std::optional(inject_fault) : std::nullopt, io);
  }
  return cmd_report(run_dirs, given(report, "--out") ? std::optional(out) : std::nullopt, io);
}
