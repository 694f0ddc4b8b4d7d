#include <iostream>

#include "CLI11.hpp"
#include "branchnet/commands.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Branched residual network ensembles: train, evaluate and inspect"};
  app.require_subcommand(1);

  branchnet::CommonOptions common;
  std::string config;
  std::string out;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config, "experiment config (JSON)");
    sub->add_option("--set", common.overrides, "override section.key=value (repeatable)");
    sub->add_option("--workers", common.workers, "augmentation threads")->check(CLI::PositiveNumber);
    sub->add_option("--precision", common.precision, "ref or fast")->check(CLI::IsMember({"ref", "fast"}));
    sub->add_option("--out", out, "output root directory");
  };

  branchnet::TrainCommand train;
  std::string resume;
  auto* train_cmd = app.add_subcommand("train", "train a branched network and evaluate it");
  add_common(train_cmd);
  train_cmd->add_option("--resume", resume, "continue from a checkpoint");

  branchnet::EvalCommand eval;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval_cmd);
  eval_cmd->add_option("--checkpoint", eval.checkpoint, "checkpoint file")->required();

  auto* inspect_cmd = app.add_subcommand("inspect", "print block topology and parameter counts");
  add_common(inspect_cmd);

  branchnet::CompareCommand compare;
  auto* compare_cmd = app.add_subcommand("compare", "parameter counts over a sweep of branch points");
  add_common(compare_cmd);
  compare_cmd->add_option("--branch-points", compare.branch_points, "branch points to evaluate (default: all)")
      ->delimiter(',');

  branchnet::PreviewCommand preview;
  auto* preview_cmd = app.add_subcommand("augment-preview", "write augmented variants of a PPM image");
  add_common(preview_cmd);
  preview_cmd->add_option("--input", preview.input, "input image (binary PPM)")->required();
  preview_cmd->add_option("--count", preview.count, "number of variants");

  CLI11_PARSE(app, argc, argv);

  if (!config.empty()) common.config = config;
  if (!out.empty()) common.out = out;
  if (!resume.empty()) train.resume = resume;

  if (app.got_subcommand(train_cmd)) return branchnet::cmd_train(common, train, std::cout, std::cerr);
  if (app.got_subcommand(eval_cmd)) return branchnet::cmd_eval(common, eval, std::cout, std::cerr);
  if (app.got_subcommand(inspect_cmd)) return branchnet::cmd_inspect(common, std::cout, std::cerr);
  if (app.got_subcommand(compare_cmd)) return branchnet::cmd_compare(common, compare, std::cout, std::cerr);
  return branchnet::cmd_augment_preview(common, preview, std::cout, std::cerr);
}
