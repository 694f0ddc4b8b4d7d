#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace branchnet {

struct CommonOptions {
  std::optional<std::filesystem::path> config;
  std::vector<std::string> overrides;  // "section.key=value"
  int workers = 1;
  std::string precision = "ref";  // "ref" or "fast"
  std::filesystem::path out;      // defaults to the config's output_dir
};

struct TrainCommand {
  std::optional<std::filesystem::path> resume;
};

struct EvalCommand {
  std::filesystem::path checkpoint;
};

struct CompareCommand {
  std::vector<int> branch_points;  // empty: every B from 0 to the block count
};

struct PreviewCommand {
  std::filesystem::path input;
  int count = 4;
};

/// Each command returns a process exit code and reports problems on `err`.
int cmd_train(const CommonOptions& common, const TrainCommand& cmd, std::ostream& out, std::ostream& err);
int cmd_eval(const CommonOptions& common, const EvalCommand& cmd, std::ostream& out, std::ostream& err);
int cmd_inspect(const CommonOptions& common, std::ostream& out, std::ostream& err);
int cmd_compare(const CommonOptions& common, const CompareCommand& cmd, std::ostream& out, std::ostream& err);
int cmd_augment_preview(const CommonOptions& common, const PreviewCommand& cmd, std::ostream& out,
                        std::ostream& err);

/// <out>/<fingerprint>-<UTC timestamp>, with a numeric suffix if taken.
std::filesystem::path make_run_directory(const std::filesystem::path& root, const std::string& fingerprint);

}  // namespace branchnet
