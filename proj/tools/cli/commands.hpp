#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "run_config.hpp"

namespace cosim::cli {

/// Resolved configuration plus what run.json needs to replay the call.
struct Context {
  RunConfig config;
  std::string command;
  std::vector<std::string> argv;
  std::ostream* out = nullptr;
};

/// Writes <out>/run.json.
void write_run_record(const Context& ctx, const std::vector<std::filesystem::path>& inputs);

struct CleanArgs {
  std::filesystem::path input;
  std::optional<std::filesystem::path> output;  // default <out>/cleaned.jsonl
};
void cmd_clean(const Context& ctx, const CleanArgs& args);

void cmd_synth(const Context& ctx);

struct TrainCsArgs {
  std::vector<std::string> clusters;  // empty: every cluster
  bool merge = false;
  std::optional<std::string> name;  // merged model name
};
void cmd_train_cs(const Context& ctx, const TrainCsArgs& args);

struct TrainGlobalArgs {
  std::string on = "cs-union";  // or cc-val
};
void cmd_train_global(const Context& ctx, const TrainGlobalArgs& args);

/// Triples are named by a dataset split ("cc_test", "cc_validation", a
/// cluster name for its held-out split) or a JSONL path.
struct EvalArgs {
  std::filesystem::path model;
  std::string triples = "cc_test";
};
void cmd_eval(const Context& ctx, const EvalArgs& args);

/// Model lists accept checkpoint files and directories (every *.csck in
/// name order).
struct ModelsArgs {
  std::vector<std::filesystem::path> models;
  std::string triples = "cc_test";
};
void cmd_crossval(const Context& ctx, const ModelsArgs& args);
void cmd_ablate_loo(const Context& ctx, const ModelsArgs& args);
void cmd_sweep(const Context& ctx, const ModelsArgs& args);
void cmd_build_maps(const Context& ctx, const ModelsArgs& args);
void cmd_train_weights(const Context& ctx, const ModelsArgs& args);

struct EnsembleEvalArgs {
  std::filesystem::path manifest;
  std::string triples = "cc_test";
};
void cmd_ensemble_eval(const Context& ctx, const EnsembleEvalArgs& args);

}  // namespace cosim::cli
