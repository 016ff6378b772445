#include "app.hpp"

#include <functional>
#include <optional>
#include <ostream>

#include <CLI11.hpp>

#include "commands.hpp"
#include "cosim/error.hpp"
#include "cosim/logging.hpp"

namespace cosim::cli {

namespace {

struct GlobalFlags {
  std::optional<std::string> config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::size_t> threads;
  std::optional<std::string> dataset;
  std::optional<std::string> mode;
};

RunConfig resolve_config(const GlobalFlags& flags) {
  RunConfig cfg = flags.config ? load_run_config(*flags.config) : RunConfig{};
  if (flags.seed) cfg.seed = *flags.seed;
  if (flags.out) cfg.out = *flags.out;
  if (flags.threads) cfg.threads = *flags.threads;
  if (flags.dataset) cfg.dataset = *flags.dataset;
  if (flags.mode) cfg.mode = parse_predict_mode(*flags.mode);
  cfg.validate();
  return cfg;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Context-sensitive similarity rankers and their ensembles"};
  app.require_subcommand(1);
  app.fallthrough();
  GlobalFlags flags;
  app.add_option("--config", flags.config, "Run configuration (JSON)");
  app.add_option("--seed", flags.seed, "Overrides the config seed");
  app.add_option("--out", flags.out, "Run directory");
  app.add_option("--threads", flags.threads, "Worker threads");
  app.add_option("--dataset", flags.dataset, "Dataset manifest (dataset.json)");
  app.add_option("--mode", flags.mode, "Prediction mode: embedding or ranking");

  std::function<void(const Context&)> action;

  CleanArgs clean;
  std::string clean_output;
  auto* c = app.add_subcommand("clean", "Resolve annotator labels and remove preference cycles");
  c->add_option("input", clean.input, "Triples or annotations (JSONL)")->required();
  c->add_option("output", clean_output, "Cleaned triples (default <out>/cleaned.jsonl)");
  c->callback([&] {
    if (!clean_output.empty()) clean.output = clean_output;
    action = [&](const Context& ctx) { cmd_clean(ctx, clean); };
  });

  auto* s = app.add_subcommand("synth", "Generate a synthetic world");
  s->callback([&] { action = [](const Context& ctx) { cmd_synth(ctx); }; });

  TrainCsArgs train_cs;
  std::string merged_name;
  auto* tc = app.add_subcommand("train-cs", "Train one model per context cluster");
  tc->add_option("clusters", train_cs.clusters, "Cluster names (default: all)");
  tc->add_flag("--merge", train_cs.merge, "Train one model on the union of the clusters");
  tc->add_option("--name", merged_name, "Name of the merged model");
  tc->callback([&] {
    if (!merged_name.empty()) train_cs.name = merged_name;
    action = [&](const Context& ctx) { cmd_train_cs(ctx, train_cs); };
  });

  TrainGlobalArgs train_global;
  auto* tg = app.add_subcommand("train-global", "Train a global model");
  tg->add_option("--on", train_global.on, "cs-union or cc-val")->check(CLI::IsMember({"cs-union", "cc-val"}));
  tg->callback([&] { action = [&](const Context& ctx) { cmd_train_global(ctx, train_global); }; });

  EvalArgs eval;
  auto* ev = app.add_subcommand("eval", "Evaluate one model");
  ev->add_option("model", eval.model, "Checkpoint (.csck)")->required();
  ev->add_option("triples", eval.triples, "cc_test, cc_validation, a cluster name, or a JSONL path");
  ev->callback([&] { action = [&](const Context& ctx) { cmd_eval(ctx, eval); }; });

  ModelsArgs models;
  auto add_models_command = [&](const char* name, const char* help, void (*fn)(const Context&, const ModelsArgs&),
                                bool with_triples) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("models", models.models, "Checkpoints or directories of them")->required();
    if (with_triples) sub->add_option("--triples", models.triples, "Test triples");
    sub->callback([&, fn] { action = [&, fn](const Context& ctx) { fn(ctx, models); }; });
  };
  add_models_command("crossval", "Accuracy of every model on every cluster", cmd_crossval, false);
  add_models_command("ablate-loo", "Leave-one-out ensemble ablation", cmd_ablate_loo, true);
  add_models_command("sweep", "Ensemble accuracy over member combinations", cmd_sweep, true);
  add_models_command("build-maps", "Credibility maps from validation accuracy", cmd_build_maps, false);
  add_models_command("train-weights", "MLP accuracy regressors for ensemble weights", cmd_train_weights, false);

  EnsembleEvalArgs ensemble_eval;
  auto* ee = app.add_subcommand("ensemble-eval", "Evaluate an ensemble manifest");
  ee->add_option("manifest", ensemble_eval.manifest, "Ensemble manifest (JSON)")->required();
  ee->add_option("triples", ensemble_eval.triples, "Test triples");
  ee->callback([&] { action = [&](const Context& ctx) { cmd_ensemble_eval(ctx, ensemble_eval); }; });

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }

  try {
    init_logging_from_env();
    Context ctx;
    ctx.config = resolve_config(flags);
    ctx.command = app.get_subcommands().front()->get_name();
    ctx.argv = args;
    ctx.out = &out;
    action(ctx);
    return 0;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return is_validation_error(e.code()) ? 1 : 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace cosim::cli
