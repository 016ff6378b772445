#include "commands.hpp"

#include <algorithm>
#include <map>
#include <memory>
#include <ostream>
#include <set>

#include <fmt/format.h>
#include <json.hpp>

#include "cosim/binio.hpp"
#include "cosim/error.hpp"
#include "cosim/evalkit.hpp"

#ifndef COSIM_VERSION
#define COSIM_VERSION "unknown"
#endif

namespace cosim::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::ostream& say(const Context& ctx) { return *ctx.out; }

DatasetBundle load_bundle(const Context& ctx) {
  if (!ctx.config.dataset) throw Error(ErrorCode::BadConfig, "no dataset given (--dataset or config \"dataset\")");
  return load_dataset(*ctx.config.dataset);
}

ClusterSplit split_of(const Context& ctx, const ContextCluster& cluster) {
  return split_cluster(cluster, ctx.config.train_count, stage_seed(ctx.config, "split/" + cluster.name));
}

std::vector<ContextCluster> validation_splits(const Context& ctx, const DatasetBundle& bundle) {
  std::vector<ContextCluster> out;
  for (const auto& c : bundle.clusters) out.push_back(split_of(ctx, c).val);
  return out;
}

std::vector<Triple> resolve_triples(const Context& ctx, const DatasetBundle& bundle, const std::string& spec) {
  if (spec == "cc_test") return bundle.cc_test;
  if (spec == "cc_validation") return bundle.cc_validation;
  for (const auto& c : bundle.clusters) {
    if (c.name == spec) return split_of(ctx, c).val.triples;
  }
  if (fs::exists(spec)) return load_triples(spec);
  throw Error(ErrorCode::BadArgument, "unknown triple set: " + spec);
}

std::vector<fs::path> expand_models(const std::vector<fs::path>& inputs) {
  std::vector<fs::path> out;
  for (const auto& p : inputs) {
    if (fs::is_directory(p)) {
      std::vector<fs::path> found;
      for (const auto& entry : fs::directory_iterator(p)) {
        if (entry.path().extension() == ".csck") found.push_back(entry.path());
      }
      std::sort(found.begin(), found.end());
      out.insert(out.end(), found.begin(), found.end());
    } else {
      out.push_back(p);
    }
  }
  if (out.empty()) throw Error(ErrorCode::EmptyInput, "no model checkpoints given");
  return out;
}

std::vector<CsModel> load_models(const std::vector<fs::path>& paths) {
  std::vector<CsModel> models;
  std::set<std::string> names;
  for (const auto& p : paths) {
    models.push_back(load_checkpoint(p));
    if (!names.insert(models.back().name).second) {
      throw Error(ErrorCode::DuplicateId, "two models are named " + models.back().name);
    }
  }
  return models;
}

std::vector<std::string> names_of(const std::vector<CsModel>& models) {
  std::vector<std::string> out;
  for (const auto& m : models) out.push_back(m.name);
  return out;
}

// Member predictors with the lambdas the ensemble helpers take.
struct Members {
  std::vector<std::shared_ptr<CsPredictor>> predictors;
  std::vector<PredictFn> fns;

  Members(const std::vector<CsModel>& models, const EmbeddingTable& emb, PredictMode mode) {
    for (const auto& m : models) {
      predictors.push_back(std::make_shared<CsPredictor>(m, emb, mode));
      fns.push_back([p = predictors.back()](const Triple& t) { return (*p)(t); });
    }
  }
};

std::string history_csv(const CsModel& model) {
  std::string out = "epoch,loss,ranking_accuracy,embedding_accuracy\n";
  for (const auto& h : model.history) {
    out += fmt::format("{},{:.17g},{:.17g},{:.17g}\n", h.epoch, h.loss, h.ranking_accuracy, h.embedding_accuracy);
  }
  return out;
}

TrainConfig train_config(const Context& ctx, const std::string& model_name) {
  TrainConfig cfg = ctx.config.train;
  cfg.seed = stage_seed(ctx.config, "train/" + model_name);
  return cfg;
}

void train_and_save(const Context& ctx, const DatasetBundle& bundle, const std::vector<Triple>& triples,
                    const std::string& name, const std::vector<std::string>& trained_on) {
  TrainOptions opts;
  opts.name = name;
  opts.trained_on = trained_on;
  opts.shape = ctx.config.shape;
  std::unique_ptr<TrainingTraceRecorder> recorder;
  if (ctx.config.trace) {
    const auto pca = fit_reference_pca(bundle.cc_validation, bundle.embeddings, std::max<std::size_t>(2, ctx.config.pca_dim));
    recorder = std::make_unique<TrainingTraceRecorder>(bundle.cc_validation, bundle.embeddings, pca,
                                                       ctx.config.out / "traces" / name, ctx.config.trace_resolution,
                                                       ctx.config.mode);
    opts.on_epoch = recorder->hook();
  }
  const auto model = train_cs_model(triples, bundle.embeddings, train_config(ctx, name), opts);
  save_checkpoint(model, ctx.config.out / "models" / (name + ".csck"));
  binio::write_file(ctx.config.out / "models" / (name + ".history.csv"), history_csv(model));
  const auto& last = model.history.back();
  say(ctx) << fmt::format("{}: {} triples, final loss {:.4f}, train accuracy {:.4f}\n", name, triples.size(), last.loss,
                          last.embedding_accuracy);
}

fs::path dataset_embeddings_path(const fs::path& manifest) {
  const auto doc = json::parse(binio::read_file(manifest));
  return manifest.parent_path() / doc.at("embeddings").get<std::string>();
}

fs::path relative_to(const fs::path& target, const fs::path& dir) {
  return fs::proximate(fs::weakly_canonical(fs::absolute(target)), fs::weakly_canonical(fs::absolute(dir)));
}

struct EnsembleData {
  PcaModel pca;
  std::vector<std::vector<CredibilityMap>> maps;
  PredictionPanel val_panel;
};

EnsembleData validation_data(const Context& ctx, const std::vector<CsModel>& models, const Members& members,
                             const DatasetBundle& bundle) {
  const auto& val = bundle.cc_validation;
  EnsembleData d;
  d.pca = fit_reference_pca(val, bundle.embeddings, ctx.config.pca_dim);
  d.val_panel = build_panel(members.fns, val, bundle.embeddings, ctx.config.threads);
  const Matrix features = reference_features(d.pca, val, bundle.embeddings);
  for (std::size_t m = 0; m < models.size(); ++m) {
    std::vector<std::uint8_t> correct(val.size());
    for (std::size_t t = 0; t < val.size(); ++t) correct[t] = d.val_panel.at(m, t).label == val[t].y;
    std::vector<CredibilityMap> maps;
    for (const auto& axes : ctx.config.map_axes) {
      maps.push_back(build_credibility_map(models[m].name, features, correct, axes, ctx.config.map_resolution));
    }
    d.maps.push_back(std::move(maps));
  }
  return d;
}

RegressorConfig regressor_config(const Context& ctx, std::size_t repeat) {
  RegressorConfig cfg = ctx.config.regressor;
  cfg.seed = stage_seed(ctx.config, "weights/repeat/" + std::to_string(repeat));
  return cfg;
}

std::string map_stem(std::size_t index, const CredibilityMap& map) {
  std::string axes;
  for (std::size_t a : map.dim_indices) axes += "_" + std::to_string(a);
  return fmt::format("map{}_axes{}", index, axes);
}

std::string map_cells_csv(const CredibilityMap& map) {
  const bool two_d = map.dim_indices.size() == 2;
  std::string out = two_d ? "x_bin,y_bin,correct,total,score\n" : "x_bin,correct,total,score\n";
  for (std::size_t c = 0; c < map.cells.size(); ++c) {
    const auto& cell = map.cells[c];
    const double score = static_cast<double>(cell.correct + 1) / static_cast<double>(cell.total + 2);
    if (two_d) {
      out += fmt::format("{},{},{},{},{:.17g}\n", c % map.resolution, c / map.resolution, cell.correct, cell.total, score);
    } else {
      out += fmt::format("{},{},{},{:.17g}\n", c, cell.correct, cell.total, score);
    }
  }
  return out;
}

}  // namespace

void write_run_record(const Context& ctx, const std::vector<fs::path>& inputs) {
  json in = json::array();
  for (const auto& p : inputs) in.push_back(p.generic_string());
  json doc = {{"command", ctx.command},
              {"argv", ctx.argv},
              {"config", json::parse(run_config_json(ctx.config))},
              {"config_hash", config_hash(ctx.config)},
              {"seed", ctx.config.seed},
              {"inputs", in},
              {"version", COSIM_VERSION}};
  binio::write_file(ctx.config.out / "run.json", doc.dump(2) + "\n");
}

void cmd_clean(const Context& ctx, const CleanArgs& args) {
  const auto mixed = parse_mixed_jsonl(binio::read_file(args.input), args.input.string());
  const auto resolution = resolve_labels(mixed.annotations);
  std::vector<Triple> all = mixed.labelled;
  all.insert(all.end(), resolution.kept.begin(), resolution.kept.end());
  const auto flagged = detect_preference_cycles(all);
  const auto cleaned = clean_dataset(all);
  const fs::path output = args.output.value_or(ctx.config.out / "cleaned.jsonl");
  save_triples(cleaned, output);
  const json report = {{"labelled_input", mixed.labelled.size()},
                       {"annotations", mixed.annotations.size()},
                       {"annotations_dropped", resolution.dropped.size()},
                       {"cycle_triples_removed", flagged.size()},
                       {"kept", cleaned.size()}};
  binio::write_file(ctx.config.out / "clean_report.json", report.dump(2) + "\n");
  write_run_record(ctx, {args.input});
  say(ctx) << fmt::format("dropped {} annotations, removed {} cycle triples, kept {}\n", resolution.dropped.size(),
                          flagged.size(), cleaned.size());
}

void cmd_synth(const Context& ctx) {
  synth::WorldConfig wc = ctx.config.world;
  wc.seed = ctx.config.seed;
  const auto world = synth::generate_world(wc);
  synth::save_world(world, wc, ctx.config.out);
  write_run_record(ctx, {});
  say(ctx) << fmt::format("{} images, {} clusters, {} validation / {} test triples -> {}\n", world.bundle.embeddings.size(),
                          world.bundle.clusters.size(), world.bundle.cc_validation.size(), world.bundle.cc_test.size(),
                          (ctx.config.out / "dataset.json").string());
}

void cmd_train_cs(const Context& ctx, const TrainCsArgs& args) {
  const auto bundle = load_bundle(ctx);
  std::vector<const ContextCluster*> chosen;
  if (args.clusters.empty()) {
    for (const auto& c : bundle.clusters) chosen.push_back(&c);
  } else {
    for (const auto& name : args.clusters) chosen.push_back(&bundle.cluster(name));
  }
  for (const auto* c : chosen) {
    const auto split = split_of(ctx, *c);
    save_triples(split.train.triples, ctx.config.out / "splits" / (c->name + ".train.jsonl"));
    save_triples(split.val.triples, ctx.config.out / "splits" / (c->name + ".val.jsonl"));
  }
  if (args.merge) {
    std::vector<Triple> merged;
    std::vector<std::string> names;
    for (const auto* c : chosen) {
      const auto split = split_of(ctx, *c);
      merged.insert(merged.end(), split.train.triples.begin(), split.train.triples.end());
      names.push_back(c->name);
    }
    std::string name = "meta";
    for (const auto& n : names) name += "_" + n;
    train_and_save(ctx, bundle, merged, args.name.value_or(name), names);
  } else {
    for (const auto* c : chosen) train_and_save(ctx, bundle, split_of(ctx, *c).train.triples, c->name, {c->name});
  }
  write_run_record(ctx, {*ctx.config.dataset});
}

void cmd_train_global(const Context& ctx, const TrainGlobalArgs& args) {
  const auto bundle = load_bundle(ctx);
  std::vector<Triple> triples;
  std::vector<std::string> trained_on;
  std::string name;
  if (args.on == "cs-union") {
    for (const auto& c : bundle.clusters) {
      const auto split = split_of(ctx, c);
      triples.insert(triples.end(), split.train.triples.begin(), split.train.triples.end());
      trained_on.push_back(c.name);
    }
    name = "global_cs_union";
  } else if (args.on == "cc-val") {
    triples = bundle.cc_validation;
    trained_on = {"cc_validation"};
    name = "global_cc_val";
  } else {
    throw Error(ErrorCode::BadArgument, "--on must be cs-union or cc-val");
  }
  train_and_save(ctx, bundle, triples, name, trained_on);
  write_run_record(ctx, {*ctx.config.dataset});
}

void cmd_eval(const Context& ctx, const EvalArgs& args) {
  const auto bundle = load_bundle(ctx);
  const auto model = load_checkpoint(args.model);
  const auto triples = resolve_triples(ctx, bundle, args.triples);
  const auto report = evaluate_cs_model(model, triples, bundle.embeddings, ctx.config.mode, ctx.config.threads);
  binio::write_file(ctx.config.out / "eval.json", report_to_json(report));
  write_run_record(ctx, {*ctx.config.dataset, args.model});
  say(ctx) << fmt::format("{} on {} ({}): accuracy {:.4f} over {} triples\n", model.name, args.triples,
                          to_string(ctx.config.mode), report.accuracy, report.n);
}

void cmd_crossval(const Context& ctx, const ModelsArgs& args) {
  const auto bundle = load_bundle(ctx);
  const auto paths = expand_models(args.models);
  const auto models = load_models(paths);
  const auto clusters = validation_splits(ctx, bundle);
  const auto matrix = cross_validation(models, clusters, bundle.embeddings, ctx.config.mode, ctx.config.threads);
  binio::write_file(ctx.config.out / "crossval.csv", crossval_to_csv(matrix));
  binio::write_file(ctx.config.out / "crossval.json", crossval_to_json(matrix));
  auto inputs = paths;
  inputs.insert(inputs.begin(), *ctx.config.dataset);
  write_run_record(ctx, inputs);
  say(ctx) << fmt::format("diagonal mean {:.4f}, off-diagonal mean {:.4f}\n", matrix.diagonal_mean.value_or(0.0),
                          matrix.offdiag_mean.value_or(0.0));
}

void cmd_build_maps(const Context& ctx, const ModelsArgs& args) {
  const auto bundle = load_bundle(ctx);
  const auto paths = expand_models(args.models);
  const auto models = load_models(paths);
  const Members members(models, bundle.embeddings, ctx.config.mode);
  const auto data = validation_data(ctx, models, members, bundle);

  const fs::path dir = ctx.config.out / "maps";
  save_pca(data.pca, dir / "pca.cspc");
  EnsembleManifest manifest;
  manifest.strategy = Strategy::CredibilityWeighted;
  manifest.mode = ctx.config.mode;
  manifest.embeddings = relative_to(dataset_embeddings_path(*ctx.config.dataset), ctx.config.out);
  manifest.map_pca = fs::path("maps") / "pca.cspc";
  manifest.filter = ctx.config.filter;
  manifest.filter_scores = ScoreSource::Credibility;
  for (std::size_t m = 0; m < models.size(); ++m) {
    manifest.members.push_back(relative_to(paths[m], ctx.config.out));
    std::vector<fs::path> files;
    for (std::size_t k = 0; k < data.maps[m].size(); ++k) {
      const auto& map = data.maps[m][k];
      const auto stem = map_stem(k, map);
      save_credibility_map(map, dir / models[m].name / (stem + ".cscm"));
      binio::write_file(dir / models[m].name / (stem + ".csv"), map_cells_csv(map));
      files.push_back(fs::path("maps") / models[m].name / (stem + ".cscm"));
    }
    manifest.maps.push_back(files);
  }
  binio::write_file(ctx.config.out / "ensemble_credibility.json", format_manifest(manifest));
  auto inputs = paths;
  inputs.insert(inputs.begin(), *ctx.config.dataset);
  write_run_record(ctx, inputs);
  say(ctx) << fmt::format("{} maps per model over {} PCA axes -> {}\n", ctx.config.map_axes.size(), data.pca.output_dim(),
                          dir.string());
}

void cmd_train_weights(const Context& ctx, const ModelsArgs& args) {
  const auto bundle = load_bundle(ctx);
  const auto paths = expand_models(args.models);
  const auto models = load_models(paths);
  const Members members(models, bundle.embeddings, ctx.config.mode);
  const auto panel = build_panel(members.fns, bundle.cc_validation, bundle.embeddings, ctx.config.threads);
  const auto names = names_of(models);
  const auto set = train_weight_regressors(names, panel, bundle.cc_validation, bundle.embeddings, ctx.config.pca_dim,
                                           regressor_config(ctx, 0));
  save_weight_regressors(set, ctx.config.out / "weights.cswr");

  EnsembleManifest manifest;
  manifest.strategy = Strategy::RegressorWeighted;
  manifest.mode = ctx.config.mode;
  manifest.embeddings = relative_to(dataset_embeddings_path(*ctx.config.dataset), ctx.config.out);
  manifest.regressors = "weights.cswr";
  manifest.filter = ctx.config.filter;
  manifest.filter_scores = ScoreSource::Regressor;
  for (const auto& p : paths) manifest.members.push_back(relative_to(p, ctx.config.out));
  binio::write_file(ctx.config.out / "ensemble_regressor.json", format_manifest(manifest));
  auto inputs = paths;
  inputs.insert(inputs.begin(), *ctx.config.dataset);
  write_run_record(ctx, inputs);
  say(ctx) << fmt::format("{} regressors over {} PCA features -> {}\n", set.regressors.size(), set.pca.output_dim(),
                          (ctx.config.out / "weights.cswr").string());
}

void cmd_ensemble_eval(const Context& ctx, const EnsembleEvalArgs& args) {
  const auto manifest = load_manifest(args.manifest);
  const auto ensemble = load_ensemble(manifest);
  DatasetBundle bundle = load_bundle(ctx);
  const auto triples = resolve_triples(ctx, bundle, args.triples);
  const auto& emb = bundle.embeddings;

  const auto report = evaluate_ensemble(ensemble, triples, emb, ctx.config.threads);
  const Members members(ensemble.members, emb, ensemble.mode);
  std::string csv = "predictor,accuracy,n\n";
  json rows = json::array();
  auto add = [&](const std::string& name, const EvalReport& r) {
    csv += fmt::format("{},{:.17g},{}\n", name, r.accuracy, r.n);
    rows.push_back({{"predictor", name}, {"accuracy", r.accuracy}, {"n", r.n}});
  };
  for (std::size_t m = 0; m < ensemble.members.size(); ++m) {
    add(ensemble.members[m].name, accuracy_2afc(members.fns[m], triples, emb, ctx.config.threads));
  }
  EnsembleModel majority;
  majority.members = ensemble.members;
  majority.mode = ensemble.mode;
  add("majority_vote", evaluate_ensemble(majority, triples, emb, ctx.config.threads));
  add("ensemble_" + std::string(to_string(ensemble.strategy)), report);

  binio::write_file(ctx.config.out / "ensemble_eval.csv", csv);
  binio::write_file(ctx.config.out / "ensemble_eval.json",
                    json({{"rows", rows}, {"ensemble", json::parse(report_to_json(report))}}).dump(2) + "\n");
  write_run_record(ctx, {*ctx.config.dataset, args.manifest});
  say(ctx) << csv;
}

void cmd_sweep(const Context& ctx, const ModelsArgs& args) {
  const auto bundle = load_bundle(ctx);
  const auto paths = expand_models(args.models);
  const auto models = load_models(paths);
  const auto& emb = bundle.embeddings;
  const auto test = resolve_triples(ctx, bundle, args.triples);
  const Members members(models, emb, ctx.config.mode);
  const auto data = validation_data(ctx, models, members, bundle);
  const auto test_panel = build_panel(members.fns, test, emb, ctx.config.threads);
  const auto names = names_of(models);

  std::vector<Matrix> regressor_scores;
  for (std::size_t rep = 0; rep < ctx.config.repeats; ++rep) {
    const auto set = train_weight_regressors(names, data.val_panel, bundle.cc_validation, emb, data.pca,
                                             regressor_config(ctx, rep));
    regressor_scores.push_back(regressor_score_panel(set, test, emb));
  }
  const std::vector<SweepStrategy> strategies{
      vote_sweep_strategy(test_panel, test, "vote"),
      weighted_sweep_strategy(test_panel, test, {credibility_score_panel(data.maps, data.pca, test, emb)}, "pca"),
      weighted_sweep_strategy(test_panel, test, regressor_scores, "mlp")};

  std::vector<std::size_t> r_values = ctx.config.sweep_r;
  if (r_values.empty()) {
    for (std::size_t r = 1; r <= models.size(); ++r) r_values.push_back(r);
  }
  const auto rows = combination_sweep(models.size(), strategies, r_values);
  binio::write_file(ctx.config.out / "sweep.csv", sweep_to_csv(rows, names));

  std::map<std::pair<std::size_t, std::string>, std::vector<double>> groups;
  for (const auto& row : rows) groups[{row.r, row.strategy}].push_back(row.accuracy);
  std::string summary = "r,strategy,count,mean,min,max\n";
  for (const auto& [key, values] : groups) {
    double sum = 0.0;
    for (double v : values) sum += v;
    summary += fmt::format("{},{},{},{:.17g},{:.17g},{:.17g}\n", key.first, key.second, values.size(),
                           sum / static_cast<double>(values.size()), *std::min_element(values.begin(), values.end()),
                           *std::max_element(values.begin(), values.end()));
  }
  binio::write_file(ctx.config.out / "sweep_summary.csv", summary);
  auto inputs = paths;
  inputs.insert(inputs.begin(), *ctx.config.dataset);
  write_run_record(ctx, inputs);
  say(ctx) << summary;
}

void cmd_ablate_loo(const Context& ctx, const ModelsArgs& args) {
  const auto bundle = load_bundle(ctx);
  const auto paths = expand_models(args.models);
  const auto models = load_models(paths);
  const auto& emb = bundle.embeddings;
  const auto test = resolve_triples(ctx, bundle, args.triples);
  const Members members(models, emb, ctx.config.mode);

  EnsembleModel full;
  full.members = models;
  full.mode = ctx.config.mode;
  full.strategy = ctx.config.strategy;
  full.filter = ctx.config.filter;
  full.filter_scores = ctx.config.filter_scores;
  auto data = validation_data(ctx, models, members, bundle);
  full.maps = data.maps;
  full.map_pca = data.pca;
  full.regressors = train_weight_regressors(names_of(models), data.val_panel, bundle.cc_validation, emb, data.pca,
                                            regressor_config(ctx, 0));

  const EnsembleBuilder builder = [&](std::span<const std::size_t> subset) -> PredictFn {
    auto model = std::make_shared<EnsembleModel>(select_members(full, subset));
    auto predictor = std::make_shared<EnsemblePredictor>(*model, emb);
    return [model, predictor](const Triple& t) { return (*predictor)(t); };
  };
  const auto names = names_of(models);
  const auto table = leave_one_out(names, builder, validation_splits(ctx, bundle), test, emb, ctx.config.threads);
  binio::write_file(ctx.config.out / "loo.csv", loo_to_csv(table));
  auto inputs = paths;
  inputs.insert(inputs.begin(), *ctx.config.dataset);
  write_run_record(ctx, inputs);
  for (const auto& row : table.rows) {
    say(ctx) << fmt::format("without {}: test accuracy {:.4f}\n", row.left_out_name, row.test_accuracy);
  }
}

}  // namespace cosim::cli
