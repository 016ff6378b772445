#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cosim/csmodel.hpp"
#include "cosim/ensemble.hpp"
#include "cosim/synthbench.hpp"

namespace cosim::cli {

inline constexpr std::size_t kDefaultTrainCount = 667;
inline constexpr std::size_t kDefaultSweepRepeats = 3;

/// Everything a command needs besides its positional inputs. Loaded from
/// JSON; every section and key is optional, unknown keys are rejected.
struct RunConfig {
  std::optional<std::filesystem::path> dataset;
  std::filesystem::path out = "run";
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  synth::WorldConfig world;

  TrainConfig train;
  ModelShape shape;
  std::size_t train_count = kDefaultTrainCount;
  PredictMode mode = PredictMode::Embedding;

  std::size_t pca_dim = kDefaultPcaDim;
  std::size_t map_resolution = kDefaultMapResolution;
  std::vector<std::vector<std::size_t>> map_axes = default_map_axes();
  Strategy strategy = Strategy::RegressorWeighted;
  FilterRule filter;
  ScoreSource filter_scores = ScoreSource::Credibility;
  RegressorConfig regressor;
  std::size_t repeats = kDefaultSweepRepeats;
  std::vector<std::size_t> sweep_r;  // empty: every r from 1 to n

  bool trace = false;
  std::size_t trace_resolution = kDefaultTraceResolution;

  /// Throws BadConfig.
  void validate() const;
};

/// Relative paths inside the document resolve against `base_dir`.
/// Throws BadFormat on malformed JSON, unknown keys, or wrongly typed values.
RunConfig parse_run_config(const std::string& text, const std::filesystem::path& base_dir);
RunConfig load_run_config(const std::filesystem::path& path);

/// Canonical JSON of the resolved configuration (sorted keys, no
/// whitespace variance); also what run.json records.
std::string run_config_json(const RunConfig& cfg);

/// FNV-1a 64 of run_config_json, as 16 hex digits.
std::string config_hash(const RunConfig& cfg);

/// Per-stage seeds: derive_seed(seed, stage).
std::uint64_t stage_seed(const RunConfig& cfg, const std::string& stage);

}  // namespace cosim::cli
