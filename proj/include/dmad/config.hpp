#pragma once

// Run configuration: one JSON document, overridable by command-line flags,
// with mode-dependent defaults.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "dmad/memory_bank.hpp"
#include "dmad/optimizer.hpp"
#include "dmad/scoring.hpp"
#include "dmad/trainer.hpp"

namespace dmad {

struct RunPaths {
  std::filesystem::path train_manifest;
  std::filesystem::path test_manifest;
  std::filesystem::path outlier_dir;
  std::filesystem::path bank_dir = "banks";
  std::filesystem::path checkpoint = "model.dmckpt";
  std::filesystem::path loss_log = "loss_log.csv";
  std::filesystem::path report_dir = "report";
};

// Components that can be switched off for ablations.
struct AblationToggles {
  bool use_filter = true;
  bool use_outlier_bank = true;
  bool use_seen_bank = true;
  bool use_center_bank = true;
};

struct RunConfig {
  Mode mode = Mode::unsupervised;
  std::uint64_t seed = 0;
  bool deterministic = false;
  int threads = 1;
  RunPaths paths;
  CoresetConfig coreset;
  FusionConfig fusion;
  CenterSamplingConfig center_sampling;
  KnowledgeMode knowledge;
  LossConfig loss;
  AugmentConfig augment;
  TrainConfig train;
  ModelShape model;
  OptimizerConfig optimizer;
  EvalConfig eval;
  AblationToggles ablation;

  // Threads actually used: 1 under --deterministic.
  int effective_threads() const { return deterministic ? 1 : std::max(1, threads); }
  TrainSettings train_settings() const;
  void validate() const;
};

// Command-line values that take precedence over the config file.
struct ConfigOverrides {
  std::optional<std::uint64_t> seed;
  std::optional<bool> deterministic;
  std::optional<int> threads;
  std::optional<std::string> mode;
  std::optional<std::filesystem::path> train_manifest;
  std::optional<std::filesystem::path> test_manifest;
  std::optional<std::filesystem::path> outlier_dir;
  std::optional<std::filesystem::path> work_dir;  // base for bank, checkpoint, log and report paths
  std::optional<std::size_t> epochs;
};

// Parses a config document. Relative paths resolve against `base_dir`.
// Unknown keys are rejected. Values absent from the document get defaults;
// sub-seeds derive from the top-level seed, and loss weights and the
// attention toggle depend on the mode.
RunConfig parse_run_config(const std::string& json_text, const std::filesystem::path& base_dir,
                           const ConfigOverrides& overrides = {});
RunConfig load_run_config(const std::optional<std::filesystem::path>& path, const ConfigOverrides& overrides = {});

// Fully resolved config; parsing it back yields the same RunConfig.
std::string run_config_to_json(const RunConfig& cfg);

// Sub-seed for a named stage, mixed from the run seed.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view stage);

}  // namespace dmad
