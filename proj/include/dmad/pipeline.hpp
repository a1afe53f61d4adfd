#pragma once

// Pipeline stages shared by the CLI and the tests: bank construction,
// training, evaluation, single-image scoring and the ablation grid.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dmad/config.hpp"

namespace dmad {

struct BuiltBanks {
  DualMemoryBank dual;
  // Components kept for inspection; absent when ablated or not applicable.
  std::optional<MemoryBank> pseudo_outlier;
  std::optional<MemoryBank> seen_anomaly;
  std::optional<MemoryBank> center_sampled;
};

// Outlier grids in file-name order.
std::vector<FeatureGrid> load_outlier_dir(const std::filesystem::path& dir);

BuiltBanks build_banks(const RunConfig& cfg);
// Writes normal.dmbk, abnormal.dmbk (when present) and, in semi-supervised
// mode, the component banks.
void save_banks(const BuiltBanks& banks, const std::filesystem::path& bank_dir);
DualMemoryBank load_banks(const RunConfig& cfg);
std::string provenance_summary(const MemoryBank& bank);

TrainResult run_train(const RunConfig& cfg, const DualMemoryBank& dual);
EvalReport run_eval(const RunConfig& cfg, const Checkpoint& ckpt, const DualMemoryBank& dual);
void write_report(const EvalReport& report, const std::filesystem::path& report_dir);

// Convenience wrappers that read and write the configured paths.
void stage_build_banks(const RunConfig& cfg);
void stage_train(const RunConfig& cfg);
EvalReport stage_eval(const RunConfig& cfg);
Checkpoint load_checkpoint_checked(const RunConfig& cfg);

// Echoes the effective config next to the stage outputs.
void write_effective_config(const RunConfig& cfg, const std::filesystem::path& dir);

struct AblationRow {
  std::string name;
  RunConfig config;
  EvalReport report;
};

// Variants of the ablation table: three unsupervised rows and four
// semi-supervised rows (filter off, filter on, attention on, plus M_p).
// Semi rows are skipped when the train manifest has no anomalous images.
std::vector<std::pair<std::string, RunConfig>> ablation_variants(const RunConfig& base);
std::vector<AblationRow> run_ablation(const RunConfig& base);
std::string ablation_to_csv(const std::vector<AblationRow>& rows);

}  // namespace dmad
