#include "dmad/pipeline.hpp"

#include <algorithm>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "dmad/binary_io.hpp"
#include "dmad/error.hpp"

namespace dmad {

namespace {

std::filesystem::path bank_path(const std::filesystem::path& dir, BankKind kind) {
  switch (kind) {
    case BankKind::normal:
      return dir / "normal.dmbk";
    case BankKind::composed_abnormal:
      return dir / "abnormal.dmbk";
    default:
      return dir / (std::string(to_string(kind)) + ".dmbk");
  }
}

void require_file(const std::filesystem::path& p, const std::string& what) {
  if (p.empty()) throw ValidationError(fmt::format("{} path is not set", what));
  if (!std::filesystem::exists(p)) throw StorageError(fmt::format("{} not found: {}", what, p.string()));
}

bool abnormal_expected(const RunConfig& cfg) {
  if (cfg.mode == Mode::semi_supervised) return true;
  return cfg.ablation.use_outlier_bank;
}

}  // namespace

std::vector<FeatureGrid> load_outlier_dir(const std::filesystem::path& dir) {
  require_file(dir, "outlier directory");
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".dmft") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw ValidationError("no .dmft files in outlier directory " + dir.string());
  std::vector<FeatureGrid> grids;
  for (const auto& f : files) grids.push_back(read_feature_file(f));
  return grids;
}

BuiltBanks build_banks(const RunConfig& cfg) {
  require_file(cfg.paths.train_manifest, "train manifest");
  const auto manifest = load_manifest(cfg.paths.train_manifest, SplitRole::train);
  std::vector<FeatureGrid> normals;
  for (const auto& e : manifest.with_label(Label::normal)) normals.push_back(read_feature_file(e.feature_path));
  if (normals.empty()) throw ValidationError("train manifest has no normal images");

  auto coreset = cfg.coreset;
  coreset.threads = cfg.effective_threads();
  BuiltBanks out{{build_normal_bank(normals, coreset), std::nullopt, cfg.mode}, {}, {}, {}};
  spdlog::info("normal bank: {} rows", out.dual.normal.size());

  if (cfg.ablation.use_outlier_bank) {
    const auto outliers = load_outlier_dir(cfg.paths.outlier_dir);
    out.pseudo_outlier = build_pseudo_outlier_bank(outliers, normals, cfg.fusion, coreset);
    spdlog::info("pseudo-outlier bank: {} rows", out.pseudo_outlier->size());
  }
  if (cfg.mode == Mode::semi_supervised) {
    DatasetManifest anomalous{SplitRole::train, manifest.with_label(Label::anomalous)};
    if (anomalous.entries.empty()) {
      throw ValidationError("semi_supervised mode: train manifest has no annotated anomalous images");
    }
    out.seen_anomaly = build_seen_bank(anomalous, cfg.ablation.use_filter);
    spdlog::info("seen-anomaly bank: {} rows", out.seen_anomaly->size());
    if (cfg.ablation.use_center_bank) {
      out.center_sampled = anomaly_center_sampling(*out.seen_anomaly, cfg.center_sampling);
      spdlog::info("center-sampled bank: {} rows", out.center_sampled->size());
    }
  }
  auto ptr = [](const std::optional<MemoryBank>& b) { return b ? &*b : nullptr; };
  if (abnormal_expected(cfg)) {
    out.dual.abnormal =
        compose_abnormal_bank(cfg.mode, ptr(out.pseudo_outlier), ptr(out.seen_anomaly), ptr(out.center_sampled));
  }
  out.dual.validate();
  return out;
}

void save_banks(const BuiltBanks& banks, const std::filesystem::path& bank_dir) {
  save_bank(banks.dual.normal, bank_path(bank_dir, BankKind::normal));
  if (banks.dual.abnormal) save_bank(*banks.dual.abnormal, bank_path(bank_dir, BankKind::composed_abnormal));
  if (banks.dual.mode == Mode::semi_supervised) {
    for (const auto* b : {&banks.pseudo_outlier, &banks.seen_anomaly, &banks.center_sampled}) {
      if (*b) save_bank(**b, bank_path(bank_dir, (*b)->kind()));
    }
  }
}

DualMemoryBank load_banks(const RunConfig& cfg) {
  const auto normal_path = bank_path(cfg.paths.bank_dir, BankKind::normal);
  require_file(normal_path, "normal bank (run build-banks first)");
  DualMemoryBank dual{load_bank(normal_path), std::nullopt, cfg.mode};
  const auto abnormal_path = bank_path(cfg.paths.bank_dir, BankKind::composed_abnormal);
  if (abnormal_expected(cfg)) {
    require_file(abnormal_path, "abnormal bank (run build-banks first)");
    dual.abnormal = load_bank(abnormal_path);
  }
  dual.validate();
  return dual;
}

std::string provenance_summary(const MemoryBank& bank) {
  std::string out = fmt::format("kind={} K={} C={}", to_string(bank.kind()), bank.size(), bank.c());
  const auto total = static_cast<double>(std::max<std::size_t>(bank.size(), 1));
  for (std::size_t k = 0; k < kBankKindCount; ++k) {
    const auto n = bank.provenance()[k];
    if (n == 0) continue;
    out += fmt::format(" {}={} ({:.1f}%)", to_string(static_cast<BankKind>(k)), n, 100.0 * static_cast<double>(n) / total);
  }
  return out;
}

TrainResult run_train(const RunConfig& cfg, const DualMemoryBank& dual) {
  require_file(cfg.paths.train_manifest, "train manifest");
  const auto manifest = load_manifest(cfg.paths.train_manifest, SplitRole::train);
  return train(manifest, dual, cfg.train_settings());
}

EvalReport run_eval(const RunConfig& cfg, const Checkpoint& ckpt, const DualMemoryBank& dual) {
  require_file(cfg.paths.test_manifest, "test manifest");
  const auto manifest = load_manifest(cfg.paths.test_manifest, SplitRole::test);
  auto eval = cfg.eval;
  eval.threads = cfg.effective_threads();
  return evaluate(manifest, ckpt, dual, eval);
}

void write_report(const EvalReport& report, const std::filesystem::path& report_dir) {
  io::write_text_atomic(report_dir / "report.json", report_to_json(report));
  io::write_text_atomic(report_dir / "report.csv", report_to_csv(report));
  io::write_text_atomic(report_dir / "image_scores.csv", image_scores_csv(report));
}

void write_effective_config(const RunConfig& cfg, const std::filesystem::path& dir) {
  io::write_text_atomic(dir / "effective_config.json", run_config_to_json(cfg));
}

void stage_build_banks(const RunConfig& cfg) {
  const auto banks = build_banks(cfg);
  save_banks(banks, cfg.paths.bank_dir);
  write_effective_config(cfg, cfg.paths.bank_dir);
}

Checkpoint load_checkpoint_checked(const RunConfig& cfg) {
  require_file(cfg.paths.checkpoint, "checkpoint (run train first)");
  return load_checkpoint(cfg.paths.checkpoint);
}

void stage_train(const RunConfig& cfg) {
  const auto dual = load_banks(cfg);
  const auto result = run_train(cfg, dual);
  save_checkpoint(result.checkpoint, cfg.paths.checkpoint);
  write_loss_log(result.log, cfg.paths.loss_log);
}

EvalReport stage_eval(const RunConfig& cfg) {
  const auto ckpt = load_checkpoint_checked(cfg);
  const auto dual = load_banks(cfg);
  auto report = run_eval(cfg, ckpt, dual);
  write_report(report, cfg.paths.report_dir);
  write_effective_config(cfg, cfg.paths.report_dir);
  return report;
}

std::vector<std::pair<std::string, RunConfig>> ablation_variants(const RunConfig& base) {
  std::vector<std::pair<std::string, RunConfig>> out;
  auto unsup = base;
  unsup.mode = Mode::unsupervised;
  unsup.train.mode = Mode::unsupervised;
  unsup.loss.lambda1 = 1.0;
  unsup.loss.lambda2 = 0.0;
  unsup.ablation = {};
  unsup.knowledge.use_distance = true;

  auto v = unsup;
  v.ablation.use_outlier_bank = false;
  v.knowledge.use_attention = false;
  out.emplace_back("unsup_Mn_dist", v);
  v.knowledge.use_attention = true;
  out.emplace_back("unsup_Mn_dist_attn", v);
  v.ablation.use_outlier_bank = true;
  out.emplace_back("unsup_Mn_Mo_dist_attn", v);

  const auto manifest = load_manifest(base.paths.train_manifest, SplitRole::train);
  if (manifest.with_label(Label::anomalous).empty()) return out;

  auto semi = base;
  semi.mode = Mode::semi_supervised;
  semi.train.mode = Mode::semi_supervised;
  semi.loss.lambda1 = 0.5;
  semi.loss.lambda2 = 15.0;
  semi.ablation = {};
  semi.knowledge.use_distance = true;
  semi.knowledge.use_attention = false;
  semi.ablation.use_center_bank = false;

  v = semi;
  v.ablation.use_filter = false;
  out.emplace_back("semi_nofilter_Mn_Mo_Mas_dist", v);
  v.ablation.use_filter = true;
  out.emplace_back("semi_filter_Mn_Mo_Mas_dist", v);
  v.knowledge.use_attention = true;
  out.emplace_back("semi_filter_Mn_Mo_Mas_dist_attn", v);
  v.knowledge.use_attention = false;
  v.ablation.use_center_bank = true;
  out.emplace_back("semi_filter_Mn_Mo_Mas_Mp_dist", v);
  return out;
}

std::vector<AblationRow> run_ablation(const RunConfig& base) {
  std::vector<AblationRow> rows;
  for (auto& [name, cfg] : ablation_variants(base)) {
    spdlog::info("ablation: {}", name);
    const auto banks = build_banks(cfg);
    const auto result = run_train(cfg, banks.dual);
    auto report = run_eval(cfg, result.checkpoint, banks.dual);
    rows.push_back({name, cfg, std::move(report)});
  }
  return rows;
}

std::string ablation_to_csv(const std::vector<AblationRow>& rows) {
  std::string out = "variant,mode,filter,M_o,M_as,M_p,dist,attn,det,loc\n";
  auto flag = [](bool b) { return b ? "1" : "0"; };
  auto pct = [](const std::optional<double>& v) { return v ? fmt::format("{:.1f}", 100.0 * *v) : std::string("-"); };
  for (const auto& r : rows) {
    const auto& c = r.config;
    const bool semi = c.mode == Mode::semi_supervised;
    out += fmt::format("{},{},{},{},{},{},{},{},{},{}\n", r.name, to_string(c.mode), semi ? flag(c.ablation.use_filter) : "-",
                       flag(c.ablation.use_outlier_bank), flag(semi && c.ablation.use_seen_bank),
                       flag(semi && c.ablation.use_center_bank), flag(c.knowledge.use_distance),
                       flag(c.knowledge.use_attention), pct(r.report.mean.image_auroc),
                       pct(r.report.mean.pixel_auroc));
  }
  return out;
}

}  // namespace dmad
