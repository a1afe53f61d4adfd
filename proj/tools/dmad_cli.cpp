#include <cmath>
#include <cstdio>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "dmad/binary_io.hpp"
#include "dmad/error.hpp"
#include "dmad/log.hpp"
#include "dmad/pipeline.hpp"
#include "dmad/synth.hpp"

namespace {

using namespace dmad;

struct GlobalOptions {
  std::optional<std::filesystem::path> config;
  ConfigOverrides overrides;
  bool deterministic = false;
};

void inspect_bank(const std::filesystem::path& path) {
  const auto bank = load_bank(path);
  fmt::print("kind: {}\nK: {}\nC: {}\nprovenance:\n", to_string(bank.kind()), bank.size(), bank.c());
  for (std::size_t k = 0; k < kBankKindCount; ++k) {
    const auto n = bank.provenance()[k];
    if (n > 0) fmt::print("  {}: {}\n", to_string(static_cast<BankKind>(k)), n);
  }
  fmt::print("dim,mean,std\n");
  const double count = static_cast<double>(bank.size());
  for (std::size_t j = 0; j < bank.c(); ++j) {
    double sum = 0.0;
    for (std::size_t i = 0; i < bank.size(); ++i) sum += bank.rows()(i, j);
    const double mean = count > 0 ? sum / count : 0.0;
    double sq = 0.0;
    for (std::size_t i = 0; i < bank.size(); ++i) {
      const double d = bank.rows()(i, j) - mean;
      sq += d * d;
    }
    const double sd = count > 0 ? std::sqrt(sq / count) : 0.0;
    fmt::print("{},{:.6g},{:.6g}\n", j, mean, sd);
  }
}

}  // namespace

int main(int argc, char** argv) {
  init_logging();
  CLI::App app{"Dual memory bank anomaly detection"};
  app.require_subcommand(1);
  app.fallthrough();

  GlobalOptions g;
  std::string config_path;
  std::uint64_t seed = 0;
  int threads = 1;
  std::string mode;
  std::string train_manifest, test_manifest, outlier_dir, work_dir;
  std::size_t epochs = 0;
  auto* o_config = app.add_option("--config", config_path, "Run config JSON");
  auto* o_seed = app.add_option("--seed", seed, "Run seed (sub-seeds derive from it)");
  app.add_flag("--deterministic", g.deterministic, "Single-threaded, bit-reproducible run");
  auto* o_threads = app.add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);
  auto* o_mode = app.add_option("--mode", mode, "unsupervised | semi_supervised");
  auto* o_train = app.add_option("--train-manifest", train_manifest, "Train manifest JSON");
  auto* o_test = app.add_option("--test-manifest", test_manifest, "Test manifest JSON");
  auto* o_outliers = app.add_option("--outlier-dir", outlier_dir, "Directory of outlier .dmft grids");
  auto* o_work = app.add_option("--work-dir", work_dir, "Output directory for banks, checkpoint, log and report");
  auto* o_epochs = app.add_option("--epochs", epochs, "Training epochs")->check(CLI::PositiveNumber);

  auto* build = app.add_subcommand("build-banks", "Build and save the normal and abnormal memory banks");
  auto* train = app.add_subcommand("train", "Train the scorer and write the checkpoint and loss log");
  auto* eval = app.add_subcommand("eval", "Evaluate on the test manifest and write the report");
  auto* score = app.add_subcommand("score", "Score one feature file");
  std::string score_input, pixel_map_out;
  score->add_option("features", score_input, "Feature file (.dmft)")->required();
  score->add_option("--pixel-map", pixel_map_out, "Write the pixel map here as a single-channel .dmft");
  auto* synth = app.add_subcommand("synth-gen", "Generate a synthetic dataset");
  std::string synth_spec_path, synth_out;
  std::optional<std::size_t> seen_anomalies;
  synth->add_option("--spec", synth_spec_path, "Synthetic spec JSON (defaults when omitted)");
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--seen-anomalies", seen_anomalies, "Annotated anomalous train images per object");
  auto* inspect = app.add_subcommand("inspect-bank", "Summarise a bank file");
  std::string bank_file;
  inspect->add_option("bank", bank_file, "Bank file (.dmbk)")->required();
  auto* ablate = app.add_subcommand("ablate", "Run the ablation grid and write ablation.csv to the work dir");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*o_config) g.config = config_path;
    if (*o_seed) g.overrides.seed = seed;
    if (g.deterministic) g.overrides.deterministic = true;
    if (*o_threads) g.overrides.threads = threads;
    if (*o_mode) g.overrides.mode = mode;
    if (*o_train) g.overrides.train_manifest = train_manifest;
    if (*o_test) g.overrides.test_manifest = test_manifest;
    if (*o_outliers) g.overrides.outlier_dir = outlier_dir;
    if (*o_work) g.overrides.work_dir = work_dir;
    if (*o_epochs) g.overrides.epochs = epochs;

    if (inspect->parsed()) {
      inspect_bank(bank_file);
      return 0;
    }
    if (synth->parsed()) {
      SynthSpec spec = synth_spec_path.empty() ? SynthSpec{} : synth_spec_from_json(io::read_text(synth_spec_path));
      if (g.overrides.seed) spec.seed = *g.overrides.seed;
      if (seen_anomalies) spec.seen_anomalies = *seen_anomalies;
      const auto ds = generate_synthetic(spec, synth_out);
      fmt::print("train manifest: {}\ntest manifest: {}\noutlier dir: {}\n", ds.train_manifest.string(),
                 ds.test_manifest.string(), ds.outlier_dir.string());
      return 0;
    }

    const auto cfg = load_run_config(g.config, g.overrides);
    if (build->parsed()) {
      const auto banks = build_banks(cfg);
      save_banks(banks, cfg.paths.bank_dir);
      write_effective_config(cfg, cfg.paths.bank_dir);
      fmt::print("normal: {}\n", provenance_summary(banks.dual.normal));
      if (banks.dual.abnormal) {
        fmt::print("abnormal: {}\n", provenance_summary(*banks.dual.abnormal));
      } else {
        fmt::print("abnormal: none\n");
      }
      fmt::print("banks written to {}\n", cfg.paths.bank_dir.string());
    } else if (train->parsed()) {
      stage_train(cfg);
      write_effective_config(cfg, cfg.paths.checkpoint.parent_path());
      fmt::print("checkpoint: {}\nloss log: {}\n", cfg.paths.checkpoint.string(), cfg.paths.loss_log.string());
    } else if (eval->parsed()) {
      const auto report = stage_eval(cfg);
      fmt::print("{}", report_to_csv(report));
      fmt::print("report written to {}\n", cfg.paths.report_dir.string());
    } else if (score->parsed()) {
      const auto ckpt = load_checkpoint_checked(cfg);
      const auto dual = load_banks(cfg);
      auto eval_cfg = cfg.eval;
      eval_cfg.threads = cfg.effective_threads();
      const auto grid = read_feature_file(score_input);
      const auto map = score_image(grid, ckpt, dual, eval_cfg, !pixel_map_out.empty());
      fmt::print("image_score: {:.9g}\n", map.image_score);
      if (!pixel_map_out.empty()) {
        write_pixel_map(map, pixel_map_out);
        fmt::print("pixel map: {}\n", pixel_map_out);
      }
    } else if (ablate->parsed()) {
      const auto rows = run_ablation(cfg);
      const auto out_dir = cfg.paths.report_dir.parent_path() / "ablation";
      io::write_text_atomic(out_dir / "ablation.csv", ablation_to_csv(rows));
      for (const auto& r : rows) io::write_text_atomic(out_dir / (r.name + ".json"), report_to_json(r.report));
      fmt::print("{}", ablation_to_csv(rows));
    }
    return 0;
  } catch (const dmad::Error& e) {
    spdlog::error("{}", e.what());
    return 1;
  } catch (const std::exception& e) {
    spdlog::error("unexpected failure: {}", e.what());
    return 1;
  }
}
