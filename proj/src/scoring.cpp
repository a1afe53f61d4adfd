#include "dmad/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "dmad/error.hpp"
#include "dmad/image_ops.hpp"
#include "dmad/parallel.hpp"
#include "json.hpp"

namespace dmad {

double image_score(std::span<const double> patch_scores) {
  if (patch_scores.empty()) throw ValidationError("image_score: no patch scores");
  std::vector<double> v(patch_scores.begin(), patch_scores.end());
  const std::size_t k = std::min<std::size_t>(5, v.size());
  std::partial_sort(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k), v.end(), std::greater<>());
  double acc = 0.0;
  for (std::size_t i = 0; i < k; ++i) acc += v[i];
  return acc / static_cast<double>(k);
}

MatrixD pixel_map(const MatrixD& patch_scores, std::size_t h, std::size_t w, double blur_sigma) {
  if (patch_scores.size() == 0) throw ValidationError("pixel_map: empty score grid");
  if (h < patch_scores.rows() || w < patch_scores.cols()) {
    throw ValidationError(fmt::format("pixel_map: target {}x{} is smaller than the {}x{} score grid", h, w,
                                      patch_scores.rows(), patch_scores.cols()));
  }
  if (!(blur_sigma >= 0.0)) throw ValidationError("pixel_map: blur_sigma must be >= 0");
  auto up = bilinear_resize(patch_scores, h, w);
  if (blur_sigma == 0.0) return up;
  return gaussian_blur(up, blur_sigma);
}

ScoreMap score_image(const FeatureGrid& grid, const Checkpoint& ckpt, const DualMemoryBank& dual,
                     const EvalConfig& cfg, bool with_pixel_map) {
  grid.validate();
  if (grid.c != ckpt.params.c()) {
    throw ValidationError(fmt::format("score: feature channels {} do not match the checkpoint's {}", grid.c,
                                      ckpt.params.c()));
  }
  const auto in = find_neighbors(grid.features, dual, cfg.threads);
  const auto s = patch_anomaly_scores(ckpt.params, in, ckpt.knowledge);
  ScoreMap out;
  out.object_id = grid.object_id;
  out.image_id = grid.image_id;
  out.h0 = grid.h0;
  out.w0 = grid.w0;
  out.patch_scores.assign(s.begin(), s.end());
  for (double v : out.patch_scores) {
    if (!std::isfinite(v)) throw NumericError("score: non-finite patch score for image " + grid.image_id);
  }
  out.image_score = image_score(out.patch_scores);
  if (with_pixel_map) {
    MatrixD grid_scores(grid.h0, grid.w0);
    std::copy(out.patch_scores.begin(), out.patch_scores.end(), grid_scores.data().begin());
    out.pixel_map = pixel_map(grid_scores, grid.source_h, grid.source_w, cfg.blur_sigma);
  }
  return out;
}

void write_pixel_map(const ScoreMap& map, const std::filesystem::path& path) {
  if (!map.pixel_map) throw StateError("write_pixel_map: score map has no pixel map");
  const auto& pm = *map.pixel_map;
  FeatureGrid g;
  g.object_id = map.object_id;
  g.image_id = map.image_id;
  g.h0 = static_cast<std::uint32_t>(pm.rows());
  g.w0 = static_cast<std::uint32_t>(pm.cols());
  g.c = 1;
  g.source_h = g.h0;
  g.source_w = g.w0;
  g.features = MatrixF(pm.size(), 1);
  std::transform(pm.data().begin(), pm.data().end(), g.features.data().begin(),
                 [](double v) { return static_cast<float>(v); });
  write_feature_file(g, path);
}

namespace {

struct ScoredEntry {
  ManifestEntry entry;
  ScoreMap map;
};

MetricSet object_metrics(const std::vector<ScoredEntry>& items, const EvalConfig& cfg) {
  MetricSet m;
  std::vector<double> scores;
  std::vector<std::uint8_t> labels;
  for (const auto& it : items) {
    scores.push_back(it.map.image_score);
    labels.push_back(it.entry.label == Label::anomalous ? 1 : 0);
  }
  const bool has_pos = std::count(labels.begin(), labels.end(), 1) > 0;
  const bool has_neg = std::count(labels.begin(), labels.end(), 0) > 0;
  if (has_pos && has_neg) m.image_auroc = auroc(scores, labels);
  if (has_pos) {
    m.image_ap = average_precision(scores, labels);
    m.image_f1max = f1max(scores, labels);
  }

  std::vector<MatrixD> maps;
  std::vector<Matrix<std::uint8_t>> masks;
  for (const auto& it : items) {
    const auto& pm = *it.map.pixel_map;
    if (it.entry.label == Label::anomalous) {
      if (!it.entry.mask_path) {
        spdlog::warn("object {}: anomalous image {} has no mask; pixel metrics skipped", it.entry.object_id,
                     it.map.image_id);
        return m;
      }
      const auto mask = read_mask_file(*it.entry.mask_path);
      if (mask.h != pm.rows() || mask.w != pm.cols()) {
        throw ValidationError(fmt::format("mask {} is {}x{} but the image source size is {}x{}",
                                          it.entry.mask_path->string(), mask.h, mask.w, pm.rows(), pm.cols()));
      }
      masks.push_back(mask.as_matrix());
    } else {
      masks.push_back(Matrix<std::uint8_t>(pm.rows(), pm.cols()));
    }
    maps.push_back(pm);
  }
  std::vector<double> px_scores;
  std::vector<std::uint8_t> px_labels;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    px_scores.insert(px_scores.end(), maps[i].data().begin(), maps[i].data().end());
    px_labels.insert(px_labels.end(), masks[i].data().begin(), masks[i].data().end());
  }
  const bool px_pos = std::count(px_labels.begin(), px_labels.end(), 1) > 0;
  const bool px_neg = std::count(px_labels.begin(), px_labels.end(), 0) > 0;
  if (px_pos && px_neg) {
    m.pixel_auroc = auroc(px_scores, px_labels);
    m.pro = pro(maps, masks, cfg.pro);
  }
  if (px_pos) {
    m.pixel_ap = average_precision(px_scores, px_labels);
    m.pixel_f1max = f1max(px_scores, px_labels);
  }
  return m;
}

template <typename Fn>
void for_each_metric(MetricSet& m, Fn&& fn) {
  fn("image_auroc", m.image_auroc);
  fn("image_ap", m.image_ap);
  fn("image_f1max", m.image_f1max);
  fn("pixel_auroc", m.pixel_auroc);
  fn("pixel_ap", m.pixel_ap);
  fn("pixel_f1max", m.pixel_f1max);
  fn("pro", m.pro);
}

MetricSet macro_mean(const std::vector<ObjectReport>& objects) {
  MetricSet mean;
  std::map<std::string, std::pair<double, std::size_t>> acc;
  for (auto obj : objects) {
    for_each_metric(obj.metrics, [&](const char* name, std::optional<double>& v) {
      if (v) {
        acc[name].first += *v;
        acc[name].second += 1;
      }
    });
  }
  for_each_metric(mean, [&](const char* name, std::optional<double>& v) {
    const auto it = acc.find(name);
    if (it != acc.end()) v = it->second.first / static_cast<double>(it->second.second);
  });
  return mean;
}

nlohmann::ordered_json metrics_json(MetricSet m) {
  nlohmann::ordered_json j;
  for_each_metric(m, [&](const char* name, std::optional<double>& v) {
    j[name] = v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
  });
  return j;
}

}  // namespace

EvalReport evaluate(const DatasetManifest& test, const Checkpoint& ckpt, const DualMemoryBank& dual,
                    const EvalConfig& cfg) {
  if (test.entries.empty()) throw ValidationError("evaluate: empty test manifest");
  dual.validate();
  std::vector<ScoredEntry> scored(test.entries.size());
  parallel_for(test.entries.size(), cfg.threads, [&](std::size_t begin, std::size_t end) {
    EvalConfig inner = cfg;
    inner.threads = 1;
    for (std::size_t i = begin; i < end; ++i) {
      const auto grid = read_feature_file(test.entries[i].feature_path);
      if (grid.object_id != test.entries[i].object_id) {
        throw ValidationError(fmt::format("{}: object id '{}' disagrees with the manifest's '{}'",
                                          test.entries[i].feature_path.string(), grid.object_id,
                                          test.entries[i].object_id));
      }
      scored[i] = {test.entries[i], score_image(grid, ckpt, dual, inner, true)};
    }
  });
  // Fixed order so the report does not depend on manifest order.
  std::sort(scored.begin(), scored.end(), [](const ScoredEntry& a, const ScoredEntry& b) {
    return std::tie(a.entry.object_id, a.map.image_id, a.entry.feature_path) <
           std::tie(b.entry.object_id, b.map.image_id, b.entry.feature_path);
  });

  EvalReport report;
  std::map<std::string, std::vector<ScoredEntry>> by_object;
  for (auto& s : scored) {
    report.images.push_back({s.entry.object_id, s.map.image_id, s.entry.label, s.map.image_score});
    by_object[s.entry.object_id].push_back(std::move(s));
  }
  for (const auto& [object, items] : by_object) {
    ObjectReport obj;
    obj.object_id = object;
    for (const auto& it : items) {
      (it.entry.label == Label::anomalous ? obj.anomalous_images : obj.normal_images) += 1;
    }
    obj.metrics = object_metrics(items, cfg);
    report.objects.push_back(std::move(obj));
  }
  report.mean = macro_mean(report.objects);
  return report;
}

std::string report_to_json(const EvalReport& report) {
  nlohmann::ordered_json j;
  j["objects"] = nlohmann::ordered_json::array();
  for (const auto& obj : report.objects) {
    nlohmann::ordered_json o;
    o["object_id"] = obj.object_id;
    o["normal_images"] = obj.normal_images;
    o["anomalous_images"] = obj.anomalous_images;
    o["metrics"] = metrics_json(obj.metrics);
    j["objects"].push_back(std::move(o));
  }
  j["mean"] = metrics_json(report.mean);
  return j.dump(2) + "\n";
}

std::string report_to_csv(const EvalReport& report) {
  std::string out = "object,image_auroc,image_ap,image_f1max,pixel_auroc,pixel_ap,pixel_f1max,pro\n";
  auto row = [&](const std::string& name, MetricSet m) {
    out += name;
    for_each_metric(m, [&](const char*, std::optional<double>& v) {
      out += v ? fmt::format(",{:.1f}", 100.0 * *v) : std::string(",-");
    });
    out += "\n";
  };
  for (const auto& obj : report.objects) row(obj.object_id, obj.metrics);
  row("mean", report.mean);
  return out;
}

std::string image_scores_csv(const EvalReport& report) {
  std::string out = "object_id,image_id,label,image_score\n";
  for (const auto& im : report.images) {
    out += fmt::format("{},{},{},{:.9g}\n", im.object_id, im.image_id, to_string(im.label), im.image_score);
  }
  return out;
}

}  // namespace dmad
