#include "dmad/synth.hpp"

#include <cmath>
#include <random>

#include <fmt/format.h>

#include "dmad/binary_io.hpp"
#include "dmad/error.hpp"
#include "json.hpp"

namespace dmad {

void SynthSpec::validate() const {
  if (num_objects < 1) throw ValidationError("synth: num_objects must be >= 1");
  if (h0 < 1 || w0 < 1) throw ValidationError("synth: grid must be at least 1x1");
  if (c < 2) throw ValidationError("synth: c must be >= 2");
  if (!(defect_patch_fraction > 0.0 && defect_patch_fraction < 1.0)) {
    throw ValidationError("synth: defect_patch_fraction must be in (0, 1)");
  }
  if (!(cluster_spread >= 0.0) || !(anomaly_shift >= 0.0) || !(outlier_std >= 0.0) ||
      !(center_std >= 0.0)) {
    throw ValidationError("synth: spread, shift and outlier_std must be >= 0");
  }
  if (patch_px < 1) throw ValidationError("synth: patch_px must be >= 1");
  if (defect_directions < 1) throw ValidationError("synth: defect_directions must be >= 1");
}

std::pair<std::uint32_t, std::uint32_t> defect_block_size(const SynthSpec& spec) {
  const double side = std::sqrt(spec.defect_patch_fraction);
  auto dim = [&](std::uint32_t n) {
    const auto v = static_cast<std::uint32_t>(std::lround(n * side));
    return std::clamp<std::uint32_t>(v, 1, n);
  };
  return {dim(spec.h0), dim(spec.w0)};
}

namespace {

#define DMAD_SYNTH_FIELDS(X)                                                                              \
  X(num_objects) X(train_normal) X(test_normal) X(test_anomalous) X(seen_anomalies) X(h0) X(w0) X(c)      \
  X(cluster_spread) X(center_std) X(anomaly_shift) X(defect_patch_fraction) X(outlier_images) X(patch_px)               \
  X(defect_directions) X(outlier_std) X(seed)

std::vector<float> unit_vector(std::size_t c, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> v(c);
  double norm = 0.0;
  do {
    norm = 0.0;
    for (auto& x : v) {
      x = g(rng);
      norm += x * x;
    }
  } while (norm == 0.0);
  norm = std::sqrt(norm);
  std::vector<float> out(c);
  for (std::size_t i = 0; i < c; ++i) out[i] = static_cast<float>(v[i] / norm);
  return out;
}

class Writer {
 public:
  Writer(const SynthSpec& spec, std::filesystem::path root) : spec_(spec), root_(std::move(root)) {}

  FeatureGrid blank(const std::string& object_id, const std::string& image_id) const {
    FeatureGrid g;
    g.object_id = object_id;
    g.image_id = image_id;
    g.h0 = spec_.h0;
    g.w0 = spec_.w0;
    g.c = spec_.c;
    g.source_h = spec_.h0 * spec_.patch_px;
    g.source_w = spec_.w0 * spec_.patch_px;
    g.features = MatrixF(g.patch_count(), spec_.c);
    return g;
  }

  std::filesystem::path write_grid(const FeatureGrid& g, const std::string& subdir) const {
    const auto path = root_ / subdir / (g.image_id + ".dmft");
    write_feature_file(g, path);
    return path;
  }

  std::filesystem::path write_mask(const DefectPlacement& d, const std::string& subdir) const {
    AnnotationMask m;
    m.h = spec_.h0 * spec_.patch_px;
    m.w = spec_.w0 * spec_.patch_px;
    m.data.assign(static_cast<std::size_t>(m.h) * m.w, 0);
    for (std::uint32_t y = d.row * spec_.patch_px; y < (d.row + d.height) * spec_.patch_px; ++y) {
      for (std::uint32_t x = d.col * spec_.patch_px; x < (d.col + d.width) * spec_.patch_px; ++x) {
        m.data[static_cast<std::size_t>(y) * m.w + x] = 1;
      }
    }
    const auto path = root_ / subdir / (d.image_id + ".dmmk");
    write_mask_file(m, path);
    return path;
  }

 private:
  const SynthSpec& spec_;
  std::filesystem::path root_;
};

}  // namespace

SynthSpec synth_spec_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("synth spec: invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ValidationError("synth spec: expected a JSON object");
  SynthSpec spec;
  for (const auto& [key, value] : j.items()) {
    bool known = false;
    try {
#define DMAD_READ_FIELD(name)                 \
  if (key == #name) {                         \
    value.get_to(spec.name);                  \
    known = true;                             \
  }
      DMAD_SYNTH_FIELDS(DMAD_READ_FIELD)
#undef DMAD_READ_FIELD
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(fmt::format("synth spec: bad value for '{}': {}", key, e.what()));
    }
    if (!known) throw ValidationError(fmt::format("synth spec: unknown key '{}'", key));
  }
  spec.validate();
  return spec;
}

std::string synth_spec_to_json(const SynthSpec& spec) {
  nlohmann::ordered_json j;
#define DMAD_WRITE_FIELD(name) j[#name] = spec.name;
  DMAD_SYNTH_FIELDS(DMAD_WRITE_FIELD)
#undef DMAD_WRITE_FIELD
  return j.dump(2) + "\n";
}

SynthDataset generate_synthetic(const SynthSpec& spec, const std::filesystem::path& out_dir) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> g(0.0, 1.0);
  const Writer writer(spec, out_dir);
  SynthDataset ds;
  ds.train.role = SplitRole::train;
  ds.test.role = SplitRole::test;

  std::vector<std::vector<float>> directions;
  for (std::size_t i = 0; i < spec.defect_directions; ++i) directions.push_back(unit_vector(spec.c, rng));
  for (std::size_t o = 0; o < spec.num_objects; ++o) {
    std::vector<float> center(spec.c);
    for (auto& v : center) v = static_cast<float>(spec.center_std * g(rng));
    ds.centers.push_back(std::move(center));
  }
  const auto [block_h, block_w] = defect_block_size(spec);

  auto normal_grid = [&](std::size_t o, const std::string& image_id) {
    auto grid = writer.blank(fmt::format("object_{}", o), image_id);
    for (std::size_t p = 0; p < grid.patch_count(); ++p) {
      for (std::size_t k = 0; k < spec.c; ++k) {
        grid.features(p, k) = static_cast<float>(ds.centers[o][k] + spec.cluster_spread * g(rng));
      }
    }
    return grid;
  };
  auto add_defect = [&](FeatureGrid& grid, SplitRole split) {
    std::uniform_int_distribution<std::uint32_t> row(0, spec.h0 - block_h);
    std::uniform_int_distribution<std::uint32_t> col(0, spec.w0 - block_w);
    std::uniform_int_distribution<std::size_t> dir(0, directions.size() - 1);
    DefectPlacement d{grid.object_id, grid.image_id, split, row(rng), col(rng), block_h, block_w, dir(rng)};
    for (std::uint32_t y = d.row; y < d.row + d.height; ++y) {
      for (std::uint32_t x = d.col; x < d.col + d.width; ++x) {
        const std::size_t p = static_cast<std::size_t>(y) * spec.w0 + x;
        for (std::size_t k = 0; k < spec.c; ++k) {
          grid.features(p, k) += static_cast<float>(spec.anomaly_shift * directions[d.direction][k]);
        }
      }
    }
    return d;
  };

  for (std::size_t o = 0; o < spec.num_objects; ++o) {
    const std::string object_id = fmt::format("object_{}", o);
    for (std::size_t i = 0; i < spec.train_normal; ++i) {
      const auto grid = normal_grid(o, fmt::format("{}_train_good_{:03}", object_id, i));
      ds.train.entries.push_back({writer.write_grid(grid, "train/" + object_id), object_id, Label::normal, {}});
    }
    for (std::size_t i = 0; i < spec.seen_anomalies; ++i) {
      auto grid = normal_grid(o, fmt::format("{}_train_defect_{:03}", object_id, i));
      const auto d = add_defect(grid, SplitRole::train);
      ds.train.entries.push_back({writer.write_grid(grid, "train/" + object_id), object_id, Label::anomalous,
                                  writer.write_mask(d, "train/" + object_id)});
      ds.defects.push_back(d);
    }
    for (std::size_t i = 0; i < spec.test_normal; ++i) {
      const auto grid = normal_grid(o, fmt::format("{}_test_good_{:03}", object_id, i));
      ds.test.entries.push_back({writer.write_grid(grid, "test/" + object_id), object_id, Label::normal, {}});
    }
    for (std::size_t i = 0; i < spec.test_anomalous; ++i) {
      auto grid = normal_grid(o, fmt::format("{}_test_defect_{:03}", object_id, i));
      const auto d = add_defect(grid, SplitRole::test);
      ds.test.entries.push_back({writer.write_grid(grid, "test/" + object_id), object_id, Label::anomalous,
                                 writer.write_mask(d, "test/" + object_id)});
      ds.defects.push_back(d);
    }
  }

  ds.outlier_dir = out_dir / "outliers";
  for (std::size_t i = 0; i < spec.outlier_images; ++i) {
    auto grid = writer.blank("outlier", fmt::format("outlier_{:03}", i));
    for (auto& v : grid.features.data()) v = static_cast<float>(spec.outlier_std * g(rng));
    ds.outliers.push_back(writer.write_grid(grid, "outliers"));
  }

  ds.train_manifest = out_dir / "train.json";
  ds.test_manifest = out_dir / "test.json";
  save_manifest(ds.train, ds.train_manifest);
  save_manifest(ds.test, ds.test_manifest);
  const auto spec_json = synth_spec_to_json(spec);
  io::write_text_atomic(out_dir / "synth_spec.json", spec_json);
  return ds;
}

}  // namespace dmad
