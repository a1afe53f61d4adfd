#include "dmad/feature_store.hpp"

#include <cmath>
#include <fstream>

#include "json.hpp"

#include "dmad/binary_io.hpp"
#include "dmad/image_ops.hpp"

namespace dmad {

namespace fs = std::filesystem;

namespace {

constexpr std::uint16_t kFeatureVersion = 1;
constexpr std::uint16_t kMaskVersion = 1;

}  // namespace

void FeatureGrid::validate() const {
  if (h0 == 0 || w0 == 0 || c == 0) throw ValidationError("feature grid: h0, w0, c must be positive");
  if (source_h == 0 || source_w == 0) throw ValidationError("feature grid: source dims must be positive");
  if (h0 > source_h || w0 > source_w) throw ValidationError("feature grid: patch grid larger than source image");
  if (features.rows() != patch_count() || features.cols() != c) {
    throw ValidationError("feature grid: data length != h0*w0*c");
  }
  for (std::size_t i = 0; i < features.size(); ++i) {
    if (!std::isfinite(features.data()[i])) {
      throw ValidationError("feature grid '" + image_id + "': non-finite value at element " + std::to_string(i));
    }
  }
}

void AnnotationMask::validate() const {
  if (h == 0 || w == 0) throw ValidationError("mask: dims must be positive");
  if (data.size() != static_cast<std::size_t>(h) * w) throw ValidationError("mask: data length != h*w");
  for (auto v : data) {
    if (v > 1) throw ValidationError("mask: values must be 0 or 1");
  }
}

Matrix<std::uint8_t> AnnotationMask::as_matrix() const { return Matrix<std::uint8_t>(h, w, data); }

std::size_t PatchMask::count() const {
  std::size_t n = 0;
  for (bool f : flags) n += f ? 1 : 0;
  return n;
}

std::vector<ManifestEntry> DatasetManifest::with_label(Label label) const {
  std::vector<ManifestEntry> out;
  for (const auto& e : entries) {
    if (e.label == label) out.push_back(e);
  }
  return out;
}

void DatasetManifest::validate() const {
  for (const auto& e : entries) {
    if (e.object_id.empty()) throw ValidationError("manifest: empty object_id for " + e.feature_path.string());
    if (!fs::is_regular_file(e.feature_path)) {
      throw ValidationError("manifest: feature file not found: " + e.feature_path.string());
    }
    if (role == SplitRole::train && e.label == Label::anomalous && !e.mask_path) {
      throw ValidationError("manifest: anomalous train entry lacks mask_path: " + e.feature_path.string());
    }
    if (e.mask_path && !fs::is_regular_file(*e.mask_path)) {
      throw ValidationError("manifest: mask file not found: " + e.mask_path->string());
    }
  }
}

std::vector<std::uint8_t> encode_feature_grid(const FeatureGrid& grid) {
  grid.validate();
  io::ByteWriter w;
  w.magic("DMFT");
  w.u16(kFeatureVersion);
  w.u16(0);
  w.u32(grid.h0);
  w.u32(grid.w0);
  w.u32(grid.c);
  w.u32(grid.source_h);
  w.u32(grid.source_w);
  w.short_string(grid.object_id);
  w.short_string(grid.image_id);
  w.f32_array(grid.features.data());
  return w.bytes();
}

FeatureGrid decode_feature_grid(std::span<const std::uint8_t> bytes, const std::string& what) {
  io::ByteReader r(bytes, what);
  r.expect_magic("DMFT");
  if (const auto v = r.u16(); v != kFeatureVersion) r.fail("unsupported version " + std::to_string(v));
  if (r.u16() != 0) r.fail("reserved field must be zero");
  FeatureGrid g;
  g.h0 = r.u32();
  g.w0 = r.u32();
  g.c = r.u32();
  g.source_h = r.u32();
  g.source_w = r.u32();
  g.object_id = r.short_string();
  g.image_id = r.short_string();
  if (g.h0 == 0 || g.w0 == 0 || g.c == 0) r.fail("zero grid dimension");
  const std::uint64_t n = static_cast<std::uint64_t>(g.h0) * g.w0 * g.c;
  auto payload = r.f32_array(n);
  if (!r.at_end()) r.fail("trailing bytes after payload");
  g.features = MatrixF(g.patch_count(), g.c, std::move(payload));
  try {
    g.validate();
  } catch (const ValidationError& e) {
    throw FormatError(what + ": " + e.what());
  }
  return g;
}

void write_feature_file(const FeatureGrid& grid, const fs::path& path) {
  io::write_file_atomic(path, encode_feature_grid(grid));
}

FeatureGrid read_feature_file(const fs::path& path) {
  return decode_feature_grid(io::read_file(path), path.string());
}

void write_mask_file(const AnnotationMask& mask, const fs::path& path) {
  mask.validate();
  io::ByteWriter w;
  w.magic("DMMK");
  w.u16(kMaskVersion);
  w.u32(mask.h);
  w.u32(mask.w);
  for (auto v : mask.data) w.u8(v);
  io::write_file_atomic(path, w.bytes());
}

AnnotationMask read_mask_file(const fs::path& path) {
  const auto bytes = io::read_file(path);
  io::ByteReader r(bytes, path.string());
  r.expect_magic("DMMK");
  if (const auto v = r.u16(); v != kMaskVersion) r.fail("unsupported version " + std::to_string(v));
  AnnotationMask m;
  m.h = r.u32();
  m.w = r.u32();
  const std::uint64_t n = static_cast<std::uint64_t>(m.h) * m.w;
  if (n == 0) r.fail("zero mask dimension");
  if (n != r.remaining()) r.fail("payload length does not match h*w");
  m.data.resize(static_cast<std::size_t>(n));
  for (auto& v : m.data) {
    v = r.u8();
    if (v > 1) r.fail("mask value outside {0,1}");
  }
  return m;
}

const char* to_string(Label label) { return label == Label::normal ? "normal" : "anomalous"; }

Label label_from_string(const std::string& s) {
  if (s == "normal") return Label::normal;
  if (s == "anomalous") return Label::anomalous;
  throw ValidationError("unknown label '" + s + "'");
}

DatasetManifest load_manifest(const fs::path& path, SplitRole role) {
  std::ifstream in(path);
  if (!in) throw StorageError("cannot open manifest " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest " + path.string() + ": " + e.what());
  }
  if (!doc.is_array()) throw FormatError("manifest " + path.string() + ": top level must be an array");
  const fs::path base = path.parent_path();
  auto resolve = [&](const std::string& p) {
    fs::path q(p);
    return q.is_absolute() ? q : base / q;
  };
  DatasetManifest m;
  m.role = role;
  for (const auto& item : doc) {
    try {
      ManifestEntry e;
      e.feature_path = resolve(item.at("feature_path").get<std::string>());
      e.object_id = item.at("object_id").get<std::string>();
      e.label = label_from_string(item.at("label").get<std::string>());
      if (item.contains("mask_path") && !item.at("mask_path").is_null()) {
        e.mask_path = resolve(item.at("mask_path").get<std::string>());
      }
      m.entries.push_back(std::move(e));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("manifest " + path.string() + ": " + e.what());
    }
  }
  m.validate();
  return m;
}

void save_manifest(const DatasetManifest& manifest, const fs::path& path) {
  const fs::path base = path.parent_path();
  auto rel = [&](const fs::path& p) {
    if (base.empty()) return p.generic_string();
    const auto r = p.lexically_relative(base);
    return (r.empty() || *r.begin() == "..") ? p.generic_string() : r.generic_string();
  };
  nlohmann::json doc = nlohmann::json::array();
  for (const auto& e : manifest.entries) {
    nlohmann::json item;
    item["feature_path"] = rel(e.feature_path);
    item["object_id"] = e.object_id;
    item["label"] = to_string(e.label);
    if (e.mask_path) item["mask_path"] = rel(*e.mask_path);
    doc.push_back(std::move(item));
  }
  const std::string text = doc.dump(2) + "\n";
  io::write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

PatchMask downscale_mask(const AnnotationMask& mask, std::uint32_t h0, std::uint32_t w0) {
  mask.validate();
  if (h0 == 0 || w0 == 0) throw ValidationError("downscale_mask: zero target dimension");
  if (h0 > mask.h || w0 > mask.w) throw ValidationError("downscale_mask: target larger than mask");
  MatrixD src(mask.h, mask.w);
  for (std::size_t i = 0; i < mask.data.size(); ++i) src.data()[i] = mask.data[i];
  const MatrixD scaled = bilinear_resize(src, h0, w0);
  PatchMask out{h0, w0, std::vector<bool>(static_cast<std::size_t>(h0) * w0)};
  for (std::size_t i = 0; i < scaled.size(); ++i) out.flags[i] = scaled.data()[i] > 0.0;
  return out;
}

MatrixF filter_anomalous(const FeatureGrid& grid, const PatchMask& pmask) {
  if (grid.h0 != pmask.h0 || grid.w0 != pmask.w0 || pmask.flags.size() != grid.patch_count()) {
    throw ValidationError("filter_anomalous: patch mask shape does not match feature grid");
  }
  MatrixF out(pmask.count(), grid.c);
  std::size_t k = 0;
  for (std::size_t i = 0; i < pmask.flags.size(); ++i) {
    if (!pmask.flags[i]) continue;
    const auto src = grid.features.row(i);
    std::copy(src.begin(), src.end(), out.row(k++).begin());
  }
  return out;
}

}  // namespace dmad
