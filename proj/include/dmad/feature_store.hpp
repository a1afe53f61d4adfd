#pragma once

// Patch-feature and annotation-mask files, dataset manifests, and the
// anomalous-patch filter used to isolate defect regions of annotated images.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dmad/matrix.hpp"

namespace dmad {

// One image's patch features. `features` has h0 * w0 rows (row-major over
// the patch grid) and c columns.
struct FeatureGrid {
  std::string object_id;
  std::string image_id;
  std::uint32_t h0 = 0;
  std::uint32_t w0 = 0;
  std::uint32_t c = 0;
  std::uint32_t source_h = 0;
  std::uint32_t source_w = 0;
  MatrixF features;

  std::size_t patch_count() const { return static_cast<std::size_t>(h0) * w0; }
  // Throws ValidationError if any invariant is broken.
  void validate() const;

  friend bool operator==(const FeatureGrid&, const FeatureGrid&) = default;
};

// Full-resolution binary annotation, values in {0,1}.
struct AnnotationMask {
  std::uint32_t h = 0;
  std::uint32_t w = 0;
  std::vector<std::uint8_t> data;

  void validate() const;
  Matrix<std::uint8_t> as_matrix() const;

  friend bool operator==(const AnnotationMask&, const AnnotationMask&) = default;
};

struct PatchMask {
  std::uint32_t h0 = 0;
  std::uint32_t w0 = 0;
  std::vector<bool> flags;

  std::size_t count() const;
};

enum class Label { normal, anomalous };
enum class SplitRole { train, test };

struct ManifestEntry {
  std::filesystem::path feature_path;
  std::string object_id;
  Label label = Label::normal;
  std::optional<std::filesystem::path> mask_path;
};

struct DatasetManifest {
  SplitRole role = SplitRole::train;
  std::vector<ManifestEntry> entries;

  std::vector<ManifestEntry> with_label(Label label) const;
  // Throws ValidationError on empty object ids, missing files, or anomalous
  // train entries without masks.
  void validate() const;
};

void write_feature_file(const FeatureGrid& grid, const std::filesystem::path& path);
FeatureGrid read_feature_file(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_feature_grid(const FeatureGrid& grid);
FeatureGrid decode_feature_grid(std::span<const std::uint8_t> bytes, const std::string& what = "feature file");

void write_mask_file(const AnnotationMask& mask, const std::filesystem::path& path);
AnnotationMask read_mask_file(const std::filesystem::path& path);

// Relative paths inside the JSON are resolved against the manifest's directory.
DatasetManifest load_manifest(const std::filesystem::path& path, SplitRole role);
// Paths are stored relative to the manifest's directory when possible.
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

// Bilinearly interpolates the mask to h0 x w0 and flags every cell whose
// interpolated value is > 0.
PatchMask downscale_mask(const AnnotationMask& mask, std::uint32_t h0, std::uint32_t w0);

// Patch vectors at flagged positions, in row-major order (rows x c).
MatrixF filter_anomalous(const FeatureGrid& grid, const PatchMask& pmask);

const char* to_string(Label label);
Label label_from_string(const std::string& s);

}  // namespace dmad
