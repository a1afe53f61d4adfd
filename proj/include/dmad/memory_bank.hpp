#pragma once

// Normal and abnormal memory banks: greedy k-center coreset selection,
// feature-level outlier fusion, seen-anomaly collection, anomaly center
// sampling, composition, exact nearest-neighbor queries and persistence.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "dmad/feature_store.hpp"
#include "dmad/matrix.hpp"

namespace dmad {

enum class BankKind : std::uint8_t {
  normal = 0,
  pseudo_outlier = 1,
  seen_anomaly = 2,
  center_sampled = 3,
  composed_abnormal = 4,
};
inline constexpr std::size_t kBankKindCount = 5;

const char* to_string(BankKind kind);

enum class Mode { unsupervised, semi_supervised };
const char* to_string(Mode mode);
Mode mode_from_string(const std::string& s);

using Provenance = std::array<std::uint64_t, kBankKindCount>;

// Immutable set of reference feature rows.
class MemoryBank {
 public:
  MemoryBank(BankKind kind, MatrixF rows);
  MemoryBank(BankKind kind, MatrixF rows, Provenance provenance);

  BankKind kind() const { return kind_; }
  std::size_t c() const { return rows_.cols(); }
  std::size_t size() const { return rows_.rows(); }
  bool empty() const { return rows_.rows() == 0; }
  const MatrixF& rows() const { return rows_; }
  std::span<const float> row(std::size_t i) const { return rows_.row(i); }
  const Provenance& provenance() const { return provenance_; }

  friend bool operator==(const MemoryBank&, const MemoryBank&) = default;

 private:
  BankKind kind_;
  MatrixF rows_;
  Provenance provenance_{};
};

// Abnormal side is absent when every abnormal component has been ablated.
struct DualMemoryBank {
  MemoryBank normal;
  std::optional<MemoryBank> abnormal;
  Mode mode = Mode::unsupervised;

  void validate() const;
};

struct CoresetConfig {
  double retention = 0.02;
  std::uint64_t seed = 0;
  // When > 0, distances are computed on a seeded Gaussian random projection
  // to this many dimensions. 0 keeps exact distances on raw features.
  std::size_t projection_dim = 0;
  int threads = 1;
};

struct FusionConfig {
  double beta = 0.6;
  std::uint64_t pair_seed = 0;
};

struct CenterSamplingConfig {
  std::size_t count = 1024;
  double noise_std = 0.1;
  std::uint64_t seed = 0;
};

// Number of rows greedy_coreset keeps for K inputs.
std::size_t coreset_size(std::size_t k, double retention);
// Index of the first pick for K points under `seed`.
std::size_t coreset_start_index(std::size_t k, std::uint64_t seed);

// k-center greedy (farthest point) selection. Returns indices in pick order.
std::vector<std::size_t> greedy_coreset(const MatrixF& points, const CoresetConfig& config);

// Rows of `points` listed by `indices`, in that order.
MatrixF gather_rows(const MatrixF& points, std::span<const std::size_t> indices);
// Row-wise concatenation; all inputs must share the column count.
MatrixF stack_rows(std::span<const MatrixF* const> parts);

MemoryBank build_normal_bank(const DatasetManifest& manifest, const CoresetConfig& coreset);
MemoryBank build_normal_bank(std::span<const FeatureGrid> normal_grids, const CoresetConfig& coreset);

std::vector<float> fuse_outlier(std::span<const float> q_o, std::span<const float> q_n, double beta);

MemoryBank build_pseudo_outlier_bank(std::span<const FeatureGrid> outlier_grids,
                                     const DatasetManifest& normal_manifest, const FusionConfig& fusion,
                                     const CoresetConfig& coreset);
MemoryBank build_pseudo_outlier_bank(std::span<const FeatureGrid> outlier_grids,
                                     std::span<const FeatureGrid> normal_grids, const FusionConfig& fusion,
                                     const CoresetConfig& coreset);
// Normal grid index paired with each outlier grid (uniform with replacement).
std::vector<std::size_t> outlier_pairing(std::size_t outlier_count, std::size_t normal_count,
                                         std::uint64_t pair_seed);

// Filtered anomalous patches of every entry. With `apply_filter` false every
// patch of each anomalous image is kept (ablation of the filter step).
MemoryBank build_seen_bank(const DatasetManifest& anomalous_entries, bool apply_filter = true);

MemoryBank anomaly_center_sampling(const MemoryBank& seen, const CenterSamplingConfig& config);

// Concatenates m_o, m_as, m_p (in that order) with provenance counts.
// Unsupervised mode takes m_o only; semi-supervised mode requires m_as.
MemoryBank compose_abnormal_bank(Mode mode, const MemoryBank* m_o, const MemoryBank* m_as,
                                 const MemoryBank* m_p);

struct Neighbor {
  std::size_t index = 0;
  double distance = 0.0;
};

// Exact Euclidean nearest row; ties go to the smallest index.
Neighbor nearest(const MemoryBank& bank, std::span<const float> q);
std::vector<Neighbor> nearest_batch(const MemoryBank& bank, const MatrixF& queries, int threads = 1);
// Nearest rows for every query, as a matrix shaped like `queries`.
MatrixF nearest_rows(const MemoryBank& bank, const MatrixF& queries, int threads = 1);

std::vector<std::uint8_t> encode_bank(const MemoryBank& bank);
MemoryBank decode_bank(std::span<const std::uint8_t> bytes, const std::string& what = "bank file");
void save_bank(const MemoryBank& bank, const std::filesystem::path& path);
MemoryBank load_bank(const std::filesystem::path& path);

}  // namespace dmad
