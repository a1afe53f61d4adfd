#include "dmad/memory_bank.hpp"

#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "dmad/binary_io.hpp"
#include "dmad/parallel.hpp"

namespace dmad {

namespace {

constexpr std::uint16_t kBankVersion = 1;

double squared_distance(std::span<const float> a, std::span<const float> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += d * d;
  }
  return acc;
}

void check_finite(const MatrixF& m, const char* what) {
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (!std::isfinite(m.data()[i])) {
      throw ValidationError(std::string(what) + ": non-finite value at element " + std::to_string(i));
    }
  }
}

// Seeded Gaussian projection used only when CoresetConfig::projection_dim > 0.
MatrixF random_projection(const MatrixF& points, std::size_t dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::normal_distribution<double> gauss(0.0, 1.0 / std::sqrt(static_cast<double>(dim)));
  MatrixD proj(points.cols(), dim);
  for (auto& v : proj.data()) v = gauss(rng);
  MatrixF out(points.rows(), dim);
  for (std::size_t r = 0; r < points.rows(); ++r) {
    const auto src = points.row(r);
    for (std::size_t j = 0; j < dim; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < src.size(); ++k) acc += static_cast<double>(src[k]) * proj(k, j);
      out(r, j) = static_cast<float>(acc);
    }
  }
  return out;
}

std::vector<FeatureGrid> read_grids(const std::vector<ManifestEntry>& entries) {
  std::vector<FeatureGrid> grids;
  grids.reserve(entries.size());
  for (const auto& e : entries) grids.push_back(read_feature_file(e.feature_path));
  return grids;
}

}  // namespace

const char* to_string(BankKind kind) {
  switch (kind) {
    case BankKind::normal: return "normal";
    case BankKind::pseudo_outlier: return "pseudo_outlier";
    case BankKind::seen_anomaly: return "seen_anomaly";
    case BankKind::center_sampled: return "center_sampled";
    case BankKind::composed_abnormal: return "composed_abnormal";
  }
  return "unknown";
}

const char* to_string(Mode mode) {
  return mode == Mode::unsupervised ? "unsupervised" : "semi_supervised";
}

Mode mode_from_string(const std::string& s) {
  if (s == "unsupervised") return Mode::unsupervised;
  if (s == "semi_supervised" || s == "semi") return Mode::semi_supervised;
  throw ValidationError("unknown mode '" + s + "'");
}

MemoryBank::MemoryBank(BankKind kind, MatrixF rows) : kind_(kind), rows_(std::move(rows)) {
  provenance_[static_cast<std::size_t>(kind_)] = rows_.rows();
  if (kind_ == BankKind::composed_abnormal) {
    throw ValidationError("composed banks must be built with explicit provenance");
  }
  if (rows_.rows() == 0 && kind_ != BankKind::center_sampled) {
    throw EmptyBankError(std::string("memory bank of kind ") + to_string(kind_) + " must have at least one row");
  }
  if (rows_.cols() == 0) throw ValidationError("memory bank: zero channels");
  check_finite(rows_, "memory bank");
}

MemoryBank::MemoryBank(BankKind kind, MatrixF rows, Provenance provenance)
    : kind_(kind), rows_(std::move(rows)), provenance_(provenance) {
  const auto total = std::accumulate(provenance_.begin(), provenance_.end(), std::uint64_t{0});
  if (total != rows_.rows()) throw ValidationError("memory bank: provenance counts do not sum to row count");
  if (rows_.rows() == 0 && kind_ != BankKind::center_sampled) {
    throw EmptyBankError(std::string("memory bank of kind ") + to_string(kind_) + " must have at least one row");
  }
  if (rows_.cols() == 0) throw ValidationError("memory bank: zero channels");
  if (kind_ != BankKind::composed_abnormal) {
    for (std::size_t k = 0; k < kBankKindCount; ++k) {
      if (k != static_cast<std::size_t>(kind_) && provenance_[k] != 0) {
        throw ValidationError("memory bank: provenance of a simple bank must name only its own kind");
      }
    }
  }
  check_finite(rows_, "memory bank");
}

void DualMemoryBank::validate() const {
  if (normal.kind() != BankKind::normal) throw ValidationError("dual bank: normal side has wrong kind");
  if (!abnormal) return;
  if (abnormal->kind() != BankKind::composed_abnormal) {
    throw ValidationError("dual bank: abnormal side must be a composed bank");
  }
  if (abnormal->c() != normal.c()) throw ValidationError("dual bank: channel mismatch");
  if (mode == Mode::unsupervised) {
    const auto& p = abnormal->provenance();
    if (p[static_cast<std::size_t>(BankKind::pseudo_outlier)] != abnormal->size()) {
      throw ValidationError("dual bank: unsupervised abnormal bank must hold only pseudo-outlier rows");
    }
  }
}

std::size_t coreset_size(std::size_t k, double retention) {
  if (!(retention > 0.0 && retention <= 1.0)) throw ValidationError("coreset retention must be in (0, 1]");
  const auto m = static_cast<std::size_t>(std::llround(retention * static_cast<double>(k)));
  return std::clamp<std::size_t>(m, 1, k);
}

std::size_t coreset_start_index(std::size_t k, std::uint64_t seed) {
  if (k == 0) throw ValidationError("coreset: empty input");
  std::mt19937_64 rng(seed);
  return std::uniform_int_distribution<std::size_t>(0, k - 1)(rng);
}

std::vector<std::size_t> greedy_coreset(const MatrixF& points, const CoresetConfig& config) {
  const std::size_t k = points.rows();
  if (k == 0) throw ValidationError("greedy_coreset: empty input");
  const std::size_t m = coreset_size(k, config.retention);
  const MatrixF projected =
      config.projection_dim > 0 ? random_projection(points, config.projection_dim, config.seed) : MatrixF{};
  const MatrixF& space = config.projection_dim > 0 ? projected : points;

  std::vector<std::size_t> picked;
  picked.reserve(m);
  std::vector<double> min_dist(k, std::numeric_limits<double>::infinity());
  std::vector<char> taken(k, 0);
  std::size_t next = coreset_start_index(k, config.seed);
  while (true) {
    picked.push_back(next);
    taken[next] = 1;
    if (picked.size() == m) break;
    const auto center = space.row(next);
    parallel_for(k, config.threads, [&](std::size_t begin, std::size_t end) {
      for (std::size_t i = begin; i < end; ++i) {
        const double d = squared_distance(space.row(i), center);
        if (d < min_dist[i]) min_dist[i] = d;
      }
    });
    double best = -1.0;
    for (std::size_t i = 0; i < k; ++i) {
      if (!taken[i] && min_dist[i] > best) {
        best = min_dist[i];
        next = i;
      }
    }
  }
  return picked;
}

MatrixF gather_rows(const MatrixF& points, std::span<const std::size_t> indices) {
  MatrixF out(indices.size(), points.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto src = points.row(indices[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

MatrixF stack_rows(std::span<const MatrixF* const> parts) {
  std::size_t rows = 0;
  std::size_t cols = 0;
  bool have_cols = false;
  for (const auto* p : parts) {
    if (p->rows() == 0 && p->cols() == 0) continue;
    if (have_cols && p->cols() != cols) throw ValidationError("stack_rows: channel count mismatch");
    cols = p->cols();
    have_cols = true;
    rows += p->rows();
  }
  MatrixF out(rows, cols);
  std::size_t r = 0;
  for (const auto* p : parts) {
    std::copy(p->data().begin(), p->data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(r * cols));
    r += p->rows();
  }
  return out;
}

MemoryBank build_normal_bank(std::span<const FeatureGrid> normal_grids, const CoresetConfig& coreset) {
  if (normal_grids.empty()) throw ValidationError("build_normal_bank: no normal images");
  std::vector<const MatrixF*> parts;
  for (const auto& g : normal_grids) {
    if (g.c != normal_grids.front().c) throw ValidationError("build_normal_bank: mixed channel counts");
    parts.push_back(&g.features);
  }
  const MatrixF pool = stack_rows(parts);
  const auto picked = greedy_coreset(pool, coreset);
  return MemoryBank(BankKind::normal, gather_rows(pool, picked));
}

MemoryBank build_normal_bank(const DatasetManifest& manifest, const CoresetConfig& coreset) {
  const auto entries = manifest.with_label(Label::normal);
  if (entries.empty()) throw ValidationError("build_normal_bank: manifest has no normal entries");
  const auto grids = read_grids(entries);
  return build_normal_bank(std::span<const FeatureGrid>(grids), coreset);
}

std::vector<float> fuse_outlier(std::span<const float> q_o, std::span<const float> q_n, double beta) {
  if (q_o.size() != q_n.size()) throw ValidationError("fuse_outlier: length mismatch");
  if (!(beta >= 0.0 && beta <= 1.0)) throw ValidationError("fuse_outlier: beta must be in [0, 1]");
  std::vector<float> out(q_o.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<float>(beta * q_o[i] + (1.0 - beta) * q_n[i]);
  }
  return out;
}

std::vector<std::size_t> outlier_pairing(std::size_t outlier_count, std::size_t normal_count,
                                         std::uint64_t pair_seed) {
  if (normal_count == 0) throw ValidationError("outlier pairing: no normal images");
  std::mt19937_64 rng(pair_seed);
  std::uniform_int_distribution<std::size_t> pick(0, normal_count - 1);
  std::vector<std::size_t> out(outlier_count);
  for (auto& v : out) v = pick(rng);
  return out;
}

namespace {

MemoryBank fuse_and_coreset(std::span<const FeatureGrid> outliers, const std::vector<const FeatureGrid*>& partners,
                            const FusionConfig& fusion, const CoresetConfig& coreset) {
  std::size_t total = 0;
  const std::uint32_t c = outliers.front().c;
  for (std::size_t i = 0; i < outliers.size(); ++i) {
    const auto& o = outliers[i];
    const auto& n = *partners[i];
    if (o.c != c || n.c != c) throw ValidationError("build_pseudo_outlier_bank: channel count mismatch");
    if (o.patch_count() != n.patch_count()) {
      throw ValidationError("build_pseudo_outlier_bank: outlier '" + o.image_id + "' and normal '" + n.image_id +
                            "' have different patch grids");
    }
    total += o.patch_count();
  }
  MatrixF pool(total, c);
  std::size_t r = 0;
  for (std::size_t i = 0; i < outliers.size(); ++i) {
    for (std::size_t p = 0; p < outliers[i].patch_count(); ++p, ++r) {
      const auto fused = fuse_outlier(outliers[i].features.row(p), partners[i]->features.row(p), fusion.beta);
      std::copy(fused.begin(), fused.end(), pool.row(r).begin());
    }
  }
  const auto picked = greedy_coreset(pool, coreset);
  return MemoryBank(BankKind::pseudo_outlier, gather_rows(pool, picked));
}

}  // namespace

MemoryBank build_pseudo_outlier_bank(std::span<const FeatureGrid> outlier_grids,
                                     std::span<const FeatureGrid> normal_grids, const FusionConfig& fusion,
                                     const CoresetConfig& coreset) {
  if (outlier_grids.empty()) throw ValidationError("build_pseudo_outlier_bank: empty outlier set");
  const auto pairing = outlier_pairing(outlier_grids.size(), normal_grids.size(), fusion.pair_seed);
  std::vector<const FeatureGrid*> partners;
  for (auto idx : pairing) partners.push_back(&normal_grids[idx]);
  return fuse_and_coreset(outlier_grids, partners, fusion, coreset);
}

MemoryBank build_pseudo_outlier_bank(std::span<const FeatureGrid> outlier_grids,
                                     const DatasetManifest& normal_manifest, const FusionConfig& fusion,
                                     const CoresetConfig& coreset) {
  if (outlier_grids.empty()) throw ValidationError("build_pseudo_outlier_bank: empty outlier set");
  const auto normals = normal_manifest.with_label(Label::normal);
  const auto pairing = outlier_pairing(outlier_grids.size(), normals.size(), fusion.pair_seed);
  std::vector<FeatureGrid> loaded;
  loaded.reserve(pairing.size());
  for (auto idx : pairing) loaded.push_back(read_feature_file(normals[idx].feature_path));
  std::vector<const FeatureGrid*> partners;
  for (const auto& g : loaded) partners.push_back(&g);
  return fuse_and_coreset(outlier_grids, partners, fusion, coreset);
}

MemoryBank build_seen_bank(const DatasetManifest& anomalous_entries, bool apply_filter) {
  std::vector<MatrixF> parts;
  for (const auto& e : anomalous_entries.entries) {
    if (e.label != Label::anomalous) {
      throw ValidationError("build_seen_bank: entry is not anomalous: " + e.feature_path.string());
    }
    if (!e.mask_path) throw ValidationError("build_seen_bank: entry lacks mask: " + e.feature_path.string());
    const auto grid = read_feature_file(e.feature_path);
    if (apply_filter) {
      const auto mask = read_mask_file(*e.mask_path);
      parts.push_back(filter_anomalous(grid, downscale_mask(mask, grid.h0, grid.w0)));
    } else {
      parts.push_back(grid.features);
    }
  }
  std::vector<const MatrixF*> ptrs;
  for (const auto& p : parts) ptrs.push_back(&p);
  MatrixF rows = stack_rows(ptrs);
  if (rows.rows() == 0) throw EmptyBankError("build_seen_bank: no anomalous patches after filtering");
  return MemoryBank(BankKind::seen_anomaly, std::move(rows));
}

MemoryBank anomaly_center_sampling(const MemoryBank& seen, const CenterSamplingConfig& config) {
  if (seen.empty()) throw ValidationError("anomaly_center_sampling: empty seen-anomaly bank");
  if (seen.kind() != BankKind::seen_anomaly) {
    throw ValidationError("anomaly_center_sampling: input must be a seen-anomaly bank");
  }
  if (!(config.noise_std >= 0.0)) throw ValidationError("anomaly_center_sampling: noise_std must be >= 0");
  const std::size_t c = seen.c();
  std::vector<double> mean(c, 0.0);
  for (std::size_t r = 0; r < seen.size(); ++r) {
    const auto row = seen.row(r);
    for (std::size_t j = 0; j < c; ++j) mean[j] += row[j];
  }
  for (auto& v : mean) v /= static_cast<double>(seen.size());

  MatrixF rows(config.count, c);
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t r = 0; r < config.count; ++r) {
    for (std::size_t j = 0; j < c; ++j) rows(r, j) = static_cast<float>(mean[j] + config.noise_std * noise(rng));
  }
  return MemoryBank(BankKind::center_sampled, std::move(rows));
}

MemoryBank compose_abnormal_bank(Mode mode, const MemoryBank* m_o, const MemoryBank* m_as, const MemoryBank* m_p) {
  if (mode == Mode::unsupervised) {
    if (m_o == nullptr) throw ValidationError("compose_abnormal_bank: unsupervised mode requires the outlier bank");
    if (m_as != nullptr || m_p != nullptr) {
      throw ValidationError("compose_abnormal_bank: unsupervised mode admits only pseudo-outlier rows");
    }
  } else if (m_as == nullptr || m_as->empty()) {
    throw ValidationError("compose_abnormal_bank: semi-supervised mode requires a nonempty seen-anomaly bank");
  }
  const std::array<std::pair<const MemoryBank*, BankKind>, 3> operands{{
      {m_o, BankKind::pseudo_outlier},
      {m_as, BankKind::seen_anomaly},
      {m_p, BankKind::center_sampled},
  }};
  Provenance prov{};
  std::vector<const MatrixF*> parts;
  std::size_t c = 0;
  for (const auto& [bank, expected] : operands) {
    if (bank == nullptr) continue;
    if (bank->kind() != expected) {
      throw ValidationError(std::string("compose_abnormal_bank: expected a ") + to_string(expected) + " bank, got " +
                            to_string(bank->kind()));
    }
    if (c != 0 && bank->c() != c) throw ValidationError("compose_abnormal_bank: channel count mismatch");
    c = bank->c();
    prov[static_cast<std::size_t>(expected)] = bank->size();
    parts.push_back(&bank->rows());
  }
  return MemoryBank(BankKind::composed_abnormal, stack_rows(parts), prov);
}

Neighbor nearest(const MemoryBank& bank, std::span<const float> q) {
  if (bank.empty()) throw ValidationError("nearest: empty bank");
  if (q.size() != bank.c()) throw ValidationError("nearest: query length does not match bank channels");
  Neighbor best{0, std::numeric_limits<double>::infinity()};
  for (std::size_t i = 0; i < bank.size(); ++i) {
    const double d = squared_distance(bank.row(i), q);
    if (d < best.distance) best = {i, d};
  }
  best.distance = std::sqrt(best.distance);
  return best;
}

std::vector<Neighbor> nearest_batch(const MemoryBank& bank, const MatrixF& queries, int threads) {
  if (bank.empty()) throw ValidationError("nearest: empty bank");
  if (queries.rows() > 0 && queries.cols() != bank.c()) {
    throw ValidationError("nearest: query length does not match bank channels");
  }
  std::vector<Neighbor> out(queries.rows());
  parallel_for(queries.rows(), threads, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) out[i] = nearest(bank, queries.row(i));
  });
  return out;
}

MatrixF nearest_rows(const MemoryBank& bank, const MatrixF& queries, int threads) {
  const auto hits = nearest_batch(bank, queries, threads);
  std::vector<std::size_t> idx(hits.size());
  for (std::size_t i = 0; i < hits.size(); ++i) idx[i] = hits[i].index;
  return gather_rows(bank.rows(), idx);
}

std::vector<std::uint8_t> encode_bank(const MemoryBank& bank) {
  io::ByteWriter w;
  w.magic("DMBK");
  w.u16(kBankVersion);
  w.u8(static_cast<std::uint8_t>(bank.kind()));
  w.u32(static_cast<std::uint32_t>(bank.c()));
  w.u64(bank.size());
  for (auto p : bank.provenance()) w.u64(p);
  w.f32_array(bank.rows().data());
  return w.bytes();
}

MemoryBank decode_bank(std::span<const std::uint8_t> bytes, const std::string& what) {
  io::ByteReader r(bytes, what);
  r.expect_magic("DMBK");
  if (const auto v = r.u16(); v != kBankVersion) r.fail("unsupported version " + std::to_string(v));
  const auto kind = r.u8();
  if (kind >= kBankKindCount) r.fail("unknown bank kind " + std::to_string(kind));
  const std::uint32_t c = r.u32();
  const std::uint64_t k = r.u64();
  Provenance prov{};
  for (auto& p : prov) p = r.u64();
  if (c == 0) r.fail("zero channel count");
  if (k > r.remaining() / 4 / c) r.fail("declared payload exceeds file size");
  auto payload = r.f32_array(k * c);
  if (!r.at_end()) r.fail("trailing bytes after payload");
  try {
    return MemoryBank(static_cast<BankKind>(kind), MatrixF(static_cast<std::size_t>(k), c, std::move(payload)), prov);
  } catch (const ValidationError& e) {
    throw FormatError(what + ": " + e.what());
  }
}

void save_bank(const MemoryBank& bank, const std::filesystem::path& path) {
  io::write_file_atomic(path, encode_bank(bank));
}

MemoryBank load_bank(const std::filesystem::path& path) { return decode_bank(io::read_file(path), path.string()); }

}  // namespace dmad
