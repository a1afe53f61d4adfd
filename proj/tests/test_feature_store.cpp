#include <doctest.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "dmad/binary_io.hpp"
#include "dmad/feature_store.hpp"
#include "test_util.hpp"

using namespace dmad;
using dmad::test::TempDir;

namespace {

// Serializer written from the byte layout alone, sharing no code with the library.
std::vector<std::uint8_t> reference_dmft(const FeatureGrid& g) {
  std::vector<std::uint8_t> out;
  auto put = [&](std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
  };
  for (char ch : std::string("DMFT")) out.push_back(static_cast<std::uint8_t>(ch));
  put(1, 2);
  put(0, 2);
  put(g.h0, 4);
  put(g.w0, 4);
  put(g.c, 4);
  put(g.source_h, 4);
  put(g.source_w, 4);
  put(g.object_id.size(), 2);
  for (char ch : g.object_id) out.push_back(static_cast<std::uint8_t>(ch));
  put(g.image_id.size(), 2);
  for (char ch : g.image_id) out.push_back(static_cast<std::uint8_t>(ch));
  for (float f : g.features.data()) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put(bits, 4);
  }
  return out;
}

// Pointwise bilinear sample with the pixel-center convention.
double bilinear_at(const AnnotationMask& m, std::uint32_t oh, std::uint32_t ow, std::uint32_t i, std::uint32_t j) {
  // Exact rational source coordinate ((2o + 1) * in - out) / (2 * out), clamped at 0.
  auto coord = [](std::uint32_t o, std::uint32_t in, std::uint32_t out) {
    const long long num = std::max(0LL, (2LL * o + 1) * in - out);
    const long long den = 2LL * out;
    auto lo = static_cast<std::uint32_t>(num / den);
    double frac = static_cast<double>(num - lo * den) / den;
    if (lo > in - 1) {
      lo = in - 1;
      frac = 0;
    }
    std::uint32_t hi = std::min(lo + 1, in - 1);
    return std::tuple{lo, hi, frac};
  };
  auto [y0, y1, fy] = coord(i, m.h, oh);
  auto [x0, x1, fx] = coord(j, m.w, ow);
  auto px = [&](std::uint32_t y, std::uint32_t x) { return static_cast<double>(m.data[y * m.w + x]); };
  return (1 - fy) * ((1 - fx) * px(y0, x0) + fx * px(y0, x1)) + fy * ((1 - fx) * px(y1, x0) + fx * px(y1, x1));
}

AnnotationMask mask_of(std::uint32_t h, std::uint32_t w, std::uint8_t fill) {
  return AnnotationMask{h, w, std::vector<std::uint8_t>(static_cast<std::size_t>(h) * w, fill)};
}

FeatureGrid seven_grid() {
  std::mt19937_64 rng(7);
  return test::make_grid("bottle", "img_007", 2, 3, test::random_matrix<float>(6, 4, rng));
}

}  // namespace

TEST_CASE("feature file round trip and size") {
  TempDir dir("fs");
  auto g = test::make_grid("o", "i", 1, 1, MatrixF(1, 2, std::vector<float>{1.0f, 2.0f}));
  write_feature_file(g, dir / "a.dmft");
  const std::size_t header = 4 + 2 + 2 + 5 * 4 + 2 + 1 + 2 + 1;
  CHECK(std::filesystem::file_size(dir / "a.dmft") == header + 8);
  CHECK(read_feature_file(dir / "a.dmft") == g);
}

TEST_CASE("feature file rejects non-finite data on write") {
  TempDir dir("fs");
  auto g = test::make_grid("o", "i", 1, 1, MatrixF(1, 2, std::vector<float>{1.0f, std::nanf("")}));
  CHECK_THROWS_AS(write_feature_file(g, dir / "a.dmft"), ValidationError);
  g.features(0, 1) = std::numeric_limits<float>::infinity();
  CHECK_THROWS_AS(write_feature_file(g, dir / "a.dmft"), ValidationError);
}

TEST_CASE("feature file bytes match an independent serializer") {
  TempDir dir("fs");
  const auto g = seven_grid();
  write_feature_file(g, dir / "g.dmft");
  const auto bytes = io::read_file(dir / "g.dmft");
  CHECK(bytes == reference_dmft(g));
  const auto back = read_feature_file(dir / "g.dmft");
  REQUIRE(back.features.size() == 24);
  CHECK(std::memcmp(back.features.data().data(), g.features.data().data(), 24 * sizeof(float)) == 0);
}

TEST_CASE("feature file corruption is a format error") {
  const auto g = seven_grid();
  const auto good = encode_feature_grid(g);

  auto bad_magic = good;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(decode_feature_grid(bad_magic), FormatError);

  auto bad_version = good;
  bad_version[4] = 2;
  CHECK_THROWS_AS(decode_feature_grid(bad_version), FormatError);

  auto truncated = good;
  truncated.resize(truncated.size() - 3);
  CHECK_THROWS_AS(decode_feature_grid(truncated), FormatError);

  auto trailing = good;
  trailing.push_back(0);
  CHECK_THROWS_AS(decode_feature_grid(trailing), FormatError);

  auto nan_payload = good;
  const std::uint32_t nan_bits = 0x7fc00000u;
  for (int i = 0; i < 4; ++i) nan_payload[nan_payload.size() - 4 + i] = static_cast<std::uint8_t>(nan_bits >> (8 * i));
  CHECK_THROWS_AS(decode_feature_grid(nan_payload), FormatError);

  for (std::size_t cut = 0; cut < good.size(); cut += 5) {
    std::vector<std::uint8_t> prefix(good.begin(), good.begin() + static_cast<std::ptrdiff_t>(cut));
    CHECK_THROWS_AS(decode_feature_grid(prefix), FormatError);
  }
}

TEST_CASE("missing feature file is a storage error") {
  TempDir dir("fs");
  CHECK_THROWS_AS(read_feature_file(dir / "nope.dmft"), StorageError);
}

TEST_CASE("mask file round trip and value check") {
  TempDir dir("fs");
  AnnotationMask m{2, 3, {0, 1, 1, 0, 0, 1}};
  write_mask_file(m, dir / "m.dmmk");
  CHECK(read_mask_file(dir / "m.dmmk") == m);

  auto bytes = io::read_file(dir / "m.dmmk");
  bytes.back() = 2;
  io::write_file_atomic(dir / "bad.dmmk", bytes);
  CHECK_THROWS_AS(read_mask_file(dir / "bad.dmmk"), FormatError);

  AnnotationMask invalid{1, 2, {0, 3}};
  CHECK_THROWS_AS(write_mask_file(invalid, dir / "x.dmmk"), ValidationError);
}

TEST_CASE("downscale_mask constant masks") {
  for (auto f : downscale_mask(mask_of(8, 8, 0), 2, 2).flags) CHECK_FALSE(f);
  for (auto f : downscale_mask(mask_of(8, 8, 1), 2, 2).flags) CHECK(f);
  CHECK_THROWS_AS(downscale_mask(mask_of(8, 8, 1), 0, 2), ValidationError);
}

TEST_CASE("downscale_mask single pixel matches pointwise bilinear oracle") {
  auto m = mask_of(4, 4, 0);
  m.data[0] = 1;
  const auto pm = downscale_mask(m, 2, 2);
  REQUIRE(pm.flags.size() == 4);
  for (std::uint32_t i = 0; i < 2; ++i) {
    for (std::uint32_t j = 0; j < 2; ++j) {
      CHECK(pm.flags[i * 2 + j] == (bilinear_at(m, 2, 2, i, j) > 0));
    }
  }
  CHECK(pm.count() == 1);
  CHECK(pm.flags[0]);
}

TEST_CASE("downscale_mask agrees with the oracle on random masks") {
  std::mt19937_64 rng(11);
  std::bernoulli_distribution coin(0.05);
  std::uniform_int_distribution<std::uint32_t> dim(3, 24);
  for (int trial = 0; trial < 100; ++trial) {
    const std::uint32_t h = dim(rng), w = dim(rng);
    const std::uint32_t oh = std::uniform_int_distribution<std::uint32_t>(1, h)(rng);
    const std::uint32_t ow = std::uniform_int_distribution<std::uint32_t>(1, w)(rng);
    auto m = mask_of(h, w, 0);
    for (auto& v : m.data) v = coin(rng) ? 1 : 0;
    const auto pm = downscale_mask(m, oh, ow);
    for (std::uint32_t i = 0; i < oh; ++i) {
      for (std::uint32_t j = 0; j < ow; ++j) {
        REQUIRE(pm.flags[i * ow + j] == (bilinear_at(m, oh, ow, i, j) > 0));
      }
    }
  }
}

TEST_CASE("downscale_mask is monotone") {
  std::mt19937_64 rng(3);
  std::bernoulli_distribution coin(0.03);
  std::uniform_int_distribution<std::uint32_t> px(0, 31);
  auto m = mask_of(32, 32, 0);
  for (auto& v : m.data) v = coin(rng) ? 1 : 0;
  auto prev = downscale_mask(m, 4, 4);
  for (int step = 0; step < 50; ++step) {
    m.data[px(rng) * 32 + px(rng)] = 1;
    auto next = downscale_mask(m, 4, 4);
    for (std::size_t k = 0; k < prev.flags.size(); ++k) {
      if (prev.flags[k]) REQUIRE(next.flags[k]);
    }
    prev = next;
  }
}

TEST_CASE("filter_anomalous") {
  MatrixF f(4, 2, std::vector<float>{0, 1, 10, 11, 20, 21, 30, 31});
  auto g = test::make_grid("o", "i", 2, 2, f);

  PatchMask none{2, 2, {false, false, false, false}};
  CHECK(filter_anomalous(g, none).rows() == 0);

  PatchMask alt{2, 2, {false, true, false, true}};
  const auto sel = filter_anomalous(g, alt);
  REQUIRE(sel.rows() == 2);
  CHECK(sel(0, 0) == 10);
  CHECK(sel(0, 1) == 11);
  CHECK(sel(1, 0) == 30);
  CHECK(sel(1, 1) == 31);
  CHECK(sel.rows() == alt.count());

  auto g12 = test::make_grid("o", "i", 1, 2, MatrixF(2, 1, std::vector<float>{5, 6}));
  PatchMask all{1, 2, {true, true}};
  const auto both = filter_anomalous(g12, all);
  REQUIRE(both.rows() == 2);
  CHECK(both(0, 0) == 5);
  CHECK(both(1, 0) == 6);

  PatchMask wrong{1, 4, {true, true, true, true}};
  CHECK_THROWS_AS(filter_anomalous(g, wrong), ValidationError);
}

TEST_CASE("manifest save, load and validation") {
  TempDir dir("fs");
  std::filesystem::create_directories(dir / "feat");
  auto g = test::make_grid("o", "i", 1, 1, MatrixF(1, 2, std::vector<float>{1, 2}));
  write_feature_file(g, dir / "feat/a.dmft");
  write_feature_file(g, dir / "feat/b.dmft");
  write_mask_file(mask_of(4, 4, 1), dir / "feat/b.dmmk");

  DatasetManifest man;
  man.role = SplitRole::train;
  man.entries.push_back({dir / "feat/a.dmft", "o", Label::normal, std::nullopt});
  man.entries.push_back({dir / "feat/b.dmft", "o", Label::anomalous, dir / "feat/b.dmmk"});
  save_manifest(man, dir / "train.json");

  const auto text = io::read_text(dir / "train.json");
  CHECK(text.find("feat/a.dmft") != std::string::npos);
  CHECK(text.find(dir.path().string()) == std::string::npos);

  const auto back = load_manifest(dir / "train.json", SplitRole::train);
  REQUIRE(back.entries.size() == 2);
  CHECK(std::filesystem::equivalent(back.entries[0].feature_path, dir / "feat/a.dmft"));
  CHECK(back.entries[1].label == Label::anomalous);
  REQUIRE(back.entries[1].mask_path);
  CHECK(std::filesystem::equivalent(*back.entries[1].mask_path, dir / "feat/b.dmmk"));
  CHECK(back.with_label(Label::anomalous).size() == 1);

  io::write_text_atomic(dir / "nomask.json",
                        R"([{"feature_path":"feat/b.dmft","object_id":"o","label":"anomalous"}])");
  CHECK_THROWS_AS(load_manifest(dir / "nomask.json", SplitRole::train), ValidationError);
  CHECK_NOTHROW(load_manifest(dir / "nomask.json", SplitRole::test));

  io::write_text_atomic(dir / "missing.json", R"([{"feature_path":"feat/zz.dmft","object_id":"o","label":"normal"}])");
  CHECK_THROWS_AS(load_manifest(dir / "missing.json", SplitRole::test), ValidationError);

  io::write_text_atomic(dir / "label.json", R"([{"feature_path":"feat/a.dmft","object_id":"o","label":"weird"}])");
  CHECK_THROWS_AS(load_manifest(dir / "label.json", SplitRole::test), Error);

  io::write_text_atomic(dir / "noid.json", R"([{"feature_path":"feat/a.dmft","object_id":"","label":"normal"}])");
  CHECK_THROWS_AS(load_manifest(dir / "noid.json", SplitRole::test), ValidationError);

  io::write_text_atomic(dir / "obj.json", R"({"entries":[]})");
  CHECK_THROWS_AS(load_manifest(dir / "obj.json", SplitRole::test), FormatError);
}
