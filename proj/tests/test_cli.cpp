#include <doctest.h>

#include <array>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <sys/wait.h>

#include "dmad/binary_io.hpp"
#include "dmad/checkpoint.hpp"
#include "dmad/memory_bank.hpp"
#include "fixtures.hpp"
#include "test_util.hpp"

using namespace dmad;
using dmad::test::TempDir;

namespace {

struct RunResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

RunResult run_cli(const std::string& args, const TempDir& dir) {
  const auto err_path = dir / "stderr.txt";
  const std::string cmd = std::string("DMAD_LOG=error '") + DMAD_CLI_PATH + "' " + args + " 2>'" + err_path.string() + "'";
  RunResult r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::array<char, 4096> buf{};
  while (std::size_t n = std::fread(buf.data(), 1, buf.size(), pipe)) r.out.append(buf.data(), n);
  const int status = pclose(pipe);
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.err = io::read_text(err_path);
  return r;
}

std::string q(const std::filesystem::path& p) { return "'" + p.string() + "'"; }

std::string data_flags(const TempDir& dir) {
  return "--train-manifest " + q(dir / "data/train.json") + " --test-manifest " + q(dir / "data/test.json") +
         " --outlier-dir " + q(dir / "data/outliers") + " --work-dir " + q(dir / "work") + " --deterministic";
}

double score_of(const std::string& out) {
  const auto pos = out.find("image_score: ");
  REQUIRE(pos != std::string::npos);
  return std::stod(out.substr(pos + 13));
}

}  // namespace

TEST_CASE("cli end to end with a fixed scorer") {
  TempDir dir("cli");
  auto r = run_cli("synth-gen --out " + q(dir / "data"), dir);
  REQUIRE(r.exit_code == 0);
  CHECK(std::filesystem::exists(dir / "data/train.json"));

  r = run_cli(data_flags(dir) + " score " + q(dir / "data/test/object_0/object_0_test_good_000.dmft"), dir);
  CHECK(r.exit_code != 0);
  CHECK(r.err.find("[error]") != std::string::npos);

  r = run_cli(data_flags(dir) + " build-banks", dir);
  REQUIRE(r.exit_code == 0);
  CHECK(r.out.find("pseudo_outlier=") != std::string::npos);
  CHECK(r.out.find("(100.0%)") != std::string::npos);

  r = run_cli(data_flags(dir) + " score " + q(dir / "data/test/object_0/object_0_test_good_000.dmft"), dir);
  CHECK(r.exit_code != 0);
  CHECK(r.err.find("checkpoint") != std::string::npos);

  const auto normal_bank = load_bank(dir / "work/banks/normal.dmbk");
  const auto test_manifest = load_manifest(dir / "data/test.json", SplitRole::test);
  save_checkpoint(test::directional_checkpoint(test::mean_defect_residual(test_manifest, normal_bank)),
                  dir / "work/model.dmckpt");

  for (int o = 0; o < 3; ++o) {
    const auto folder = dir / "data/test" / ("object_" + std::to_string(o));
    const auto good = run_cli(data_flags(dir) + " score " + q(folder / ("object_" + std::to_string(o) + "_test_good_000.dmft")), dir);
    const auto bad = run_cli(data_flags(dir) + " score " + q(folder / ("object_" + std::to_string(o) + "_test_defect_000.dmft")) +
                                 " --pixel-map " + q(dir / "map.dmft"),
                             dir);
    REQUIRE(good.exit_code == 0);
    REQUIRE(bad.exit_code == 0);
    CHECK(score_of(good.out) < score_of(bad.out));
    const auto map = read_feature_file(dir / "map.dmft");
    CHECK(map.c == 1);
    CHECK(map.h0 == 64);
    CHECK(map.w0 == 64);
  }

  r = run_cli(data_flags(dir) + " eval", dir);
  CHECK(r.exit_code == 0);
  CHECK(r.out.find("object,image_auroc") != std::string::npos);
  CHECK(std::filesystem::exists(dir / "work/report/report.json"));
}

TEST_CASE("cli train writes checkpoint and loss log") {
  TempDir dir("cli");
  REQUIRE(run_cli("synth-gen --out " + q(dir / "data"), dir).exit_code == 0);
  auto r = run_cli(data_flags(dir) + " --epochs 1 train", dir);
  CHECK(r.exit_code != 0);
  CHECK(r.err.find("normal.dmbk") != std::string::npos);
  REQUIRE(run_cli(data_flags(dir) + " build-banks", dir).exit_code == 0);
  r = run_cli(data_flags(dir) + " --epochs 1 train", dir);
  CHECK(r.exit_code == 0);
  CHECK(std::filesystem::exists(dir / "work/model.dmckpt"));
  CHECK(io::read_text(dir / "work/loss_log.csv").rfind("epoch,step,loss,term_n,term_p,term_a\n", 0) == 0);
}

TEST_CASE("cli inspect-bank") {
  TempDir dir("cli");
  std::mt19937_64 rng(4);
  const MemoryBank bank(BankKind::normal, test::random_matrix<float>(37, 5, rng));
  save_bank(bank, dir / "n.dmbk");
  auto r = run_cli("inspect-bank " + q(dir / "n.dmbk"), dir);
  REQUIRE(r.exit_code == 0);
  CHECK(r.out.find("kind: normal") != std::string::npos);
  CHECK(r.out.find("K: 37") != std::string::npos);
  CHECK(r.out.find("C: 5") != std::string::npos);
  CHECK(r.out.find("  normal: 37") != std::string::npos);

  std::istringstream lines(r.out.substr(r.out.find("dim,mean,std\n") + 13));
  for (std::size_t j = 0; j < 5; ++j) {
    std::string line;
    REQUIRE(std::getline(lines, line));
    double mean = 0, sq = 0;
    for (std::size_t i = 0; i < 37; ++i) mean += bank.rows()(i, j);
    mean /= 37.0;
    for (std::size_t i = 0; i < 37; ++i) sq += (bank.rows()(i, j) - mean) * (bank.rows()(i, j) - mean);
    const double sd = std::sqrt(sq / 37.0);
    std::istringstream fields(line);
    std::string dim, m, s;
    std::getline(fields, dim, ',');
    std::getline(fields, m, ',');
    std::getline(fields, s, ',');
    CHECK(std::stoul(dim) == j);
    CHECK(std::stod(m) == doctest::Approx(mean).epsilon(1e-5).scale(1e-5));
    CHECK(std::stod(s) == doctest::Approx(sd).epsilon(1e-5));
  }

  auto bytes = io::read_file(dir / "n.dmbk");
  bytes[0] = 'X';
  io::write_file_atomic(dir / "bad.dmbk", bytes);
  r = run_cli("inspect-bank " + q(dir / "bad.dmbk"), dir);
  CHECK(r.exit_code != 0);
  CHECK(r.err.find("[error]") != std::string::npos);
  CHECK(run_cli("inspect-bank " + q(dir / "missing.dmbk"), dir).exit_code != 0);
}

TEST_CASE("cli argument errors") {
  TempDir dir("cli");
  CHECK(run_cli("no-such-command", dir).exit_code != 0);
  CHECK(run_cli("--threads 0 eval", dir).exit_code != 0);
  CHECK(run_cli("--mode sideways eval", dir).exit_code != 0);
  CHECK(run_cli("--help", dir).exit_code == 0);
}
