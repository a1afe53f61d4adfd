#include "dmad/config.hpp"

#include <set>

#include <fmt/format.h>

#include "dmad/binary_io.hpp"
#include "dmad/error.hpp"
#include "json.hpp"

namespace dmad {

using nlohmann::json;

std::uint64_t derive_seed(std::uint64_t seed, std::string_view stage) {
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
  for (char ch : stage) {
    h ^= static_cast<unsigned char>(ch);
    h *= 1099511628211ULL;
  }
  // splitmix64 finalizer
  std::uint64_t z = seed ^ h;
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace {

// Reads fields out of one JSON object and rejects keys nobody asked for.
class Section {
 public:
  Section(const json& j, std::string name) : name_(std::move(name)) {
    if (j.is_null()) return;
    if (!j.is_object()) throw ValidationError(fmt::format("config: '{}' must be an object", name_));
    obj_ = &j;
  }
  ~Section() noexcept(false) {
    if (!obj_ || std::uncaught_exceptions() > 0) return;
    for (const auto& [key, value] : obj_->items()) {
      if (!seen_.contains(key)) throw ValidationError(fmt::format("config: unknown key '{}{}'", prefix(), key));
    }
  }
  Section(const Section&) = delete;
  Section& operator=(const Section&) = delete;

  template <typename T>
  bool get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!obj_ || !obj_->contains(key) || (*obj_)[key].is_null()) return false;
    try {
      (*obj_)[key].get_to(out);
    } catch (const json::exception& e) {
      throw ValidationError(fmt::format("config: bad value for '{}{}': {}", prefix(), key, e.what()));
    }
    return true;
  }

  bool get_path(const std::string& key, std::filesystem::path& out, const std::filesystem::path& base) {
    std::string s;
    if (!get(key, s)) return false;
    out = s.empty() ? std::filesystem::path() : (base / s).lexically_normal();
    return true;
  }

  const json& child(const std::string& key) {
    seen_.insert(key);
    static const json null_json;
    if (!obj_ || !obj_->contains(key)) return null_json;
    return (*obj_)[key];
  }

  std::string prefix() const { return name_.empty() ? "" : name_ + "."; }

 private:
  const json* obj_ = nullptr;
  std::string name_;
  std::set<std::string> seen_;
};

std::filesystem::path absolute_path(const std::filesystem::path& p) {
  if (p.empty()) return p;
  return std::filesystem::absolute(p).lexically_normal();
}

}  // namespace

TrainSettings RunConfig::train_settings() const {
  TrainSettings s;
  s.train = train;
  s.train.mode = mode;
  s.train.threads = effective_threads();
  s.shape = model;
  s.knowledge = knowledge;
  s.loss = loss;
  s.augment = augment;
  s.optimizer = optimizer;
  s.apply_filter = ablation.use_filter;
  return s;
}

void RunConfig::validate() const {
  if (threads < 1) throw ValidationError("config: threads must be >= 1");
  if (train.epochs < 1 || train.batch_size < 1) throw ValidationError("config: epochs and batch_size must be >= 1");
  if (loss.lambda1 < 0.0 || loss.lambda2 < 0.0) throw ValidationError("config: lambdas must be >= 0");
  if (mode == Mode::unsupervised && loss.lambda2 != 0.0) {
    throw ValidationError("config: unsupervised mode has no anomalies, so loss.lambda2 must be 0");
  }
  if (mode == Mode::semi_supervised) {
    if (loss.lambda2 <= 0.0) throw ValidationError("config: semi_supervised mode needs loss.lambda2 > 0");
    if (!ablation.use_seen_bank) throw ValidationError("config: semi_supervised mode needs ablation.use_seen_bank");
  }
  if (!(coreset.retention > 0.0 && coreset.retention <= 1.0)) {
    throw ValidationError("config: coreset.retention must be in (0, 1]");
  }
  if (!(fusion.beta >= 0.0 && fusion.beta <= 1.0)) throw ValidationError("config: fusion.beta must be in [0, 1]");
  if (!(augment.noise_std >= 0.0)) throw ValidationError("config: augment.noise_std must be >= 0");
  if (!(eval.blur_sigma >= 0.0)) throw ValidationError("config: eval.blur_sigma must be >= 0");
  if (eval.pro.connectivity != 4 && eval.pro.connectivity != 8) {
    throw ValidationError("config: eval.pro_connectivity must be 4 or 8");
  }
  if (!(eval.pro.fpr_limit > 0.0 && eval.pro.fpr_limit <= 1.0)) {
    throw ValidationError("config: eval.pro_fpr_limit must be in (0, 1]");
  }
  if (model.num_blocks < 1) throw ValidationError("config: model.num_blocks must be >= 1");
}

RunConfig parse_run_config(const std::string& json_text, const std::filesystem::path& base_dir,
                           const ConfigOverrides& overrides) {
  json doc;
  try {
    doc = json_text.empty() ? json::object() : json::parse(json_text);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("config: invalid JSON: ") + e.what());
  }
  if (!doc.is_object()) throw ValidationError("config: expected a JSON object");

  // Flags win over file values; path flags are relative to the working directory.
  if (overrides.seed) doc["seed"] = *overrides.seed;
  if (overrides.deterministic) doc["deterministic"] = *overrides.deterministic;
  if (overrides.threads) doc["threads"] = *overrides.threads;
  if (overrides.mode) doc["mode"] = *overrides.mode;
  if (overrides.epochs) doc["train"]["epochs"] = *overrides.epochs;
  auto set_path = [&](const char* key, const std::filesystem::path& p) {
    doc["paths"][key] = absolute_path(p).string();
  };
  if (overrides.train_manifest) set_path("train_manifest", *overrides.train_manifest);
  if (overrides.test_manifest) set_path("test_manifest", *overrides.test_manifest);
  if (overrides.outlier_dir) set_path("outlier_dir", *overrides.outlier_dir);
  if (overrides.work_dir) {
    const auto w = *overrides.work_dir;
    set_path("bank_dir", w / "banks");
    set_path("checkpoint", w / "model.dmckpt");
    set_path("loss_log", w / "loss_log.csv");
    set_path("report_dir", w / "report");
  }

  RunConfig cfg;
  const auto base = absolute_path(base_dir.empty() ? std::filesystem::current_path() : base_dir);
  Section root(doc, "");
  std::string mode = "unsupervised";
  root.get("mode", mode);
  cfg.mode = mode_from_string(mode);
  root.get("seed", cfg.seed);
  root.get("deterministic", cfg.deterministic);
  root.get("threads", cfg.threads);
  const bool semi = cfg.mode == Mode::semi_supervised;

  {
    Section s(root.child("paths"), "paths");
    auto& p = cfg.paths;
    p.bank_dir = base / p.bank_dir;
    p.checkpoint = base / p.checkpoint;
    p.loss_log = base / p.loss_log;
    p.report_dir = base / p.report_dir;
    s.get_path("train_manifest", p.train_manifest, base);
    s.get_path("test_manifest", p.test_manifest, base);
    s.get_path("outlier_dir", p.outlier_dir, base);
    s.get_path("bank_dir", p.bank_dir, base);
    s.get_path("checkpoint", p.checkpoint, base);
    s.get_path("loss_log", p.loss_log, base);
    s.get_path("report_dir", p.report_dir, base);
  }
  {
    Section s(root.child("coreset"), "coreset");
    s.get("retention", cfg.coreset.retention);
    s.get("projection_dim", cfg.coreset.projection_dim);
    if (!s.get("seed", cfg.coreset.seed)) cfg.coreset.seed = derive_seed(cfg.seed, "coreset");
  }
  {
    Section s(root.child("fusion"), "fusion");
    s.get("beta", cfg.fusion.beta);
    if (!s.get("pair_seed", cfg.fusion.pair_seed)) cfg.fusion.pair_seed = derive_seed(cfg.seed, "fusion");
  }
  {
    Section s(root.child("center_sampling"), "center_sampling");
    s.get("count", cfg.center_sampling.count);
    s.get("noise_std", cfg.center_sampling.noise_std);
    if (!s.get("seed", cfg.center_sampling.seed)) cfg.center_sampling.seed = derive_seed(cfg.seed, "center_sampling");
  }
  {
    Section s(root.child("knowledge"), "knowledge");
    cfg.knowledge.use_attention = !semi;
    s.get("use_attention", cfg.knowledge.use_attention);
    s.get("use_distance", cfg.knowledge.use_distance);
    s.get("shared_kv", cfg.knowledge.shared_kv);
  }
  {
    Section s(root.child("loss"), "loss");
    cfg.loss.lambda1 = semi ? 0.5 : 1.0;
    cfg.loss.lambda2 = semi ? 15.0 : 0.0;
    s.get("lambda1", cfg.loss.lambda1);
    s.get("lambda2", cfg.loss.lambda2);
    s.get("margin", cfg.loss.margin);
  }
  {
    Section s(root.child("augment"), "augment");
    s.get("noise_std", cfg.augment.noise_std);
    if (!s.get("seed", cfg.augment.seed)) cfg.augment.seed = derive_seed(cfg.seed, "augment");
  }
  {
    Section s(root.child("train"), "train");
    s.get("epochs", cfg.train.epochs);
    s.get("batch_size", cfg.train.batch_size);
    if (!s.get("seed", cfg.train.seed)) cfg.train.seed = derive_seed(cfg.seed, "train");
  }
  cfg.train.mode = cfg.mode;
  {
    Section s(root.child("model"), "model");
    s.get("num_blocks", cfg.model.num_blocks);
    s.get("leaky_slope", cfg.model.leaky_slope);
    s.get("bn_momentum", cfg.model.bn_momentum);
    s.get("bn_eps", cfg.model.bn_eps);
  }
  {
    Section s(root.child("optimizer"), "optimizer");
    auto& o = cfg.optimizer;
    s.get("beta1", o.beta1);
    s.get("beta2", o.beta2);
    s.get("eps", o.eps);
    s.get("lr_attention_projection", o.lr_attention_projection);
    s.get("lr_mlp", o.lr_mlp);
    s.get("wd_attention_projection", o.wd_attention_projection);
    s.get("wd_mlp", o.wd_mlp);
  }
  {
    Section s(root.child("eval"), "eval");
    s.get("blur_sigma", cfg.eval.blur_sigma);
    s.get("pro_fpr_limit", cfg.eval.pro.fpr_limit);
    s.get("pro_connectivity", cfg.eval.pro.connectivity);
  }
  {
    Section s(root.child("ablation"), "ablation");
    s.get("use_filter", cfg.ablation.use_filter);
    s.get("use_outlier_bank", cfg.ablation.use_outlier_bank);
    s.get("use_seen_bank", cfg.ablation.use_seen_bank);
    s.get("use_center_bank", cfg.ablation.use_center_bank);
  }
  cfg.coreset.threads = cfg.effective_threads();
  cfg.eval.threads = cfg.effective_threads();
  cfg.train.threads = cfg.effective_threads();
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::optional<std::filesystem::path>& path, const ConfigOverrides& overrides) {
  if (!path) return parse_run_config("", std::filesystem::current_path(), overrides);
  if (!std::filesystem::exists(*path)) throw StorageError("config file not found: " + path->string());
  return parse_run_config(io::read_text(*path), absolute_path(*path).parent_path(), overrides);
}

std::string run_config_to_json(const RunConfig& cfg) {
  nlohmann::ordered_json j;
  j["mode"] = to_string(cfg.mode);
  j["seed"] = cfg.seed;
  j["deterministic"] = cfg.deterministic;
  j["threads"] = cfg.threads;
  const auto& p = cfg.paths;
  j["paths"] = {{"train_manifest", p.train_manifest.string()}, {"test_manifest", p.test_manifest.string()},
                {"outlier_dir", p.outlier_dir.string()},       {"bank_dir", p.bank_dir.string()},
                {"checkpoint", p.checkpoint.string()},         {"loss_log", p.loss_log.string()},
                {"report_dir", p.report_dir.string()}};
  j["coreset"] = {{"retention", cfg.coreset.retention},
                  {"projection_dim", cfg.coreset.projection_dim},
                  {"seed", cfg.coreset.seed}};
  j["fusion"] = {{"beta", cfg.fusion.beta}, {"pair_seed", cfg.fusion.pair_seed}};
  j["center_sampling"] = {{"count", cfg.center_sampling.count},
                          {"noise_std", cfg.center_sampling.noise_std},
                          {"seed", cfg.center_sampling.seed}};
  j["knowledge"] = {{"use_attention", cfg.knowledge.use_attention},
                    {"use_distance", cfg.knowledge.use_distance},
                    {"shared_kv", cfg.knowledge.shared_kv}};
  j["loss"] = {{"lambda1", cfg.loss.lambda1}, {"lambda2", cfg.loss.lambda2}, {"margin", cfg.loss.margin}};
  j["augment"] = {{"noise_std", cfg.augment.noise_std}, {"seed", cfg.augment.seed}};
  j["train"] = {{"epochs", cfg.train.epochs}, {"batch_size", cfg.train.batch_size}, {"seed", cfg.train.seed}};
  j["model"] = {{"num_blocks", cfg.model.num_blocks},
                {"leaky_slope", cfg.model.leaky_slope},
                {"bn_momentum", cfg.model.bn_momentum},
                {"bn_eps", cfg.model.bn_eps}};
  const auto& o = cfg.optimizer;
  j["optimizer"] = {{"beta1", o.beta1},
                    {"beta2", o.beta2},
                    {"eps", o.eps},
                    {"lr_attention_projection", o.lr_attention_projection},
                    {"lr_mlp", o.lr_mlp},
                    {"wd_attention_projection", o.wd_attention_projection},
                    {"wd_mlp", o.wd_mlp}};
  j["eval"] = {{"blur_sigma", cfg.eval.blur_sigma},
               {"pro_fpr_limit", cfg.eval.pro.fpr_limit},
               {"pro_connectivity", cfg.eval.pro.connectivity}};
  j["ablation"] = {{"use_filter", cfg.ablation.use_filter},
                   {"use_outlier_bank", cfg.ablation.use_outlier_bank},
                   {"use_seen_bank", cfg.ablation.use_seen_bank},
                   {"use_center_bank", cfg.ablation.use_center_bank}};
  return j.dump(2) + "\n";
}

}  // namespace dmad
