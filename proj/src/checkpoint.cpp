#include "dmad/checkpoint.hpp"

#include <cmath>
#include <map>

#include "dmad/binary_io.hpp"

namespace dmad {

namespace {

constexpr std::uint16_t kCheckpointVersion = 1;
constexpr std::uint8_t kMaxRank = 4;

struct Record {
  std::vector<std::uint32_t> dims;
  std::vector<float> values;
};

void write_record(io::ByteWriter& w, const std::string& name, const std::vector<std::uint32_t>& dims,
                  std::span<const float> values) {
  w.short_string(name);
  w.u8(static_cast<std::uint8_t>(dims.size()));
  for (auto d : dims) w.u32(d);
  w.f32_array(values);
}

void write_scalar(io::ByteWriter& w, const std::string& name, double value) {
  const float v = static_cast<float>(value);
  write_record(w, name, {}, std::span<const float>(&v, 1));
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  io::ByteWriter w;
  w.magic("DMCK");
  w.u16(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(ckpt.params.c()));
  write_scalar(w, "meta.num_blocks", static_cast<double>(ckpt.params.mlp.blocks.size()));
  write_scalar(w, "meta.mode", ckpt.mode == Mode::unsupervised ? 0.0 : 1.0);
  write_scalar(w, "meta.use_attention", ckpt.knowledge.use_attention ? 1.0 : 0.0);
  write_scalar(w, "meta.use_distance", ckpt.knowledge.use_distance ? 1.0 : 0.0);
  write_scalar(w, "meta.shared_kv", ckpt.knowledge.shared_kv ? 1.0 : 0.0);
  write_scalar(w, "meta.leaky_slope", ckpt.params.mlp.leaky_slope);
  write_scalar(w, "meta.bn_momentum", ckpt.params.mlp.bn_momentum);
  write_scalar(w, "meta.bn_eps", ckpt.params.mlp.bn_eps);
  for_each_tensor(ckpt.params, [&](const TensorInfo& info, std::span<const float> v) {
    write_record(w, info.name, info.dims, v);
  });
  const auto& opt = ckpt.optimizer;
  write_scalar(w, "adam.beta1", opt.config.beta1);
  write_scalar(w, "adam.beta2", opt.config.beta2);
  write_scalar(w, "adam.eps", opt.config.eps);
  write_scalar(w, "adam.lr_attention_projection", opt.config.lr_attention_projection);
  write_scalar(w, "adam.lr_mlp", opt.config.lr_mlp);
  write_scalar(w, "adam.wd_attention_projection", opt.config.wd_attention_projection);
  write_scalar(w, "adam.wd_mlp", opt.config.wd_mlp);
  // Split so counts above 2^24 survive the f32 payload.
  write_scalar(w, "adam.step_hi", static_cast<double>(opt.step >> 20));
  write_scalar(w, "adam.step_lo", static_cast<double>(opt.step & 0xFFFFF));
  for_each_tensor(opt.first_moment, [&](const TensorInfo& info, std::span<const float> v) {
    if (info.trainable) write_record(w, "adam.m." + info.name, info.dims, v);
  });
  for_each_tensor(opt.second_moment, [&](const TensorInfo& info, std::span<const float> v) {
    if (info.trainable) write_record(w, "adam.v." + info.name, info.dims, v);
  });
  return w.bytes();
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes, const std::string& what) {
  io::ByteReader r(bytes, what);
  r.expect_magic("DMCK");
  if (const auto v = r.u16(); v != kCheckpointVersion) r.fail("unsupported version " + std::to_string(v));
  const std::uint32_t c = r.u32();
  if (c == 0 || c > (1u << 16)) r.fail("implausible channel count " + std::to_string(c));

  std::map<std::string, Record> records;
  while (!r.at_end()) {
    std::string name = r.short_string();
    const std::uint8_t rank = r.u8();
    if (rank > kMaxRank) r.fail("tensor '" + name + "' has rank " + std::to_string(rank));
    Record rec;
    std::uint64_t count = 1;
    for (std::uint8_t i = 0; i < rank; ++i) {
      const std::uint32_t d = r.u32();
      rec.dims.push_back(d);
      count *= d;
      if (count > r.remaining()) r.fail("tensor '" + name + "' larger than file");
    }
    rec.values = r.f32_array(count);
    for (float x : rec.values) {
      if (!std::isfinite(x)) r.fail("tensor '" + name + "' holds a non-finite value");
    }
    if (!records.emplace(std::move(name), std::move(rec)).second) r.fail("duplicate tensor record");
  }

  auto scalar = [&](const std::string& name) -> double {
    const auto it = records.find(name);
    if (it == records.end() || !it->second.dims.empty()) throw FormatError(what + ": missing scalar '" + name + "'");
    return it->second.values[0];
  };
  auto fill = [&](const std::string& name, const TensorInfo& info, std::span<float> dst) {
    const auto it = records.find(name);
    if (it == records.end()) throw FormatError(what + ": missing tensor '" + name + "'");
    if (it->second.dims != info.dims) throw FormatError(what + ": tensor '" + name + "' has wrong shape");
    std::copy(it->second.values.begin(), it->second.values.end(), dst.begin());
    records.erase(it);
  };

  Checkpoint ckpt;
  try {
    const double blocks = scalar("meta.num_blocks");
    if (!(blocks >= 0.0 && blocks <= 64.0) || blocks != std::floor(blocks)) {
      throw FormatError(what + ": implausible block count");
    }
    ModelShape shape;
    shape.c = c;
    shape.num_blocks = static_cast<std::size_t>(blocks);
    shape.leaky_slope = scalar("meta.leaky_slope");
    shape.bn_momentum = scalar("meta.bn_momentum");
    shape.bn_eps = scalar("meta.bn_eps");
    ckpt.mode = scalar("meta.mode") == 0.0 ? Mode::unsupervised : Mode::semi_supervised;
    ckpt.knowledge.use_attention = scalar("meta.use_attention") != 0.0;
    ckpt.knowledge.use_distance = scalar("meta.use_distance") != 0.0;
    ckpt.knowledge.shared_kv = scalar("meta.shared_kv") != 0.0;
    OptimizerConfig oc;
    oc.beta1 = scalar("adam.beta1");
    oc.beta2 = scalar("adam.beta2");
    oc.eps = scalar("adam.eps");
    oc.lr_attention_projection = scalar("adam.lr_attention_projection");
    oc.lr_mlp = scalar("adam.lr_mlp");
    oc.wd_attention_projection = scalar("adam.wd_attention_projection");
    oc.wd_mlp = scalar("adam.wd_mlp");
    const double hi = scalar("adam.step_hi");
    const double lo = scalar("adam.step_lo");
    if (hi < 0.0 || lo < 0.0) throw FormatError(what + ": negative step counter");

    // The model holds at least these many values; checking against what the
    // file carries keeps a corrupted header from driving a huge allocation.
    std::uint64_t stored = 0;
    for (const auto& [name, rec] : records) stored += rec.values.size();
    const std::uint64_t c2 = static_cast<std::uint64_t>(c) * c;
    if (c2 + shape.num_blocks * 9 * c2 > stored) throw FormatError(what + ": header disagrees with tensor records");
    ckpt.params = zeros_like(init_model<float>(shape, 0));
    for_each_tensor(ckpt.params, [&](const TensorInfo& info, std::span<float> v) { fill(info.name, info, v); });
    ckpt.optimizer = make_optimizer(ckpt.params, oc);
    ckpt.optimizer.step = (static_cast<std::uint64_t>(hi) << 20) + static_cast<std::uint64_t>(lo);
    for_each_tensor(ckpt.optimizer.first_moment, [&](const TensorInfo& info, std::span<float> v) {
      if (info.trainable) fill("adam.m." + info.name, info, v);
    });
    for_each_tensor(ckpt.optimizer.second_moment, [&](const TensorInfo& info, std::span<float> v) {
      if (info.trainable) fill("adam.v." + info.name, info, v);
    });
  } catch (const ValidationError& e) {
    throw FormatError(what + ": " + e.what());
  }
  for (const auto& blk : ckpt.params.mlp.blocks) {
    for (float v : blk.bn_running_var) {
      if (v < 0.0f) throw FormatError(what + ": negative BN running variance");
    }
  }
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  io::write_file_atomic(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(io::read_file(path), path.string());
}

}  // namespace dmad
