#pragma once

// .dmckpt: model tensors, BN running statistics, optimizer moments and step
// counter, plus scalar metadata, as named f32 tensor records.

#include <filesystem>
#include <span>
#include <vector>

#include "dmad/knowledge.hpp"
#include "dmad/memory_bank.hpp"
#include "dmad/optimizer.hpp"
#include "dmad/score_model.hpp"

namespace dmad {

struct Checkpoint {
  ModelParams<float> params;
  KnowledgeMode knowledge;
  Mode mode = Mode::unsupervised;
  OptimizerState<float> optimizer;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes, const std::string& what = "checkpoint");
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace dmad
