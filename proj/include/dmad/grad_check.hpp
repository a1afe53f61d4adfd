#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dmad/score_model.hpp"

namespace dmad {

struct GradCheckSpec {
  std::size_t c = 4;
  std::size_t patches = 3;            // N, patches of the normal image
  std::size_t anomalous_patches = 2;  // rows of the o_a set; 0 drops the term
  std::size_t num_blocks = 1;
  std::size_t normal_bank_rows = 6;
  std::size_t abnormal_bank_rows = 4;
  KnowledgeMode knowledge;  // attention and distance both on
  LossConfig loss{0.5, 15.0, 0.5};
  double noise_std = 0.1;
  double step = 1e-3;
  // Combine central differences at h and h/2 to cancel the O(h^2) term.
  bool richardson = true;
  // Denominator floor of the relative error, so gradients that are zero up to
  // rounding do not divide by ~0.
  double denominator_floor = 1e-6;
  std::uint64_t seed = 0;

  // Test hook: multiply the analytic gradient of every tensor whose name
  // starts with this prefix by corrupt_factor.
  std::string corrupt_prefix;
  double corrupt_factor = 1.0;
};

struct GroupError {
  std::string group;  // "projection", "attention" or "mlp"
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::string worst_tensor;
  std::size_t worst_index = 0;
};

struct GradCheckReport {
  std::vector<GroupError> groups;
  std::size_t kink_retries = 0;
  std::size_t skipped = 0;  // coordinates whose stencil crossed a kink even at the smallest step
  double max_rel_error() const;
};

GradCheckReport grad_check(const GradCheckSpec& spec);

}  // namespace dmad
