#pragma once

// Rank planning and parameter / MAC accounting.
//
// Only the last k decoder modules are compressed, all seven projections of
// each with the same module budget b. A slot of shape d_out x d_in gets
//   r = floor(b * d_out * d_in / (d_out + d_in))
// so that its factor pair keeps a fraction b of the dense parameters.

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <utility>
#include <vector>

#include "rom/modelgraph.hpp"

namespace rom {

struct SlotKey {
  std::size_t module = 0;
  Slot slot = Slot::kQ;

  auto operator<=>(const SlotKey&) const = default;
};

std::string slot_key_string(const SlotKey& key);  // "<module>.<slot>"
SlotKey parse_slot_key(std::string_view text);

struct CompressionPlan {
  std::size_t modules_from_end = 0;
  double module_budget = 1.0;
  std::map<SlotKey, std::size_t> ranks;
  // Hand-edited plans may ask for ranks above the never-worse bound; those
  // slots stay dense unless this is set.
  bool allow_param_increase = false;

  // Whether the slot is factorised when this plan is executed.
  bool compresses(const SlotKey& key, const ModelConfig& config) const;

  friend bool operator==(const CompressionPlan&, const CompressionPlan&) = default;
};

std::size_t rank_for_budget(double budget, std::size_t d_out, std::size_t d_in);

// Largest rank whose factor pair does not exceed the dense parameter count.
std::size_t never_worse_bound(std::size_t d_out, std::size_t d_in);

CompressionPlan make_plan(const ModelConfig& config, std::size_t modules_from_end, double module_budget);

// Throws kPlan if the plan names modules outside the last k or ranks outside
// [1, d_out].
void validate_plan(const CompressionPlan& plan, const ModelConfig& config);

struct Preset {
  std::size_t modules_from_end;
  double module_budget;
};

// 0.90 -> (8, 0.60), 0.80 -> (12, 0.46), 0.50 -> (24, 0.33). Throws kNoPreset
// for any other overall budget.
Preset preset(double overall_budget);
inline constexpr std::array<double, 3> kPresetBudgets{0.90, 0.80, 0.50};

struct ModuleCost {
  std::size_t module = 0;
  std::size_t params = 0;         // seven projections + two norms
  std::size_t matmul_params = 0;  // seven projections
  std::size_t macs = 0;
};

struct CostReport {
  std::size_t total_params = 0;
  std::size_t matmul_params = 0;  // every linear layer including lm_head
  std::size_t macs = 0;
  std::size_t seq_len = 0;
  std::vector<ModuleCost> per_module;
};

inline constexpr std::size_t kDefaultMacSeqLen = 64;

// plan may be null for the uncompressed model.
CostReport count_params(const ModelConfig& config, const CompressionPlan* plan,
                        std::size_t seq_len = kDefaultMacSeqLen);

// Multiply-accumulates for one forward pass over seq_len tokens: every linear
// layer's per-token MACs plus 2 * seq_len * d per block for attention scores
// and context, times seq_len.
std::size_t compute_macs(const ModelConfig& config, const CompressionPlan* plan, std::size_t seq_len);

// Costs of a model as stored: total_params sums every tensor in the archive,
// and each slot is counted dense or low-rank according to what is present.
CostReport archive_costs(const TensorArchive& archive, const ModelConfig& config,
                         std::size_t seq_len = kDefaultMacSeqLen);

double overall_budget_of(const CompressionPlan& plan, const ModelConfig& config);

struct BudgetCandidate {
  std::size_t modules_from_end;
  double module_budget;
  double achieved;
};

// For k in {4, 8, ..., L} (and L itself) find the largest module budget whose
// plan stays within `overall`. Ks that cannot reach it are omitted.
std::vector<BudgetCandidate> search_budget(const ModelConfig& config, double overall);

CompressionPlan load_plan(const std::filesystem::path& path);
void save_plan(const std::filesystem::path& path, const CompressionPlan& plan);
std::string plan_to_json(const CompressionPlan& plan);
CompressionPlan plan_from_json(const std::string& text);

}  // namespace rom
