#include "rom/planner.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace rom {

using nlohmann::json;

std::string slot_key_string(const SlotKey& key) {
  return std::to_string(key.module) + "." + std::string(slot_name(key.slot));
}

SlotKey parse_slot_key(std::string_view text) {
  const auto dot = text.find('.');
  require(dot != std::string_view::npos && dot > 0, ErrorKind::kPlan, "bad plan key '" + std::string(text) + "'");
  SlotKey key;
  const std::string module(text.substr(0, dot));
  require(module.find_first_not_of("0123456789") == std::string::npos, ErrorKind::kPlan,
          "bad module index in plan key '" + std::string(text) + "'");
  key.module = std::stoul(module);
  try {
    key.slot = parse_slot(text.substr(dot + 1));
  } catch (const Error&) {
    fail(ErrorKind::kPlan, "bad slot in plan key '" + std::string(text) + "'");
  }
  return key;
}

std::size_t never_worse_bound(std::size_t d_out, std::size_t d_in) { return d_out * d_in / (d_out + d_in); }

bool CompressionPlan::compresses(const SlotKey& key, const ModelConfig& config) const {
  auto it = ranks.find(key);
  if (it == ranks.end()) return false;
  if (allow_param_increase) return true;
  const SlotShape s = slot_shape(config, key.slot);
  return it->second * (s.d_out + s.d_in) <= s.d_out * s.d_in;
}

std::size_t rank_for_budget(double budget, std::size_t d_out, std::size_t d_in) {
  require(budget > 0.0 && budget <= 1.0, ErrorKind::kArgument,
          "module budget " + std::to_string(budget) + " outside (0, 1]");
  require(d_out >= 1 && d_in >= 1, ErrorKind::kArgument, "layer dimensions must be positive");
  const double exact = budget * static_cast<double>(d_out) * static_cast<double>(d_in) /
                       static_cast<double>(d_out + d_in);
  // Nudge so products that are integers in exact arithmetic do not floor down.
  const auto r = static_cast<std::size_t>(std::floor(exact * (1.0 + 1e-12)));
  return std::max<std::size_t>(r, 1);
}

CompressionPlan make_plan(const ModelConfig& config, std::size_t modules_from_end, double module_budget) {
  config.validate();
  require(modules_from_end >= 1 && modules_from_end <= config.num_layers, ErrorKind::kArgument,
          "modules_from_end " + std::to_string(modules_from_end) + " outside [1, " +
              std::to_string(config.num_layers) + "]");
  CompressionPlan plan;
  plan.modules_from_end = modules_from_end;
  plan.module_budget = module_budget;
  for (std::size_t m = config.num_layers - modules_from_end; m < config.num_layers; ++m) {
    for (Slot s : kAllSlots) {
      const SlotShape shape = slot_shape(config, s);
      plan.ranks[{m, s}] = rank_for_budget(module_budget, shape.d_out, shape.d_in);
    }
  }
  return plan;
}

void validate_plan(const CompressionPlan& plan, const ModelConfig& config) {
  require(plan.modules_from_end <= config.num_layers, ErrorKind::kPlan,
          "plan compresses " + std::to_string(plan.modules_from_end) + " modules but the model has " +
              std::to_string(config.num_layers));
  require(plan.module_budget > 0.0 && plan.module_budget <= 1.0, ErrorKind::kPlan, "module budget outside (0, 1]");
  const std::size_t first = config.num_layers - plan.modules_from_end;
  for (const auto& [key, rank] : plan.ranks) {
    require(key.module < config.num_layers, ErrorKind::kPlan,
            "plan entry " + slot_key_string(key) + " names a module beyond the model's " +
                std::to_string(config.num_layers));
    require(key.module >= first, ErrorKind::kPlan,
            "plan entry " + slot_key_string(key) + " is outside the last " + std::to_string(plan.modules_from_end) +
                " modules");
    const SlotShape shape = slot_shape(config, key.slot);
    require(rank >= 1 && rank <= shape.d_out, ErrorKind::kPlan,
            "plan entry " + slot_key_string(key) + " has rank " + std::to_string(rank) + " outside [1, " +
                std::to_string(shape.d_out) + "]");
  }
}

Preset preset(double overall_budget) {
  if (std::abs(overall_budget - 0.90) < 1e-9) return {8, 0.60};
  if (std::abs(overall_budget - 0.80) < 1e-9) return {12, 0.46};
  if (std::abs(overall_budget - 0.50) < 1e-9) return {24, 0.33};
  std::ostringstream msg;
  msg << "no preset for overall budget " << overall_budget
      << "; presets are 0.90, 0.80 and 0.50, otherwise pass --modules-from-end and --module-budget";
  fail(ErrorKind::kNoPreset, msg.str());
}

CostReport count_params(const ModelConfig& config, const CompressionPlan* plan, std::size_t seq_len) {
  config.validate();
  require(seq_len >= 1, ErrorKind::kArgument, "seq_len must be >= 1");
  const std::size_t d = config.hidden_size;
  const std::size_t head = config.vocab_size * d;

  CostReport report;
  report.seq_len = seq_len;
  report.total_params = config.vocab_size * d + head + d;
  report.matmul_params = head;
  std::size_t per_token = head;
  for (std::size_t m = 0; m < config.num_layers; ++m) {
    ModuleCost cost;
    cost.module = m;
    for (Slot s : kAllSlots) {
      const SlotShape shape = slot_shape(config, s);
      std::size_t params = shape.d_out * shape.d_in;
      const SlotKey key{m, s};
      if (plan != nullptr && plan->compresses(key, config)) params = plan->ranks.at(key) * (shape.d_out + shape.d_in);
      cost.matmul_params += params;
    }
    cost.params = cost.matmul_params + 2 * d;
    const std::size_t attention = 2 * seq_len * d;
    cost.macs = seq_len * (cost.matmul_params + attention);
    report.total_params += cost.params;
    report.matmul_params += cost.matmul_params;
    per_token += cost.matmul_params + attention;
    report.per_module.push_back(cost);
  }
  report.macs = seq_len * per_token;
  return report;
}

std::size_t compute_macs(const ModelConfig& config, const CompressionPlan* plan, std::size_t seq_len) {
  return count_params(config, plan, seq_len).macs;
}

CostReport archive_costs(const TensorArchive& archive, const ModelConfig& config, std::size_t seq_len) {
  config.validate();
  require(seq_len >= 1, ErrorKind::kArgument, "seq_len must be >= 1");
  CostReport report;
  report.seq_len = seq_len;
  for (const auto& [name, info] : archive.entries()) report.total_params += info.element_count();
  const std::size_t head = archive.info("lm_head.weight").element_count();
  report.matmul_params = head;
  std::size_t per_token = head;
  const std::size_t d = config.hidden_size;
  for (std::size_t m = 0; m < config.num_layers; ++m) {
    ModuleCost cost;
    cost.module = m;
    for (Slot s : kAllSlots) {
      const std::string name = slot_tensor_name(m, s);
      const std::string w1 = name + std::string(kLowRankW1Suffix);
      if (archive.contains(w1)) {
        cost.matmul_params +=
            archive.info(w1).element_count() + archive.info(name + std::string(kLowRankW2Suffix)).element_count();
      } else {
        cost.matmul_params += archive.info(name).element_count();
      }
    }
    cost.params = cost.matmul_params + 2 * d;
    const std::size_t attention = 2 * seq_len * d;
    cost.macs = seq_len * (cost.matmul_params + attention);
    report.matmul_params += cost.matmul_params;
    per_token += cost.matmul_params + attention;
    report.per_module.push_back(cost);
  }
  report.macs = seq_len * per_token;
  return report;
}

double overall_budget_of(const CompressionPlan& plan, const ModelConfig& config) {
  return static_cast<double>(count_params(config, &plan).total_params) /
         static_cast<double>(count_params(config, nullptr).total_params);
}

std::vector<BudgetCandidate> search_budget(const ModelConfig& config, double overall) {
  require(overall > 0.0 && overall <= 1.0, ErrorKind::kArgument, "overall budget outside (0, 1]");
  std::vector<std::size_t> ks;
  for (std::size_t k = 4; k <= config.num_layers; k += 4) ks.push_back(k);
  if (ks.empty() || ks.back() != config.num_layers) ks.push_back(config.num_layers);

  std::vector<BudgetCandidate> out;
  for (std::size_t k : ks) {
    auto achieved = [&](double b) { return overall_budget_of(make_plan(config, k, b), config); };
    double lo = 1e-6;
    double hi = 1.0;
    if (achieved(lo) > overall) continue;
    if (achieved(hi) <= overall) {
      out.push_back({k, hi, achieved(hi)});
      continue;
    }
    for (int it = 0; it < 60; ++it) {
      const double mid = 0.5 * (lo + hi);
      (achieved(mid) <= overall ? lo : hi) = mid;
    }
    out.push_back({k, lo, achieved(lo)});
  }
  return out;
}

std::string plan_to_json(const CompressionPlan& plan) {
  json ranks = json::object();
  for (const auto& [key, rank] : plan.ranks) ranks[slot_key_string(key)] = rank;
  json j = {{"modules_from_end", plan.modules_from_end}, {"module_budget", plan.module_budget}, {"ranks", ranks}};
  if (plan.allow_param_increase) j["allow_param_increase"] = true;
  return j.dump(2);
}

CompressionPlan plan_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorKind::kFormat, std::string("plan is not valid JSON: ") + e.what());
  }
  if (!j.is_object() || !j.contains("modules_from_end") || !j.contains("module_budget") || !j.contains("ranks") ||
      !j.at("modules_from_end").is_number_unsigned() || !j.at("module_budget").is_number() ||
      !j.at("ranks").is_object())
    fail(ErrorKind::kFormat, "plan needs modules_from_end, module_budget and a ranks object");
  CompressionPlan plan;
  plan.modules_from_end = j.at("modules_from_end").get<std::size_t>();
  plan.module_budget = j.at("module_budget").get<double>();
  if (j.contains("allow_param_increase")) {
    if (!j.at("allow_param_increase").is_boolean()) fail(ErrorKind::kFormat, "allow_param_increase must be a boolean");
    plan.allow_param_increase = j.at("allow_param_increase").get<bool>();
  }
  for (const auto& [name, rank] : j.at("ranks").items()) {
    if (!rank.is_number_unsigned()) fail(ErrorKind::kFormat, "rank for '" + name + "' must be a positive integer");
    plan.ranks[parse_slot_key(name)] = rank.get<std::size_t>();
  }
  return plan;
}

CompressionPlan load_plan(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kIo, "cannot open plan " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return plan_from_json(buffer.str());
}

void save_plan(const std::filesystem::path& path, const CompressionPlan& plan) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot write plan " + path.string());
  out << plan_to_json(plan) << '\n';
}

}  // namespace rom
