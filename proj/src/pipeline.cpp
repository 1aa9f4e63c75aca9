#include "rom/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <set>

#include <nlohmann/json.hpp>

#include "rom/linalg.hpp"

namespace rom {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::size_t state_macs(const ModelState& state, std::size_t seq_len) {
  std::size_t per_token = state.lm_head.param_count();
  for (const auto& layer : state.layers) {
    for (const auto& l : layer.linears) per_token += l.param_count();
    per_token += 2 * seq_len * state.config.hidden_size;
  }
  return seq_len * per_token;
}

std::string where(std::size_t module, Slot slot) {
  return "module " + std::to_string(module) + " slot " + std::string(slot_name(slot));
}

}  // namespace

std::size_t planned_slot_bytes(const ModelConfig& config, Slot slot, std::size_t rank, std::size_t tokens) {
  const SlotShape s = slot_shape(config, slot);
  const std::size_t floats = tokens * std::max(s.d_in, s.d_out) + s.d_out * s.d_in + rank * (s.d_out + s.d_in);
  const std::size_t doubles = 2 * s.d_out * s.d_out;
  return 4 * floats + 8 * doubles;
}

CompressionReport compress(ModelState& state, const CompressionPlan& plan, const TokenBatch& calib,
                           const CompressOptions& options) {
  const auto start = Clock::now();
  const ModelConfig& config = state.config;
  state.validate();
  validate_plan(plan, config);
  require(calib.seq_len <= config.max_seq, ErrorKind::kArgument,
          "calibration seq_len " + std::to_string(calib.seq_len) + " exceeds max_seq " +
              std::to_string(config.max_seq));

  CompressionReport report;
  report.mac_seq_len = options.mac_seq_len;
  report.params_before = state.param_count();
  report.macs_before = state_macs(state, options.mac_seq_len);

  std::set<std::size_t> modules;
  for (const auto& [key, rank] : plan.ranks) modules.insert(key.module);

  Matrix hidden;
  std::size_t hidden_layer = 0;
  if (options.cache_block_outputs && !modules.empty()) hidden = embed_tokens(state, calib);

  for (std::size_t m : modules) {
    if (options.cache_block_outputs) {
      for (; hidden_layer < m; ++hidden_layer)
        hidden = block_forward(config, state.layers[hidden_layer], hidden, calib.seq_len, Tap::kBlockOutput);
    }
    auto activations_at = [&](Tap tap) {
      return options.cache_block_outputs ? block_forward(config, state.layers[m], hidden, calib.seq_len, tap)
                                         : forward_hidden(state, calib, m, tap);
    };

    std::optional<Matrix> inputs;
    Tap inputs_tap = Tap::kBlockOutput;
    for (Slot slot : kAllSlots) {
      const SlotKey key{m, slot};
      auto planned = plan.ranks.find(key);
      if (planned == plan.ranks.end()) continue;
      const auto slot_start = Clock::now();

      const SlotShape shape = slot_shape(config, slot);
      LayerRecord record;
      record.module = m;
      record.slot = slot;
      record.rank = planned->second;
      record.params_before = state.layers[m][slot].param_count();
      record.params_after = record.params_before;

      if (!plan.compresses(key, config)) {
        record.skipped = true;
        record.wall_seconds = seconds_since(slot_start);
        if (options.progress) options.progress(record);
        report.layers.push_back(record);
        continue;
      }
      require(!state.layers[m][slot].is_low_rank(), ErrorKind::kPlan, where(m, slot) + " is already low-rank");

      const Matrix& w = state.layers[m][slot].as_dense().w;
      DecompositionResult result;
      try {
        const Tap tap = input_tap(slot);
        if (!inputs || inputs_tap != tap) {
          inputs = activations_at(tap);
          inputs_tap = tap;
        }
        if (options.observer) options.observer(SlotEvent{m, slot, *inputs, state});
        result = decompose_layer(w, *inputs, record.rank, options.eigen_method);
        record.reconstruction_error = reconstruction_error(result, w, *inputs);
      } catch (const Error& e) {
        throw Error(e.kind(), where(m, slot) + ": " + e.what());
      }
      record.retained_energy = result.retained_energy;
      record.discarded_energy = result.discarded_energy;
      record.sample_count = result.sample_count;
      record.params_after = record.rank * (shape.d_out + shape.d_in);
      report.peak_planned_bytes =
          std::max(report.peak_planned_bytes, planned_slot_bytes(config, slot, record.rank, calib.token_count()));

      replace_layer(state, m, slot, std::move(result.w1), std::move(result.w2));
      record.wall_seconds = seconds_since(slot_start);
      if (options.progress) options.progress(record);
      report.layers.push_back(record);
    }

    if (options.cache_block_outputs) {
      hidden = block_forward(config, state.layers[m], hidden, calib.seq_len, Tap::kBlockOutput);
      hidden_layer = m + 1;
    }
  }

  report.params_after = state.param_count();
  report.macs_after = state_macs(state, options.mac_seq_len);
  report.total_wall_seconds = seconds_since(start);
  return report;
}

namespace {

DriftStats drift_between(const Matrix& a, const Matrix& b) {
  DriftStats stats;
  auto av = a.values();
  auto bv = b.values();
  double sq = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double d = static_cast<double>(av[i]) - static_cast<double>(bv[i]);
    stats.max_abs = std::max(stats.max_abs, std::abs(d));
    sq += d * d;
  }
  stats.frobenius = std::sqrt(sq);
  return stats;
}

}  // namespace

DriftProfile output_drift(const ModelState& original, const ModelState& compressed, const TokenBatch& batch) {
  require(original.config == compressed.config, ErrorKind::kArgument, "models have different configs");
  const ModelConfig& config = original.config;
  DriftProfile profile;
  Matrix a = embed_tokens(original, batch);
  Matrix b = embed_tokens(compressed, batch);
  for (std::size_t i = 0; i < config.num_layers; ++i) {
    a = block_forward(config, original.layers[i], a, batch.seq_len, Tap::kBlockOutput);
    b = block_forward(config, compressed.layers[i], b, batch.seq_len, Tap::kBlockOutput);
    profile.block_outputs.push_back(drift_between(a, b));
  }
  profile.logits = drift_between(original.lm_head.apply(rms_norm(a, original.final_norm, config.rms_eps)),
                                 compressed.lm_head.apply(rms_norm(b, compressed.final_norm, config.rms_eps)));
  return profile;
}

bool VerificationSummary::passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.passed; });
}

VerificationSummary verify(const ModelState& original, const ModelState& compressed, const CompressionPlan& plan,
                           const TokenBatch& batch, const VerifyOptions& options) {
  VerificationSummary summary;
  auto add = [&summary](std::string name, bool ok, std::string detail) {
    summary.checks.push_back({std::move(name), ok, std::move(detail)});
  };
  try {
    const bool same_config = original.config == compressed.config;
    add("config", same_config, same_config ? "identical" : "configs differ");
    if (!same_config) return summary;
    const ModelConfig& config = original.config;
    try {
      validate_plan(plan, config);
      add("plan", true, std::to_string(plan.ranks.size()) + " planned slots");
    } catch (const Error& e) {
      add("plan", false, e.what());
      return summary;
    }

    std::string orth_detail, bound_detail, rank_detail, purity_detail;
    double worst_orth = 0.0;
    std::size_t predicted_savings = 0;
    for (std::size_t m = 0; m < config.num_layers; ++m) {
      for (Slot s : kAllSlots) {
        const SlotKey key{m, s};
        const LinearRepr& before = original.layers[m][s];
        const LinearRepr& after = compressed.layers[m][s];
        const SlotShape shape = slot_shape(config, s);
        if (plan.compresses(key, config)) {
          const std::size_t rank = plan.ranks.at(key);
          predicted_savings += before.param_count();
          predicted_savings -= rank * (shape.d_out + shape.d_in);
          if (!after.is_low_rank() || after.rank() != rank) {
            if (rank_detail.empty())
              rank_detail = slot_key_string(key) + " expected rank " + std::to_string(rank) + ", found " +
                            (after.is_low_rank() ? std::to_string(after.rank()) : std::string("dense"));
            continue;
          }
        } else if (!(before == after) && purity_detail.empty()) {
          purity_detail = slot_key_string(key) + " differs from the original";
        }
        if (!after.is_low_rank()) continue;
        const Matrix& w1 = after.as_low_rank().w1;
        const MatrixD gram = matmul_nt_wide(w1.transposed(), w1.transposed());
        const double dev = max_abs_diff(gram, MatrixD::identity(gram.rows()));
        if (dev > worst_orth) worst_orth = dev;
        if (dev > options.orthonormality_tolerance && orth_detail.empty())
          orth_detail = slot_key_string(key) + " has w1^T w1 off identity by " + std::to_string(dev);
        if (!plan.allow_param_increase && after.param_count() > shape.d_out * shape.d_in && bound_detail.empty())
          bound_detail = slot_key_string(key) + " has more parameters than the dense layer";
      }
    }
    const bool norms_equal = original.embed == compressed.embed && original.final_norm == compressed.final_norm &&
                             original.lm_head == compressed.lm_head &&
                             std::equal(original.layers.begin(), original.layers.end(), compressed.layers.begin(),
                                        [](const DecoderWeights& a, const DecoderWeights& b) {
                                          return a.attn_norm == b.attn_norm && a.mlp_norm == b.mlp_norm;
                                        });
    if (!norms_equal && purity_detail.empty()) purity_detail = "embeddings, norms or lm_head changed";

    add("orthonormal_w1", orth_detail.empty(),
        orth_detail.empty() ? "max deviation " + std::to_string(worst_orth) : orth_detail);
    add("never_worse", bound_detail.empty(), bound_detail.empty() ? "all factor pairs within bound" : bound_detail);
    add("plan_ranks", rank_detail.empty(), rank_detail.empty() ? "ranks match plan" : rank_detail);
    add("untouched_bit_exact", purity_detail.empty(),
        purity_detail.empty() ? "unplanned tensors identical" : purity_detail);

    const std::size_t expected = original.param_count() - predicted_savings;
    const std::size_t actual = compressed.param_count();
    add("planner_totals", expected == actual,
        "params " + std::to_string(actual) + ", planner predicts " + std::to_string(expected));

    summary.drift = output_drift(original, compressed, batch);
    const double drift = summary.drift.logits.max_abs;
    const bool drift_ok = options.max_logit_drift < 0.0 || drift <= options.max_logit_drift;
    add("logit_drift", drift_ok,
        "max-abs " + std::to_string(drift) + ", frobenius " + std::to_string(summary.drift.logits.frobenius));
  } catch (const std::exception& e) {
    add("evaluation", false, e.what());
  }
  return summary;
}

std::string report_to_json(const CompressionReport& report, bool include_timings) {
  using nlohmann::json;
  json layers = json::array();
  for (const LayerRecord& r : report.layers) {
    json j = {{"module", r.module},
              {"slot", slot_name(r.slot)},
              {"rank", r.rank},
              {"skipped", r.skipped},
              {"retained_energy", r.retained_energy},
              {"discarded_energy", r.discarded_energy},
              {"reconstruction_error", r.reconstruction_error},
              {"sample_count", r.sample_count},
              {"params_before", r.params_before},
              {"params_after", r.params_after}};
    if (include_timings) j["wall_seconds"] = r.wall_seconds;
    layers.push_back(std::move(j));
  }
  json totals = {{"params_before", report.params_before}, {"params_after", report.params_after},
                 {"macs_before", report.macs_before},     {"macs_after", report.macs_after},
                 {"mac_seq_len", report.mac_seq_len},     {"peak_planned_bytes", report.peak_planned_bytes}};
  if (include_timings) totals["total_wall_seconds"] = report.total_wall_seconds;
  return json{{"layers", layers}, {"totals", totals}}.dump(2);
}

}  // namespace rom
