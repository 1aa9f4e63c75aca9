#pragma once

// Sequential, error-aware compression of a model.
//
// Modules are processed in ascending order and, inside a module, in dataflow
// order: q, k, v (sharing one input), then o, then gate and up (sharing one
// input), then down. Every slot's calibration inputs come from the model as
// it stands at that moment, so later slots see the error introduced by the
// ones already factorised.

#include <chrono>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "rom/modelgraph.hpp"
#include "rom/planner.hpp"
#include "rom/romcore.hpp"

namespace rom {

struct LayerRecord {
  std::size_t module = 0;
  Slot slot = Slot::kQ;
  std::size_t rank = 0;
  bool skipped = false;  // planned rank above the never-worse bound; kept dense
  double retained_energy = 0.0;
  double discarded_energy = 0.0;
  double reconstruction_error = 0.0;  // ||Y - Y_hat||_F^2 on the calibration inputs
  std::size_t sample_count = 0;
  std::size_t params_before = 0;
  std::size_t params_after = 0;
  double wall_seconds = 0.0;
};

struct CompressionReport {
  std::vector<LayerRecord> layers;
  std::size_t params_before = 0;
  std::size_t params_after = 0;
  std::size_t macs_before = 0;
  std::size_t macs_after = 0;
  std::size_t mac_seq_len = kDefaultMacSeqLen;
  std::size_t peak_planned_bytes = 0;
  double total_wall_seconds = 0.0;
};

// Passed to the observer just before a slot is decomposed. `state` is the
// partially compressed model whose forward produced `inputs`.
struct SlotEvent {
  std::size_t module;
  Slot slot;
  const Matrix& inputs;
  const ModelState& state;
};

struct CompressOptions {
  // Reuse the previous block's output instead of re-running the whole prefix
  // for every tap. Both modes give bit-identical results.
  bool cache_block_outputs = true;
  std::size_t mac_seq_len = kDefaultMacSeqLen;
  EigenMethod eigen_method = EigenMethod::kAuto;
  std::function<void(const SlotEvent&)> observer;
  std::function<void(const LayerRecord&)> progress;
};

CompressionReport compress(ModelState& state, const CompressionPlan& plan, const TokenBatch& calib,
                           const CompressOptions& options = {});

// Working-set bound for decomposing one slot: calibration activations, the
// dense matrix and its factors, and the d_out x d_out moment and eigenvectors
// in double.
std::size_t planned_slot_bytes(const ModelConfig& config, Slot slot, std::size_t rank, std::size_t tokens);

struct DriftStats {
  double max_abs = 0.0;
  double frobenius = 0.0;
};

struct DriftProfile {
  std::vector<DriftStats> block_outputs;  // one per block
  DriftStats logits;
};

DriftProfile output_drift(const ModelState& original, const ModelState& compressed, const TokenBatch& batch);

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct VerificationSummary {
  std::vector<CheckResult> checks;
  DriftProfile drift;
  bool passed() const;
};

struct VerifyOptions {
  double orthonormality_tolerance = 1e-5;
  // Logit drift ceiling; negative disables the check.
  double max_logit_drift = -1.0;
};

// Failures are reported in the summary, never thrown.
VerificationSummary verify(const ModelState& original, const ModelState& compressed, const CompressionPlan& plan,
                           const TokenBatch& batch, const VerifyOptions& options = {});

// Report serialisation. Wall-clock fields are left out unless requested so
// the default output is reproducible byte for byte.
std::string report_to_json(const CompressionReport& report, bool include_timings = false);

}  // namespace rom
