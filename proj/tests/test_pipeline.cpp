#include <doctest.h>

#include <nlohmann/json.hpp>

#include "rom/linalg.hpp"
#include "rom/pipeline.hpp"
#include "rom/toy.hpp"
#include "support.hpp"

using namespace rom;
using rom::test::toy_config;

namespace {

CompressionPlan full_rank_plan(const ModelConfig& c) {
  CompressionPlan p;
  p.modules_from_end = c.num_layers;
  p.module_budget = 1.0;
  p.allow_param_increase = true;
  for (std::size_t m = 0; m < c.num_layers; ++m)
    for (Slot s : kAllSlots) p.ranks[{m, s}] = slot_shape(c, s).d_out;
  return p;
}

double total_error(const CompressionReport& r) {
  double sum = 0;
  for (const auto& l : r.layers) sum += l.reconstruction_error;
  return sum;
}

}  // namespace

TEST_CASE("full-rank compression leaves logits unchanged") {
  const ModelConfig c = toy_config(2);
  const ModelState original = make_toy_model(c, 1, 0.3f);
  ModelState state = original;
  const TokenBatch calib = make_token_batch(8, 16, c.vocab_size, 2);
  const CompressionReport report = compress(state, full_rank_plan(c), calib);
  CHECK(report.layers.size() == 14);
  for (const auto& l : report.layers) CHECK_FALSE(l.skipped);
  const TokenBatch held = make_token_batch(4, 16, c.vocab_size, 3);
  CHECK(max_abs_diff(logits(state, held), logits(original, held)) <= 1e-3);

  VerifyOptions opts;
  opts.max_logit_drift = 1e-3;
  CHECK(verify(original, state, full_rank_plan(c), held, opts).passed());
}

TEST_CASE("one module at half budget") {
  const ModelConfig c = toy_config(2);
  const ModelState original = make_toy_model(c, 4, 0.3f);
  ModelState state = original;
  const CompressionPlan plan = make_plan(c, 1, 0.5);
  const CompressionReport report = compress(state, plan, make_token_batch(8, 16, c.vocab_size, 5));
  REQUIRE(report.layers.size() == 7);
  std::size_t saved = 0;
  for (std::size_t i = 0; i < 7; ++i) {
    CHECK(report.layers[i].slot == kAllSlots[i]);
    CHECK(report.layers[i].module == 1);
    CHECK(report.layers[i].sample_count == 128);
    CHECK(report.layers[i].reconstruction_error ==
          doctest::Approx(128 * report.layers[i].discarded_energy).epsilon(1e-4));
    saved += report.layers[i].params_before - report.layers[i].params_after;
  }
  CHECK(report.params_before - report.params_after == saved);
  CHECK(report.params_after == count_params(c, &plan).total_params);
  CHECK(report.macs_after == count_params(c, &plan).macs);
  CHECK(report.macs_before == count_params(c, nullptr).macs);
  CHECK(state.layers[0] == original.layers[0]);
  CHECK(state.embed == original.embed);
  CHECK(state.lm_head == original.lm_head);
}

TEST_CASE("larger budgets give no larger total error on the same module") {
  const ModelConfig c = toy_config(2);
  const ModelState original = make_toy_model(c, 6, 0.3f);
  const TokenBatch calib = make_token_batch(8, 16, c.vocab_size, 7);
  double previous = INFINITY;
  for (double b : {0.3, 0.6, 1.0}) {
    ModelState s = original;
    const double err = total_error(compress(s, make_plan(c, 1, b), calib));
    CHECK(err <= previous * (1 + 1e-6));
    previous = err;
  }
}

TEST_CASE("each slot is decomposed from the partially compressed state") {
  const ModelConfig c = toy_config(3);
  ModelState state = make_toy_model(c, 8, 0.3f);
  const TokenBatch calib = make_token_batch(4, 12, c.vocab_size, 9);
  const CompressionPlan plan = make_plan(c, 2, 0.5);
  std::vector<SlotKey> done;
  std::size_t events = 0;
  CompressOptions options;
  options.observer = [&](const SlotEvent& e) {
    ++events;
    CHECK(e.inputs == forward_hidden(e.state, calib, e.module, input_tap(e.slot)));
    for (const SlotKey& k : done) CHECK(e.state.layers[k.module][k.slot].is_low_rank());
    CHECK_FALSE(e.state.layers[e.module][e.slot].is_low_rank());
    done.push_back({e.module, e.slot});
  };
  compress(state, plan, calib, options);
  CHECK(events == 14);
}

TEST_CASE("block-output cache and full recomputation agree bit for bit") {
  const ModelConfig c = toy_config(3);
  const ModelState original = make_toy_model(c, 10, 0.3f);
  const TokenBatch calib = make_token_batch(4, 12, c.vocab_size, 11);
  const CompressionPlan plan = make_plan(c, 2, 0.5);
  ModelState a = original, b = original;
  CompressOptions no_cache;
  no_cache.cache_block_outputs = false;
  const auto ra = compress(a, plan, calib);
  const auto rb = compress(b, plan, calib, no_cache);
  CHECK(a == b);
  CHECK(report_to_json(ra) == report_to_json(rb));
}

TEST_CASE("compression is deterministic across runs") {
  const ModelConfig c = toy_config(2);
  const ModelState original = make_toy_model(c, 12, 0.3f);
  const TokenBatch calib = make_token_batch(16, 16, c.vocab_size, 13);
  ModelState a = original, b = original;
  const auto ra = compress(a, make_plan(c, 2, 0.6), calib);
  const auto rb = compress(b, make_plan(c, 2, 0.6), calib);
  CHECK(a == b);
  CHECK(report_to_json(ra) == report_to_json(rb));
  const auto j = nlohmann::json::parse(report_to_json(ra));
  CHECK(j["layers"].size() == 14);
  CHECK_FALSE(j["layers"][0].contains("wall_seconds"));
  CHECK(nlohmann::json::parse(report_to_json(ra, true))["layers"][0].contains("wall_seconds"));
}

TEST_CASE("ranks above the never-worse bound are skipped") {
  const ModelConfig c = toy_config(2);
  ModelState state = make_toy_model(c, 14, 0.3f);
  CompressionPlan plan = make_plan(c, 1, 0.5);
  plan.ranks[{1, Slot::kQ}] = 6;
  const auto report = compress(state, plan, make_token_batch(4, 8, c.vocab_size, 15));
  CHECK(report.layers.front().skipped);
  CHECK_FALSE(state.layers[1][Slot::kQ].is_low_rank());
  CHECK(state.layers[1][Slot::kK].is_low_rank());
  CHECK(report.params_after == count_params(c, &plan).total_params);
}

TEST_CASE("errors carry module and slot context") {
  const ModelConfig c = toy_config(2);
  ModelState state = make_toy_model(c, 16);
  CompressionPlan plan = make_plan(c, 1, 0.5);
  plan.ranks[{0, Slot::kQ}] = 2;
  CHECK_THROWS_AS(compress(state, plan, make_token_batch(2, 4, c.vocab_size, 1)), Error);
  TokenBatch too_long = make_token_batch(1, c.max_seq + 1, c.vocab_size, 1);
  CHECK_THROWS_AS(compress(state, make_plan(c, 1, 0.5), too_long), Error);

  ModelState nan_state = make_toy_model(c, 16);
  std::vector<float> w(64, 3e38f);
  nan_state.layers[1][Slot::kQ] = LinearRepr::dense(Matrix(8, 8, w));
  try {
    compress(nan_state, make_plan(c, 1, 0.5), make_token_batch(2, 4, c.vocab_size, 1));
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("module 1 slot") != std::string::npos);
  }
}

TEST_CASE("verify") {
  const ModelConfig c = toy_config(2);
  const ModelState original = make_toy_model(c, 17, 0.3f);
  const TokenBatch held = make_token_batch(4, 8, c.vocab_size, 18);

  const VerificationSummary same = verify(original, original, CompressionPlan{}, held);
  CHECK(same.passed());
  CHECK(same.drift.logits.max_abs == 0.0);

  ModelState compressed = original;
  const CompressionPlan plan = make_plan(c, 1, 0.5);
  compress(compressed, plan, make_token_batch(8, 8, c.vocab_size, 19));
  CHECK(verify(original, compressed, plan, held).passed());

  ModelState corrupt = compressed;
  auto lr = corrupt.layers[1][Slot::kK].as_low_rank();
  lr.w1(0, 0) += 0.5f;
  corrupt.layers[1][Slot::kK] = LinearRepr::low_rank(lr.w1, lr.w2);
  const VerificationSummary bad = verify(original, corrupt, plan, held);
  CHECK_FALSE(bad.passed());
  for (const auto& check : bad.checks)
    if (check.name == "orthonormal_w1") CHECK_FALSE(check.passed);

  ModelState touched = compressed;
  auto dense = touched.layers[0][Slot::kV].as_dense().w;
  dense(1, 1) += 1e-3f;
  touched.layers[0][Slot::kV] = LinearRepr::dense(dense);
  CHECK_FALSE(verify(original, touched, plan, held).passed());

  VerifyOptions strict;
  strict.max_logit_drift = 1e-12;
  CHECK_FALSE(verify(original, compressed, plan, held, strict).passed());
}

TEST_CASE("drift is local to compressed blocks and compounds with depth") {
  const ModelConfig c = toy_config(3);
  const ModelState original = make_toy_model(c, 20, 0.3f);
  const TokenBatch calib = make_token_batch(8, 16, c.vocab_size, 21);

  const DriftProfile none = output_drift(original, original, calib);
  for (const auto& d : none.block_outputs) CHECK(d.max_abs == 0.0);

  ModelState last = original;
  compress(last, make_plan(c, 1, 0.4), calib);
  const DriftProfile local = output_drift(original, last, calib);
  CHECK(local.block_outputs[0].max_abs == 0.0);
  CHECK(local.block_outputs[1].max_abs == 0.0);
  CHECK(local.block_outputs[2].max_abs > 0.0);

  ModelState two = original;
  compress(two, make_plan(c, 2, 0.4), calib);
  const DriftProfile deep = output_drift(original, two, calib);
  CHECK(deep.block_outputs[0].max_abs == 0.0);
  CHECK(deep.block_outputs[2].frobenius >= deep.block_outputs[1].frobenius);
}

TEST_CASE("planned per-slot footprint does not depend on depth") {
  const ModelConfig shallow = toy_config(2);
  const ModelConfig deep = toy_config(12);
  CHECK(planned_slot_bytes(shallow, Slot::kDown, 3, 100) == planned_slot_bytes(deep, Slot::kDown, 3, 100));
  CHECK(planned_slot_bytes(shallow, Slot::kDown, 3, 200) > planned_slot_bytes(shallow, Slot::kDown, 3, 100));
}
