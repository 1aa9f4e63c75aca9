#include "rom/cli.hpp"

#include <CLI11.hpp>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>

#include <nlohmann/json.hpp>

#include "rom/kernels.hpp"
#include "rom/linalg.hpp"
#include "rom/pipeline.hpp"
#include "rom/planner.hpp"
#include "rom/toy.hpp"

namespace rom::cli {

namespace {

constexpr const char* kToolVersion = "romc 0.1.0";

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kIo:
    case ErrorKind::kFormat:
    case ErrorKind::kIntegrity:
    case ErrorKind::kLookup:
    case ErrorKind::kUnsupportedShape: return kExitIo;
    default: return kExitFailure;
  }
}

std::string fixed(double v, int digits) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

std::string human(std::size_t n, double unit, const char* suffix) {
  return fixed(static_cast<double>(n) / unit, 2) + suffix;
}

std::string human_params(std::size_t n) {
  return n >= 1'000'000'000 ? human(n, 1e9, "B") : n >= 1'000'000 ? human(n, 1e6, "M") : std::to_string(n);
}

std::string human_macs(std::size_t n) {
  return n >= 1'000'000'000 ? human(n, 1e9, "G") : n >= 1'000'000 ? human(n, 1e6, "M") : std::to_string(n);
}

ModelConfig resolve_config(const std::string& spec) {
  if (spec == "llama-7b") return llama7b_config();
  return load_config(spec);
}

void print_costs(std::ostream& out, const CostReport& base, const CostReport& after) {
  out << "              " << std::setw(24) << "params" << std::setw(24) << "MACs (seq_len " + std::to_string(base.seq_len) + ")"
      << '\n';
  out << "  original    " << std::setw(24) << human_params(base.total_params) + " (" + std::to_string(base.total_params) + ")"
      << std::setw(24) << human_macs(base.macs) << '\n';
  out << "  compressed  " << std::setw(24) << human_params(after.total_params) + " (" + std::to_string(after.total_params) + ")"
      << std::setw(24) << human_macs(after.macs) << '\n';
  out << "  overall budget " << fixed(static_cast<double>(after.total_params) / static_cast<double>(base.total_params), 4)
      << ", MAC ratio " << fixed(static_cast<double>(after.macs) / static_cast<double>(base.macs), 4) << '\n';
}

nlohmann::json costs_json(const CostReport& c) {
  return {{"total_params", c.total_params}, {"matmul_params", c.matmul_params}, {"macs", c.macs}, {"seq_len", c.seq_len}};
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) fail(ErrorKind::kIo, "cannot write " + path.string());
  f << text << '\n';
  if (!f) fail(ErrorKind::kIo, "write failed for " + path.string());
}

std::string hex64(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << v;
  return s.str();
}

struct PlanArgs {
  std::string config;
  std::optional<double> budget;
  std::optional<std::size_t> modules_from_end;
  std::optional<double> module_budget;
  bool search = false;
  std::string out;
  std::size_t mac_seq_len = kDefaultMacSeqLen;
};

int cmd_plan(const PlanArgs& a, std::ostream& out) {
  const ModelConfig config = resolve_config(a.config);
  const bool explicit_pair = a.modules_from_end.has_value() && a.module_budget.has_value();
  require(a.modules_from_end.has_value() == a.module_budget.has_value(), ErrorKind::kArgument,
          "--modules-from-end and --module-budget go together");
  require(a.budget.has_value() != explicit_pair, ErrorKind::kArgument,
          "give either --budget (0.90, 0.80 or 0.50) or --modules-from-end with --module-budget");

  if (a.search) {
    require(a.budget.has_value(), ErrorKind::kArgument, "--search needs --budget");
    out << "candidates for overall budget " << fixed(*a.budget, 4) << ":\n";
    for (const auto& c : search_budget(config, *a.budget))
      out << "  modules_from_end " << std::setw(3) << c.modules_from_end << "  module_budget "
          << fixed(c.module_budget, 4) << "  achieved " << fixed(c.achieved, 4) << '\n';
    return kExitOk;
  }

  Preset p{};
  if (a.budget) {
    p = preset(*a.budget);
  } else {
    p = {*a.modules_from_end, *a.module_budget};
  }
  const CompressionPlan plan = make_plan(config, p.modules_from_end, p.module_budget);
  if (!a.out.empty()) save_plan(a.out, plan);

  out << "plan: last " << plan.modules_from_end << " modules at module budget " << plan.module_budget << '\n';
  for (Slot s : kAllSlots) {
    const SlotShape shape = slot_shape(config, s);
    out << "  " << std::setw(5) << slot_name(s) << " " << shape_string(shape.d_out, shape.d_in) << " -> rank "
        << rank_for_budget(p.module_budget, shape.d_out, shape.d_in) << '\n';
  }
  print_costs(out, count_params(config, nullptr, a.mac_seq_len), count_params(config, &plan, a.mac_seq_len));
  if (!a.out.empty()) out << "wrote " << a.out << '\n';
  return kExitOk;
}

struct CompressArgs {
  std::string archive, config, plan, calib, out, report, timings;
  std::int64_t seed = 0;
  std::optional<std::size_t> batch, seq_len;
  bool keep_dtype = false;
  bool no_cache = false;
  std::size_t mac_seq_len = kDefaultMacSeqLen;
};

int cmd_compress(const CompressArgs& a, std::ostream& out, std::ostream& err) {
  const ModelConfig config = resolve_config(a.config);
  TokenBatch calib = load_token_batch(a.calib, config.vocab_size);
  if (a.batch || a.seq_len) calib = calib.slice(a.batch.value_or(calib.batch), a.seq_len.value_or(calib.seq_len));
  const CompressionPlan plan = load_plan(a.plan);
  validate_plan(plan, config);
  const TensorArchive archive = open_archive(a.archive);
  ModelState state = load_model(archive, config);

  CompressOptions options;
  options.cache_block_outputs = !a.no_cache;
  options.mac_seq_len = a.mac_seq_len;
  options.progress = [&err](const LayerRecord& r) {
    err << "[module " << r.module << " " << std::setw(4) << slot_name(r.slot) << "] ";
    if (r.skipped) {
      err << "rank " << r.rank << " exceeds the never-worse bound, kept dense\n";
      return;
    }
    err << "rank " << r.rank << "  retained " << std::scientific << std::setprecision(4) << r.retained_energy
        << "  discarded " << r.discarded_energy << "  error " << r.reconstruction_error << std::defaultfloat
        << "  " << fixed(r.wall_seconds, 3) << " s\n";
  };
  const CompressionReport report = compress(state, plan, calib, options);

  const DType dtype = a.keep_dtype ? archive.info(slot_tensor_name(0, Slot::kQ)).dtype : DType::kF32;
  write_archive(a.out, model_tensors(state, dtype));

  const nlohmann::json meta = {
      {"__rom_meta__",
       {{"plan", nlohmann::json::parse(plan_to_json(plan))},
        {"seed", a.seed},
        {"calibration",
         {{"file", std::filesystem::path(a.calib).filename().string()},
          {"batch", calib.batch},
          {"seq_len", calib.seq_len},
          {"vocab_size", calib.vocab_size},
          {"fingerprint", hex64(calib.fingerprint())}}},
        {"source_archive", std::filesystem::path(a.archive).filename().string()},
        {"dtype", dtype_name(dtype)},
        {"tool_version", kToolVersion}}}};
  write_text(a.out + ".rom_meta.json", meta.dump(2));

  const std::string report_path = a.report.empty() ? a.out + ".report.json" : a.report;
  write_text(report_path, report_to_json(report));
  if (!a.timings.empty()) write_text(a.timings, report_to_json(report, true));

  out << "compressed " << report.layers.size() << " planned slots in " << fixed(report.total_wall_seconds, 3)
      << " s\n";
  out << "  params " << report.params_before << " -> " << report.params_after << "\n";
  out << "  MACs (seq_len " << report.mac_seq_len << ") " << report.macs_before << " -> " << report.macs_after
      << "\n";
  out << "wrote " << a.out << ", " << a.out << ".rom_meta.json, " << report_path << '\n';
  return kExitOk;
}

struct ReportArgs {
  std::string config, archive, plan, json;
  std::optional<double> budget;
  std::optional<std::size_t> modules_from_end;
  std::optional<double> module_budget;
  std::size_t mac_seq_len = kDefaultMacSeqLen;
};

int cmd_report(const ReportArgs& a, std::ostream& out) {
  const ModelConfig config = resolve_config(a.config);
  const CostReport base = count_params(config, nullptr, a.mac_seq_len);
  std::optional<CompressionPlan> plan;
  if (!a.plan.empty()) {
    plan = load_plan(a.plan);
    validate_plan(*plan, config);
  } else if (a.budget) {
    const Preset p = preset(*a.budget);
    plan = make_plan(config, p.modules_from_end, p.module_budget);
  } else if (a.modules_from_end || a.module_budget) {
    require(a.modules_from_end && a.module_budget, ErrorKind::kArgument,
            "--modules-from-end and --module-budget go together");
    plan = make_plan(config, *a.modules_from_end, *a.module_budget);
  }

  CostReport current = base;
  std::string source = "config";
  if (!a.archive.empty()) {
    current = archive_costs(open_archive(a.archive), config, a.mac_seq_len);
    source = "archive";
  }
  out << "costs from " << source << (plan ? " with plan" : "") << ":\n";
  const CostReport after = plan ? count_params(config, &*plan, a.mac_seq_len) : current;
  print_costs(out, a.archive.empty() ? base : current, after);

  if (!a.json.empty()) {
    nlohmann::json j = {{"original", costs_json(a.archive.empty() ? base : current)}, {"planned", costs_json(after)}};
    write_text(a.json, j.dump(2));
  }
  return kExitOk;
}

struct VerifyArgs {
  std::string original, compressed, config, plan, calib;
  double max_drift = -1.0;
};

int cmd_verify(const VerifyArgs& a, std::ostream& out) {
  const ModelConfig config = resolve_config(a.config);
  const ModelState original = load_model(open_archive(a.original), config);
  const ModelState compressed = load_model(open_archive(a.compressed), config);
  const CompressionPlan plan = load_plan(a.plan);
  const TokenBatch batch = load_token_batch(a.calib, config.vocab_size);
  VerifyOptions options;
  options.max_logit_drift = a.max_drift;
  const VerificationSummary summary = verify(original, compressed, plan, batch, options);
  for (const auto& c : summary.checks)
    out << (c.passed ? "PASS " : "FAIL ") << c.name << ": " << c.detail << '\n';
  for (std::size_t i = 0; i < summary.drift.block_outputs.size(); ++i) {
    const DriftStats& d = summary.drift.block_outputs[i];
    out << "  block " << i << " drift max-abs " << std::scientific << std::setprecision(3) << d.max_abs
        << " frobenius " << d.frobenius << std::defaultfloat << '\n';
  }
  out << (summary.passed() ? "verification passed" : "verification FAILED") << '\n';
  return summary.passed() ? kExitOk : kExitFailure;
}

struct GenToyArgs {
  std::size_t d = 8, heads = 2, layers = 2, intermediate = 16, vocab = 11;
  std::size_t batch = 512, seq_len = 128, max_seq = 2048;
  std::uint64_t seed = 0;
  std::string out_dir = ".";
};

int cmd_gen_toy(const GenToyArgs& a, std::ostream& out) {
  ModelConfig config{.hidden_size = a.d,
                     .intermediate_size = a.intermediate,
                     .num_layers = a.layers,
                     .num_heads = a.heads,
                     .vocab_size = a.vocab,
                     .rms_eps = 1e-6,
                     .rope_theta = 10000.0,
                     .max_seq = std::max(a.max_seq, a.seq_len)};
  config.validate();
  const std::filesystem::path dir(a.out_dir);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail(ErrorKind::kIo, "cannot create " + dir.string() + ": " + ec.message());

  const ModelState state = make_toy_model(config, a.seed);
  write_archive(dir / "model.safetensors", model_tensors(state));
  save_config(dir / "config.json", config);
  write_token_batch(dir / "calib.jsonl", make_token_batch(a.batch, a.seq_len, a.vocab, a.seed + 1));
  write_token_batch(dir / "heldout.jsonl", make_token_batch(a.batch, a.seq_len, a.vocab, a.seed + 2));
  out << "wrote " << (dir / "model.safetensors").string() << " (" << state.param_count() << " params), config.json, "
      << "calib.jsonl, heldout.jsonl\n";
  return kExitOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Low-rank compression of transformer language models from calibration activations", "romc"};
  app.require_subcommand(1);
  app.fallthrough();
  std::size_t threads = 1;
  app.add_option("--threads", threads, "Cap on internal parallelism")->check(CLI::PositiveNumber);
  app.set_version_flag("--version", kToolVersion);

  PlanArgs plan_args;
  auto* plan = app.add_subcommand("plan", "Turn a budget into a per-layer rank plan");
  plan->add_option("--config", plan_args.config, "Model config JSON, or 'llama-7b'")->required();
  auto* budget_opt = plan->add_option("--budget", plan_args.budget, "Overall budget preset: 0.90, 0.80 or 0.50");
  auto* k_opt = plan->add_option("--modules-from-end", plan_args.modules_from_end, "Compress the last k modules");
  auto* b_opt = plan->add_option("--module-budget", plan_args.module_budget, "Parameter fraction kept per module");
  k_opt->excludes(budget_opt);
  b_opt->excludes(budget_opt);
  plan->add_flag("--search", plan_args.search, "List (k, module budget) pairs meeting a non-preset --budget");
  plan->add_option("--out", plan_args.out, "Plan JSON to write");
  plan->add_option("--seq-len-for-macs", plan_args.mac_seq_len, "Sequence length for MAC counts")
      ->check(CLI::PositiveNumber);

  CompressArgs compress_args;
  auto* comp = app.add_subcommand("compress", "Factorise the planned layers using calibration activations");
  comp->add_option("--archive", compress_args.archive, "Input weight archive")->required();
  comp->add_option("--config", compress_args.config, "Model config JSON, or 'llama-7b'")->required();
  comp->add_option("--plan", compress_args.plan, "Plan JSON")->required();
  comp->add_option("--calib", compress_args.calib, "Calibration token batch (JSON lines)")->required();
  comp->add_option("--out", compress_args.out, "Output archive")->required();
  comp->add_option("--report", compress_args.report, "Report JSON (default <out>.report.json)");
  comp->add_option("--timings", compress_args.timings, "Report JSON including wall-clock times");
  comp->add_option("--seed", compress_args.seed, "Recorded in the metadata sidecar");
  comp->add_option("--batch", compress_args.batch, "Use only the first B calibration sequences")
      ->check(CLI::PositiveNumber);
  comp->add_option("--seq-len", compress_args.seq_len, "Truncate calibration sequences to S tokens")
      ->check(CLI::PositiveNumber);
  comp->add_flag("--keep-dtype", compress_args.keep_dtype, "Write tensors in the input archive's dtype");
  comp->add_flag("--no-cache", compress_args.no_cache, "Recompute the full prefix for every tap");
  comp->add_option("--seq-len-for-macs", compress_args.mac_seq_len, "Sequence length for MAC counts")
      ->check(CLI::PositiveNumber);

  ReportArgs report_args;
  auto* rep = app.add_subcommand("report", "Parameter and MAC counts for a config or archive");
  rep->add_option("--config", report_args.config, "Model config JSON, or 'llama-7b'")->required();
  rep->add_option("--archive", report_args.archive, "Count what is stored in this archive");
  auto* rep_plan = rep->add_option("--plan", report_args.plan, "Plan JSON to apply");
  auto* rep_budget = rep->add_option("--budget", report_args.budget, "Budget preset to apply");
  auto* rep_k = rep->add_option("--modules-from-end", report_args.modules_from_end, "Explicit plan: k");
  auto* rep_b = rep->add_option("--module-budget", report_args.module_budget, "Explicit plan: module budget");
  rep_plan->excludes(rep_budget);
  rep_k->excludes(rep_budget)->excludes(rep_plan);
  rep_b->excludes(rep_budget)->excludes(rep_plan);
  rep->add_option("--seq-len-for-macs", report_args.mac_seq_len, "Sequence length for MAC counts")
      ->check(CLI::PositiveNumber);
  rep->add_option("--json", report_args.json, "Also write the counts as JSON");

  VerifyArgs verify_args;
  auto* ver = app.add_subcommand("verify", "Check a compressed archive against its original");
  ver->add_option("--original", verify_args.original, "Original archive")->required();
  ver->add_option("--compressed", verify_args.compressed, "Compressed archive")->required();
  ver->add_option("--config", verify_args.config, "Model config JSON, or 'llama-7b'")->required();
  ver->add_option("--plan", verify_args.plan, "Plan JSON used for compression")->required();
  ver->add_option("--calib", verify_args.calib, "Held-out token batch for drift")->required();
  ver->add_option("--max-drift", verify_args.max_drift, "Fail if max-abs logit drift exceeds this");

  GenToyArgs toy_args;
  auto* toy = app.add_subcommand("gen-toy", "Write a seeded toy model, config and token batches");
  toy->add_option("--d", toy_args.d, "Hidden size")->check(CLI::PositiveNumber);
  toy->add_option("--heads", toy_args.heads, "Attention heads")->check(CLI::PositiveNumber);
  toy->add_option("--layers", toy_args.layers, "Decoder modules")->check(CLI::PositiveNumber);
  toy->add_option("--intermediate", toy_args.intermediate, "Feed-forward width")->check(CLI::PositiveNumber);
  toy->add_option("--vocab", toy_args.vocab, "Vocabulary size")->check(CLI::PositiveNumber);
  toy->add_option("--seed", toy_args.seed, "RNG seed");
  toy->add_option("--batch", toy_args.batch, "Sequences per token batch")->check(CLI::PositiveNumber);
  toy->add_option("--seq-len", toy_args.seq_len, "Tokens per sequence")->check(CLI::PositiveNumber);
  toy->add_option("--max-seq", toy_args.max_seq, "Model max_seq")->check(CLI::PositiveNumber);
  toy->add_option("--out-dir", toy_args.out_dir, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << kToolVersion << '\n';
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return kExitOk;
    err << "romc: " << e.what() << '\n';
    return kExitFailure;
  }

  set_num_threads(threads);
  try {
    if (plan->parsed()) return cmd_plan(plan_args, out);
    if (comp->parsed()) return cmd_compress(compress_args, out, err);
    if (rep->parsed()) return cmd_report(report_args, out);
    if (ver->parsed()) return cmd_verify(verify_args, out);
    if (toy->parsed()) return cmd_gen_toy(toy_args, out);
  } catch (const Error& e) {
    err << "romc: " << e.what() << '\n';
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    err << "romc: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitFailure;
}

}  // namespace rom::cli
