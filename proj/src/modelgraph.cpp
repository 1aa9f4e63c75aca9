#include "rom/modelgraph.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "rom/kernels.hpp"
#include "rom/linalg.hpp"

namespace rom {

using nlohmann::json;

void ModelConfig::validate() const {
  require(hidden_size >= 1 && intermediate_size >= 1 && num_layers >= 1 && num_heads >= 1 && vocab_size >= 1 &&
              max_seq >= 1,
          ErrorKind::kArgument, "model config counts must all be >= 1");
  require(hidden_size % num_heads == 0, ErrorKind::kArgument,
          "hidden_size " + std::to_string(hidden_size) + " is not divisible by num_heads " + std::to_string(num_heads));
  require(head_dim() % 2 == 0, ErrorKind::kArgument, "head dimension must be even for rotary embedding");
  require(rms_eps > 0.0, ErrorKind::kArgument, "rms_eps must be positive");
  require(rope_theta > 0.0, ErrorKind::kArgument, "rope_theta must be positive");
}

ModelConfig llama7b_config() {
  return ModelConfig{.hidden_size = 4096,
                     .intermediate_size = 11008,
                     .num_layers = 32,
                     .num_heads = 32,
                     .vocab_size = 32000,
                     .rms_eps = 1e-6,
                     .rope_theta = 10000.0,
                     .max_seq = 2048};
}

namespace {

template <typename T>
T config_value(const json& j, std::initializer_list<const char*> keys, std::optional<T> fallback,
               const std::filesystem::path& path) {
  for (const char* key : keys) {
    if (!j.contains(key)) continue;
    const json& v = j.at(key);
    if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_unsigned()) fail(ErrorKind::kFormat, path.string() + ": '" + key + "' must be a positive integer");
    } else {
      if (!v.is_number()) fail(ErrorKind::kFormat, path.string() + ": '" + key + "' must be a number");
    }
    return v.get<T>();
  }
  if (fallback) return *fallback;
  fail(ErrorKind::kFormat, path.string() + ": missing '" + *keys.begin() + "'");
}

}  // namespace

ModelConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kIo, "cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorKind::kFormat, path.string() + ": " + e.what());
  }
  if (!j.is_object()) fail(ErrorKind::kFormat, path.string() + ": config must be a JSON object");
  // Hugging Face spellings are accepted so a checkpoint's own config.json works.
  ModelConfig c;
  c.hidden_size = config_value<std::size_t>(j, {"hidden_size"}, std::nullopt, path);
  c.intermediate_size = config_value<std::size_t>(j, {"intermediate_size"}, std::nullopt, path);
  c.num_layers = config_value<std::size_t>(j, {"num_layers", "num_hidden_layers"}, std::nullopt, path);
  c.num_heads = config_value<std::size_t>(j, {"num_heads", "num_attention_heads"}, std::nullopt, path);
  c.vocab_size = config_value<std::size_t>(j, {"vocab_size"}, std::nullopt, path);
  c.rms_eps = config_value<double>(j, {"rms_eps", "rms_norm_eps"}, 1e-6, path);
  c.rope_theta = config_value<double>(j, {"rope_theta"}, 10000.0, path);
  c.max_seq = config_value<std::size_t>(j, {"max_seq", "max_position_embeddings"}, 2048, path);
  c.validate();
  return c;
}

void save_config(const std::filesystem::path& path, const ModelConfig& c) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot write config " + path.string());
  const json j = {{"hidden_size", c.hidden_size}, {"intermediate_size", c.intermediate_size},
                  {"num_layers", c.num_layers},   {"num_heads", c.num_heads},
                  {"vocab_size", c.vocab_size},   {"rms_eps", c.rms_eps},
                  {"rope_theta", c.rope_theta},   {"max_seq", c.max_seq}};
  out << j.dump(2) << '\n';
}

std::string_view slot_name(Slot slot) {
  switch (slot) {
    case Slot::kQ: return "q";
    case Slot::kK: return "k";
    case Slot::kV: return "v";
    case Slot::kO: return "o";
    case Slot::kGate: return "gate";
    case Slot::kUp: return "up";
    case Slot::kDown: return "down";
  }
  return "?";
}

Slot parse_slot(std::string_view name) {
  for (Slot s : kAllSlots)
    if (slot_name(s) == name) return s;
  fail(ErrorKind::kArgument, "unknown layer slot '" + std::string(name) + "'");
}

SlotShape slot_shape(const ModelConfig& config, Slot slot) {
  switch (slot) {
    case Slot::kGate:
    case Slot::kUp: return {config.intermediate_size, config.hidden_size};
    case Slot::kDown: return {config.hidden_size, config.intermediate_size};
    default: return {config.hidden_size, config.hidden_size};
  }
}

std::string_view tap_name(Tap tap) {
  switch (tap) {
    case Tap::kAttnInput: return "attn_input";
    case Tap::kOInput: return "o_input";
    case Tap::kMlpInput: return "mlp_input";
    case Tap::kDownInput: return "down_input";
    case Tap::kBlockOutput: return "block_output";
  }
  return "?";
}

Tap parse_tap(std::string_view name) {
  for (Tap t : {Tap::kAttnInput, Tap::kOInput, Tap::kMlpInput, Tap::kDownInput, Tap::kBlockOutput})
    if (tap_name(t) == name) return t;
  fail(ErrorKind::kArgument, "unknown tap point '" + std::string(name) + "'");
}

Tap input_tap(Slot slot) {
  switch (slot) {
    case Slot::kO: return Tap::kOInput;
    case Slot::kGate:
    case Slot::kUp: return Tap::kMlpInput;
    case Slot::kDown: return Tap::kDownInput;
    default: return Tap::kAttnInput;
  }
}

LinearRepr LinearRepr::dense(Matrix w) {
  LinearRepr l;
  l.repr_ = Dense{std::move(w)};
  return l;
}

LinearRepr LinearRepr::low_rank(Matrix w1, Matrix w2) {
  require(w1.cols() == w2.rows() && w1.cols() >= 1, ErrorKind::kDimension,
          "low-rank factors " + shape_string(w1) + " and " + shape_string(w2) + " do not chain");
  LinearRepr l;
  l.repr_ = LowRank{std::move(w1), std::move(w2)};
  return l;
}

std::size_t LinearRepr::d_out() const {
  return is_low_rank() ? as_low_rank().w1.rows() : as_dense().w.rows();
}

std::size_t LinearRepr::d_in() const {
  return is_low_rank() ? as_low_rank().w2.cols() : as_dense().w.cols();
}

std::size_t LinearRepr::rank() const {
  return is_low_rank() ? as_low_rank().w1.cols() : std::min(d_out(), d_in());
}

std::size_t LinearRepr::param_count() const {
  return is_low_rank() ? rank() * (d_out() + d_in()) : d_out() * d_in();
}

const LinearRepr::Dense& LinearRepr::as_dense() const {
  const auto* d = std::get_if<Dense>(&repr_);
  require(d != nullptr, ErrorKind::kArgument, "layer is low-rank, not dense");
  return *d;
}

const LinearRepr::LowRank& LinearRepr::as_low_rank() const {
  const auto* l = std::get_if<LowRank>(&repr_);
  require(l != nullptr, ErrorKind::kArgument, "layer is dense, not low-rank");
  return *l;
}

Matrix LinearRepr::apply(const Matrix& x) const {
  require(x.cols() == d_in(), ErrorKind::kDimension,
          "input width " + std::to_string(x.cols()) + " != layer input width " + std::to_string(d_in()));
  if (const auto* l = std::get_if<LowRank>(&repr_)) return matmul_nt(matmul_nt(x, l->w2), l->w1);
  return matmul_nt(x, std::get<Dense>(repr_).w);
}

std::size_t ModelState::param_count() const {
  std::size_t total = embed.size() + lm_head.param_count() + final_norm.size();
  for (const auto& layer : layers) {
    total += layer.attn_norm.size() + layer.mlp_norm.size();
    for (const auto& l : layer.linears) total += l.param_count();
  }
  return total;
}

void ModelState::validate() const {
  config.validate();
  const std::size_t d = config.hidden_size;
  require(embed.rows() == config.vocab_size && embed.cols() == d, ErrorKind::kDimension,
          "embedding is " + shape_string(embed) + ", expected " + shape_string(config.vocab_size, d));
  require(layers.size() == config.num_layers, ErrorKind::kDimension,
          "model has " + std::to_string(layers.size()) + " layers, config says " + std::to_string(config.num_layers));
  require(final_norm.size() == d, ErrorKind::kDimension, "final norm width mismatch");
  require(lm_head.d_out() == config.vocab_size && lm_head.d_in() == d, ErrorKind::kDimension, "lm_head shape mismatch");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    require(layers[i].attn_norm.size() == d && layers[i].mlp_norm.size() == d, ErrorKind::kDimension,
            "norm width mismatch in layer " + std::to_string(i));
    for (Slot s : kAllSlots) {
      const SlotShape shape = slot_shape(config, s);
      const LinearRepr& l = layers[i][s];
      require(l.d_out() == shape.d_out && l.d_in() == shape.d_in, ErrorKind::kDimension,
              "layer " + std::to_string(i) + " slot " + std::string(slot_name(s)) + " is " +
                  shape_string(l.d_out(), l.d_in()) + ", expected " + shape_string(shape.d_out, shape.d_in));
    }
  }
}

Matrix rms_norm(const Matrix& x, std::span<const float> gain, double eps) {
  require(gain.size() == x.cols(), ErrorKind::kDimension, "norm gain width mismatch");
  Matrix out(x.rows(), x.cols());
  const auto dot = kernels::active().dot_f32;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    const double mean_sq = dot(in.data(), in.data(), in.size()) / static_cast<double>(in.size());
    const double inv = 1.0 / std::sqrt(mean_sq + eps);
    auto o = out.row(r);
    for (std::size_t c = 0; c < in.size(); ++c) o[c] = static_cast<float>(in[c] * inv * gain[c]);
  }
  return out;
}

void apply_rotary(Matrix& x, std::size_t num_heads, std::size_t seq_len, double theta) {
  require(num_heads >= 1 && x.cols() % num_heads == 0, ErrorKind::kDimension, "width not divisible by heads");
  require(seq_len >= 1 && x.rows() % seq_len == 0, ErrorKind::kDimension, "rows not a multiple of seq_len");
  const std::size_t head_dim = x.cols() / num_heads;
  const std::size_t half = head_dim / 2;
  std::vector<double> cos_table(seq_len * half), sin_table(seq_len * half);
  for (std::size_t s = 0; s < seq_len; ++s) {
    for (std::size_t i = 0; i < half; ++i) {
      const double inv_freq = std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
      const double angle = static_cast<double>(s) * inv_freq;
      cos_table[s * half + i] = std::cos(angle);
      sin_table[s * half + i] = std::sin(angle);
    }
  }
  // Pairs (i, i + half) within each head rotate together.
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const std::size_t s = r % seq_len;
    auto row = x.row(r);
    for (std::size_t h = 0; h < num_heads; ++h) {
      float* head = row.data() + h * head_dim;
      for (std::size_t i = 0; i < half; ++i) {
        const double a = head[i];
        const double b = head[i + half];
        const double c = cos_table[s * half + i];
        const double sn = sin_table[s * half + i];
        head[i] = static_cast<float>(a * c - b * sn);
        head[i + half] = static_cast<float>(b * c + a * sn);
      }
    }
  }
}

Matrix causal_attention(const Matrix& q, const Matrix& k, const Matrix& v, std::size_t num_heads,
                        std::size_t seq_len) {
  require(q.rows() == k.rows() && q.rows() == v.rows() && q.cols() == k.cols() && q.cols() == v.cols(),
          ErrorKind::kDimension, "q/k/v shapes differ");
  require(seq_len >= 1 && q.rows() % seq_len == 0, ErrorKind::kDimension, "rows not a multiple of seq_len");
  require(num_heads >= 1 && q.cols() % num_heads == 0, ErrorKind::kDimension, "width not divisible by heads");
  const std::size_t head_dim = q.cols() / num_heads;
  const std::size_t batches = q.rows() / seq_len;
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
  const auto& kt = kernels::active();
  Matrix out(q.rows(), q.cols());

  parallel_for(batches * num_heads, [&](std::size_t begin, std::size_t end) {
    std::vector<double> scores(seq_len);
    std::vector<double> ctx(head_dim);
    for (std::size_t job = begin; job < end; ++job) {
      const std::size_t b = job / num_heads;
      const std::size_t offset = (job % num_heads) * head_dim;
      for (std::size_t s = 0; s < seq_len; ++s) {
        const float* qs = q.row(b * seq_len + s).data() + offset;
        double top = -INFINITY;
        for (std::size_t t = 0; t <= s; ++t) {
          scores[t] = kt.dot_f32(qs, k.row(b * seq_len + t).data() + offset, head_dim) * scale;
          top = std::max(top, scores[t]);
        }
        double total = 0.0;
        for (std::size_t t = 0; t <= s; ++t) {
          scores[t] = std::exp(scores[t] - top);
          total += scores[t];
        }
        std::fill(ctx.begin(), ctx.end(), 0.0);
        for (std::size_t t = 0; t <= s; ++t)
          kt.axpy_f64_f32(scores[t] / total, v.row(b * seq_len + t).data() + offset, ctx.data(), head_dim);
        float* o = out.row(b * seq_len + s).data() + offset;
        for (std::size_t i = 0; i < head_dim; ++i) o[i] = static_cast<float>(ctx[i]);
      }
    }
  });
  return out;
}

namespace {

void add_in_place(Matrix& acc, const Matrix& x) {
  auto a = acc.values();
  auto b = x.values();
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

void check_tokens(const ModelState& state, const TokenBatch& tokens) {
  require(tokens.ids.size() == tokens.batch * tokens.seq_len && tokens.seq_len >= 1, ErrorKind::kDimension,
          "malformed token batch");
  require(tokens.seq_len <= state.config.max_seq, ErrorKind::kArgument,
          "sequence length " + std::to_string(tokens.seq_len) + " exceeds max_seq " +
              std::to_string(state.config.max_seq));
  for (std::uint32_t id : tokens.ids)
    require(id < state.config.vocab_size, ErrorKind::kRange,
            "token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(state.config.vocab_size));
}

}  // namespace

Matrix embed_tokens(const ModelState& state, const TokenBatch& tokens) {
  check_tokens(state, tokens);
  Matrix hidden(tokens.token_count(), state.config.hidden_size);
  for (std::size_t r = 0; r < tokens.token_count(); ++r) {
    auto src = state.embed.row(tokens.ids[r]);
    std::copy(src.begin(), src.end(), hidden.row(r).begin());
  }
  return hidden;
}

Matrix block_forward(const ModelConfig& config, const DecoderWeights& block, const Matrix& hidden,
                     std::size_t seq_len, Tap tap) {
  require(hidden.cols() == config.hidden_size, ErrorKind::kDimension, "hidden width mismatch");
  Matrix attn_in = rms_norm(hidden, block.attn_norm, config.rms_eps);
  if (tap == Tap::kAttnInput) return attn_in;

  Matrix q = block[Slot::kQ].apply(attn_in);
  Matrix k = block[Slot::kK].apply(attn_in);
  const Matrix v = block[Slot::kV].apply(attn_in);
  apply_rotary(q, config.num_heads, seq_len, config.rope_theta);
  apply_rotary(k, config.num_heads, seq_len, config.rope_theta);
  Matrix context = causal_attention(q, k, v, config.num_heads, seq_len);
  if (tap == Tap::kOInput) return context;

  Matrix residual = hidden;
  add_in_place(residual, block[Slot::kO].apply(context));
  Matrix mlp_in = rms_norm(residual, block.mlp_norm, config.rms_eps);
  if (tap == Tap::kMlpInput) return mlp_in;

  const Matrix gate = block[Slot::kGate].apply(mlp_in);
  Matrix act = block[Slot::kUp].apply(mlp_in);
  auto g = gate.values();
  auto u = act.values();
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double x = g[i];
    u[i] = static_cast<float>(x / (1.0 + std::exp(-x)) * u[i]);
  }
  if (tap == Tap::kDownInput) return act;

  add_in_place(residual, block[Slot::kDown].apply(act));
  return residual;
}

Matrix forward_hidden(const ModelState& state, const TokenBatch& tokens, std::size_t upto_layer, Tap tap) {
  require(upto_layer < state.layers.size(), ErrorKind::kArgument,
          "layer " + std::to_string(upto_layer) + " out of range for " + std::to_string(state.layers.size()) +
              " layers");
  Matrix hidden = embed_tokens(state, tokens);
  for (std::size_t i = 0; i < upto_layer; ++i)
    hidden = block_forward(state.config, state.layers[i], hidden, tokens.seq_len, Tap::kBlockOutput);
  return block_forward(state.config, state.layers[upto_layer], hidden, tokens.seq_len, tap);
}

Matrix logits(const ModelState& state, const TokenBatch& tokens) {
  Matrix hidden = embed_tokens(state, tokens);
  for (const auto& layer : state.layers)
    hidden = block_forward(state.config, layer, hidden, tokens.seq_len, Tap::kBlockOutput);
  return state.lm_head.apply(rms_norm(hidden, state.final_norm, state.config.rms_eps));
}

void replace_layer(ModelState& state, std::size_t module_index, Slot which, Matrix w1, Matrix w2) {
  require(module_index < state.layers.size(), ErrorKind::kArgument,
          "module " + std::to_string(module_index) + " out of range");
  const SlotShape shape = slot_shape(state.config, which);
  require(w1.rows() == shape.d_out && w2.cols() == shape.d_in && w1.cols() == w2.rows() && w1.cols() >= 1,
          ErrorKind::kDimension,
          "factors " + shape_string(w1) + " / " + shape_string(w2) + " do not fit slot " +
              std::string(slot_name(which)) + " (" + shape_string(shape.d_out, shape.d_in) + ")");
  state.layers[module_index][which] = LinearRepr::low_rank(std::move(w1), std::move(w2));
}

std::string slot_tensor_name(std::size_t module_index, Slot slot) {
  const std::string prefix = "model.layers." + std::to_string(module_index) + ".";
  switch (slot) {
    case Slot::kQ: return prefix + "self_attn.q_proj.weight";
    case Slot::kK: return prefix + "self_attn.k_proj.weight";
    case Slot::kV: return prefix + "self_attn.v_proj.weight";
    case Slot::kO: return prefix + "self_attn.o_proj.weight";
    case Slot::kGate: return prefix + "mlp.gate_proj.weight";
    case Slot::kUp: return prefix + "mlp.up_proj.weight";
    case Slot::kDown: return prefix + "mlp.down_proj.weight";
  }
  return prefix;
}

namespace {

const char* kEmbedName = "model.embed_tokens.weight";
const char* kFinalNormName = "model.norm.weight";
const char* kLmHeadName = "lm_head.weight";

std::string attn_norm_name(std::size_t i) { return "model.layers." + std::to_string(i) + ".input_layernorm.weight"; }
std::string mlp_norm_name(std::size_t i) {
  return "model.layers." + std::to_string(i) + ".post_attention_layernorm.weight";
}

Matrix load_shaped(const TensorArchive& archive, const std::string& name, std::size_t rows, std::size_t cols) {
  Matrix m = archive.load_matrix(name);
  require(m.rows() == rows && m.cols() == cols, ErrorKind::kDimension,
          "tensor '" + name + "' is " + shape_string(m) + ", expected " + shape_string(rows, cols));
  return m;
}

std::vector<float> load_vector(const TensorArchive& archive, const std::string& name, std::size_t n) {
  const Matrix m = load_shaped(archive, name, 1, n);
  return {m.values().begin(), m.values().end()};
}

}  // namespace

ModelState load_model(const TensorArchive& archive, const ModelConfig& config) {
  config.validate();
  const std::size_t d = config.hidden_size;
  ModelState state;
  state.config = config;
  state.embed = load_shaped(archive, kEmbedName, config.vocab_size, d);
  state.final_norm = load_vector(archive, kFinalNormName, d);
  state.lm_head = LinearRepr::dense(load_shaped(archive, kLmHeadName, config.vocab_size, d));
  state.layers.resize(config.num_layers);
  for (std::size_t i = 0; i < config.num_layers; ++i) {
    DecoderWeights& layer = state.layers[i];
    layer.attn_norm = load_vector(archive, attn_norm_name(i), d);
    layer.mlp_norm = load_vector(archive, mlp_norm_name(i), d);
    for (Slot s : kAllSlots) {
      const std::string name = slot_tensor_name(i, s);
      const SlotShape shape = slot_shape(config, s);
      const std::string w1_name = name + std::string(kLowRankW1Suffix);
      if (archive.contains(w1_name)) {
        Matrix w1 = archive.load_matrix(w1_name);
        Matrix w2 = archive.load_matrix(name + std::string(kLowRankW2Suffix));
        require(w1.rows() == shape.d_out && w2.cols() == shape.d_in && w1.cols() == w2.rows(), ErrorKind::kDimension,
                "low-rank factors for '" + name + "' do not match the slot shape");
        layer[s] = LinearRepr::low_rank(std::move(w1), std::move(w2));
      } else {
        layer[s] = LinearRepr::dense(load_shaped(archive, name, shape.d_out, shape.d_in));
      }
    }
  }
  return state;
}

TensorMap model_tensors(const ModelState& state, DType dtype) {
  TensorMap out;
  out.emplace(kEmbedName, TensorData::from_matrix(state.embed, dtype));
  out.emplace(kFinalNormName, TensorData::vector(state.final_norm, dtype));
  out.emplace(kLmHeadName, TensorData::from_matrix(state.lm_head.as_dense().w, dtype));
  for (std::size_t i = 0; i < state.layers.size(); ++i) {
    const DecoderWeights& layer = state.layers[i];
    out.emplace(attn_norm_name(i), TensorData::vector(layer.attn_norm, dtype));
    out.emplace(mlp_norm_name(i), TensorData::vector(layer.mlp_norm, dtype));
    for (Slot s : kAllSlots) {
      const std::string name = slot_tensor_name(i, s);
      if (layer[s].is_low_rank()) {
        const auto& lr = layer[s].as_low_rank();
        out.emplace(name + std::string(kLowRankW1Suffix), TensorData::from_matrix(lr.w1, dtype));
        out.emplace(name + std::string(kLowRankW2Suffix), TensorData::from_matrix(lr.w2, dtype));
      } else {
        out.emplace(name, TensorData::from_matrix(layer[s].as_dense().w, dtype));
      }
    }
  }
  return out;
}

}  // namespace rom
