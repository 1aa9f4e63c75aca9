#pragma once

// Minimal LLaMA-style decoder: pre-norm blocks of RMSNorm -> rotary multi-head
// causal attention -> residual, RMSNorm -> SwiGLU -> residual. No biases, no
// KV cache. Each of the seven projections in a block may be dense or a
// low-rank pair.

#include <array>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "rom/matrix.hpp"
#include "rom/tensorstore.hpp"

namespace rom {

struct ModelConfig {
  std::size_t hidden_size = 0;
  std::size_t intermediate_size = 0;
  std::size_t num_layers = 0;
  std::size_t num_heads = 0;
  std::size_t vocab_size = 0;
  double rms_eps = 1e-6;
  double rope_theta = 10000.0;
  std::size_t max_seq = 2048;

  std::size_t head_dim() const { return hidden_size / num_heads; }
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// LLaMA-7B: d=4096, intermediate 11008, 32 layers, 32 heads, vocab 32000.
ModelConfig llama7b_config();

ModelConfig load_config(const std::filesystem::path& path);
void save_config(const std::filesystem::path& path, const ModelConfig& config);

// The seven decomposable projections of a decoder block, in execution order.
enum class Slot { kQ, kK, kV, kO, kGate, kUp, kDown };
inline constexpr std::array<Slot, 7> kAllSlots{Slot::kQ, Slot::kK, Slot::kV, Slot::kO,
                                               Slot::kGate, Slot::kUp, Slot::kDown};

std::string_view slot_name(Slot slot);  // "q", "k", ..., "down"
Slot parse_slot(std::string_view name);

struct SlotShape {
  std::size_t d_out;
  std::size_t d_in;
};
SlotShape slot_shape(const ModelConfig& config, Slot slot);

// Activation points inside a block.
enum class Tap { kAttnInput, kOInput, kMlpInput, kDownInput, kBlockOutput };

std::string_view tap_name(Tap tap);
Tap parse_tap(std::string_view name);
Tap input_tap(Slot slot);  // the tap that feeds a slot

class LinearRepr {
 public:
  struct Dense {
    Matrix w;  // d_out x d_in
    friend bool operator==(const Dense&, const Dense&) = default;
  };
  struct LowRank {
    Matrix w1;  // d_out x r
    Matrix w2;  // r x d_in
    friend bool operator==(const LowRank&, const LowRank&) = default;
  };

  LinearRepr() = default;
  static LinearRepr dense(Matrix w);
  static LinearRepr low_rank(Matrix w1, Matrix w2);

  bool is_low_rank() const { return std::holds_alternative<LowRank>(repr_); }
  std::size_t d_out() const;
  std::size_t d_in() const;
  std::size_t rank() const;  // min(d_out, d_in) for dense layers
  std::size_t param_count() const;

  const Dense& as_dense() const;
  const LowRank& as_low_rank() const;

  // x: N x d_in -> N x d_out. Low-rank applies w2 then w1.
  Matrix apply(const Matrix& x) const;

  friend bool operator==(const LinearRepr&, const LinearRepr&) = default;

 private:
  std::variant<Dense, LowRank> repr_;
};

inline Matrix apply_linear(const LinearRepr& layer, const Matrix& x) { return layer.apply(x); }

struct DecoderWeights {
  std::array<LinearRepr, 7> linears;  // indexed by Slot
  std::vector<float> attn_norm;
  std::vector<float> mlp_norm;

  LinearRepr& operator[](Slot s) { return linears[static_cast<std::size_t>(s)]; }
  const LinearRepr& operator[](Slot s) const { return linears[static_cast<std::size_t>(s)]; }

  friend bool operator==(const DecoderWeights&, const DecoderWeights&) = default;
};

struct ModelState {
  ModelConfig config;
  Matrix embed;  // vocab x d
  std::vector<DecoderWeights> layers;
  std::vector<float> final_norm;
  LinearRepr lm_head;  // vocab x d

  std::size_t param_count() const;
  void validate() const;

  friend bool operator==(const ModelState&, const ModelState&) = default;
};

// Token rows: row b*S + s holds batch b, position s.
Matrix embed_tokens(const ModelState& state, const TokenBatch& tokens);

// Runs one block on its input hidden states and returns the activation at
// `tap`. kBlockOutput yields the block's output hidden states.
Matrix block_forward(const ModelConfig& config, const DecoderWeights& block, const Matrix& hidden,
                     std::size_t seq_len, Tap tap);

// Runs blocks 0..upto_layer and returns the activation at `tap` of block
// upto_layer.
Matrix forward_hidden(const ModelState& state, const TokenBatch& tokens, std::size_t upto_layer, Tap tap);

Matrix logits(const ModelState& state, const TokenBatch& tokens);

void replace_layer(ModelState& state, std::size_t module_index, Slot which, Matrix w1, Matrix w2);

// Building blocks, exposed for tests.
Matrix rms_norm(const Matrix& x, std::span<const float> gain, double eps);
void apply_rotary(Matrix& x, std::size_t num_heads, std::size_t seq_len, double theta);
Matrix causal_attention(const Matrix& q, const Matrix& k, const Matrix& v, std::size_t num_heads,
                        std::size_t seq_len);

// Standard LLaMA checkpoint names, e.g. "model.layers.3.self_attn.q_proj.weight".
std::string slot_tensor_name(std::size_t module_index, Slot slot);
inline constexpr std::string_view kLowRankW1Suffix = ".rom_w1";
inline constexpr std::string_view kLowRankW2Suffix = ".rom_w2";

// Loads a model from an archive. A slot stored as "<name>.rom_w1"/".rom_w2"
// becomes low-rank; otherwise "<name>" is loaded dense.
ModelState load_model(const TensorArchive& archive, const ModelConfig& config);

// Tensor map for write_archive. Projection matrices are narrowed to `dtype`;
// norm gains too.
TensorMap model_tensors(const ModelState& state, DType dtype = DType::kF32);

}  // namespace rom
