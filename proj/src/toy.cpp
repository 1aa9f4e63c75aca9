#include "rom/toy.hpp"

#include <random>

namespace rom {

namespace {

Matrix gaussian(std::size_t rows, std::size_t cols, float scale, std::mt19937_64& rng) {
  std::normal_distribution<float> dist(0.0f, scale);
  Matrix m(rows, cols);
  for (float& v : m.values()) v = dist(rng);
  return m;
}

}  // namespace

ModelState make_toy_model(const ModelConfig& config, std::uint64_t seed, float scale) {
  config.validate();
  std::mt19937_64 rng(seed);
  const std::size_t d = config.hidden_size;
  ModelState state;
  state.config = config;
  state.embed = gaussian(config.vocab_size, d, scale, rng);
  state.layers.resize(config.num_layers);
  for (auto& layer : state.layers) {
    for (Slot s : kAllSlots) {
      const SlotShape shape = slot_shape(config, s);
      layer[s] = LinearRepr::dense(gaussian(shape.d_out, shape.d_in, scale, rng));
    }
    layer.attn_norm.assign(d, 1.0f);
    layer.mlp_norm.assign(d, 1.0f);
  }
  state.final_norm.assign(d, 1.0f);
  state.lm_head = LinearRepr::dense(gaussian(config.vocab_size, d, scale, rng));
  return state;
}

TokenBatch make_token_batch(std::size_t batch, std::size_t seq_len, std::size_t vocab, std::uint64_t seed) {
  require(batch >= 1 && seq_len >= 1 && vocab >= 1, ErrorKind::kArgument, "token batch dimensions must be positive");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::uint32_t> dist(0, static_cast<std::uint32_t>(vocab - 1));
  TokenBatch tokens{batch, seq_len, vocab, {}};
  tokens.ids.resize(batch * seq_len);
  for (auto& id : tokens.ids) id = dist(rng);
  return tokens;
}

}  // namespace rom
