#pragma once

// Seeded synthetic models and calibration batches for desk-scale runs.

#include <cstdint>

#include "rom/modelgraph.hpp"

namespace rom {

// Projections and embeddings drawn from N(0, scale^2); norm gains are 1.
ModelState make_toy_model(const ModelConfig& config, std::uint64_t seed, float scale = 0.02f);

// Ids uniform over [0, vocab).
TokenBatch make_token_batch(std::size_t batch, std::size_t seq_len, std::size_t vocab, std::uint64_t seed);

}  // namespace rom
