#include <doctest.h>

#include <cmath>

#include "rom/linalg.hpp"
#include "rom/romcore.hpp"
#include "rom/toy.hpp"
#include "support.hpp"

using namespace rom;
using rom::test::random_matrix;
using rom::test::toy_config;

namespace {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;  // rows of token vectors

// Straight-line LLaMA forward written from the architecture definition.
struct Reference {
  const ModelState& m;

  Vec linear(const LinearRepr& l, const Vec& x) const {
    const Matrix w = l.is_low_rank() ? matmul_nt(l.as_low_rank().w1, l.as_low_rank().w2.transposed())
                                     : l.as_dense().w;
    Vec y(w.rows(), 0.0);
    for (std::size_t o = 0; o < w.rows(); ++o)
      for (std::size_t i = 0; i < w.cols(); ++i) y[o] += static_cast<double>(w(o, i)) * x[i];
    return y;
  }

  Vec norm(const Vec& x, const std::vector<float>& g) const {
    double ms = 0;
    for (double v : x) ms += v * v;
    ms /= static_cast<double>(x.size());
    const double inv = 1.0 / std::sqrt(ms + m.config.rms_eps);
    Vec y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * inv * g[i];
    return y;
  }

  void rope(Vec& x, std::size_t pos) const {
    const std::size_t hd = m.config.head_dim(), half = hd / 2;
    for (std::size_t h = 0; h < m.config.num_heads; ++h) {
      Vec head(x.begin() + h * hd, x.begin() + (h + 1) * hd);
      for (std::size_t i = 0; i < hd; ++i) {
        const std::size_t f = i % half;
        const double angle = pos * std::pow(m.config.rope_theta, -2.0 * f / hd);
        const double rotated = i < half ? -head[i + half] : head[i - half];
        x[h * hd + i] = head[i] * std::cos(angle) + rotated * std::sin(angle);
      }
    }
  }

  // Returns every tap for one sequence through one block.
  std::map<Tap, Mat> block(const DecoderWeights& b, const Mat& in) const {
    const std::size_t S = in.size(), d = m.config.hidden_size, H = m.config.num_heads, hd = m.config.head_dim();
    std::map<Tap, Mat> taps;
    Mat q(S), k(S), v(S);
    for (std::size_t s = 0; s < S; ++s) {
      taps[Tap::kAttnInput].push_back(norm(in[s], b.attn_norm));
      q[s] = linear(b[Slot::kQ], taps[Tap::kAttnInput][s]);
      k[s] = linear(b[Slot::kK], taps[Tap::kAttnInput][s]);
      v[s] = linear(b[Slot::kV], taps[Tap::kAttnInput][s]);
      rope(q[s], s);
      rope(k[s], s);
    }
    Mat ctx(S, Vec(d, 0.0));
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t i = 0; i < S; ++i) {
        Vec score(i + 1);
        double best = -INFINITY;
        for (std::size_t j = 0; j <= i; ++j) {
          double dot = 0;
          for (std::size_t c = 0; c < hd; ++c) dot += q[i][h * hd + c] * k[j][h * hd + c];
          score[j] = dot / std::sqrt(static_cast<double>(hd));
          best = std::max(best, score[j]);
        }
        double total = 0;
        for (double& s : score) total += (s = std::exp(s - best));
        for (std::size_t j = 0; j <= i; ++j)
          for (std::size_t c = 0; c < hd; ++c) ctx[i][h * hd + c] += score[j] / total * v[j][h * hd + c];
      }
    }
    taps[Tap::kOInput] = ctx;
    for (std::size_t s = 0; s < S; ++s) {
      const Vec o = linear(b[Slot::kO], ctx[s]);
      Vec h(d);
      for (std::size_t i = 0; i < d; ++i) h[i] = in[s][i] + o[i];
      taps[Tap::kMlpInput].push_back(norm(h, b.mlp_norm));
      const Vec g = linear(b[Slot::kGate], taps[Tap::kMlpInput][s]);
      const Vec u = linear(b[Slot::kUp], taps[Tap::kMlpInput][s]);
      Vec act(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) act[i] = g[i] / (1.0 + std::exp(-g[i])) * u[i];
      taps[Tap::kDownInput].push_back(act);
      const Vec down = linear(b[Slot::kDown], act);
      for (std::size_t i = 0; i < d; ++i) h[i] += down[i];
      taps[Tap::kBlockOutput].push_back(h);
    }
    return taps;
  }

  Mat run(const TokenBatch& t, std::size_t upto, Tap tap) const {
    Mat out;
    for (std::size_t b = 0; b < t.batch; ++b) {
      Mat h;
      for (std::size_t s = 0; s < t.seq_len; ++s) {
        const auto row = m.embed.row(t.at(b, s));
        h.emplace_back(row.begin(), row.end());
      }
      for (std::size_t l = 0;; ++l) {
        auto taps = block(m.layers[l], h);
        if (l == upto) {
          out.insert(out.end(), taps[tap].begin(), taps[tap].end());
          break;
        }
        h = taps[Tap::kBlockOutput];
      }
    }
    return out;
  }

  Mat logits(const TokenBatch& t) const {
    Mat out;
    for (const Vec& h : run(t, m.config.num_layers - 1, Tap::kBlockOutput))
      out.push_back(linear(m.lm_head, norm(h, m.final_norm)));
    return out;
  }
};

double max_diff(const Matrix& got, const Mat& expect) {
  REQUIRE(got.rows() == expect.size());
  double worst = 0;
  for (std::size_t r = 0; r < got.rows(); ++r) {
    REQUIRE(got.cols() == expect[r].size());
    for (std::size_t c = 0; c < got.cols(); ++c) worst = std::max(worst, std::abs(got(r, c) - expect[r][c]));
  }
  return worst;
}

}  // namespace

TEST_CASE("config validation and defaults") {
  ModelConfig c = toy_config();
  CHECK_NOTHROW(c.validate());
  c.hidden_size = 9;
  CHECK_THROWS_AS(c.validate(), Error);
  c = toy_config();
  c.rms_eps = 0;
  CHECK_THROWS_AS(c.validate(), Error);
  c = toy_config();
  const ModelConfig l = llama7b_config();
  CHECK(l.hidden_size == 4096);
  CHECK(l.intermediate_size == 11008);
  CHECK(l.num_layers == 32);
  CHECK(slot_shape(l, Slot::kDown).d_in == 11008);
  CHECK(slot_shape(l, Slot::kGate).d_out == 11008);

  const auto dir = test::tmp_dir("mg_config");
  save_config(dir / "c.json", c);
  CHECK(load_config(dir / "c.json") == c);
  test::write_file(dir / "hf.json",
                   R"({"hidden_size":8,"intermediate_size":16,"num_hidden_layers":2,"num_attention_heads":2,)"
                   R"("vocab_size":11,"rms_norm_eps":1e-5})");
  CHECK(load_config(dir / "hf.json").rms_eps == 1e-5);
}

TEST_CASE("apply_linear") {
  const Matrix x = random_matrix(5, 4, 1);
  CHECK(apply_linear(LinearRepr::dense(Matrix::identity(4)), x) == x);
  CHECK_THROWS_AS(apply_linear(LinearRepr::dense(Matrix::identity(3)), x), Error);

  const Matrix w = random_matrix(8, 6, 2);
  const Matrix calib = random_matrix(100, 6, 3);
  const DecompositionResult full = decompose_layer(w, calib, 8);
  const LinearRepr lr = LinearRepr::low_rank(full.w1, full.w2);
  CHECK(max_abs_diff(lr.apply(calib), LinearRepr::dense(w).apply(calib)) <= 1e-4);
  CHECK(lr.param_count() == 8 * 14);

  const DecompositionResult two = decompose_layer(w, calib, 2);
  const Matrix probe = random_matrix(7, 6, 4);
  const Eigen::MatrixXd p = test::to_eigen(two.w1) * test::to_eigen(two.w1).transpose();
  const Eigen::MatrixXd expect = test::to_eigen(probe) * test::to_eigen(w).transpose() * p;
  CHECK((test::to_eigen(LinearRepr::low_rank(two.w1, two.w2).apply(probe)) - expect).cwiseAbs().maxCoeff() <= 1e-4);
}

TEST_CASE("zero weights leave only the residual path") {
  ModelConfig c = toy_config(1);
  ModelState m = make_toy_model(c, 3);
  for (auto& layer : m.layers)
    for (Slot s : kAllSlots) {
      const SlotShape shape = slot_shape(c, s);
      layer[s] = LinearRepr::dense(Matrix(shape.d_out, shape.d_in));
    }
  const TokenBatch t = make_token_batch(2, 5, c.vocab_size, 4);
  CHECK(forward_hidden(m, t, 0, Tap::kBlockOutput) == embed_tokens(m, t));
  m.lm_head = LinearRepr::dense(Matrix(c.vocab_size, c.hidden_size));
  const Matrix z = logits(m, t);
  CHECK(z.rows() == 10);
  CHECK(max_abs(z) == 0.0);
}

TEST_CASE("forward matches the straight-line reference at every tap") {
  const ModelConfig c = toy_config(2);
  const ModelState m = make_toy_model(c, 7, 0.3f);
  const TokenBatch t = make_token_batch(3, 6, c.vocab_size, 8);
  const Reference ref{m};
  for (std::size_t layer = 0; layer < 2; ++layer)
    for (Tap tap : {Tap::kAttnInput, Tap::kOInput, Tap::kMlpInput, Tap::kDownInput, Tap::kBlockOutput}) {
      CAPTURE(tap_name(tap));
      CHECK(max_diff(forward_hidden(m, t, layer, tap), ref.run(t, layer, tap)) <= 1e-4);
    }
  const Matrix z = logits(m, t);
  CHECK(z.rows() == 18);
  CHECK(max_diff(z, ref.logits(t)) <= 1e-4);
}

TEST_CASE("forward is causal") {
  const ModelConfig c = toy_config(2);
  const ModelState m = make_toy_model(c, 9, 0.3f);
  TokenBatch t = make_token_batch(1, 8, c.vocab_size, 10);
  const Matrix before = forward_hidden(m, t, 1, Tap::kBlockOutput);
  t.ids[5] = (t.ids[5] + 1) % c.vocab_size;
  const Matrix after = forward_hidden(m, t, 1, Tap::kBlockOutput);
  for (std::size_t s = 0; s < 5; ++s)
    for (std::size_t i = 0; i < c.hidden_size; ++i) CHECK(before(s, i) == after(s, i));
  CHECK(max_abs_diff(before, after) > 0.0);
}

TEST_CASE("tokens outside the vocabulary are range errors") {
  const ModelConfig c = toy_config(1);
  const ModelState m = make_toy_model(c, 1);
  TokenBatch t = make_token_batch(1, 3, c.vocab_size, 2);
  t.ids[1] = 11;
  try {
    forward_hidden(m, t, 0, Tap::kAttnInput);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kRange);
  }
  CHECK_THROWS_AS(parse_tap("nowhere"), Error);
}

TEST_CASE("building blocks") {
  const Matrix x = random_matrix(6, 8, 12, 3.0f);
  const std::vector<float> ones(8, 1.0f);
  const Matrix n = rms_norm(x, ones, 1e-6);
  for (std::size_t r = 0; r < 6; ++r) {
    double ms = 0;
    for (std::size_t c = 0; c < 8; ++c) ms += static_cast<double>(n(r, c)) * n(r, c);
    CHECK(ms / 8 == doctest::Approx(1.0).epsilon(1e-5));
  }

  Matrix q = random_matrix(12, 8, 13);
  const Matrix q0 = q;
  apply_rotary(q, 2, 6, 10000.0);
  for (std::size_t r = 0; r < 12; ++r)
    for (std::size_t h = 0; h < 2; ++h) {
      double a = 0, b = 0;
      for (std::size_t i = 0; i < 4; ++i) {
        a += static_cast<double>(q0(r, h * 4 + i)) * q0(r, h * 4 + i);
        b += static_cast<double>(q(r, h * 4 + i)) * q(r, h * 4 + i);
      }
      CHECK(b == doctest::Approx(a).epsilon(1e-5));
    }
  for (std::size_t i = 0; i < 8; ++i) CHECK(q(0, i) == q0(0, i));  // position 0 is not rotated

  // With v = identity rows the context equals the attention weights.
  const std::size_t S = 5;
  const Matrix qa = random_matrix(S, 5, 14), ka = random_matrix(S, 5, 15);
  const Matrix ctx = causal_attention(qa, ka, Matrix::identity(S), 1, S);
  for (std::size_t i = 0; i < S; ++i) {
    double total = 0;
    for (std::size_t j = 0; j < S; ++j) {
      total += ctx(i, j);
      if (j > i) CHECK(ctx(i, j) == 0.0f);
    }
    CHECK(std::abs(total - 1.0) <= 1e-6);
  }
}

TEST_CASE("replace_layer") {
  const ModelConfig c = toy_config(2);
  ModelState m = make_toy_model(c, 21, 0.3f);
  const ModelState original = m;
  const TokenBatch t = make_token_batch(2, 6, c.vocab_size, 22);

  const Matrix in = forward_hidden(m, t, 1, Tap::kAttnInput);
  const Matrix w = m.layers[1][Slot::kQ].as_dense().w;
  const DecompositionResult full = decompose_layer(w, in, c.hidden_size);
  replace_layer(m, 1, Slot::kQ, full.w1, full.w2);
  CHECK(m.layers[1][Slot::kQ].is_low_rank());
  CHECK(max_abs_diff(logits(m, t), logits(original, t)) <= 1e-4);
  CHECK(m.layers[1][Slot::kK] == original.layers[1][Slot::kK]);
  CHECK(m.layers[1][Slot::kV] == original.layers[1][Slot::kV]);
  CHECK(forward_hidden(m, t, 1, Tap::kAttnInput) == in);

  ModelState m2 = original;
  const DecompositionResult low = decompose_layer(w, in, 2);
  replace_layer(m2, 1, Slot::kQ, low.w1, low.w2);
  CHECK(original.param_count() - m2.param_count() == 64 - 2 * 16);

  CHECK_THROWS_AS(replace_layer(m2, 0, Slot::kGate, low.w1, low.w2), Error);
  CHECK_THROWS_AS(replace_layer(m2, 5, Slot::kQ, low.w1, low.w2), Error);
}

TEST_CASE("model archives round-trip dense and low-rank slots") {
  const ModelConfig c = toy_config(2);
  ModelState m = make_toy_model(c, 31);
  const DecompositionResult r = decompose_layer(m.layers[1][Slot::kUp].as_dense().w, random_matrix(30, 8, 1), 3);
  replace_layer(m, 1, Slot::kUp, r.w1, r.w2);
  const auto dir = test::tmp_dir("mg_archive");
  write_archive(dir / "m.st", model_tensors(m));
  const TensorArchive archive = open_archive(dir / "m.st");
  CHECK(archive.contains("model.layers.0.self_attn.q_proj.weight"));
  CHECK(archive.contains("model.layers.1.mlp.up_proj.weight.rom_w1"));
  CHECK_FALSE(archive.contains("model.layers.1.mlp.up_proj.weight"));
  CHECK(archive.contains("lm_head.weight"));
  CHECK(load_model(archive, c) == m);

  ModelConfig wrong = c;
  wrong.intermediate_size = 12;
  CHECK_THROWS_AS(load_model(archive, wrong), Error);
}
