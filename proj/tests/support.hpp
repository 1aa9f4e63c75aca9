#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>

#include "rom/matrix.hpp"
#include "rom/modelgraph.hpp"

namespace rom::test {

inline std::filesystem::path tmp_dir(const std::string& name) {
  const auto dir = std::filesystem::path(ROM_TEST_TMP) / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline Matrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed, float scale = 1.0f) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> dist(0.0f, scale);
  std::vector<float> v(rows * cols);
  for (auto& x : v) x = dist(rng);
  return Matrix(rows, cols, std::move(v));
}

template <typename T>
Eigen::MatrixXd to_eigen(const BasicMatrix<T>& m) {
  Eigen::MatrixXd e(m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) e(r, c) = static_cast<double>(m(r, c));
  return e;
}

inline ModelConfig toy_config(std::size_t layers = 2) {
  ModelConfig c;
  c.hidden_size = 8;
  c.intermediate_size = 16;
  c.num_layers = layers;
  c.num_heads = 2;
  c.vocab_size = 11;
  c.max_seq = 64;
  return c;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

inline void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
}

}  // namespace rom::test
