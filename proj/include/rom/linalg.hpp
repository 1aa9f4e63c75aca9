#pragma once

#include <cstddef>
#include <functional>

#include "rom/matrix.hpp"

namespace rom {

// Caps internal parallelism. Every parallel loop partitions independent output
// elements, so results do not depend on the thread count.
void set_num_threads(std::size_t n);
std::size_t num_threads();

// Runs body(begin, end) over [0, count) split into contiguous chunks.
void parallel_for(std::size_t count, const std::function<void(std::size_t, std::size_t)>& body);

// a * b^T with double accumulation, rounded to float. a: n x k, b: m x k.
Matrix matmul_nt(const Matrix& a, const Matrix& b);

// Same product kept in double.
MatrixD matmul_nt_wide(const Matrix& a, const Matrix& b);

// a * b^T with a in double and b in float.
MatrixD matmul_nt_wide(const MatrixD& a, const Matrix& b);

double frobenius_sq(const MatrixD& m);

template <typename T>
double max_abs(const BasicMatrix<T>& m) {
  double best = 0.0;
  for (const T& v : m.values()) best = std::max(best, std::abs(static_cast<double>(v)));
  return best;
}

template <typename A, typename B>
double max_abs_diff(const BasicMatrix<A>& a, const BasicMatrix<B>& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), ErrorKind::kDimension,
          "shape mismatch " + shape_string(a) + " vs " + shape_string(b));
  double best = 0.0;
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i)
    best = std::max(best, std::abs(static_cast<double>(av[i]) - static_cast<double>(bv[i])));
  return best;
}

}  // namespace rom
