#include "rom/linalg.hpp"

#include <algorithm>
#include <atomic>
#include <thread>
#include <vector>

#include "rom/kernels.hpp"

namespace rom {

namespace {
std::atomic<std::size_t> g_threads{1};
}

void set_num_threads(std::size_t n) { g_threads.store(std::max<std::size_t>(1, n)); }

std::size_t num_threads() { return g_threads.load(); }

void parallel_for(std::size_t count, const std::function<void(std::size_t, std::size_t)>& body) {
  const std::size_t workers = std::min(num_threads(), count);
  if (workers <= 1) {
    if (count > 0) body(0, count);
    return;
  }
  const std::size_t chunk = (count + workers - 1) / workers;
  std::vector<std::jthread> pool;
  pool.reserve(workers - 1);
  for (std::size_t w = 1; w < workers; ++w) {
    const std::size_t begin = w * chunk;
    const std::size_t end = std::min(count, begin + chunk);
    if (begin < end) pool.emplace_back([&body, begin, end] { body(begin, end); });
  }
  body(0, std::min(count, chunk));
}

namespace {

template <typename Out, typename A, typename Dot>
BasicMatrix<Out> product_nt(const BasicMatrix<A>& a, const Matrix& b, Dot dot) {
  require(a.cols() == b.cols(), ErrorKind::kDimension,
          "matmul inner dimension mismatch: " + shape_string(a) + " * (" + shape_string(b) + ")^T");
  BasicMatrix<Out> out(a.rows(), b.rows());
  const std::size_t k = a.cols();
  parallel_for(a.rows(), [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const A* arow = a.row(i).data();
      Out* orow = out.row(i).data();
      for (std::size_t j = 0; j < b.rows(); ++j) orow[j] = static_cast<Out>(dot(arow, b.row(j).data(), k));
    }
  });
  return out;
}

}  // namespace

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  return product_nt<float>(a, b, kernels::active().dot_f32);
}

MatrixD matmul_nt_wide(const Matrix& a, const Matrix& b) {
  return product_nt<double>(a, b, kernels::active().dot_f32);
}

MatrixD matmul_nt_wide(const MatrixD& a, const Matrix& b) {
  return product_nt<double>(a, b, kernels::active().dot_f64_f32);
}

double frobenius_sq(const MatrixD& m) {
  const auto v = m.values();
  return kernels::active().dot_f64(v.data(), v.data(), v.size());
}

}  // namespace rom
