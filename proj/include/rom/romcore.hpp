#pragma once

// Activation-space reduced-order modelling of a single linear layer.
//
// For a layer y = W x with calibration inputs X (one token per row), the
// output activations Y = X W^T are summarised by their uncentered second
// moment S = Y^T Y / N. The top-r eigenvectors V_r of S span the dominant
// output subspace, and the layer is rewritten as two smaller layers
//   w2 = V_r W      (r x d_in, applied first)
//   w1 = V_r^T      (d_out x r)
// so that w1 w2 x is the orthogonal projection of W x onto that subspace.

#include <cstddef>
#include <vector>

#include "rom/matrix.hpp"

namespace rom {

struct Spectrum {
  std::vector<double> eigenvalues;  // descending, clamped at zero
  MatrixD components;               // row j is the unit eigenvector for eigenvalues[j]
};

struct DecompositionResult {
  Matrix w1;  // d_out x r, orthonormal columns
  Matrix w2;  // r x d_in
  std::size_t rank = 0;
  double retained_energy = 0.0;
  double discarded_energy = 0.0;
  std::size_t sample_count = 0;
  std::vector<double> eigenvalues;  // full spectrum of the output second moment
};

enum class EigenMethod {
  kAuto,      // Jacobi up to kJacobiLimit, tridiagonal QL above
  kJacobi,    // cyclic Jacobi rotations
  kTridiagQl  // Householder tridiagonalisation + implicit QL
};

inline constexpr std::size_t kJacobiLimit = 384;

// Accumulates Y^T Y over row blocks so Y never needs to be resident at once.
class GramAccumulator {
 public:
  explicit GramAccumulator(std::size_t width);

  void add_rows(const Matrix& rows);
  void add_rows(const MatrixD& rows);

  std::size_t sample_count() const noexcept { return samples_; }
  std::size_t width() const noexcept { return width_; }

  // S = (sum of y y^T) / N, exactly symmetric. Throws kEmptySample when N = 0.
  MatrixD second_moment() const;

 private:
  std::size_t width_;
  std::size_t samples_ = 0;
  MatrixD sum_;  // upper triangle accumulated, mirrored on read
};

// (Y^T Y) / N for an N x d activation matrix.
Matrix second_moment(const Matrix& activations);
MatrixD second_moment_wide(const Matrix& activations);

// Symmetric eigendecomposition in descending order. Each eigenvector is
// signed so that its first largest-magnitude component is non-negative.
Spectrum eig_sym_desc(const MatrixD& s, EigenMethod method = EigenMethod::kAuto);
Spectrum eig_sym_desc(const Matrix& s, EigenMethod method = EigenMethod::kAuto);

// Sweep cap and convergence threshold (relative to the largest diagonal
// magnitude) for the Jacobi solver.
inline constexpr int kJacobiMaxSweeps = 100;
inline constexpr double kJacobiTolerance = 1e-10;

// Decomposes a d_out x d_in layer from its N x d_in calibration inputs.
DecompositionResult decompose_layer(const Matrix& w, const Matrix& inputs, std::size_t rank,
                                    EigenMethod method = EigenMethod::kAuto);

// Same, when the output second moment was already accumulated elsewhere.
DecompositionResult decompose_from_moment(const Matrix& w, const MatrixD& moment, std::size_t sample_count,
                                          std::size_t rank, EigenMethod method = EigenMethod::kAuto);

// ||X W^T - X w2^T w1^T||_F^2, accumulated in double.
double reconstruction_error(const DecompositionResult& result, const Matrix& w, const Matrix& inputs);

}  // namespace rom
