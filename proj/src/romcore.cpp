#include "rom/romcore.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "rom/kernels.hpp"
#include "rom/linalg.hpp"

namespace rom {

GramAccumulator::GramAccumulator(std::size_t width) : width_(width), sum_(width, width) {}

void GramAccumulator::add_rows(const Matrix& rows) { add_rows(matrix_cast<double>(rows)); }

void GramAccumulator::add_rows(const MatrixD& rows) {
  require(rows.cols() == width_, ErrorKind::kDimension,
          "activation width " + std::to_string(rows.cols()) + " != " + std::to_string(width_));
  if (rows.rows() == 0) return;
  const MatrixD columns = rows.transposed();
  const std::size_t n = rows.rows();
  const auto dot = kernels::active().dot_f64;
  parallel_for(width_, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const double* ci = columns.row(i).data();
      for (std::size_t j = i; j < width_; ++j) sum_(i, j) += dot(ci, columns.row(j).data(), n);
    }
  });
  samples_ += n;
}

MatrixD GramAccumulator::second_moment() const {
  require(samples_ > 0, ErrorKind::kEmptySample, "second moment of zero activation rows");
  MatrixD s(width_, width_);
  const double inv = 1.0 / static_cast<double>(samples_);
  for (std::size_t i = 0; i < width_; ++i) {
    for (std::size_t j = i; j < width_; ++j) {
      s(i, j) = sum_(i, j) * inv;
      s(j, i) = s(i, j);
    }
  }
  return s;
}

MatrixD second_moment_wide(const Matrix& activations) {
  require(activations.rows() > 0, ErrorKind::kEmptySample, "second moment of zero activation rows");
  require(activations.all_finite(), ErrorKind::kNumerical, "non-finite activations");
  GramAccumulator acc(activations.cols());
  acc.add_rows(activations);
  return acc.second_moment();
}

Matrix second_moment(const Matrix& activations) { return matrix_cast<float>(second_moment_wide(activations)); }

namespace {

struct RawEigen {
  std::vector<double> values;
  MatrixD vectors;  // rows
};

RawEigen jacobi(MatrixD a) {
  const std::size_t n = a.rows();
  MatrixD e = MatrixD::identity(n);
  const auto rotate = kernels::active().rotate_f64;

  for (int sweep = 0;; ++sweep) {
    double off = 0.0;
    double scale = 0.0;
    for (std::size_t p = 0; p < n; ++p) {
      scale = std::max(scale, std::abs(a(p, p)));
      for (std::size_t q = p + 1; q < n; ++q) off = std::max(off, std::abs(a(p, q)));
    }
    if (off == 0.0 || off < kJacobiTolerance * scale) break;
    if (sweep == kJacobiMaxSweeps)
      fail(ErrorKind::kNumerical, "Jacobi eigensolver did not converge after " + std::to_string(sweep) +
                                      " sweeps (max off-diagonal " + std::to_string(off) + ")");

    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double app = a(p, p);
        const double aqq = a(q, q);
        const double theta = (aqq - app) / (2.0 * apq);
        double t = 1.0 / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        if (theta < 0.0) t = -t;
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;

        rotate(a.row(p).data(), a.row(q).data(), c, s, n);
        a(p, p) = app - t * apq;
        a(q, q) = aqq + t * apq;
        a(p, q) = 0.0;
        a(q, p) = 0.0;
        for (std::size_t r = 0; r < n; ++r) {
          if (r == p || r == q) continue;
          a(r, p) = a(p, r);
          a(r, q) = a(q, r);
        }
        rotate(e.row(p).data(), e.row(q).data(), c, s, n);
      }
    }
  }

  RawEigen out;
  out.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) out.values[i] = a(i, i);
  out.vectors = std::move(e);
  return out;
}

// Householder reduction to tridiagonal form followed by implicit QL, after
// the EISPACK tred2/tql2 pair. Works on the transpose of the usual layout so
// eigenvectors end up as contiguous rows of w.
RawEigen tridiagonal_ql(const MatrixD& s) {
  const std::size_t n = s.rows();
  const kernels::KernelTable& k = kernels::active();
  MatrixD w = s;
  std::vector<double> d(n), e(n);

  for (std::size_t j = 0; j < n; ++j) d[j] = w(j, n - 1);
  for (std::size_t i = n - 1; i > 0; --i) {
    double scale = 0.0;
    double h = 0.0;
    for (std::size_t c = 0; c < i; ++c) scale += std::abs(d[c]);
    if (scale == 0.0) {
      e[i] = d[i - 1];
      for (std::size_t j = 0; j < i; ++j) {
        d[j] = w(j, i - 1);
        w(j, i) = 0.0;
        w(i, j) = 0.0;
      }
    } else {
      for (std::size_t c = 0; c < i; ++c) {
        d[c] /= scale;
        h += d[c] * d[c];
      }
      double f = d[i - 1];
      double g = std::sqrt(h);
      if (f > 0) g = -g;
      e[i] = scale * g;
      h -= f * g;
      d[i - 1] = f - g;
      for (std::size_t j = 0; j < i; ++j) e[j] = 0.0;
      for (std::size_t j = 0; j < i; ++j) {
        f = d[j];
        w(i, j) = f;
        double* row = w.row(j).data();
        const std::size_t len = i - 1 - j;
        g = e[j] + row[j] * f + k.dot_f64(row + j + 1, d.data() + j + 1, len);
        k.axpy_f64(f, row + j + 1, e.data() + j + 1, len);
        e[j] = g;
      }
      f = 0.0;
      for (std::size_t j = 0; j < i; ++j) {
        e[j] /= h;
        f += e[j] * d[j];
      }
      const double hh = f / (h + h);
      for (std::size_t j = 0; j < i; ++j) e[j] -= hh * d[j];
      for (std::size_t j = 0; j < i; ++j) {
        f = d[j];
        g = e[j];
        double* row = w.row(j).data();
        for (std::size_t c = j; c < i; ++c) row[c] -= f * e[c] + g * d[c];
        d[j] = w(j, i - 1);
        w(j, i) = 0.0;
      }
    }
    d[i] = h;
  }

  for (std::size_t i = 0; i + 1 < n; ++i) {
    w(i, n - 1) = w(i, i);
    w(i, i) = 1.0;
    const double h = d[i + 1];
    if (h != 0.0) {
      const double* pivot = w.row(i + 1).data();
      for (std::size_t c = 0; c <= i; ++c) d[c] = pivot[c] / h;
      for (std::size_t j = 0; j <= i; ++j) {
        const double g = k.dot_f64(pivot, w.row(j).data(), i + 1);
        k.axpy_f64(-g, d.data(), w.row(j).data(), i + 1);
      }
    }
    for (std::size_t c = 0; c <= i; ++c) w(i + 1, c) = 0.0;
  }
  for (std::size_t j = 0; j < n; ++j) {
    d[j] = w(j, n - 1);
    w(j, n - 1) = 0.0;
  }
  w(n - 1, n - 1) = 1.0;
  e[0] = 0.0;

  for (std::size_t i = 1; i < n; ++i) e[i - 1] = e[i];
  e[n - 1] = 0.0;

  double f = 0.0;
  double tst1 = 0.0;
  const double eps = std::ldexp(1.0, -52);
  constexpr int kMaxIterations = 60;
  for (std::size_t l = 0; l < n; ++l) {
    tst1 = std::max(tst1, std::abs(d[l]) + std::abs(e[l]));
    std::size_t m = l;
    while (m < n) {
      if (std::abs(e[m]) <= eps * tst1) break;
      ++m;
    }
    if (m > l) {
      int iter = 0;
      do {
        if (++iter > kMaxIterations)
          fail(ErrorKind::kNumerical, "tridiagonal QL did not converge for eigenvalue " + std::to_string(l) +
                                          " after " + std::to_string(kMaxIterations) + " iterations");
        double g = d[l];
        double p = (d[l + 1] - g) / (2.0 * e[l]);
        double r = std::hypot(p, 1.0);
        if (p < 0) r = -r;
        d[l] = e[l] / (p + r);
        d[l + 1] = e[l] * (p + r);
        const double dl1 = d[l + 1];
        double h = g - d[l];
        for (std::size_t i = l + 2; i < n; ++i) d[i] -= h;
        f += h;

        p = d[m];
        double c = 1.0, c2 = 1.0, c3 = 1.0;
        const double el1 = e[l + 1];
        double sn = 0.0, s2 = 0.0;
        for (std::size_t ii = m; ii-- > l;) {
          c3 = c2;
          c2 = c;
          s2 = sn;
          g = c * e[ii];
          h = c * p;
          r = std::hypot(p, e[ii]);
          e[ii + 1] = sn * r;
          sn = e[ii] / r;
          c = p / r;
          p = c * d[ii] - sn * g;
          d[ii + 1] = h + sn * (c * g + sn * d[ii]);
          k.rotate_f64(w.row(ii).data(), w.row(ii + 1).data(), c, sn, n);
        }
        p = -sn * s2 * c3 * el1 * e[l] / dl1;
        e[l] = sn * p;
        d[l] = c * p;
      } while (std::abs(e[l]) > eps * tst1);
    }
    d[l] += f;
    e[l] = 0.0;
  }

  return RawEigen{std::move(d), std::move(w)};
}

}  // namespace

Spectrum eig_sym_desc(const MatrixD& s, EigenMethod method) {
  require(s.rows() == s.cols(), ErrorKind::kDimension, "eigendecomposition needs a square matrix, got " + shape_string(s));
  require(s.all_finite(), ErrorKind::kNumerical, "non-finite entries in symmetric matrix");
  const std::size_t n = s.rows();
  if (n == 0) return {};

  double asymmetry = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) asymmetry = std::max(asymmetry, std::abs(s(i, j) - s(j, i)));
  require(asymmetry <= 1e-6, ErrorKind::kPrecondition,
          "matrix is not symmetric (max asymmetry " + std::to_string(asymmetry) + ")");

  MatrixD sym = s;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) sym(i, j) = sym(j, i) = 0.5 * (s(i, j) + s(j, i));

  if (method == EigenMethod::kAuto) method = n <= kJacobiLimit ? EigenMethod::kJacobi : EigenMethod::kTridiagQl;
  RawEigen raw = method == EigenMethod::kJacobi ? jacobi(std::move(sym)) : tridiagonal_ql(sym);

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return raw.values[a] > raw.values[b]; });

  Spectrum out;
  out.eigenvalues.resize(n);
  out.components = MatrixD(n, n);
  const double top = std::max(raw.values[order[0]], 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    double lambda = raw.values[order[j]];
    if (lambda < 0.0) {
      if (lambda < -1e-8 * top)
        fail(ErrorKind::kNumerical, "eigenvalue " + std::to_string(lambda) +
                                        " is negative beyond round-off; the matrix is not positive semidefinite");
      lambda = 0.0;
    }
    out.eigenvalues[j] = lambda;

    auto src = raw.vectors.row(order[j]);
    auto dst = out.components.row(j);
    double biggest = 0.0;
    for (double x : src) biggest = std::max(biggest, std::abs(x));
    std::size_t lead = 0;
    while (std::abs(src[lead]) < biggest * (1.0 - 1e-9)) ++lead;
    const double sign = src[lead] < 0.0 ? -1.0 : 1.0;
    for (std::size_t k = 0; k < n; ++k) dst[k] = sign * src[k];
  }
  return out;
}

Spectrum eig_sym_desc(const Matrix& s, EigenMethod method) { return eig_sym_desc(matrix_cast<double>(s), method); }

DecompositionResult decompose_from_moment(const Matrix& w, const MatrixD& moment, std::size_t sample_count,
                                          std::size_t rank, EigenMethod method) {
  const std::size_t d_out = w.rows();
  const std::size_t d_in = w.cols();
  require(moment.rows() == d_out && moment.cols() == d_out, ErrorKind::kDimension,
          "second moment " + shape_string(moment) + " does not match layer output width " + std::to_string(d_out));
  require(rank >= 1 && rank <= d_out, ErrorKind::kRank,
          "rank " + std::to_string(rank) + " outside [1, " + std::to_string(d_out) + "]");

  Spectrum spectrum = eig_sym_desc(moment, method);

  DecompositionResult result;
  result.rank = rank;
  result.sample_count = sample_count;
  result.w1 = Matrix(d_out, rank);
  result.w2 = Matrix(rank, d_in);
  const auto axpy = kernels::active().axpy_f64_f32;
  std::vector<double> acc(d_in);
  for (std::size_t k = 0; k < rank; ++k) {
    auto component = spectrum.components.row(k);
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t i = 0; i < d_out; ++i) {
      result.w1(i, k) = static_cast<float>(component[i]);
      if (component[i] != 0.0) axpy(component[i], w.row(i).data(), acc.data(), d_in);
    }
    for (std::size_t j = 0; j < d_in; ++j) result.w2(k, j) = static_cast<float>(acc[j]);
  }
  for (std::size_t j = 0; j < d_out; ++j) (j < rank ? result.retained_energy : result.discarded_energy) += spectrum.eigenvalues[j];
  result.eigenvalues = std::move(spectrum.eigenvalues);
  return result;
}

DecompositionResult decompose_layer(const Matrix& w, const Matrix& inputs, std::size_t rank, EigenMethod method) {
  require(inputs.cols() == w.cols(), ErrorKind::kDimension,
          "inputs " + shape_string(inputs) + " do not match layer " + shape_string(w));
  require(inputs.rows() >= 1, ErrorKind::kEmptySample, "no calibration rows");
  require(rank >= 1 && rank <= w.rows(), ErrorKind::kRank,
          "rank " + std::to_string(rank) + " outside [1, " + std::to_string(w.rows()) + "]");
  require(inputs.all_finite(), ErrorKind::kNumerical, "non-finite calibration inputs");

  constexpr std::size_t kBlockRows = 1024;
  GramAccumulator acc(w.rows());
  for (std::size_t begin = 0; begin < inputs.rows(); begin += kBlockRows) {
    const std::size_t count = std::min(kBlockRows, inputs.rows() - begin);
    const auto first = inputs.storage().begin() + static_cast<std::ptrdiff_t>(begin * inputs.cols());
    Matrix block(count, inputs.cols(),
                 std::vector<float>(first, first + static_cast<std::ptrdiff_t>(count * inputs.cols())));
    acc.add_rows(matmul_nt_wide(block, w));
  }
  return decompose_from_moment(w, acc.second_moment(), inputs.rows(), rank, method);
}

double reconstruction_error(const DecompositionResult& result, const Matrix& w, const Matrix& inputs) {
  require(inputs.cols() == w.cols() && result.w2.cols() == w.cols() && result.w1.rows() == w.rows() &&
              result.w1.cols() == result.w2.rows(),
          ErrorKind::kDimension, "factor shapes do not match layer " + shape_string(w) + " and inputs " +
                                     shape_string(inputs));
  const MatrixD exact = matmul_nt_wide(inputs, w);
  const MatrixD approx = matmul_nt_wide(matmul_nt_wide(inputs, result.w2), result.w1);
  double total = 0.0;
  auto a = exact.values();
  auto b = approx.values();
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    total += d * d;
  }
  return total;
}

}  // namespace rom
