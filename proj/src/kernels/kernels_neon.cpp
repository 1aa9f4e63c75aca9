// AArch64 Advanced SIMD variants. Double lanes are native on AArch64 only.

#include <arm_neon.h>

#include "tables.hpp"

namespace rom::kernels {
namespace {

double dot_f32(const float* a, const float* b, std::size_t n) {
  float64x2_t acc0 = vdupq_n_f64(0.0);
  float64x2_t acc1 = vdupq_n_f64(0.0);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const float32x4_t va = vld1q_f32(a + i);
    const float32x4_t vb = vld1q_f32(b + i);
    acc0 = vfmaq_f64(acc0, vcvt_f64_f32(vget_low_f32(va)), vcvt_f64_f32(vget_low_f32(vb)));
    acc1 = vfmaq_f64(acc1, vcvt_high_f64_f32(va), vcvt_high_f64_f32(vb));
  }
  double sum = vaddvq_f64(vaddq_f64(acc0, acc1));
  for (; i < n; ++i) sum += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return sum;
}

double dot_f64(const double* a, const double* b, std::size_t n) {
  float64x2_t acc0 = vdupq_n_f64(0.0);
  float64x2_t acc1 = vdupq_n_f64(0.0);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    acc0 = vfmaq_f64(acc0, vld1q_f64(a + i), vld1q_f64(b + i));
    acc1 = vfmaq_f64(acc1, vld1q_f64(a + i + 2), vld1q_f64(b + i + 2));
  }
  double sum = vaddvq_f64(vaddq_f64(acc0, acc1));
  for (; i < n; ++i) sum += a[i] * b[i];
  return sum;
}

double dot_f64_f32(const double* a, const float* b, std::size_t n) {
  float64x2_t acc0 = vdupq_n_f64(0.0);
  float64x2_t acc1 = vdupq_n_f64(0.0);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const float32x4_t vb = vld1q_f32(b + i);
    acc0 = vfmaq_f64(acc0, vld1q_f64(a + i), vcvt_f64_f32(vget_low_f32(vb)));
    acc1 = vfmaq_f64(acc1, vld1q_f64(a + i + 2), vcvt_high_f64_f32(vb));
  }
  double sum = vaddvq_f64(vaddq_f64(acc0, acc1));
  for (; i < n; ++i) sum += a[i] * static_cast<double>(b[i]);
  return sum;
}

void axpy_f64(double alpha, const double* x, double* y, std::size_t n) {
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) vst1q_f64(y + i, vfmaq_n_f64(vld1q_f64(y + i), vld1q_f64(x + i), alpha));
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void axpy_f64_f32(double alpha, const float* x, double* y, std::size_t n) {
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) {
    vst1q_f64(y + i, vfmaq_n_f64(vld1q_f64(y + i), vcvt_f64_f32(vld1_f32(x + i)), alpha));
  }
  for (; i < n; ++i) y[i] += alpha * static_cast<double>(x[i]);
}

void rotate_f64(double* x, double* y, double c, double s, std::size_t n) {
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) {
    const float64x2_t xi = vld1q_f64(x + i);
    const float64x2_t yi = vld1q_f64(y + i);
    vst1q_f64(x + i, vfmsq_n_f64(vmulq_n_f64(xi, c), yi, s));
    vst1q_f64(y + i, vfmaq_n_f64(vmulq_n_f64(yi, c), xi, s));
  }
  for (; i < n; ++i) {
    const double xi = x[i];
    const double yi = y[i];
    x[i] = c * xi - s * yi;
    y[i] = s * xi + c * yi;
  }
}

void half_to_float(const std::uint16_t* src, float* dst, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    vst1q_f32(dst + i, vcvt_f32_f16(vreinterpret_f16_u16(vld1_u16(src + i))));
  }
  for (; i < n; ++i) dst[i] = half_bits_to_float(src[i]);
}

void float_to_half(const float* src, std::uint16_t* dst, std::size_t n) {
  // Scalar path: the hardware conversion's NaN payload handling differs from F16C.
  for (std::size_t i = 0; i < n; ++i) dst[i] = float_to_half_bits(src[i]);
}

void bf16_to_float(const std::uint16_t* src, float* dst, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    vst1q_f32(dst + i, vreinterpretq_f32_u32(vshll_n_u16(vld1_u16(src + i), 16)));
  }
  for (; i < n; ++i) dst[i] = bf16_bits_to_float(src[i]);
}

}  // namespace

namespace detail {

const KernelTable kNeonTable{
    .isa = Isa::kNeon,
    .dot_f32 = dot_f32,
    .dot_f64 = dot_f64,
    .dot_f64_f32 = dot_f64_f32,
    .axpy_f64 = axpy_f64,
    .axpy_f64_f32 = axpy_f64_f32,
    .rotate_f64 = rotate_f64,
    .half_to_float = half_to_float,
    .float_to_half = float_to_half,
    .bf16_to_float = bf16_to_float,
};

}  // namespace detail
}  // namespace rom::kernels
