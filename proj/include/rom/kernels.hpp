#pragma once

// Data-parallel inner loops. Every routine has a scalar reference version and,
// where the CPU allows, a vector version chosen once at startup. The vector
// versions may reassociate sums, so they agree with the reference to rounding,
// not bit-for-bit; the half-precision conversions are the exception and must be
// bit-exact.

#include <cstddef>
#include <cstdint>
#include <string_view>
#include <vector>

namespace rom::kernels {

enum class Isa { kScalar, kAvx2, kNeon };

std::string_view to_string(Isa isa);

struct KernelTable {
  Isa isa;
  // Sum of a[i]*b[i], accumulated in double.
  double (*dot_f32)(const float* a, const float* b, std::size_t n);
  double (*dot_f64)(const double* a, const double* b, std::size_t n);
  double (*dot_f64_f32)(const double* a, const float* b, std::size_t n);
  // y[i] += alpha * x[i]
  void (*axpy_f64)(double alpha, const double* x, double* y, std::size_t n);
  void (*axpy_f64_f32)(double alpha, const float* x, double* y, std::size_t n);
  // Plane rotation: x' = c*x - s*y, y' = s*x + c*y.
  void (*rotate_f64)(double* x, double* y, double c, double s, std::size_t n);
  void (*half_to_float)(const std::uint16_t* src, float* dst, std::size_t n);
  // Round-to-nearest-even; overflow saturates to infinity like IEEE conversion.
  void (*float_to_half)(const float* src, std::uint16_t* dst, std::size_t n);
  void (*bf16_to_float)(const std::uint16_t* src, float* dst, std::size_t n);
};

const KernelTable& scalar_table();

// Null when the ISA was not compiled in or the running CPU lacks it.
const KernelTable* table_for(Isa isa);

std::vector<Isa> supported_isas();

// The table used by the library. Selected from the best supported ISA on
// first use unless force_isa() was called.
const KernelTable& active();

// Pins the active table; throws rom::Error(kArgument) if unsupported here.
void force_isa(Isa isa);

// Scalar conversions, also used by the tables' tails.
float half_bits_to_float(std::uint16_t h);
std::uint16_t float_to_half_bits(float f);
float bf16_bits_to_float(std::uint16_t h);
std::uint16_t float_to_bf16_bits(float f);

}  // namespace rom::kernels
