#pragma once

#include "rom/kernels.hpp"

namespace rom::kernels::detail {

extern const KernelTable kScalarTable;

#if defined(ROM_HAVE_AVX2)
extern const KernelTable kAvx2Table;
#endif

#if defined(ROM_HAVE_NEON)
extern const KernelTable kNeonTable;
#endif

}  // namespace rom::kernels::detail
