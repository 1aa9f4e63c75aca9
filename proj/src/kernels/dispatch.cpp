#include <atomic>

#include "rom/error.hpp"
#include "tables.hpp"

namespace rom::kernels {

std::string_view to_string(Isa isa) {
  switch (isa) {
    case Isa::kScalar: return "scalar";
    case Isa::kAvx2: return "avx2";
    case Isa::kNeon: return "neon";
  }
  return "unknown";
}

const KernelTable& scalar_table() { return detail::kScalarTable; }

const KernelTable* table_for(Isa isa) {
  switch (isa) {
    case Isa::kScalar:
      return &detail::kScalarTable;
    case Isa::kAvx2:
#if defined(ROM_HAVE_AVX2)
      if (__builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma") && __builtin_cpu_supports("f16c")) {
        return &detail::kAvx2Table;
      }
#endif
      return nullptr;
    case Isa::kNeon:
#if defined(ROM_HAVE_NEON)
      return &detail::kNeonTable;
#else
      return nullptr;
#endif
  }
  return nullptr;
}

std::vector<Isa> supported_isas() {
  std::vector<Isa> out;
  for (Isa isa : {Isa::kScalar, Isa::kAvx2, Isa::kNeon}) {
    if (table_for(isa) != nullptr) out.push_back(isa);
  }
  return out;
}

namespace {

const KernelTable* best_table() {
  for (Isa isa : {Isa::kAvx2, Isa::kNeon}) {
    if (const KernelTable* t = table_for(isa)) return t;
  }
  return &detail::kScalarTable;
}

std::atomic<const KernelTable*>& active_slot() {
  static std::atomic<const KernelTable*> slot{best_table()};
  return slot;
}

}  // namespace

const KernelTable& active() { return *active_slot().load(std::memory_order_acquire); }

void force_isa(Isa isa) {
  const KernelTable* t = table_for(isa);
  require(t != nullptr, ErrorKind::kArgument, std::string("ISA not available: ") + std::string(to_string(isa)));
  active_slot().store(t, std::memory_order_release);
}

}  // namespace rom::kernels
