#include "rom/error.hpp"

namespace rom {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kFormat: return "format";
    case ErrorKind::kIntegrity: return "integrity";
    case ErrorKind::kLookup: return "lookup";
    case ErrorKind::kUnsupportedShape: return "unsupported-shape";
    case ErrorKind::kIo: return "I/O";
    case ErrorKind::kRange: return "range";
    case ErrorKind::kDimension: return "dimension";
    case ErrorKind::kRank: return "rank";
    case ErrorKind::kNumerical: return "numerical";
    case ErrorKind::kPrecondition: return "precondition";
    case ErrorKind::kArgument: return "argument";
    case ErrorKind::kEmptySample: return "empty-sample";
    case ErrorKind::kNoPreset: return "no-preset";
    case ErrorKind::kPlan: return "plan";
  }
  return "unknown";
}

}  // namespace rom
