#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <string_view>

namespace tilefuse {

/// Raised for contract violations surfaced to the caller: missing bindings,
/// extent mismatches, malformed programs, scratchpad overflow.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DType { F32, F64 };

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();
inline constexpr double kPosInf = std::numeric_limits<double>::infinity();

inline constexpr int64_t dtype_bytes(DType t) { return t == DType::F32 ? 4 : 8; }

inline std::string_view dtype_name(DType t) { return t == DType::F32 ? "f32" : "f64"; }

inline DType parse_dtype(std::string_view s) {
  if (s == "f32" || s == "F32") return DType::F32;
  if (s == "f64" || s == "F64") return DType::F64;
  throw Error("unknown dtype '" + std::string(s) + "'");
}

/// Values stored in a tensor of the given dtype. Arithmetic is always F64;
/// F32 only affects what is stored at tensor boundaries.
inline double store_as(DType t, double v) {
  return t == DType::F32 ? static_cast<double>(static_cast<float>(v)) : v;
}

/// a - b, except that equal infinities cancel to 0. A fully masked softmax row
/// (all -inf) therefore yields exp(0) = 1 per element and a uniform 1/N row.
inline double masked_sub(double a, double b) {
  if (a == b && std::isinf(a)) return 0.0;
  return a - b;
}

}  // namespace tilefuse
