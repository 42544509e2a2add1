// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "sste/tensor.hpp"

namespace sste {

/// Parameters of an emulated 8-bit binary float: 1 sign bit, exp_bits
/// exponent bits, man_bits mantissa bits. The top exponent field is reserved
/// (IEEE style), subnormals are included, and values beyond the largest
/// finite magnitude saturate when `saturating` is set.
struct FloatFormat {
  int exp_bits = 4;
  int man_bits = 3;
  int bias = 7;
  bool saturating = true;

  static FloatFormat e4m3() { return {4, 3, 7, true}; }
  static FloatFormat e5m2() { return {5, 2, 15, true}; }
  static FloatFormat e3m4() { return {3, 4, 3, true}; }

  void validate() const {
    if (exp_bits < 2 || man_bits < 1 || exp_bits + man_bits != 7) {
      throw std::invalid_argument("float format: need exp_bits + man_bits == 7");
    }
  }

  int emin() const { return 1 - bias; }
  int emax() const { return (1 << exp_bits) - 2 - bias; }

  double max_value() const {
    return (2.0 - std::ldexp(1.0, -man_bits)) * std::ldexp(1.0, emax());
  }
  double min_normal() const { return std::ldexp(1.0, emin()); }
  double min_subnormal() const { return std::ldexp(1.0, emin() - man_bits); }

  std::string name() const {
    return "e" + std::to_string(exp_bits) + "m" + std::to_string(man_bits);
  }

  /// Every nonnegative representable value, ascending. Useful for exhaustive
  /// grid checks; the negative half is the mirror image.
  std::vector<double> nonnegative_grid() const {
    std::vector<double> g;
    const int steps = 1 << man_bits;
    for (int mant = 0; mant < steps; ++mant) {
      g.push_back(mant * min_subnormal());
    }
    for (int e = emin(); e <= emax(); ++e) {
      for (int mant = 0; mant < steps; ++mant) {
        g.push_back((1.0 + static_cast<double>(mant) / steps) * std::ldexp(1.0, e));
      }
    }
    return g;
  }
};

/// Parse "e4m3" / "e5m2" / "e3m4" into a format; "none" means no emulated
/// cast and maps to nullopt.
inline std::optional<FloatFormat> parse_float_format(const std::string& s) {
  if (s == "none") return std::nullopt;
  if (s == "e4m3") return FloatFormat::e4m3();
  if (s == "e5m2") return FloatFormat::e5m2();
  if (s == "e3m4") return FloatFormat::e3m4();
  throw std::invalid_argument("unknown float format: " + s);
}

namespace detail {

/// Round a nonnegative double to the nearest integer, ties to even.
inline double round_half_even_nonneg(double y) {
  const double f = std::floor(y);
  const double d = y - f;
  if (d > 0.5) return f + 1.0;
  if (d < 0.5) return f;
  return std::fmod(f, 2.0) == 0.0 ? f : f + 1.0;
}

}  // namespace detail

/// Round one finite double to the format's grid, nearest with ties to even.
/// Overflow saturates to the largest finite value (or returns infinity when
/// the format is non-saturating).
inline double quantize_value(double x, const FloatFormat& fmt) {
  if (std::isnan(x)) throw std::invalid_argument("quantize: NaN input");
  if (x == 0.0) return x;
  const double sign = x < 0.0 ? -1.0 : 1.0;
  const double ax = std::abs(x);
  if (std::isinf(ax)) {
    return sign * (fmt.saturating ? fmt.max_value()
                                  : std::numeric_limits<double>::infinity());
  }
  int e = std::ilogb(ax);
  if (e < fmt.emin()) e = fmt.emin();
  const double step = std::ldexp(1.0, e - fmt.man_bits);
  const double q = detail::round_half_even_nonneg(ax / step) * step;
  if (q > fmt.max_value()) {
    return sign * (fmt.saturating ? fmt.max_value()
                                  : std::numeric_limits<double>::infinity());
  }
  return sign * q;
}

/// Per-tensor scale: largest representable magnitude over the tensor's
/// absolute maximum. Zero tensors get scale 1.
inline double compute_scale(const Tensor& t, const FloatFormat& fmt) {
  if (!t.all_finite()) throw std::invalid_argument("compute_scale: non-finite input");
  const double amax = abs_max(t);
  if (amax == 0.0) return 1.0;
  return fmt.max_value() / amax;
}

struct QuantizedTensor {
  Tensor codes;  // values already on the format grid, still stored as doubles
  double scale = 1.0;
  FloatFormat fmt;
};

inline QuantizedTensor quantize(const Tensor& t, const FloatFormat& fmt, double scale) {
  fmt.validate();
  if (!(scale > 0.0) || !std::isfinite(scale)) {
    throw std::invalid_argument("quantize: scale must be positive and finite");
  }
  QuantizedTensor q{Tensor(t.shape()), scale, fmt};
  for (std::size_t i = 0; i < t.size(); ++i) q.codes[i] = quantize_value(t[i] * scale, fmt);
  return q;
}

inline Tensor dequantize(const QuantizedTensor& q) {
  Tensor out = q.codes;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= q.scale;
  return out;
}

/// Scale, quantize and de-scale in one go: the emulated low-precision cast
/// applied to each matrix operand right before a matmul.
inline Tensor fp8_round_trip(const Tensor& t, const FloatFormat& fmt) {
  fmt.validate();
  const double scale = compute_scale(t, fmt);
  Tensor out(t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) {
    out[i] = quantize_value(t[i] * scale, fmt) / scale;
  }
  return out;
}

}  // namespace sste
