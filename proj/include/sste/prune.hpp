// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "sste/tensor.hpp"

namespace sste {

enum class RescaleRecipe { None, KeepL1, MinMse };

inline const char* to_string(RescaleRecipe r) {
  switch (r) {
    case RescaleRecipe::None: return "none";
    case RescaleRecipe::KeepL1: return "keep_l1";
    case RescaleRecipe::MinMse: return "min_mse";
  }
  return "?";
}

inline RescaleRecipe rescale_recipe_from_string(const std::string& s) {
  if (s == "none") return RescaleRecipe::None;
  if (s == "keep_l1") return RescaleRecipe::KeepL1;
  if (s == "min_mse") return RescaleRecipe::MinMse;
  throw std::invalid_argument("unknown rescale recipe: " + s);
}

/// Structured-sparsity settings: keep n of every m consecutive entries along
/// the last axis. gamma interpolates the soft shrinkage threshold between the
/// largest pruned magnitude (gamma = 0) and the smallest kept one (gamma = 1).
struct PruneConfig {
  int n = 2;
  int m = 4;
  double gamma = 0.0;
  RescaleRecipe rescale = RescaleRecipe::None;

  void validate() const {
    if (m < 2 || m > 256) throw std::invalid_argument("prune: m must be in [2, 256]");
    if (n < 1 || n >= m) throw std::invalid_argument("prune: n must satisfy 1 <= n < m");
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw std::invalid_argument("prune: gamma must be in [0, 1]");
  }
};

/// Per-element keep/prune bits, flat over a tensor's storage order.
class Mask {
 public:
  Mask() = default;
  explicit Mask(std::size_t size) : bits_(size, 0) {}

  std::size_t size() const { return bits_.size(); }
  bool operator[](std::size_t i) const { return bits_[i] != 0; }
  void set(std::size_t i, bool v) { bits_[i] = v ? 1 : 0; }
  std::uint8_t* data() { return bits_.data(); }
  const std::uint8_t* data() const { return bits_.data(); }

  std::size_t count() const {
    std::size_t c = 0;
    for (auto b : bits_) c += b;
    return c;
  }

  /// Number of positions where the two masks differ.
  std::size_t hamming(const Mask& o) const {
    if (o.size() != size()) throw std::invalid_argument("mask: size mismatch in comparison");
    std::size_t c = 0;
    for (std::size_t i = 0; i < bits_.size(); ++i) c += bits_[i] != o.bits_[i];
    return c;
  }

  bool operator==(const Mask& o) const { return bits_ == o.bits_; }

  std::uint64_t hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (auto b : bits_) {
      h ^= b;
      h *= 0x100000001b3ULL;
    }
    return h;
  }

 private:
  std::vector<std::uint8_t> bits_;
};

struct MaskedTensor {
  Tensor values;
  Mask mask;
};

namespace detail {

inline void check_prunable(const Tensor& w, const PruneConfig& cfg, const char* what) {
  cfg.validate();
  if (w.size() == 0) throw std::invalid_argument(std::string(what) + ": empty tensor");
  if (w.last_dim() % static_cast<std::size_t>(cfg.m) != 0) {
    throw std::invalid_argument(std::string(what) + ": last axis " +
                                std::to_string(w.last_dim()) + " not divisible by m=" +
                                std::to_string(cfg.m));
  }
  if (w.has_nan()) throw std::invalid_argument(std::string(what) + ": NaN in input");
}

}  // namespace detail

/// Indices of the n largest magnitudes in a block, ties broken toward the
/// lower index. Writes keep flags (0/1) into out_keep.
template <class Real>
void top_n_keep_flags(std::span<const Real> block, int n, std::span<std::uint8_t> out_keep) {
  const int m = static_cast<int>(block.size());
  if (m < 2 || m > 256 || n < 1 || n >= m) throw std::invalid_argument("top_n_keep_flags: bad block");
  std::array<int, 256> idx;
  for (int i = 0; i < m; ++i) idx[i] = i;
  std::sort(idx.begin(), idx.begin() + m, [&](int a, int b) {
    const Real ma = std::abs(block[a]), mb = std::abs(block[b]);
    if (ma != mb) return ma > mb;
    return a < b;
  });
  for (int i = 0; i < m; ++i) out_keep[i] = 0;
  for (int i = 0; i < n; ++i) out_keep[idx[i]] = 1;
}

/// Keep the n largest magnitudes of a block verbatim, zero the rest.
template <class Real>
void hard_threshold_block(std::span<const Real> block, int n, std::span<Real> out_values,
                          std::span<std::uint8_t> out_keep) {
  top_n_keep_flags(block, n, out_keep);
  for (std::size_t i = 0; i < block.size(); ++i) {
    out_values[i] = out_keep[i] ? block[i] : Real(0);
  }
}

/// Shrinkage threshold for a block: magnitudes sorted ascending as
/// t_1 <= ... <= t_m, the level is (1-gamma)*|t_{m-n}| + gamma*|t_{m-n+1}|.
template <class Real>
Real soft_threshold_level(std::span<const Real> block, int n, double gamma) {
  const int m = static_cast<int>(block.size());
  if (m < 2 || m > 256 || n < 1 || n >= m) throw std::invalid_argument("soft_threshold_level: bad block");
  std::array<Real, 256> mags;
  for (int i = 0; i < m; ++i) mags[i] = std::abs(block[i]);
  std::sort(mags.begin(), mags.begin() + m);
  const Real lo = mags[m - n - 1];
  const Real hi = mags[m - n];
  return static_cast<Real>((1.0 - gamma) * lo + gamma * hi);
}

/// Soft projection of one block: every entry is shrunk toward zero by the
/// block's threshold level, which leaves at most n nonzeros.
template <class Real>
void soft_threshold_block(std::span<const Real> block, int n, double gamma,
                          std::span<Real> out_values, std::span<std::uint8_t> out_keep) {
  const Real t = soft_threshold_level(block, n, gamma);
  for (std::size_t i = 0; i < block.size(); ++i) {
    const Real mag = std::abs(block[i]) - t;
    if (mag > Real(0)) {
      out_values[i] = block[i] < Real(0) ? -mag : mag;
      out_keep[i] = 1;
    } else {
      out_values[i] = Real(0);
      out_keep[i] = 0;
    }
  }
}

/// Blockwise magnitude pruning of a tensor; kept entries are copied verbatim.
inline MaskedTensor hard_threshold(const Tensor& w, const PruneConfig& cfg) {
  detail::check_prunable(w, cfg, "hard_threshold");
  MaskedTensor out{Tensor(w.shape()), Mask(w.size())};
  const std::size_t mm = static_cast<std::size_t>(cfg.m);
  for (std::size_t b = 0; b < w.size(); b += mm) {
    hard_threshold_block<double>({w.data() + b, mm}, cfg.n, {out.values.data() + b, mm},
                                 {out.mask.data() + b, mm});
  }
  return out;
}

/// Blockwise soft projection of a tensor. The mask marks the surviving
/// (nonzero) entries.
inline MaskedTensor soft_threshold(const Tensor& w, const PruneConfig& cfg) {
  detail::check_prunable(w, cfg, "soft_threshold");
  MaskedTensor out{Tensor(w.shape()), Mask(w.size())};
  const std::size_t mm = static_cast<std::size_t>(cfg.m);
  for (std::size_t b = 0; b < w.size(); b += mm) {
    soft_threshold_block<double>({w.data() + b, mm}, cfg.n, cfg.gamma,
                                 {out.values.data() + b, mm}, {out.mask.data() + b, mm});
  }
  return out;
}

/// Magnitude-pruning mask of a tensor without materializing pruned values.
inline Mask mask_of(const Tensor& w, const PruneConfig& cfg) {
  detail::check_prunable(w, cfg, "mask_of");
  Mask mask(w.size());
  const std::size_t mm = static_cast<std::size_t>(cfg.m);
  for (std::size_t b = 0; b < w.size(); b += mm) {
    top_n_keep_flags<double>({w.data() + b, mm}, cfg.n, {mask.data() + b, mm});
  }
  return mask;
}

/// Fraction of positions whose keep bit differs between two masks.
inline double flip_rate(const Mask& prev, const Mask& curr) {
  if (prev.size() == 0) throw std::invalid_argument("flip_rate: empty mask");
  return static_cast<double>(prev.hamming(curr)) / static_cast<double>(prev.size());
}

/// True when every m-block of the tensor has at most n nonzero entries.
inline bool nm_support_ok(const Tensor& t, int n, int m) {
  if (t.last_dim() % static_cast<std::size_t>(m) != 0) return false;
  const std::size_t mm = static_cast<std::size_t>(m);
  for (std::size_t b = 0; b < t.size(); b += mm) {
    int nz = 0;
    for (std::size_t i = 0; i < mm; ++i) nz += t[b + i] != 0.0;
    if (nz > n) return false;
  }
  return true;
}

inline Tensor apply_mask(const Tensor& w, const Mask& mask) {
  if (mask.size() != w.size()) throw std::invalid_argument("apply_mask: size mismatch");
  Tensor out = w;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!mask[i]) out[i] = 0.0;
  }
  return out;
}

}  // namespace sste
