// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "sste/prune.hpp"
#include "sste/tensor.hpp"

namespace sste {

struct BetaResult {
  double value = 1.0;
  /// Set when the projected tensor was identically zero and the scale fell
  /// back to 1.
  bool degenerate = false;
};

/// Scale minimizing || w - beta * s ||^2 over beta: w.s / s.s.
inline BetaResult beta_min_mse(const Tensor& w, const Tensor& s) {
  check_same_shape(w, s, "beta_min_mse");
  const double ss = squared_l2(s);
  if (ss == 0.0) return {1.0, true};
  return {dot(w, s) / ss, false};
}

/// Scale preserving the L1 mass of the dense tensor: |w|_1 / |s|_1.
inline BetaResult beta_keep_l1(const Tensor& w, const Tensor& s) {
  check_same_shape(w, s, "beta_keep_l1");
  const double l1 = l1_norm(s);
  if (l1 == 0.0) return {1.0, true};
  return {l1_norm(w) / l1, false};
}

inline BetaResult compute_beta(const Tensor& w, const PruneConfig& cfg) {
  if (cfg.rescale == RescaleRecipe::None) return {1.0, false};
  const Tensor s = soft_threshold(w, cfg).values;
  return cfg.rescale == RescaleRecipe::MinMse ? beta_min_mse(w, s) : beta_keep_l1(w, s);
}

/// Per-parameter frozen rescale factors. The first query for a parameter id
/// computes beta from the tensor passed at that moment and pins it; every
/// later query returns the pinned value no matter how the weights moved.
class ScaleRegistry {
 public:
  double get_or_freeze(const std::string& param_id, const Tensor& w, const PruneConfig& cfg) {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = entries_.find(param_id);
    if (it != entries_.end()) return it->second.beta;
    const BetaResult r = compute_beta(w, cfg);
    entries_.emplace(param_id, Entry{r.value, r.degenerate});
    return r.value;
  }

  std::optional<double> frozen(const std::string& param_id) const {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = entries_.find(param_id);
    if (it == entries_.end()) return std::nullopt;
    return it->second.beta;
  }

  bool was_degenerate(const std::string& param_id) const {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = entries_.find(param_id);
    return it != entries_.end() && it->second.degenerate;
  }

  std::size_t size() const {
    std::lock_guard<std::mutex> lock(mu_);
    return entries_.size();
  }

  void clear() {
    std::lock_guard<std::mutex> lock(mu_);
    entries_.clear();
  }

  /// Plain {param_id: beta} object; key order is lexicographic.
  nlohmann::json snapshot() const {
    std::lock_guard<std::mutex> lock(mu_);
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [id, e] : entries_) j[id] = e.beta;
    return j;
  }

  /// Replace the registry's contents with a snapshot. The registry stays in
  /// place because layers hold pointers to it.
  void restore(const nlohmann::json& j) {
    if (!j.is_object()) throw std::invalid_argument("scale registry: snapshot must be an object");
    std::map<std::string, Entry> fresh;
    for (const auto& [id, v] : j.items()) {
      if (!v.is_number()) throw std::invalid_argument("scale registry: non-numeric beta for " + id);
      fresh.emplace(id, Entry{v.get<double>(), false});
    }
    std::lock_guard<std::mutex> lock(mu_);
    entries_ = std::move(fresh);
  }

 private:
  struct Entry {
    double beta;
    bool degenerate;
  };

  mutable std::mutex mu_;
  std::map<std::string, Entry> entries_;
};

}  // namespace sste
