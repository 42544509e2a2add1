// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "sste/engine.hpp"

namespace sste {

enum class OptimizerKind { Sgd, Adam };
enum class LrScheduleKind { Constant, Cosine };

inline const char* to_string(OptimizerKind k) {
  return k == OptimizerKind::Sgd ? "sgd" : "adam";
}
inline OptimizerKind optimizer_kind_from_string(const std::string& s) {
  if (s == "sgd") return OptimizerKind::Sgd;
  if (s == "adam") return OptimizerKind::Adam;
  throw std::invalid_argument("unknown optimizer: " + s);
}
inline const char* to_string(LrScheduleKind k) {
  return k == LrScheduleKind::Constant ? "constant" : "cosine";
}
inline LrScheduleKind lr_schedule_from_string(const std::string& s) {
  if (s == "constant") return LrScheduleKind::Constant;
  if (s == "cosine") return LrScheduleKind::Cosine;
  throw std::invalid_argument("unknown lr schedule: " + s);
}

/// Learning rate as a function of the step index. Cosine decays from base_lr
/// to final_frac * base_lr over total_steps: half-cosine, no warmup.
struct LrSchedule {
  LrScheduleKind kind = LrScheduleKind::Constant;
  double base_lr = 1e-2;
  std::uint64_t total_steps = 1;
  double final_frac = 0.0;

  double at(std::uint64_t step) const {
    if (kind == LrScheduleKind::Constant) return base_lr;
    const double t = total_steps <= 1
                         ? 1.0
                         : static_cast<double>(step) / static_cast<double>(total_steps - 1);
    const double lo = base_lr * final_frac;
    return lo + (base_lr - lo) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * std::min(t, 1.0)));
  }
};

struct AdamParams {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// SGD or Adam over a parameter list. Moments are keyed by parameter id and
/// always live on the dense master weights, never on projected values.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, LrSchedule schedule, AdamParams adam = {})
      : kind_(kind), schedule_(schedule), adam_(adam) {}

  void step(const std::vector<Parameter*>& params, std::uint64_t k) {
    const double lr = schedule_.at(k);
    if (kind_ == OptimizerKind::Sgd) {
      for (Parameter* p : params) {
        for (std::size_t i = 0; i < p->w.size(); ++i) p->w[i] -= lr * p->grad[i];
      }
      return;
    }
    ++t_;
    const double c1 = 1.0 - std::pow(adam_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(adam_.beta2, static_cast<double>(t_));
    for (Parameter* p : params) {
      Moments& mo = moments_[p->id];
      if (mo.m.size() != p->w.size()) {
        mo.m = Tensor(p->w.shape());
        mo.v = Tensor(p->w.shape());
      }
      for (std::size_t i = 0; i < p->w.size(); ++i) {
        const double g = p->grad[i];
        mo.m[i] = adam_.beta1 * mo.m[i] + (1.0 - adam_.beta1) * g;
        mo.v[i] = adam_.beta2 * mo.v[i] + (1.0 - adam_.beta2) * g * g;
        const double mhat = mo.m[i] / c1;
        const double vhat = mo.v[i] / c2;
        p->w[i] -= lr * mhat / (std::sqrt(vhat) + adam_.eps);
      }
    }
  }

  double lr_at(std::uint64_t k) const { return schedule_.at(k); }

  /// Moment tensors for checkpointing, allocated on demand to match the
  /// parameter's shape.
  Tensor& moment_m(const std::string& id, const Tensor& like) { return slot(id, like).m; }
  Tensor& moment_v(const std::string& id, const Tensor& like) { return slot(id, like).v; }
  std::uint64_t tick() const { return t_; }
  void set_tick(std::uint64_t t) { t_ = t; }
  bool has_moments() const { return kind_ == OptimizerKind::Adam; }

 private:
  struct Moments {
    Tensor m;
    Tensor v;
  };

  Moments& slot(const std::string& id, const Tensor& like) {
    Moments& mo = moments_[id];
    if (mo.m.size() != like.size()) {
      mo.m = Tensor(like.shape());
      mo.v = Tensor(like.shape());
    }
    return mo;
  }

  OptimizerKind kind_;
  LrSchedule schedule_;
  AdamParams adam_;
  std::map<std::string, Moments> moments_;
  std::uint64_t t_ = 0;
};

}  // namespace sste
