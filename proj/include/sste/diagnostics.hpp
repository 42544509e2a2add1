// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sste/engine.hpp"
#include "sste/prune.hpp"
#include "sste/tensor.hpp"

namespace sste {

/// Decimal formatting that round-trips doubles exactly.
inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

using ParamSnapshot = std::map<std::string, Tensor>;
using MaskSet = std::map<std::string, Mask>;

inline ParamSnapshot snapshot_params(const std::vector<Parameter*>& params) {
  ParamSnapshot s;
  for (const Parameter* p : params) s.emplace(p->id, p->w);
  return s;
}

inline ParamSnapshot snapshot_grads(const std::vector<Parameter*>& params) {
  ParamSnapshot s;
  for (const Parameter* p : params) s.emplace(p->id, p->grad);
  return s;
}

inline MaskSet snapshot_masks(const std::vector<SparseLinear*>& layers) {
  MaskSet m;
  for (const SparseLinear* l : layers) m.emplace(l->weight().id, l->current_mask());
  return m;
}

/// Amount of descent between consecutive probe evaluations: F_k - F_{k+1}.
/// Positive means the loss went down.
inline double amount_of_descent(double f_k, double f_k1) { return f_k - f_k1; }

/// First-order prediction of the descent: grad(F)(w_k) . (w_k - w_{k+1}).
inline double predicted_descent(const Tensor& grad, const Tensor& w_k, const Tensor& w_k1) {
  check_same_shape(grad, w_k, "predicted_descent");
  check_same_shape(grad, w_k1, "predicted_descent");
  double s = 0.0;
  for (std::size_t i = 0; i < grad.size(); ++i) s += grad[i] * (w_k[i] - w_k1[i]);
  return s;
}

inline double predicted_descent(const ParamSnapshot& grads, const ParamSnapshot& w_k,
                                const ParamSnapshot& w_k1) {
  double s = 0.0;
  for (const auto& [id, g] : grads) {
    auto a = w_k.find(id);
    auto b = w_k1.find(id);
    if (a == w_k.end() || b == w_k1.end()) {
      throw std::invalid_argument("predicted_descent: snapshots missing " + id);
    }
    s += predicted_descent(g, a->second, b->second);
  }
  return s;
}

/// Probe loss with weights from a snapshot and keep patterns forced to a mask
/// set. Weights absent from the snapshot keep their live values.
inline double masked_probe_loss(const Model& model, const ParamSnapshot& weights,
                                const MaskSet& masks, const Batch& probe) {
  EvalOverride ov;
  for (const auto& [id, t] : weights) ov.params.emplace(id, &t);
  for (const auto& [id, m] : masks) ov.masks.emplace(id, &m);
  return model.loss_eval(probe, &ov);
}

/// Right-continuous empirical CDF: sorted unique values x with F(x) =
/// (#samples <= x) / n.
inline std::vector<std::pair<double, double>> ecdf(std::vector<double> samples) {
  if (samples.empty()) throw std::invalid_argument("ecdf: no samples");
  std::sort(samples.begin(), samples.end());
  std::vector<std::pair<double, double>> out;
  const double n = static_cast<double>(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (i + 1 < samples.size() && samples[i + 1] == samples[i]) continue;
    out.emplace_back(samples[i], static_cast<double>(i + 1) / n);
  }
  return out;
}

/// One traced training step. `loss` is the probe loss at the pre-update
/// weights; the decomposition fields are filled only when enabled.
struct StepTrace {
  std::uint64_t step = 0;
  double loss = 0.0;
  std::optional<double> train_loss;
  std::optional<double> flip;
  std::optional<double> descent;
  std::optional<double> predicted;
  std::optional<double> df_mask_changing;  // F(w_k . m_k) - F(w_{k+1} . m_{k+1})
  std::optional<double> df_mask_frozen;    // F(w_k . m_k) - F(w_{k+1} . m_k)
};

struct RunSummary {
  std::string task;
  std::string mode;
  std::string label;
  std::uint64_t steps = 0;
  double final_train_loss = 0.0;
  double final_val_loss = 0.0;
  double mean_flip = 0.0;
  double early_flip = 0.0;
  double late_flip = 0.0;
  double mean_descent = 0.0;
  double negative_descent_fraction = 0.0;

  nlohmann::json to_json() const {
    return nlohmann::json{{"task", task},
                          {"mode", mode},
                          {"label", label},
                          {"steps", steps},
                          {"final_train_loss", final_train_loss},
                          {"final_val_loss", final_val_loss},
                          {"flip", {{"mean", mean_flip}, {"early", early_flip}, {"late", late_flip}}},
                          {"descent",
                           {{"mean", mean_descent},
                            {"negative_fraction", negative_descent_fraction}}}};
  }

  static RunSummary from_json(const nlohmann::json& j) {
    RunSummary s;
    s.task = j.at("task").get<std::string>();
    s.mode = j.at("mode").get<std::string>();
    s.label = j.value("label", std::string());
    s.steps = j.at("steps").get<std::uint64_t>();
    s.final_train_loss = j.at("final_train_loss").get<double>();
    s.final_val_loss = j.at("final_val_loss").get<double>();
    s.mean_flip = j.at("flip").at("mean").get<double>();
    s.early_flip = j.at("flip").at("early").get<double>();
    s.late_flip = j.at("flip").at("late").get<double>();
    s.mean_descent = j.at("descent").at("mean").get<double>();
    s.negative_descent_fraction = j.at("descent").at("negative_fraction").get<double>();
    return s;
  }
};

struct RunRecord {
  std::vector<StepTrace> steps;
  RunSummary summary;

  static std::string csv_header() {
    return "step,loss,flip_rate,aod,predicted_aod,delta_f1,delta_f2";
  }

  static void append_field(std::string& line, const std::optional<double>& v) {
    line += ',';
    if (v) line += format_double(*v);
  }

  /// Fixed-schema per-step trace. Optional fields are left empty, never 0.
  void write_csv(const std::string& path) const {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + path);
    f << csv_header() << '\n';
    for (const StepTrace& t : steps) {
      std::string line = std::to_string(t.step) + ',' + format_double(t.loss);
      append_field(line, t.flip);
      append_field(line, t.descent);
      append_field(line, t.predicted);
      append_field(line, t.df_mask_changing);
      append_field(line, t.df_mask_frozen);
      f << line << '\n';
    }
  }

  std::string csv_string() const {
    std::string out = csv_header();
    out += '\n';
    for (const StepTrace& t : steps) {
      std::string line = std::to_string(t.step) + ',' + format_double(t.loss);
      append_field(line, t.flip);
      append_field(line, t.descent);
      append_field(line, t.predicted);
      append_field(line, t.df_mask_changing);
      append_field(line, t.df_mask_frozen);
      out += line;
      out += '\n';
    }
    return out;
  }

  void finalize_summary() {
    std::vector<double> flips, descents;
    for (const StepTrace& t : steps) {
      if (t.flip) flips.push_back(*t.flip);
      if (t.descent) descents.push_back(*t.descent);
    }
    summary.steps = steps.size();
    summary.mean_flip = mean(flips);
    const std::size_t tail = std::max<std::size_t>(1, flips.size() / 10);
    summary.early_flip =
        flips.empty() ? 0.0 : mean({flips.begin(), flips.begin() + std::min(tail, flips.size())});
    summary.late_flip = flips.empty() ? 0.0 : mean({flips.end() - std::min(tail, flips.size()), flips.end()});
    summary.mean_descent = mean(descents);
    if (!descents.empty()) {
      std::size_t neg = 0;
      for (double d : descents) neg += d < 0.0;
      summary.negative_descent_fraction = static_cast<double>(neg) / static_cast<double>(descents.size());
    }
  }

 private:
  static double mean(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  }
};

}  // namespace sste
