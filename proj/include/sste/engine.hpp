// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "sste/float_format.hpp"
#include "sste/mvue.hpp"
#include "sste/prune.hpp"
#include "sste/rescale.hpp"
#include "sste/rng.hpp"
#include "sste/tensor.hpp"

namespace sste {

/// How a linear layer treats its weight sparsity during training.
///  - Dense:   no projection, plain dense training.
///  - HardSte: forward through magnitude pruning, identity backward.
///  - SrSte:   HardSte forward plus decay of pruned weights in the gradient.
///  - SSte:    forward through the continuous soft projection with a frozen
///             per-tensor rescale, identity backward.
enum class LayerMode { Dense, HardSte, SrSte, SSte };

inline const char* to_string(LayerMode m) {
  switch (m) {
    case LayerMode::Dense: return "dense";
    case LayerMode::HardSte: return "hard_ste";
    case LayerMode::SrSte: return "sr_ste";
    case LayerMode::SSte: return "s_ste";
  }
  return "?";
}

inline LayerMode layer_mode_from_string(const std::string& s) {
  if (s == "dense") return LayerMode::Dense;
  if (s == "hard_ste") return LayerMode::HardSte;
  if (s == "sr_ste") return LayerMode::SrSte;
  if (s == "s_ste") return LayerMode::SSte;
  throw std::invalid_argument("unknown layer mode: " + s);
}

inline bool is_sparse_mode(LayerMode m) { return m != LayerMode::Dense; }

struct Parameter {
  std::string id;
  Tensor w;
  Tensor grad;

  Parameter(std::string id_, Tensor w_) : id(std::move(id_)), w(std::move(w_)), grad(w.shape()) {}
  void zero_grad() { grad.fill(0.0); }
};

/// Substitute weights and/or masks used by diagnostic evaluations, keyed by
/// parameter id. Weight entries replace the dense master weights; mask
/// entries force the keep pattern instead of deriving it from the weights.
struct EvalOverride {
  std::map<std::string, const Tensor*> params;
  std::map<std::string, const Mask*> masks;

  const Tensor* weight_for(const std::string& id) const {
    auto it = params.find(id);
    return it == params.end() ? nullptr : it->second;
  }
  const Mask* mask_for(const std::string& id) const {
    auto it = masks.find(id);
    return it == masks.end() ? nullptr : it->second;
  }
};

class SparseLinear;

class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor forward(const Tensor& x) = 0;
  virtual Tensor backward(const Tensor& grad_out) = 0;
  /// Pure functional forward, optionally with substituted weights/masks.
  virtual Tensor eval(const Tensor& x, const EvalOverride* ov) const = 0;
  virtual void collect_parameters(std::vector<Parameter*>&) {}
  virtual void collect_sparse_linears(std::vector<SparseLinear*>&) {}
  virtual void begin_step(std::uint64_t, std::uint64_t) {}
  virtual void apply_pruned_weight_decay() {}
  virtual void init_weights(std::uint64_t) {}
};

struct SparseLinearConfig {
  LayerMode mode = LayerMode::Dense;
  PruneConfig prune{};
  bool bias = true;
  /// Diagnostics follow this layer's pruning mask even in dense mode.
  bool track_mask = false;
  double sr_ste_lambda = 2e-4;
  bool mvue_grad_z = false;
  bool mvue_weights = false;
  /// Recompute the rescale every forward instead of freezing the first one.
  bool dynamic_beta = false;
  std::optional<FloatFormat> fp8_forward;
  std::optional<FloatFormat> fp8_backward;
};

/// Linear layer z = x W^T + b with W stored dense ([out, in]) and projected
/// per mode on the forward pass. The backward pass is a straight-through
/// estimator: the gradient of the projected weight is applied verbatim to the
/// dense master copy.
class SparseLinear : public Layer {
 public:
  SparseLinear(std::string id, std::size_t in_dim, std::size_t out_dim, SparseLinearConfig cfg,
               ScaleRegistry* scales = nullptr)
      : id_(std::move(id)),
        in_dim_(in_dim),
        out_dim_(out_dim),
        cfg_(cfg),
        scales_(scales),
        weight_(id_ + ".w", Tensor({out_dim, in_dim})),
        bias_(cfg.bias ? std::optional<Parameter>(Parameter(id_ + ".b", Tensor({out_dim})))
                       : std::nullopt) {
    if (in_dim_ == 0 || out_dim_ == 0) throw std::invalid_argument(id_ + ": zero dimension");
    if (is_sparse_mode(cfg_.mode) || cfg_.track_mask) {
      cfg_.prune.validate();
      if (in_dim_ % static_cast<std::size_t>(cfg_.prune.m) != 0) {
        throw std::invalid_argument(id_ + ": in_dim " + std::to_string(in_dim_) +
                                    " not divisible by block size m=" +
                                    std::to_string(cfg_.prune.m));
      }
    }
    if (cfg_.mode == LayerMode::SSte && scales_ == nullptr && !cfg_.dynamic_beta) {
      throw std::invalid_argument(id_ + ": soft-projection mode needs a scale registry");
    }
    if (cfg_.mvue_weights && out_dim_ % static_cast<std::size_t>(kMvueBlock) != 0) {
      throw std::invalid_argument(id_ + ": out_dim not divisible by gradient block size");
    }
  }

  const std::string& id() const { return id_; }
  std::size_t in_dim() const { return in_dim_; }
  std::size_t out_dim() const { return out_dim_; }
  const SparseLinearConfig& config() const { return cfg_; }
  Parameter& weight() { return weight_; }
  const Parameter& weight() const { return weight_; }
  bool tracked() const { return cfg_.track_mask || is_sparse_mode(cfg_.mode); }

  void init_weights(std::uint64_t master_seed) override {
    RngStream rng(master_seed, "init/" + id_);
    const double std = std::sqrt(2.0 / static_cast<double>(in_dim_));
    for (std::size_t i = 0; i < weight_.w.size(); ++i) rng_fill(rng, weight_.w[i], std);
    if (bias_) bias_->w.fill(0.0);
  }

  void begin_step(std::uint64_t seed, std::uint64_t step) override {
    seed_ = seed;
    step_ = step;
    has_forward_ = false;
  }

  Tensor forward(const Tensor& x) override {
    check_input(x);
    Effective e = effective(weight_.w, /*freeze=*/true);
    if (is_sparse_mode(cfg_.mode) && !nm_support_ok(e.w_eff, cfg_.prune.n, cfg_.prune.m)) {
      throw std::logic_error(id_ + ": projected weight violates n:m support");
    }
    w_eff_ = std::move(e.w_eff);
    mask_ = std::move(e.mask);
    x_ = x;
    has_forward_ = true;
    return affine(x, w_eff_, bias_ ? &bias_->w : nullptr, cfg_.fp8_forward);
  }

  Tensor backward(const Tensor& gz) override {
    if (!has_forward_) throw std::logic_error(id_ + ": backward before forward");
    if (gz.rank() != 2 || gz.rows() != x_.rows() || gz.cols() != out_dim_) {
      throw std::invalid_argument(id_ + ": bad output-gradient shape " + gz.shape_str());
    }

    // Input gradient: gz [B,out] times the projected weight [out,in].
    Tensor w_for_grad = w_eff_;
    if (cfg_.mvue_weights) {
      w_for_grad =
          transpose(mvue_sparsify(transpose(w_eff_), seed_, id_ + ".w/T", step_).values);
    }
    Tensor grad_x = matmul(cast(gz, cfg_.fp8_backward), cast(w_for_grad, cfg_.fp8_backward));

    // Weight gradient: gz^T [out,B] times the saved input [B,in]. The random
    // sparsifier, when enabled, runs before any low-precision cast.
    Tensor gzt = transpose(gz);
    if (cfg_.mvue_grad_z) {
      if (gzt.last_dim() % static_cast<std::size_t>(kMvueBlock) != 0) {
        throw std::invalid_argument(id_ + ": batch size not divisible by gradient block size");
      }
      gzt = mvue_sparsify(gzt, seed_, id_ + ".w/gzT", step_).values;
    }
    add_inplace(weight_.grad, matmul(cast(gzt, cfg_.fp8_backward), cast(x_, cfg_.fp8_backward)));

    if (bias_) {
      for (std::size_t r = 0; r < gz.rows(); ++r) {
        for (std::size_t c = 0; c < gz.cols(); ++c) bias_->grad[c] += gz(r, c);
      }
    }
    return grad_x;
  }

  Tensor eval(const Tensor& x, const EvalOverride* ov) const override {
    check_input(x);
    const Tensor* w = &weight_.w;
    const Mask* forced_mask = nullptr;
    const Tensor* b = bias_ ? &bias_->w : nullptr;
    if (ov) {
      if (const Tensor* sub = ov->weight_for(weight_.id)) w = sub;
      forced_mask = ov->mask_for(weight_.id);
      if (bias_) {
        if (const Tensor* sub = ov->weight_for(bias_->id)) b = sub;
      }
    }
    Tensor eff = forced_mask ? masked_effective(*w, *forced_mask)
                             : effective(*w, /*freeze=*/false).w_eff;
    return affine(x, eff, b, cfg_.fp8_forward);
  }

  void apply_pruned_weight_decay() override {
    if (cfg_.mode != LayerMode::SrSte) return;
    if (!has_forward_) throw std::logic_error(id_ + ": decay before forward");
    for (std::size_t i = 0; i < weight_.w.size(); ++i) {
      if (!mask_[i]) weight_.grad[i] += cfg_.sr_ste_lambda * weight_.w[i];
    }
  }

  void collect_parameters(std::vector<Parameter*>& out) override {
    out.push_back(&weight_);
    if (bias_) out.push_back(&*bias_);
  }

  void collect_sparse_linears(std::vector<SparseLinear*>& out) override { out.push_back(this); }

  /// Mask the training mask snapshot follows: magnitude pruning of the dense
  /// master weights, in every mode (dense runs report mask drift).
  Mask current_mask() const { return mask_of(weight_.w, cfg_.prune); }

  const Mask& last_forward_mask() const { return mask_; }
  const Tensor& last_effective_weight() const { return w_eff_; }
  double last_beta() const { return beta_last_; }

 private:
  struct Effective {
    Tensor w_eff;
    Mask mask;
  };

  static void rng_fill(RngStream& rng, double& slot, double std) {
    slot = std * rng.next_gaussian();
  }

  void check_input(const Tensor& x) const {
    if (x.rank() != 2 || x.cols() != in_dim_) {
      throw std::invalid_argument(id_ + ": bad input shape " + x.shape_str());
    }
  }

  static Tensor cast(const Tensor& t, const std::optional<FloatFormat>& fmt) {
    return fmt ? fp8_round_trip(t, *fmt) : t;
  }

  Tensor affine(const Tensor& x, const Tensor& w, const Tensor* b,
                const std::optional<FloatFormat>& fmt) const {
    Tensor z = matmul_nt(cast(x, fmt), cast(w, fmt));
    if (b) {
      for (std::size_t r = 0; r < z.rows(); ++r) {
        for (std::size_t c = 0; c < z.cols(); ++c) z(r, c) += (*b)[c];
      }
    }
    return z;
  }

  Effective effective(const Tensor& w, bool freeze) const {
    switch (cfg_.mode) {
      case LayerMode::Dense:
        return {w, Mask(w.size())};
      case LayerMode::HardSte:
      case LayerMode::SrSte: {
        MaskedTensor h = hard_threshold(w, cfg_.prune);
        return {std::move(h.values), std::move(h.mask)};
      }
      case LayerMode::SSte: {
        MaskedTensor s = soft_threshold(w, cfg_.prune);
        const double beta = scale_for(w, freeze);
        beta_last_ = beta;
        for (std::size_t i = 0; i < s.values.size(); ++i) s.values[i] *= beta;
        return {std::move(s.values), std::move(s.mask)};
      }
    }
    throw std::logic_error("unreachable");
  }

  double scale_for(const Tensor& w, bool freeze) const {
    if (cfg_.mode != LayerMode::SSte) return 1.0;
    if (cfg_.dynamic_beta) return compute_beta(w, cfg_.prune).value;
    if (freeze) return scales_->get_or_freeze(weight_.id, w, cfg_.prune);
    if (scales_) {
      if (auto b = scales_->frozen(weight_.id)) return *b;
    }
    return compute_beta(w, cfg_.prune).value;
  }

  /// Effective weight under a forced keep pattern. Dense and hard modes mask
  /// the raw weights; the soft mode masks the shrunk values and applies the
  /// layer's scale, which matches projecting first and masking after.
  Tensor masked_effective(const Tensor& w, const Mask& m) const {
    if (cfg_.mode == LayerMode::SSte) {
      Tensor s = soft_threshold(w, cfg_.prune).values;
      const double beta = scale_for(w, /*freeze=*/false);
      Tensor out = apply_mask(s, m);
      for (std::size_t i = 0; i < out.size(); ++i) out[i] *= beta;
      return out;
    }
    return apply_mask(w, m);
  }

  std::string id_;
  std::size_t in_dim_;
  std::size_t out_dim_;
  SparseLinearConfig cfg_;
  ScaleRegistry* scales_;
  Parameter weight_;
  std::optional<Parameter> bias_;

  Tensor x_;
  Tensor w_eff_;
  Mask mask_;
  mutable double beta_last_ = 1.0;
  std::uint64_t seed_ = 0;
  std::uint64_t step_ = 0;
  bool has_forward_ = false;
};

class Relu : public Layer {
 public:
  Tensor forward(const Tensor& x) override {
    x_ = x;
    has_forward_ = true;
    return eval(x, nullptr);
  }
  Tensor backward(const Tensor& g) override {
    if (!has_forward_) throw std::logic_error("relu: backward before forward");
    check_same_shape(g, x_, "relu backward");
    Tensor out = g;
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (x_[i] <= 0.0) out[i] = 0.0;
    }
    return out;
  }
  Tensor eval(const Tensor& x, const EvalOverride*) const override {
    Tensor out = x;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(0.0, out[i]);
    return out;
  }

 private:
  Tensor x_;
  bool has_forward_ = false;
};

/// Exact (erf-based) GeLU. Smooth everywhere, which keeps finite-difference
/// gradient checks tight.
class Gelu : public Layer {
 public:
  static double phi(double x) { return std::exp(-0.5 * x * x) * 0.3989422804014326779; }
  static double cdf(double x) { return 0.5 * std::erfc(-x * 0.7071067811865475244); }

  Tensor forward(const Tensor& x) override {
    x_ = x;
    has_forward_ = true;
    return eval(x, nullptr);
  }
  Tensor backward(const Tensor& g) override {
    if (!has_forward_) throw std::logic_error("gelu: backward before forward");
    check_same_shape(g, x_, "gelu backward");
    Tensor out = g;
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double x = x_[i];
      out[i] *= cdf(x) + x * phi(x);
    }
    return out;
  }
  Tensor eval(const Tensor& x, const EvalOverride*) const override {
    Tensor out = x;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = out[i] * cdf(out[i]);
    return out;
  }

 private:
  Tensor x_;
  bool has_forward_ = false;
};

/// Residual feed-forward block y = x + fc2(gelu(fc1(x))). Both linears share
/// one sparsity configuration; dims are [d -> h -> d].
class FfnBlock : public Layer {
 public:
  FfnBlock(const std::string& id, std::size_t dim, std::size_t hidden, SparseLinearConfig cfg,
           ScaleRegistry* scales = nullptr)
      : fc1_(id + ".fc1", dim, hidden, cfg, scales),
        fc2_(id + ".fc2", hidden, dim, cfg, scales) {}

  Tensor forward(const Tensor& x) override {
    Tensor y = fc2_.forward(act_.forward(fc1_.forward(x)));
    add_inplace(y, x);
    return y;
  }
  Tensor backward(const Tensor& g) override {
    Tensor gx = fc1_.backward(act_.backward(fc2_.backward(g)));
    add_inplace(gx, g);
    return gx;
  }
  Tensor eval(const Tensor& x, const EvalOverride* ov) const override {
    Tensor y = fc2_.eval(act_.eval(fc1_.eval(x, ov), ov), ov);
    add_inplace(y, x);
    return y;
  }
  void collect_parameters(std::vector<Parameter*>& out) override {
    fc1_.collect_parameters(out);
    fc2_.collect_parameters(out);
  }
  void collect_sparse_linears(std::vector<SparseLinear*>& out) override {
    fc1_.collect_sparse_linears(out);
    fc2_.collect_sparse_linears(out);
  }
  void begin_step(std::uint64_t seed, std::uint64_t step) override {
    fc1_.begin_step(seed, step);
    fc2_.begin_step(seed, step);
  }
  void apply_pruned_weight_decay() override {
    fc1_.apply_pruned_weight_decay();
    fc2_.apply_pruned_weight_decay();
  }
  void init_weights(std::uint64_t seed) override {
    fc1_.init_weights(seed);
    fc2_.init_weights(seed);
  }

 private:
  SparseLinear fc1_;
  SparseLinear fc2_;
  Gelu act_;
};

class Network {
 public:
  template <class L, class... Args>
  L* emplace(Args&&... args) {
    auto layer = std::make_unique<L>(std::forward<Args>(args)...);
    L* raw = layer.get();
    layers_.push_back(std::move(layer));
    return raw;
  }

  Tensor forward(const Tensor& x) {
    Tensor h = x;
    for (auto& l : layers_) h = l->forward(h);
    return h;
  }

  Tensor backward(const Tensor& grad_out) {
    Tensor g = grad_out;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
    return g;
  }

  Tensor eval_output(const Tensor& x, const EvalOverride* ov = nullptr) const {
    Tensor h = x;
    for (const auto& l : layers_) h = l->eval(h, ov);
    return h;
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    for (auto& l : layers_) l->collect_parameters(out);
    return out;
  }

  std::vector<SparseLinear*> sparse_linears() {
    std::vector<SparseLinear*> out;
    for (auto& l : layers_) l->collect_sparse_linears(out);
    return out;
  }

  /// Layers whose pruning mask the diagnostics follow.
  std::vector<SparseLinear*> tracked_layers() {
    std::vector<SparseLinear*> out;
    for (SparseLinear* l : sparse_linears()) {
      if (l->tracked()) out.push_back(l);
    }
    return out;
  }

  void zero_grad() {
    for (Parameter* p : parameters()) p->zero_grad();
  }
  void begin_step(std::uint64_t seed, std::uint64_t step) {
    for (auto& l : layers_) l->begin_step(seed, step);
  }
  void apply_pruned_weight_decay() {
    for (auto& l : layers_) l->apply_pruned_weight_decay();
  }
  void init_weights(std::uint64_t seed) {
    for (auto& l : layers_) l->init_weights(seed);
  }

  std::size_t layer_count() const { return layers_.size(); }

 private:
  std::vector<std::unique_ptr<Layer>> layers_;
};

/// One batch of training data. Regression targets live in `target`;
/// classification labels in `labels` (one of the two is used by the loss).
struct Batch {
  Tensor x;
  Tensor target;
  std::vector<int> labels;
  std::size_t size() const { return x.rank() == 0 ? 0 : x.rows(); }
};

class Loss {
 public:
  virtual ~Loss() = default;
  virtual double value(const Tensor& out, const Batch& b) const = 0;
  virtual Tensor grad(const Tensor& out, const Batch& b) const = 0;
};

/// Mean squared error over every output element.
class MseLoss : public Loss {
 public:
  double value(const Tensor& out, const Batch& b) const override {
    check_same_shape(out, b.target, "mse");
    double s = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double d = out[i] - b.target[i];
      s += d * d;
    }
    return s / static_cast<double>(out.size());
  }
  Tensor grad(const Tensor& out, const Batch& b) const override {
    check_same_shape(out, b.target, "mse");
    Tensor g(out.shape());
    const double inv = 2.0 / static_cast<double>(out.size());
    for (std::size_t i = 0; i < out.size(); ++i) g[i] = inv * (out[i] - b.target[i]);
    return g;
  }
};

/// Mean softmax cross-entropy over the batch, labels are class indices.
class SoftmaxXentLoss : public Loss {
 public:
  double value(const Tensor& out, const Batch& b) const override {
    check_labels(out, b);
    double s = 0.0;
    for (std::size_t r = 0; r < out.rows(); ++r) {
      s -= std::log(softmax_row(out, r)[static_cast<std::size_t>(b.labels[r])]);
    }
    return s / static_cast<double>(out.rows());
  }
  Tensor grad(const Tensor& out, const Batch& b) const override {
    check_labels(out, b);
    Tensor g(out.shape());
    const double inv = 1.0 / static_cast<double>(out.rows());
    for (std::size_t r = 0; r < out.rows(); ++r) {
      std::vector<double> p = softmax_row(out, r);
      for (std::size_t c = 0; c < out.cols(); ++c) {
        g(r, c) = inv * (p[c] - (static_cast<std::size_t>(b.labels[r]) == c ? 1.0 : 0.0));
      }
    }
    return g;
  }

 private:
  static void check_labels(const Tensor& out, const Batch& b) {
    if (out.rank() != 2 || b.labels.size() != out.rows()) {
      throw std::invalid_argument("cross entropy: labels do not match output");
    }
    for (int l : b.labels) {
      if (l < 0 || static_cast<std::size_t>(l) >= out.cols()) {
        throw std::invalid_argument("cross entropy: label out of range");
      }
    }
  }
  static std::vector<double> softmax_row(const Tensor& out, std::size_t r) {
    double mx = out(r, 0);
    for (std::size_t c = 1; c < out.cols(); ++c) mx = std::max(mx, out(r, c));
    std::vector<double> p(out.cols());
    double z = 0.0;
    for (std::size_t c = 0; c < out.cols(); ++c) {
      p[c] = std::exp(out(r, c) - mx);
      z += p[c];
    }
    for (double& v : p) v /= z;
    return p;
  }
};

inline std::unique_ptr<Loss> make_loss(const std::string& name) {
  if (name == "mse") return std::make_unique<MseLoss>();
  if (name == "xent") return std::make_unique<SoftmaxXentLoss>();
  throw std::invalid_argument("unknown loss: " + name);
}

/// A network plus its loss head. `loss_eval` is the pure probe used by all
/// diagnostics: deterministic, no gradient sparsification, no caching.
struct Model {
  Network net;
  std::unique_ptr<Loss> loss;

  double loss_eval(const Batch& b, const EvalOverride* ov = nullptr) const {
    return loss->value(net.eval_output(b.x, ov), b);
  }

  /// Forward + backward on one batch; gradients accumulate into the
  /// parameters. Returns the training loss through the mode's forward path.
  double train_forward_backward(const Batch& b) {
    net.zero_grad();
    Tensor out = net.forward(b.x);
    const double L = loss->value(out, b);
    net.backward(loss->grad(out, b));
    return L;
  }
};

}  // namespace sste
