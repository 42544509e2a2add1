// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sste/checkpoint.hpp"
#include "sste/diagnostics.hpp"
#include "sste/engine.hpp"
#include "sste/optim.hpp"
#include "sste/rng.hpp"

namespace sste {

enum class Task { Toy, SynthReg, SynthCls, CharLm };

inline const char* to_string(Task t) {
  switch (t) {
    case Task::Toy: return "toy";
    case Task::SynthReg: return "synth_reg";
    case Task::SynthCls: return "synth_cls";
    case Task::CharLm: return "char_lm";
  }
  return "?";
}

inline Task task_from_string(const std::string& s) {
  if (s == "toy") return Task::Toy;
  if (s == "synth_reg") return Task::SynthReg;
  if (s == "synth_cls") return Task::SynthCls;
  if (s == "char_lm") return Task::CharLm;
  throw std::invalid_argument("unknown task: " + s);
}

/// Full description of one training run. Serializes to a flat JSON object
/// with dotted key names; unknown keys are rejected on load so typos fail
/// fast, and serialize(parse(x)) == serialize(x) for complete configs.
struct ExperimentConfig {
  Task task = Task::SynthReg;
  LayerMode mode = LayerMode::Dense;
  std::string label;

  PruneConfig prune{};
  bool rescale_dynamic = false;
  double srste_lambda = 2e-4;
  bool mvue_grad_z = false;
  bool mvue_weights = false;
  std::string fp8_forward = "none";
  std::string fp8_backward = "none";

  OptimizerKind opt = OptimizerKind::Sgd;
  LrScheduleKind schedule = LrScheduleKind::Constant;
  double lr = 1e-2;
  double final_frac = 0.0;
  std::uint64_t steps = 100;
  std::uint64_t batch_size = 0;  // 0 = full batch

  bool probe_use_train = true;
  std::uint64_t probe_size = 128;
  std::uint64_t trace_stride = 1;
  bool trace_decomposition = false;

  std::uint64_t data_dim = 16;
  std::uint64_t data_out = 8;
  std::uint64_t data_hidden = 32;
  std::uint64_t data_classes = 2;
  std::uint64_t data_train = 256;
  std::uint64_t data_val = 64;
  std::uint64_t data_depth = 2;
  std::uint64_t data_context = 8;
  double data_noise = 0.0;
  double toy_w1 = 0.2;
  double toy_w2 = 0.1;

  std::uint64_t seed = 1;
  std::string out_dir;

  void validate() const {
    prune.validate();
    if (steps < 1) throw std::invalid_argument("config: opt.steps must be >= 1");
    if (!(lr > 0.0) || !std::isfinite(lr)) throw std::invalid_argument("config: opt.lr must be positive");
    if (trace_stride < 1) throw std::invalid_argument("config: trace.stride must be >= 1");
    if (mode == LayerMode::SrSte && !(srste_lambda >= 0.0)) {
      throw std::invalid_argument("config: srste.lambda must be >= 0");
    }
    parse_float_format(fp8_forward);
    parse_float_format(fp8_backward);
    if (mvue_grad_z) {
      const std::uint64_t eff_batch =
          (batch_size == 0 || batch_size > effective_train_size()) ? effective_train_size()
                                                                   : batch_size;
      if (eff_batch % static_cast<std::uint64_t>(kMvueBlock) != 0) {
        throw std::invalid_argument("config: batch size must be divisible by 4 for mvue.grad_z");
      }
    }
    if (task == Task::SynthCls && data_classes < 2) {
      throw std::invalid_argument("config: data.classes must be >= 2");
    }
  }

  /// Training-set size actually produced by the task builder.
  std::uint64_t effective_train_size() const {
    if (task == Task::Toy) return 1;
    return data_train;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["task"] = to_string(task);
    j["mode"] = to_string(mode);
    j["label"] = label;
    j["prune.n"] = prune.n;
    j["prune.m"] = prune.m;
    j["prune.gamma"] = prune.gamma;
    j["rescale.recipe"] = to_string(prune.rescale);
    j["rescale.dynamic"] = rescale_dynamic;
    j["srste.lambda"] = srste_lambda;
    j["mvue.grad_z"] = mvue_grad_z;
    j["mvue.weights"] = mvue_weights;
    j["fp8.forward"] = fp8_forward;
    j["fp8.backward"] = fp8_backward;
    j["opt.kind"] = to_string(opt);
    j["opt.schedule"] = to_string(schedule);
    j["opt.lr"] = lr;
    j["opt.final_frac"] = final_frac;
    j["opt.steps"] = steps;
    j["opt.batch_size"] = batch_size;
    j["probe.use_train"] = probe_use_train;
    j["probe.size"] = probe_size;
    j["trace.stride"] = trace_stride;
    j["trace.decomposition"] = trace_decomposition;
    j["data.dim"] = data_dim;
    j["data.out"] = data_out;
    j["data.hidden"] = data_hidden;
    j["data.classes"] = data_classes;
    j["data.train"] = data_train;
    j["data.val"] = data_val;
    j["data.depth"] = data_depth;
    j["data.context"] = data_context;
    j["data.noise"] = data_noise;
    j["toy.w1"] = toy_w1;
    j["toy.w2"] = toy_w2;
    j["seed"] = seed;
    j["out_dir"] = out_dir;
    return j;
  }

  static ExperimentConfig from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw std::invalid_argument("config: expected a JSON object");
    ExperimentConfig c;
    for (const auto& [key, v] : j.items()) {
      if (key == "task") c.task = task_from_string(v.get<std::string>());
      else if (key == "mode") c.mode = layer_mode_from_string(v.get<std::string>());
      else if (key == "label") c.label = v.get<std::string>();
      else if (key == "prune.n") c.prune.n = v.get<int>();
      else if (key == "prune.m") c.prune.m = v.get<int>();
      else if (key == "prune.gamma") c.prune.gamma = v.get<double>();
      else if (key == "rescale.recipe") c.prune.rescale = rescale_recipe_from_string(v.get<std::string>());
      else if (key == "rescale.dynamic") c.rescale_dynamic = v.get<bool>();
      else if (key == "srste.lambda") c.srste_lambda = v.get<double>();
      else if (key == "mvue.grad_z") c.mvue_grad_z = v.get<bool>();
      else if (key == "mvue.weights") c.mvue_weights = v.get<bool>();
      else if (key == "fp8.forward") c.fp8_forward = v.get<std::string>();
      else if (key == "fp8.backward") c.fp8_backward = v.get<std::string>();
      else if (key == "opt.kind") c.opt = optimizer_kind_from_string(v.get<std::string>());
      else if (key == "opt.schedule") c.schedule = lr_schedule_from_string(v.get<std::string>());
      else if (key == "opt.lr") c.lr = v.get<double>();
      else if (key == "opt.final_frac") c.final_frac = v.get<double>();
      else if (key == "opt.steps") c.steps = v.get<std::uint64_t>();
      else if (key == "opt.batch_size") c.batch_size = v.get<std::uint64_t>();
      else if (key == "probe.use_train") c.probe_use_train = v.get<bool>();
      else if (key == "probe.size") c.probe_size = v.get<std::uint64_t>();
      else if (key == "trace.stride") c.trace_stride = v.get<std::uint64_t>();
      else if (key == "trace.decomposition") c.trace_decomposition = v.get<bool>();
      else if (key == "data.dim") c.data_dim = v.get<std::uint64_t>();
      else if (key == "data.out") c.data_out = v.get<std::uint64_t>();
      else if (key == "data.hidden") c.data_hidden = v.get<std::uint64_t>();
      else if (key == "data.classes") c.data_classes = v.get<std::uint64_t>();
      else if (key == "data.train") c.data_train = v.get<std::uint64_t>();
      else if (key == "data.val") c.data_val = v.get<std::uint64_t>();
      else if (key == "data.depth") c.data_depth = v.get<std::uint64_t>();
      else if (key == "data.context") c.data_context = v.get<std::uint64_t>();
      else if (key == "data.noise") c.data_noise = v.get<double>();
      else if (key == "toy.w1") c.toy_w1 = v.get<double>();
      else if (key == "toy.w2") c.toy_w2 = v.get<double>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "out_dir") c.out_dir = v.get<std::string>();
      else throw std::invalid_argument("config: unknown key \"" + key + "\"");
    }
    return c;
  }
};

/// Defaults tuned per task; the generic constructor defaults suit the
/// regression task.
inline ExperimentConfig default_config(Task task) {
  ExperimentConfig c;
  c.task = task;
  switch (task) {
    case Task::Toy:
      c.prune = PruneConfig{1, 2, 0.0, RescaleRecipe::None};
      c.opt = OptimizerKind::Sgd;
      c.schedule = LrScheduleKind::Constant;
      c.lr = 0.25;
      c.steps = 200;
      c.batch_size = 0;
      c.probe_use_train = true;
      break;
    case Task::SynthReg:
      c.opt = OptimizerKind::Adam;
      c.schedule = LrScheduleKind::Cosine;
      c.lr = 0.02;
      c.steps = 400;
      c.batch_size = 32;
      c.data_dim = 16;
      c.data_out = 8;
      c.data_train = 256;
      c.data_val = 64;
      c.probe_use_train = false;
      c.probe_size = 128;
      break;
    case Task::SynthCls:
      c.opt = OptimizerKind::Sgd;
      c.schedule = LrScheduleKind::Constant;
      c.lr = 0.5;
      c.steps = 300;
      c.batch_size = 0;
      c.data_dim = 32;
      c.data_hidden = 32;
      c.data_classes = 2;
      c.data_train = 256;
      c.data_val = 128;
      c.probe_use_train = true;
      break;
    case Task::CharLm:
      c.opt = OptimizerKind::Adam;
      c.schedule = LrScheduleKind::Cosine;
      c.lr = 3e-3;
      c.steps = 200;
      c.batch_size = 64;
      c.data_dim = 32;
      c.data_hidden = 64;
      c.data_depth = 2;
      c.data_context = 8;
      c.probe_use_train = false;
      c.probe_size = 128;
      break;
  }
  return c;
}

struct Dataset {
  Batch train;
  Batch val;
  Batch probe;
};

namespace detail {

/// Short original text used as the character-modeling corpus. Lowercase
/// letters plus basic punctuation keep the vocabulary small.
inline const char* charlm_corpus() {
  return "a small stream starts where rain gathers on high stones and finds a seam to follow. "
         "it slips under roots, turns past a fallen branch, and grows quiet pools where light "
         "settles. further down it meets another stream and they argue briefly over one bed, "
         "then agree and widen. reeds lean in to listen. a heron waits with one foot raised, "
         "patient as winter. by the low fields the water moves slowly, carrying leaves and the "
         "smell of cold iron. it forgets the hill it came from, yet every turn it takes was "
         "decided there. at dusk the surface holds the last warm color of the sky, and the "
         "first cold star.";
}

inline std::vector<char> charlm_vocab() {
  const std::string text = charlm_corpus();
  std::set<char> s(text.begin(), text.end());
  return {s.begin(), s.end()};
}

inline Tensor gaussian_tensor(std::vector<std::size_t> shape, RngStream& rng, double std = 1.0) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = std * rng.next_gaussian();
  return t;
}

}  // namespace detail

/// Deterministic dataset for a config's task, split into train, validation
/// and a fixed probe batch for diagnostics.
inline Dataset build_dataset(const ExperimentConfig& cfg) {
  Dataset d;
  RngStream rng(cfg.seed, "data");
  switch (cfg.task) {
    case Task::Toy: {
      d.train.x = Tensor::matrix({{1.0, -1.0}});
      d.train.target = Tensor::matrix({{0.0}});
      d.val = d.train;
      d.probe = d.train;
      return d;
    }
    case Task::SynthReg: {
      const std::size_t dim = cfg.data_dim, out = cfg.data_out;
      const double wstd = 1.0 / std::sqrt(static_cast<double>(dim));
      const Tensor teacher = detail::gaussian_tensor({out, dim}, rng, wstd);
      auto draw = [&](std::size_t count) {
        Batch b;
        b.x = detail::gaussian_tensor({count, dim}, rng);
        b.target = matmul_nt(b.x, teacher);
        if (cfg.data_noise > 0.0) {
          for (std::size_t i = 0; i < b.target.size(); ++i) {
            b.target[i] += cfg.data_noise * rng.next_gaussian();
          }
        }
        return b;
      };
      d.train = draw(cfg.data_train);
      d.val = draw(cfg.data_val);
      break;
    }
    case Task::SynthCls: {
      const std::size_t dim = cfg.data_dim, k = cfg.data_classes;
      // Teacher with a hard 2:4 structure, so a sparse student can realize it.
      PruneConfig teacher_prune{2, 4, 0.0, RescaleRecipe::None};
      const Tensor teacher =
          hard_threshold(detail::gaussian_tensor({k, dim}, rng), teacher_prune).values;
      auto draw = [&](std::size_t count) {
        Batch b;
        b.x = detail::gaussian_tensor({count, dim}, rng);
        const Tensor logits = matmul_nt(b.x, teacher);
        b.labels.resize(count);
        for (std::size_t r = 0; r < count; ++r) {
          std::size_t best = 0;
          for (std::size_t c = 1; c < k; ++c) {
            if (logits(r, c) > logits(r, best)) best = c;
          }
          b.labels[r] = static_cast<int>(best);
        }
        return b;
      };
      d.train = draw(cfg.data_train);
      d.val = draw(cfg.data_val);
      break;
    }
    case Task::CharLm: {
      const std::string text = detail::charlm_corpus();
      const std::vector<char> vocab = detail::charlm_vocab();
      const std::size_t V = vocab.size(), K = cfg.data_context;
      auto index_of = [&](char c) {
        return static_cast<std::size_t>(
            std::lower_bound(vocab.begin(), vocab.end(), c) - vocab.begin());
      };
      const std::size_t total = text.size() - K;
      const std::size_t n_train = total * 9 / 10;
      auto slice = [&](std::size_t from, std::size_t count) {
        Batch b;
        b.x = Tensor({count, K * V});
        b.labels.resize(count);
        for (std::size_t s = 0; s < count; ++s) {
          const std::size_t pos = from + s;
          for (std::size_t t = 0; t < K; ++t) {
            b.x(s, t * V + index_of(text[pos + t])) = 1.0;
          }
          b.labels[s] = static_cast<int>(index_of(text[pos + K]));
        }
        return b;
      };
      d.train = slice(0, n_train);
      d.val = slice(n_train, total - n_train);
      break;
    }
  }
  // Fixed probe batch: the full training set in the deterministic regime, or
  // a frozen random subset of it otherwise.
  if (cfg.probe_use_train || cfg.probe_size >= d.train.size()) {
    d.probe = d.train;
  } else {
    RngStream prng(cfg.seed, "probe");
    std::vector<std::size_t> idx(d.train.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    for (std::size_t i = 0; i < cfg.probe_size; ++i) {
      const std::size_t j = i + prng.next_below(idx.size() - i);
      std::swap(idx[i], idx[j]);
    }
    const std::size_t cols = d.train.x.cols();
    d.probe.x = Tensor({cfg.probe_size, cols});
    if (d.train.target.size() > 0) d.probe.target = Tensor({cfg.probe_size, d.train.target.cols()});
    if (!d.train.labels.empty()) d.probe.labels.resize(cfg.probe_size);
    for (std::size_t s = 0; s < cfg.probe_size; ++s) {
      for (std::size_t c = 0; c < cols; ++c) d.probe.x(s, c) = d.train.x(idx[s], c);
      if (d.train.target.size() > 0) {
        for (std::size_t c = 0; c < d.train.target.cols(); ++c) {
          d.probe.target(s, c) = d.train.target(idx[s], c);
        }
      }
      if (!d.train.labels.empty()) d.probe.labels[s] = d.train.labels[idx[s]];
    }
  }
  return d;
}

inline SparseLinearConfig layer_config(const ExperimentConfig& cfg, bool bias) {
  SparseLinearConfig lc;
  lc.mode = cfg.mode;
  lc.prune = cfg.prune;
  lc.bias = bias;
  lc.track_mask = true;
  lc.sr_ste_lambda = cfg.srste_lambda;
  lc.mvue_grad_z = cfg.mvue_grad_z;
  lc.mvue_weights = cfg.mvue_weights;
  lc.dynamic_beta = cfg.rescale_dynamic;
  lc.fp8_forward = parse_float_format(cfg.fp8_forward);
  lc.fp8_backward = parse_float_format(cfg.fp8_backward);
  return lc;
}

/// Build the model for a config. Only the layers that would be pruned in a
/// sparse run carry the sparsity config; embeddings and heads stay dense.
inline Model build_model(const ExperimentConfig& cfg, ScaleRegistry* scales) {
  Model m;
  switch (cfg.task) {
    case Task::Toy: {
      SparseLinearConfig lc = layer_config(cfg, /*bias=*/false);
      SparseLinear* l = m.net.emplace<SparseLinear>("toy", 2, 1, lc, scales);
      l->weight().w[0] = cfg.toy_w1;
      l->weight().w[1] = cfg.toy_w2;
      m.loss = make_loss("mse");
      return m;
    }
    case Task::SynthReg: {
      SparseLinearConfig lc = layer_config(cfg, /*bias=*/true);
      m.net.emplace<SparseLinear>("lin", cfg.data_dim, cfg.data_out, lc, scales);
      m.loss = make_loss("mse");
      break;
    }
    case Task::SynthCls: {
      SparseLinearConfig lc = layer_config(cfg, /*bias=*/true);
      m.net.emplace<SparseLinear>("fc1", cfg.data_dim, cfg.data_hidden, lc, scales);
      m.net.emplace<Gelu>();
      m.net.emplace<SparseLinear>("fc2", cfg.data_hidden, cfg.data_classes, lc, scales);
      m.loss = make_loss("xent");
      break;
    }
    case Task::CharLm: {
      const std::size_t V = detail::charlm_vocab().size();
      SparseLinearConfig dense;
      dense.mode = LayerMode::Dense;
      SparseLinearConfig lc = layer_config(cfg, /*bias=*/true);
      m.net.emplace<SparseLinear>("embed", cfg.data_context * V, cfg.data_dim, dense);
      for (std::size_t b = 0; b < cfg.data_depth; ++b) {
        m.net.emplace<FfnBlock>("ffn" + std::to_string(b), cfg.data_dim, cfg.data_hidden, lc,
                                scales);
      }
      m.net.emplace<SparseLinear>("head", cfg.data_dim, V, dense);
      m.loss = make_loss("xent");
      break;
    }
  }
  m.net.init_weights(cfg.seed);
  return m;
}

/// Resolve a run output directory against SSTE_OUTPUT_ROOT when the
/// configured path is relative.
inline std::filesystem::path resolve_out_dir(const std::string& out_dir) {
  std::filesystem::path p(out_dir);
  if (p.is_absolute()) return p;
  if (const char* root = std::getenv("SSTE_OUTPUT_ROOT")) {
    return std::filesystem::path(root) / p;
  }
  return p;
}

/// Drives one training run: deterministic batches, straight-through updates,
/// per-step probes and mask bookkeeping, optional checkpointing.
class Trainer {
 public:
  explicit Trainer(const ExperimentConfig& cfg)
      : cfg_(validated(cfg)),
        data_(build_dataset(cfg_)),
        model_(build_model(cfg_, &scales_)),
        opt_(cfg_.opt, LrSchedule{cfg_.schedule, cfg_.lr, cfg_.steps, cfg_.final_frac}) {}

  const ExperimentConfig& config() const { return cfg_; }
  Model& model() { return model_; }
  const Model& model() const { return model_; }
  Dataset& data() { return data_; }
  ScaleRegistry& scales() { return scales_; }
  RunRecord& record() { return record_; }
  const RunRecord& record() const { return record_; }
  std::uint64_t next_step() const { return next_step_; }
  const std::vector<std::array<double, 3>>& trajectory() const { return trajectory_; }

  void run_until(std::uint64_t stop) {
    stop = std::min(stop, cfg_.steps);
    while (next_step_ < stop) one_step();
    if (next_step_ >= cfg_.steps) finish();
  }

  void run_all() { run_until(cfg_.steps); }

  void save(const std::filesystem::path& dir) {
    nlohmann::json extra;
    extra["scales"] = scales_.snapshot();
    extra["next_step"] = next_step_;
    extra["tick"] = opt_.tick();
    save_checkpoint(dir, checkpoint_entries(), extra);
  }

  void resume_from(const std::filesystem::path& dir) {
    // Entry list must exist before load so moment tensors are allocated.
    std::vector<CheckpointEntry> entries = checkpoint_entries();
    const nlohmann::json extra = load_checkpoint(dir, entries);
    scales_.restore(extra.at("scales"));
    next_step_ = extra.at("next_step").get<std::uint64_t>();
    opt_.set_tick(extra.at("tick").get<std::uint64_t>());
  }

  void write_outputs() const {
    if (cfg_.out_dir.empty()) return;
    const std::filesystem::path dir = resolve_out_dir(cfg_.out_dir);
    std::filesystem::create_directories(dir);
    {
      std::ofstream f(dir / "config.json", std::ios::trunc);
      f << cfg_.to_json().dump(2) << '\n';
    }
    {
      std::ofstream f(dir / "scales.json", std::ios::trunc);
      f << scales_.snapshot().dump(2) << '\n';
    }
    record_.write_csv((dir / "trace.csv").string());
    {
      std::ofstream f(dir / "summary.json", std::ios::trunc);
      f << record_.summary.to_json().dump(2) << '\n';
    }
    if (cfg_.task == Task::Toy) {
      std::ofstream f(dir / "trajectory.csv", std::ios::trunc);
      f << "step,w1,w2\n";
      for (const auto& row : trajectory_) {
        f << static_cast<std::uint64_t>(row[0]) << ',' << format_double(row[1]) << ','
          << format_double(row[2]) << '\n';
      }
    }
    if (cfg_.rescale_dynamic && !beta_rows_.empty()) {
      std::ofstream f(dir / "beta_dynamic.csv", std::ios::trunc);
      f << "step,param,beta\n";
      for (const auto& [step, param, beta] : beta_rows_) {
        f << step << ',' << param << ',' << format_double(beta) << '\n';
      }
    }
  }

 private:
  static ExperimentConfig validated(ExperimentConfig c) {
    c.validate();
    return c;
  }

  std::vector<CheckpointEntry> checkpoint_entries() {
    std::vector<CheckpointEntry> entries;
    for (Parameter* p : model_.net.parameters()) entries.push_back({p->id, &p->w});
    if (opt_.has_moments()) {
      for (Parameter* p : model_.net.parameters()) {
        entries.push_back({"opt.m/" + p->id, &opt_.moment_m(p->id, p->w)});
        entries.push_back({"opt.v/" + p->id, &opt_.moment_v(p->id, p->w)});
      }
    }
    return entries;
  }

  Batch draw_batch(std::uint64_t k) {
    const std::size_t n = data_.train.size();
    if (cfg_.batch_size == 0 || cfg_.batch_size >= n) return data_.train;
    const std::size_t bsz = cfg_.batch_size;
    RngStream rng(cfg_.seed, "batch", k);
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    for (std::size_t i = 0; i < bsz; ++i) {
      const std::size_t j = i + rng.next_below(n - i);
      std::swap(idx[i], idx[j]);
    }
    Batch b;
    const std::size_t cols = data_.train.x.cols();
    b.x = Tensor({bsz, cols});
    if (data_.train.target.size() > 0) b.target = Tensor({bsz, data_.train.target.cols()});
    if (!data_.train.labels.empty()) b.labels.resize(bsz);
    for (std::size_t s = 0; s < bsz; ++s) {
      for (std::size_t c = 0; c < cols; ++c) b.x(s, c) = data_.train.x(idx[s], c);
      if (data_.train.target.size() > 0) {
        for (std::size_t c = 0; c < data_.train.target.cols(); ++c) {
          b.target(s, c) = data_.train.target(idx[s], c);
        }
      }
      if (!data_.train.labels.empty()) b.labels[s] = data_.train.labels[idx[s]];
    }
    return b;
  }

  void one_step() {
    const std::uint64_t k = next_step_;
    const bool traced = k % cfg_.trace_stride == 0;
    Batch batch = draw_batch(k);
    model_.net.begin_step(cfg_.seed, k);

    StepTrace row;
    ParamSnapshot w_k;
    MaskSet m_k;
    double f_masked_k = 0.0;
    if (traced) {
      row.step = k;
      row.loss = cached_probe_ ? *cached_probe_ : model_.loss_eval(data_.probe);
      m_k = cached_masks_ ? std::move(*cached_masks_) : snapshot_masks(tracked());
      w_k = snapshot_params(model_.net.parameters());
      if (cfg_.trace_decomposition) {
        f_masked_k = cached_masked_ ? *cached_masked_
                                    : masked_probe_loss(model_, w_k, m_k, data_.probe);
      }
      if (last_traced_masks_) row.flip = mask_set_flip(*last_traced_masks_, m_k);
      if (cfg_.task == Task::Toy) {
        const Tensor& w = model_.net.parameters().front()->w;
        trajectory_.push_back({static_cast<double>(k), w[0], w[1]});
      }
    }

    const double train_loss = model_.train_forward_backward(batch);
    ParamSnapshot g_k;
    if (traced) {
      row.train_loss = train_loss;
      g_k = snapshot_grads(model_.net.parameters());
      if (cfg_.rescale_dynamic) record_betas(k);
    }

    model_.net.apply_pruned_weight_decay();
    opt_.step(model_.net.parameters(), k);
    next_step_ = k + 1;

    if (traced) {
      const double f_k1 = model_.loss_eval(data_.probe);
      MaskSet m_k1 = snapshot_masks(tracked());
      const ParamSnapshot w_k1 = snapshot_params(model_.net.parameters());
      row.descent = amount_of_descent(row.loss, f_k1);
      row.predicted = predicted_descent(g_k, w_k, w_k1);
      if (cfg_.trace_decomposition) {
        const double f_masked_k1 = masked_probe_loss(model_, w_k1, m_k1, data_.probe);
        const double f_cross = masked_probe_loss(model_, w_k1, m_k, data_.probe);
        row.df_mask_changing = f_masked_k - f_masked_k1;
        row.df_mask_frozen = f_masked_k - f_cross;
        cached_masked_ = cfg_.trace_stride == 1 ? std::optional<double>(f_masked_k1)
                                                : std::nullopt;
      }
      last_traced_masks_ = m_k;
      cached_probe_ = cfg_.trace_stride == 1 ? std::optional<double>(f_k1) : std::nullopt;
      cached_masks_ = cfg_.trace_stride == 1 ? std::optional<MaskSet>(std::move(m_k1))
                                             : std::nullopt;
      record_.steps.push_back(std::move(row));
    } else {
      cached_probe_.reset();
      cached_masks_.reset();
      cached_masked_.reset();
    }
  }

  void finish() {
    if (finished_) return;
    finished_ = true;
    if (cfg_.task == Task::Toy) {
      const Tensor& w = model_.net.parameters().front()->w;
      trajectory_.push_back({static_cast<double>(cfg_.steps), w[0], w[1]});
    }
    record_.summary.task = to_string(cfg_.task);
    record_.summary.mode = to_string(cfg_.mode);
    record_.summary.label = cfg_.label;
    record_.summary.final_train_loss = model_.loss_eval(data_.train);
    record_.summary.final_val_loss = model_.loss_eval(data_.val);
    record_.finalize_summary();
  }

  std::vector<SparseLinear*> tracked() { return model_.net.tracked_layers(); }

  static double mask_set_flip(const MaskSet& a, const MaskSet& b) {
    std::size_t flips = 0, total = 0;
    for (const auto& [id, ma] : a) {
      auto it = b.find(id);
      if (it == b.end()) throw std::logic_error("mask snapshots diverged at " + id);
      flips += ma.hamming(it->second);
      total += ma.size();
    }
    if (total == 0) return 0.0;
    return static_cast<double>(flips) / static_cast<double>(total);
  }

  void record_betas(std::uint64_t k) {
    for (SparseLinear* l : model_.net.sparse_linears()) {
      if (l->config().mode == LayerMode::SSte) {
        beta_rows_.emplace_back(k, l->weight().id, l->last_beta());
      }
    }
  }

  ExperimentConfig cfg_;
  ScaleRegistry scales_;
  Dataset data_;
  Model model_;
  Optimizer opt_;
  RunRecord record_;
  std::vector<std::array<double, 3>> trajectory_;
  std::vector<std::tuple<std::uint64_t, std::string, double>> beta_rows_;
  std::uint64_t next_step_ = 0;
  bool finished_ = false;
  std::optional<double> cached_probe_;
  std::optional<MaskSet> cached_masks_;
  std::optional<double> cached_masked_;
  std::optional<MaskSet> last_traced_masks_;
};

/// Run a config start to finish, write its outputs, return the record.
inline RunRecord run_training(const ExperimentConfig& cfg) {
  Trainer t(cfg);
  t.run_all();
  t.write_outputs();
  return t.record();
}

struct AblationRow {
  std::string label;
  RunSummary summary;
};

/// Run a set of configs that differ along one axis. All must share the task
/// and seed so the comparison means something.
inline std::vector<AblationRow> run_ablation(const std::vector<ExperimentConfig>& cfgs) {
  if (cfgs.empty()) throw std::invalid_argument("ablation: empty config list");
  for (const ExperimentConfig& c : cfgs) {
    if (c.task != cfgs.front().task || c.seed != cfgs.front().seed) {
      throw std::invalid_argument("ablation: configs must share task and seed");
    }
  }
  std::vector<AblationRow> rows;
  for (const ExperimentConfig& c : cfgs) {
    RunRecord r = run_training(c);
    rows.push_back({c.label.empty() ? to_string(c.mode) : c.label, r.summary});
  }
  return rows;
}

/// Predefined config matrices for the studied axes.
inline std::vector<ExperimentConfig> ablation_axis(const ExperimentConfig& base,
                                                   const std::string& axis) {
  std::vector<ExperimentConfig> out;
  auto push = [&](ExperimentConfig c, const std::string& label) {
    c.label = label;
    if (!base.out_dir.empty()) c.out_dir = base.out_dir + "/" + label;
    out.push_back(std::move(c));
  };
  if (axis == "mode") {
    for (LayerMode m :
         {LayerMode::Dense, LayerMode::HardSte, LayerMode::SrSte, LayerMode::SSte}) {
      ExperimentConfig c = base;
      c.mode = m;
      if (m == LayerMode::SSte && c.prune.rescale == RescaleRecipe::None) {
        c.prune.rescale = RescaleRecipe::MinMse;
      }
      push(c, to_string(m));
    }
  } else if (axis == "beta") {
    for (RescaleRecipe r : {RescaleRecipe::None, RescaleRecipe::KeepL1, RescaleRecipe::MinMse}) {
      ExperimentConfig c = base;
      c.mode = LayerMode::SSte;
      c.prune.rescale = r;
      push(c, std::string("beta_") + to_string(r));
    }
    ExperimentConfig dyn = base;
    dyn.mode = LayerMode::SSte;
    dyn.prune.rescale = RescaleRecipe::MinMse;
    dyn.rescale_dynamic = true;
    push(dyn, "beta_min_mse_dynamic");
  } else if (axis == "gamma") {
    for (double g : {0.0, 0.25, 0.5, 0.75, 1.0}) {
      ExperimentConfig c = base;
      c.mode = LayerMode::SSte;
      c.prune.gamma = g;
      std::ostringstream os;
      os << "gamma_" << g;
      push(c, os.str());
    }
  } else if (axis == "mvue") {
    // All four placements of the randomized sparsifier.
    ExperimentConfig plain = base;
    plain.mvue_grad_z = false;
    plain.mvue_weights = false;
    push(plain, "mvue_off");
    ExperimentConfig gz = base;
    gz.mvue_grad_z = true;
    gz.mvue_weights = false;
    push(gz, "mvue_grad_z");
    ExperimentConfig both = base;
    both.mvue_grad_z = true;
    both.mvue_weights = true;
    push(both, "mvue_grad_z_weights");
    ExperimentConfig wonly = base;
    wonly.mvue_grad_z = false;
    wonly.mvue_weights = true;
    push(wonly, "mvue_weights");
  } else if (axis == "fp8") {
    ExperimentConfig off = base;
    push(off, "fp8_off");
    ExperimentConfig fwd = base;
    fwd.fp8_forward = "e4m3";
    push(fwd, "fp8_fwd_e4m3");
    ExperimentConfig both = base;
    both.fp8_forward = "e4m3";
    both.fp8_backward = "e5m2";
    push(both, "fp8_fwd_e4m3_bwd_e5m2");
  } else {
    throw std::invalid_argument("unknown ablation axis: " + axis);
  }
  return out;
}

/// Aggregate files for a finished ablation matrix: one row per config, as
/// both CSV and JSON, next to the per-run directories.
inline void write_ablation_outputs(const std::filesystem::path& dir,
                                   const std::vector<AblationRow>& rows) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream f(dir / "ablation_summary.csv", std::ios::trunc);
    f << "label,final_train_loss,final_val_loss,mean_flip,late_flip\n";
    for (const AblationRow& r : rows) {
      f << r.label << ',' << format_double(r.summary.final_train_loss) << ','
        << format_double(r.summary.final_val_loss) << ',' << format_double(r.summary.mean_flip)
        << ',' << format_double(r.summary.late_flip) << '\n';
    }
  }
  nlohmann::json arr = nlohmann::json::array();
  for (const AblationRow& r : rows) {
    nlohmann::json item = r.summary.to_json();
    item["label"] = r.label;
    arr.push_back(std::move(item));
  }
  std::ofstream f(dir / "ablation_summary.json", std::ios::trunc);
  f << arr.dump(2) << '\n';
}

inline std::string render_summary_table(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "label                     train_loss      val_loss        flip_mean   flip_late\n";
  for (const AblationRow& r : rows) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%-24s  %-14.6g  %-14.6g  %-10.4g  %-10.4g\n",
                  r.label.c_str(), r.summary.final_train_loss, r.summary.final_val_loss,
                  r.summary.mean_flip, r.summary.late_flip);
    os << buf;
  }
  return os.str();
}

inline RunSummary load_summary(const std::filesystem::path& run_dir) {
  std::ifstream f(run_dir / "summary.json");
  if (!f) throw std::runtime_error("no summary.json in " + run_dir.string());
  return RunSummary::from_json(nlohmann::json::parse(f));
}

}  // namespace sste
