// SPDX-License-Identifier: Apache-2.0
//
// Experiment entry points. Four verbs:
//   toy     two-weight quadratic, the discontinuity demo
//   train   one configured training run
//   ablate  one-axis config sweep with a summary table
//   report  render tables from finished run directories
//
// Configs are flat JSON objects; every flag mirrors one config key and flags
// override file values.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "sste/experiment.hpp"

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

/// One CLI option per config key. Options the user actually passed are
/// overlaid onto a base JSON object, so file values lose to flags and the
/// config parser stays the single source of validation.
class ConfigFlags {
 public:
  void attach(CLI::App* cmd, bool with_task, bool with_mode = true) {
    if (with_task) {
      task_opt_ = bind_str(cmd, "--task", "task", "training task")
                      ->check(CLI::IsMember({"toy", "synth_reg", "synth_cls", "char_lm"}));
    }
    if (with_mode) {
      bind_str(cmd, "--mode", "mode", "layer sparsity mode")
          ->check(CLI::IsMember({"dense", "hard_ste", "sr_ste", "s_ste"}));
    }
    bind_str(cmd, "--label", "label", "run label used in summaries");
    bind_int(cmd, "--n", "prune.n", "kept entries per block");
    bind_int(cmd, "--m", "prune.m", "block size");
    bind_dbl(cmd, "--gamma", "prune.gamma", "soft threshold interpolation in [0,1]")
        ->check(CLI::Range(0.0, 1.0));
    bind_str(cmd, "--rescale", "rescale.recipe", "rescale recipe for the soft projection")
        ->check(CLI::IsMember({"none", "keep_l1", "min_mse"}));
    bind_flag(cmd, "--dynamic-rescale,!--no-dynamic-rescale", "rescale.dynamic",
              "recompute the rescale every step instead of freezing it");
    lambda_opt_ = bind_dbl(cmd, "--lambda", "srste.lambda",
                           "pruned-weight decay strength (required for sr_ste)");
    bind_flag(cmd, "--mvue-grad-z,!--no-mvue-grad-z", "mvue.grad_z",
              "randomized 2:4 sparsification of the output gradient");
    bind_flag(cmd, "--mvue-weights,!--no-mvue-weights", "mvue.weights",
              "randomized 2:4 sparsification of the projected weights in backward");
    bind_str(cmd, "--fp8-forward", "fp8.forward", "forward matmul number format")
        ->check(CLI::IsMember({"none", "e4m3", "e5m2", "e3m4"}));
    bind_str(cmd, "--fp8-backward", "fp8.backward", "backward matmul number format")
        ->check(CLI::IsMember({"none", "e4m3", "e5m2", "e3m4"}));
    bind_str(cmd, "--opt", "opt.kind", "optimizer")->check(CLI::IsMember({"sgd", "adam"}));
    bind_str(cmd, "--schedule", "opt.schedule", "learning rate schedule")
        ->check(CLI::IsMember({"constant", "cosine"}));
    bind_dbl(cmd, "--lr", "opt.lr", "base learning rate");
    bind_dbl(cmd, "--final-frac", "opt.final_frac", "final lr as a fraction of the base");
    bind_u64(cmd, "--steps", "opt.steps", "training steps");
    bind_u64(cmd, "--batch-size", "opt.batch_size", "batch size, 0 = full batch");
    bind_bool(cmd, "--probe-use-train", "probe.use_train",
              "probe diagnostics on the full training set");
    bind_u64(cmd, "--probe-size", "probe.size", "probe subset size");
    bind_u64(cmd, "--trace-stride", "trace.stride", "trace every k-th step");
    bind_flag(cmd, "--trace-decomposition,!--no-trace-decomposition", "trace.decomposition",
              "record the mask-frozen/mask-changing descent split");
    bind_u64(cmd, "--data-dim", "data.dim", "input dimension");
    bind_u64(cmd, "--data-out", "data.out", "regression output dimension");
    bind_u64(cmd, "--data-hidden", "data.hidden", "hidden width");
    bind_u64(cmd, "--data-classes", "data.classes", "number of classes");
    bind_u64(cmd, "--data-train", "data.train", "training set size");
    bind_u64(cmd, "--data-val", "data.val", "validation set size");
    bind_u64(cmd, "--data-depth", "data.depth", "number of residual blocks");
    bind_u64(cmd, "--data-context", "data.context", "character context length");
    bind_dbl(cmd, "--data-noise", "data.noise", "target noise std");
    bind_dbl(cmd, "--w1", "toy.w1", "toy initial first weight");
    bind_dbl(cmd, "--w2", "toy.w2", "toy initial second weight");
    bind_u64(cmd, "--seed", "seed", "master seed");
    bind_str(cmd, "--out", "out_dir", "output directory (empty = no files)");
  }

  void overlay(json& j) const {
    for (const auto& [opt, write] : bindings_) {
      if (opt->count() > 0) write(j);
    }
  }

  bool task_given() const { return task_opt_ && task_opt_->count() > 0; }
  bool lambda_given() const { return lambda_opt_ && lambda_opt_->count() > 0; }

 private:
  template <class T>
  CLI::Option* bind_value(CLI::App* cmd, const char* flag, std::string key, const char* help) {
    values_.push_back(std::make_unique<Slot<T>>());
    auto* slot = static_cast<Slot<T>*>(values_.back().get());
    CLI::Option* opt = cmd->add_option(flag, slot->v, help);
    bindings_.emplace_back(opt, [slot, key = std::move(key)](json& j) { j[key] = slot->v; });
    return opt;
  }

  CLI::Option* bind_str(CLI::App* cmd, const char* f, const char* k, const char* h) {
    return bind_value<std::string>(cmd, f, k, h);
  }
  CLI::Option* bind_int(CLI::App* cmd, const char* f, const char* k, const char* h) {
    return bind_value<int>(cmd, f, k, h);
  }
  CLI::Option* bind_dbl(CLI::App* cmd, const char* f, const char* k, const char* h) {
    return bind_value<double>(cmd, f, k, h);
  }
  CLI::Option* bind_u64(CLI::App* cmd, const char* f, const char* k, const char* h) {
    return bind_value<std::uint64_t>(cmd, f, k, h);
  }
  CLI::Option* bind_bool(CLI::App* cmd, const char* f, const char* k, const char* h) {
    return bind_value<bool>(cmd, f, k, h);
  }
  CLI::Option* bind_flag(CLI::App* cmd, const char* flag, std::string key, const char* help) {
    values_.push_back(std::make_unique<Slot<bool>>());
    auto* slot = static_cast<Slot<bool>*>(values_.back().get());
    CLI::Option* opt = cmd->add_flag(flag, slot->v, help);
    bindings_.emplace_back(opt, [slot, key = std::move(key)](json& j) { j[key] = slot->v; });
    return opt;
  }

  struct SlotBase {
    virtual ~SlotBase() = default;
  };
  template <class T>
  struct Slot : SlotBase {
    T v{};
  };

  std::vector<std::unique_ptr<SlotBase>> values_;
  std::vector<std::pair<CLI::Option*, std::function<void(json&)>>> bindings_;
  CLI::Option* task_opt_ = nullptr;
  CLI::Option* lambda_opt_ = nullptr;
};

json load_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config file " + path);
  return json::parse(f);
}

/// Merge precedence: config file (if any) under flags. Without a file the
/// base is the task's tuned defaults, so --task (or the toy verb) is needed.
sste::ExperimentConfig merge_config(const std::string& config_path, const ConfigFlags& flags,
                                    const std::string& forced_task) {
  json base;
  bool have_file = false;
  if (!config_path.empty()) {
    base = load_config_file(config_path);
    have_file = true;
  }
  json probe = base;
  flags.overlay(probe);
  if (!forced_task.empty()) probe["task"] = forced_task;
  if (!probe.contains("task")) {
    throw std::invalid_argument("no task: pass --task or a --config file that sets one");
  }
  const sste::Task task = sste::task_from_string(probe.at("task").get<std::string>());

  json merged = have_file ? base : sste::default_config(task).to_json();
  flags.overlay(merged);
  if (!forced_task.empty()) merged["task"] = forced_task;
  sste::ExperimentConfig cfg = sste::ExperimentConfig::from_json(merged);
  cfg.validate();
  return cfg;
}

bool file_sets_lambda(const std::string& config_path) {
  return !config_path.empty() && load_config_file(config_path).contains("srste.lambda");
}

/// Decay strength is a sensitive knob, so sr_ste runs refuse to fall back to
/// a silent default.
void require_explicit_lambda(const ConfigFlags& flags, const std::string& config_path,
                             const char* what) {
  if (flags.lambda_given() || file_sets_lambda(config_path)) return;
  throw std::invalid_argument(std::string(what) +
                              ": sr_ste needs an explicit --lambda (or srste.lambda in the "
                              "config file)");
}

std::string run_dir_note(const sste::ExperimentConfig& cfg) {
  if (cfg.out_dir.empty()) return "no output directory configured, nothing written";
  return "outputs in " + sste::resolve_out_dir(cfg.out_dir).string();
}

int cmd_toy(const ConfigFlags& flags, const std::string& mode_flag) {
  std::vector<sste::LayerMode> modes;
  if (mode_flag.empty()) {
    modes = {sste::LayerMode::Dense, sste::LayerMode::HardSte, sste::LayerMode::SSte};
  } else {
    modes = {sste::layer_mode_from_string(mode_flag)};
  }

  sste::ExperimentConfig base = merge_config("", flags, "toy");
  std::printf("%-10s %-22s %-22s %-14s %s\n", "mode", "final_w1", "final_w2", "final_loss",
              "mean_flip");
  for (sste::LayerMode m : modes) {
    sste::ExperimentConfig cfg = base;
    cfg.mode = m;
    if (cfg.label.empty()) cfg.label = sste::to_string(m);
    if (!base.out_dir.empty()) cfg.out_dir = base.out_dir + "/" + sste::to_string(m);
    sste::Trainer t(cfg);
    t.run_all();
    t.write_outputs();
    const auto& w = t.trajectory().back();
    std::printf("%-10s %-22s %-22s %-14s %s\n", sste::to_string(m),
                sste::format_double(w[1]).c_str(), sste::format_double(w[2]).c_str(),
                sste::format_double(t.record().summary.final_train_loss).c_str(),
                sste::format_double(t.record().summary.mean_flip).c_str());
  }
  if (!base.out_dir.empty()) {
    std::printf("outputs in %s\n", sste::resolve_out_dir(base.out_dir).string().c_str());
  }
  return 0;
}

int cmd_train(const ConfigFlags& flags, const std::string& config_path) {
  sste::ExperimentConfig cfg = merge_config(config_path, flags, "");
  if (cfg.mode == sste::LayerMode::SrSte) require_explicit_lambda(flags, config_path, "train");
  const sste::RunRecord rec = sste::run_training(cfg);
  std::printf("task %s, mode %s, %llu steps\n", sste::to_string(cfg.task),
              sste::to_string(cfg.mode), static_cast<unsigned long long>(cfg.steps));
  std::printf("final train loss %s, val loss %s\n",
              sste::format_double(rec.summary.final_train_loss).c_str(),
              sste::format_double(rec.summary.final_val_loss).c_str());
  std::printf("flip rate mean %s, late %s; negative descent fraction %s\n",
              sste::format_double(rec.summary.mean_flip).c_str(),
              sste::format_double(rec.summary.late_flip).c_str(),
              sste::format_double(rec.summary.negative_descent_fraction).c_str());
  std::printf("%s\n", run_dir_note(cfg).c_str());
  return 0;
}

int cmd_ablate(const ConfigFlags& flags, const std::string& config_path,
               const std::string& axis) {
  sste::ExperimentConfig base = merge_config(config_path, flags, "");
  if (axis == "mode" || base.mode == sste::LayerMode::SrSte) {
    require_explicit_lambda(flags, config_path, "ablate");
  }
  const std::vector<sste::ExperimentConfig> cfgs = sste::ablation_axis(base, axis);
  const std::vector<sste::AblationRow> rows = sste::run_ablation(cfgs);
  std::fputs(sste::render_summary_table(rows).c_str(), stdout);
  if (!base.out_dir.empty()) {
    const fs::path dir = sste::resolve_out_dir(base.out_dir);
    sste::write_ablation_outputs(dir, rows);
    std::printf("outputs in %s\n", dir.string().c_str());
  }
  return 0;
}

std::string dir_label(const fs::path& p) {
  fs::path n = p.lexically_normal();
  if (n.filename().empty()) n = n.parent_path();
  return n.filename().string();
}

int cmd_report(const std::vector<std::string>& dirs) {
  std::vector<sste::AblationRow> rows;
  for (const std::string& d : dirs) {
    const fs::path p(d);
    if (fs::exists(p / "ablation_summary.json")) {
      std::ifstream f(p / "ablation_summary.json");
      const json arr = json::parse(f);
      for (const json& item : arr) {
        sste::RunSummary s = sste::RunSummary::from_json(item);
        rows.push_back({s.label.empty() ? dir_label(p) : s.label, std::move(s)});
      }
      continue;
    }
    sste::RunSummary s = sste::load_summary(p);
    rows.push_back({s.label.empty() ? dir_label(p) : s.label, std::move(s)});
  }
  std::fputs(sste::render_summary_table(rows).c_str(), stdout);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"n:m sparse training testbed"};
  app.require_subcommand(1);

  CLI::App* toy = app.add_subcommand(
      "toy", "run the two-weight quadratic; all three projection modes by default");
  ConfigFlags toy_flags;
  std::string toy_mode;
  toy->add_option("--mode", toy_mode, "run a single mode instead")
      ->check(CLI::IsMember({"dense", "hard_ste", "s_ste"}));
  toy_flags.attach(toy, /*with_task=*/false, /*with_mode=*/false);

  CLI::App* train = app.add_subcommand("train", "run one training configuration");
  ConfigFlags train_flags;
  std::string train_config;
  train->add_option("--config", train_config, "JSON config file; flags override its values")
      ->check(CLI::ExistingFile);
  train_flags.attach(train, /*with_task=*/true);

  CLI::App* ablate = app.add_subcommand("ablate", "run a one-axis sweep and summarize it");
  ConfigFlags ablate_flags;
  std::string ablate_config, axis;
  ablate->add_option("--config", ablate_config, "JSON config file; flags override its values")
      ->check(CLI::ExistingFile);
  ablate->add_option("--axis", axis, "sweep axis")
      ->required()
      ->check(CLI::IsMember({"mode", "beta", "gamma", "mvue", "fp8"}));
  ablate_flags.attach(ablate, /*with_task=*/true);

  CLI::App* report = app.add_subcommand("report", "summarize finished run directories");
  std::vector<std::string> report_dirs;
  report->add_option("dirs", report_dirs, "run or ablation output directories")
      ->required()
      ->check(CLI::ExistingDirectory);

  CLI11_PARSE(app, argc, argv);

  try {
    if (app.got_subcommand(toy)) return cmd_toy(toy_flags, toy_mode);
    if (app.got_subcommand(train)) return cmd_train(train_flags, train_config);
    if (app.got_subcommand(ablate)) return cmd_ablate(ablate_flags, ablate_config, axis);
    if (app.got_subcommand(report)) return cmd_report(report_dirs);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
