#include <filesystem>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "gradcheck_cmd.hpp"
#include "lbba/errors.hpp"
#include "pipeline.hpp"
#include "run_config.hpp"

namespace fs = std::filesystem;
using namespace lbba;
using namespace lbba::cli;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "Run configuration (INI)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--set", c.sets, "Override a key, e.g. --set attack.eps=0.05")->take_all();
}

RunConfig load_config(const Common& c) {
  RunConfig cfg = RunConfig::load(c.config);
  for (const auto& kv : c.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects section.key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  cfg.validate();
  return cfg;
}

void log_line(const std::string& line) { std::cerr << "[lbba] " << line << "\n"; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot surrogate transfer attacks: training, attack generation and evaluation"};
  app.require_subcommand(1);

  GradcheckOptions gopt;
  bool no_network = false;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable primitive");
  gradcheck->add_option("--cases", gopt.cases, "Random cases per primitive")->check(CLI::PositiveNumber);
  gradcheck->add_option("--seed", gopt.seed, "Case seed");
  gradcheck->add_option("--tolerance", gopt.tolerance, "Maximum relative error");
  gradcheck->add_flag("--no-network", no_network, "Skip the full network check");

  Common targets_opt;
  auto* train_targets = app.add_subcommand("train-targets", "Train and register the target models");
  add_common(train_targets, targets_opt);

  Common surrogate_opt;
  std::optional<std::string> objective;
  std::optional<int> n_per_class, n_total;
  bool no_aug = false;
  auto* train_surrogate = app.add_subcommand("train-surrogate", "Train a surrogate on the few-shot set");
  add_common(train_surrogate, surrogate_opt);
  train_surrogate->add_option("--objective", objective, "supervised, contrastive or rotation")
      ->check(CLI::IsMember({"supervised", "contrastive", "rotation"}));
  train_surrogate->add_option("--n-per-class", n_per_class, "Few-shot images per class");
  train_surrogate->add_option("--n-total", n_total, "Few-shot images in total");
  train_surrogate->add_flag("--no-augmentation", no_aug, "Train without data augmentation");

  Common attack_opt;
  std::optional<std::string> surface, method, norm;
  std::optional<double> eps, tau;
  auto* attack = app.add_subcommand("attack", "Generate adversarial archives from the evaluation pool");
  add_common(attack, attack_opt);
  attack->add_option("--surface", surface, "deep, shallow, etf, etf-all or etf-weight");
  attack->add_option("--method", method, "pgd, mi, di or ti");
  attack->add_option("--eps", eps, "Outer budget");
  attack->add_option("--tau", tau, "Inner budget");
  attack->add_option("--norm", norm, "linf or l2");

  Common eval_opt;
  auto* evaluate = app.add_subcommand("evaluate", "Run the attack x target matrix and emit reports");
  add_common(evaluate, eval_opt);

  Common sweep_opt;
  std::string kind;
  auto* sweep = app.add_subcommand("sweep", "Sample-count or layer sweep");
  add_common(sweep, sweep_opt);
  sweep->add_option("--kind", kind, "samples or layers")->required()->check(CLI::IsMember({"samples", "layers"}));

  Common ablate_opt;
  auto* ablate = app.add_subcommand("ablate", "Surrogate objective, augmentation, inner-max and norm ablations");
  add_common(ablate, ablate_opt);

  std::string report_in;
  std::vector<std::string> formats;
  auto* report = app.add_subcommand("report", "Re-emit a report or sweep in other formats");
  report->add_option("--in", report_in, "Output directory holding report.json or sweep.json")
      ->required()
      ->check(CLI::ExistingDirectory);
  report->add_option("--format", formats, "csv, md, json or svg")
      ->required()
      ->delimiter(',')
      ->check(CLI::IsMember({"csv", "md", "json", "svg"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return exit_code(ErrorKind::config);
  }

  try {
    if (*gradcheck) {
      gopt.network = !no_network;
      return run_gradcheck(gopt, std::cout);
    }
    if (*report) {
      emit_from_run_dir(report_in, {formats.begin(), formats.end()});
      return 0;
    }

    const Common& common = *train_targets     ? targets_opt
                           : *train_surrogate ? surrogate_opt
                           : *attack          ? attack_opt
                           : *evaluate        ? eval_opt
                           : *sweep           ? sweep_opt
                                              : ablate_opt;
    RunConfig cfg = load_config(common);
    if (*train_surrogate) {
      if (objective) cfg.set("surrogate.objective", *objective);
      if (no_aug) cfg.set("surrogate.augmentation", "false");
      if (n_per_class && n_total) throw ConfigError("give --n-per-class or --n-total, not both");
      if (n_per_class) {
        cfg.set("few_shot.n_per_class", std::to_string(*n_per_class));
        cfg.set("few_shot.n_total", "0");
      }
      if (n_total) {
        cfg.set("few_shot.n_total", std::to_string(*n_total));
        cfg.set("few_shot.n_per_class", "0");
      }
    }
    if (*attack) {
      if (surface) cfg.set("attack.surface", *surface);
      if (method) cfg.set("attack.method", *method);
      if (norm) cfg.set("attack.norm", *norm);
      if (eps) cfg.set("attack.eps", CLI::detail::to_string(*eps));
      if (tau) cfg.set("attack.tau", CLI::detail::to_string(*tau));
    }
    cfg.validate();

    DirLock lock(cfg.run_dir());
    Pipeline pipe(cfg, log_line);
    if (*train_targets) {
      pipe.train_targets();
    } else if (*train_surrogate) {
      pipe.train_surrogate(pipe.configured_variant());
    } else if (*attack) {
      pipe.attack();
    } else if (*evaluate) {
      std::cout << report_markdown(pipe.evaluate());
    } else if (*sweep) {
      const SweepResult sw = kind == "samples" ? pipe.sweep_samples() : pipe.sweep_layers();
      for (const auto& p : sw.points) std::cout << p.label << "\t" << p.avg_adv << "\n";
    } else if (*ablate) {
      std::cout << report_markdown(pipe.ablate());
    }
    return 0;
  } catch (const lbba::Error& e) {
    std::cerr << "lbba: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const fs::filesystem_error& e) {
    std::cerr << "lbba: " << e.what() << "\n";
    return exit_code(ErrorKind::data);
  } catch (const std::exception& e) {
    std::cerr << "lbba: " << e.what() << "\n";
    return 1;
  }
}
