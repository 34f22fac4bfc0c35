// tunemark: watermark a training set, simulate fine-tuning on it, and audit
// generated images for the watermark.

#include <cstdio>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "tunemark/commands.hpp"
#include "tunemark/tunemark.hpp"

namespace {

using namespace tunemark;

struct CommonOpts {
  std::string config_path;
  std::string out = "out";
  std::optional<uint64_t> seed;
  std::optional<double> scale;
  int jobs = 1;
};

void add_common(CLI::App* cmd, CommonOpts& opts, bool wants_config = true) {
  if (wants_config) {
    cmd->add_option("--config", opts.config_path, "JSON run configuration (defaults used if omitted)");
    cmd->add_option("--seed", opts.seed, "override the config seed");
    cmd->add_option("--scale", opts.scale, "override the global size/step multiplier");
  }
  cmd->add_option("--out", opts.out, "output directory")->required();
  cmd->add_option("--jobs", opts.jobs, "worker processes for independent tasks")
      ->check(CLI::Range(1, 64));
}

RunConfig load_config(const CommonOpts& opts) {
  RunConfig cfg = opts.config_path.empty() ? RunConfig{} : RunConfig::from_file(opts.config_path);
  if (opts.seed) cfg.seed = *opts.seed;
  if (opts.scale) cfg.scale = *opts.scale;
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"training-set watermarking and generated-image audit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(tunemark::kVersion));

  CommonOpts protect_opts, offender_opts, detector_opts, experiment_opts;
  std::string protect_dir, offender_dir, detector_dir, images_dir, labels_path, which;
  std::string audit_out = "out";

  CLI::App* protect = app.add_subcommand("protect", "optimize and export watermarked images");
  add_common(protect, protect_opts);

  CLI::App* offender = app.add_subcommand(
      "simulate-offender", "fine-tune each configured method on clean and protected data");
  offender->add_option("protect_dir", protect_dir, "output directory of a protect run")
      ->required();
  add_common(offender, offender_opts);

  CLI::App* detectors = app.add_subcommand(
      "train-detectors", "train per-method experts and the gating network");
  detectors->add_option("protect_dir", protect_dir, "output directory of a protect run")
      ->required();
  detectors->add_option("offender_dir", offender_dir, "output directory of simulate-offender")
      ->required();
  add_common(detectors, detector_opts);

  CLI::App* audit = app.add_subcommand("audit", "score a directory of PNG images");
  audit->add_option("detector_dir", detector_dir, "saved detector directory")->required();
  audit->add_option("images_dir", images_dir, "directory of .png images to score")->required();
  audit->add_option("--out", audit_out, "output directory")->required();
  audit->add_option("--labels", labels_path,
                    "JSON {filename: 0|1} ground truth for a TPR/FPR summary");

  CLI::App* experiment = app.add_subcommand("experiment", "run a measurement sweep");
  experiment
      ->add_option("--which", which, "one of: steps, rate, robustness, transfer")
      ->required();
  add_common(experiment, experiment_opts);

  CLI11_PARSE(app, argc, argv);

  try {
    if (protect->parsed()) {
      cmd_protect(load_config(protect_opts), protect_opts.out, protect_opts.jobs);
    } else if (offender->parsed()) {
      cmd_simulate_offender(load_config(offender_opts), protect_dir, offender_opts.out,
                            offender_opts.jobs);
    } else if (detectors->parsed()) {
      cmd_train_detectors(load_config(detector_opts), protect_dir, offender_dir,
                          detector_opts.out, detector_opts.jobs);
    } else if (audit->parsed()) {
      cmd_audit(detector_dir, images_dir, audit_out,
                labels_path.empty() ? std::filesystem::path{} : std::filesystem::path(labels_path));
    } else if (experiment->parsed()) {
      cmd_experiment(load_config(experiment_opts), which, experiment_opts.out,
                     experiment_opts.jobs);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return tunemark::exit_code_for(e);
  }
  return tunemark::kExitOk;
}
