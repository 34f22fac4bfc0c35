#pragma once

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "tunemark/config.hpp"
#include "tunemark/pipeline.hpp"
#include "tunemark/plot.hpp"
#include "tunemark/sweeps.hpp"

namespace tunemark {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Exception -> exit-code mapping, shared by the CLI entry point and workers
// ---------------------------------------------------------------------------

// Carries a worker process's exit code up to the parent's own exit.
class worker_error : public std::runtime_error {
 public:
  worker_error(const std::string& msg, int code) : std::runtime_error(msg), code_(code) {}
  int code() const { return code_; }

 private:
  int code_;
};

inline int exit_code_for(const std::exception& e) {
  if (auto* w = dynamic_cast<const worker_error*>(&e)) return w->code();
  if (dynamic_cast<const config_error*>(&e)) return kExitConfigError;
  if (dynamic_cast<const data_error*>(&e)) return kExitDataError;
  if (dynamic_cast<const numeric_error*>(&e)) return kExitNumericError;
  if (dynamic_cast<const std::invalid_argument*>(&e)) return kExitConfigError;
  return kExitFailure;
}

// ---------------------------------------------------------------------------
// Process-level task pool: tasks communicate through the filesystem only, so
// jobs=1 (in-process) and jobs=N (forked workers) produce identical outputs.
// ---------------------------------------------------------------------------

struct NamedTask {
  std::string name;
  std::function<void()> work;
};

inline void run_tasks(const std::vector<NamedTask>& tasks, int jobs) {
  if (jobs <= 1 || tasks.size() <= 1) {
    for (const auto& t : tasks) t.work();
    return;
  }
  std::fflush(stdout);
  std::fflush(stderr);
  std::map<pid_t, std::string> live;
  size_t next = 0;
  int first_failure = 0;
  std::string failed_name;

  auto reap_one = [&]() {
    int status = 0;
    const pid_t pid = waitpid(-1, &status, 0);
    if (pid < 0) throw std::runtime_error("waitpid failed");
    const auto it = live.find(pid);
    if (it == live.end()) return;
    const int code = WIFEXITED(status) ? WEXITSTATUS(status)
                                       : kExitFailure;  // signal death counts as failure
    if (code != 0 && first_failure == 0) {
      first_failure = code;
      failed_name = it->second;
    }
    live.erase(it);
  };

  while (next < tasks.size() || !live.empty()) {
    while (next < tasks.size() && static_cast<int>(live.size()) < jobs) {
      const pid_t pid = fork();
      if (pid < 0) throw std::runtime_error("fork failed");
      if (pid == 0) {
        try {
          tasks[next].work();
          std::fflush(stdout);
          std::fflush(stderr);
          _exit(0);
        } catch (const std::exception& e) {
          std::fprintf(stderr, "task %s: %s\n", tasks[next].name.c_str(), e.what());
          std::fflush(stderr);
          _exit(exit_code_for(e));
        } catch (...) {
          std::fprintf(stderr, "task %s: unknown error\n", tasks[next].name.c_str());
          std::fflush(stderr);
          _exit(kExitFailure);
        }
      }
      live.emplace(pid, tasks[next].name);
      ++next;
    }
    if (!live.empty()) reap_one();
  }
  if (first_failure != 0) {
    throw worker_error("task '" + failed_name + "' failed (exit code " +
                           std::to_string(first_failure) + "); see its error output above",
                       first_failure);
  }
}

// ---------------------------------------------------------------------------
// Shared stage helpers
// ---------------------------------------------------------------------------

inline StyleDataset obtain_dataset(const RunConfig& cfg) {
  if (!cfg.dataset_path.empty()) return load_dataset(cfg.dataset_path);
  return make_style_dataset(cfg.dataset_images, {3, 32, 32}, cfg.style_index,
                            mix_seed(cfg.seed, 0xda7a5e7));
}

inline std::string pixels_sha256(const Tensor<float>& pixels) {
  return sha256_hex(pixels.data(), sizeof(float) * static_cast<size_t>(pixels.size()));
}

// Root manifest: ties an output directory to one configuration. Reusing a
// directory with a different config is refused rather than silently mixed.
inline void write_stage_manifest(const fs::path& out, const std::string& command,
                                 const RunConfig& cfg, json extra) {
  json manifest;
  manifest["command"] = command;
  manifest["tool_version"] = kVersion;
  manifest["config"] = cfg.to_json();
  manifest["config_sha256"] = cfg.config_hash();
  manifest["seed"] = cfg.seed;
  manifest["details"] = std::move(extra);
  write_text_file(out / "manifest.json", manifest.dump(2) + "\n");
}

inline void check_output_dir(const fs::path& out, const RunConfig& cfg) {
  if (fs::exists(out / "manifest.json")) {
    const json old = read_json_file(out / "manifest.json");
    if (old.contains("config_sha256") &&
        old.at("config_sha256").get<std::string>() != cfg.config_hash()) {
      throw data_error("output directory " + out.string() +
                       " holds results for a different configuration; use a fresh directory");
    }
  }
  fs::create_directories(out);
}

// The released protected images, re-read from their 8-bit interchange form.
inline ImageBatch<float> load_protected_set(const fs::path& dir, const StyleDataset& ds) {
  const json manifest = read_json_file(dir / "protected.json");
  try {
    if (manifest.at("kind").get<std::string>() != "protected_set") {
      throw data_error("not a protected-image directory: " + dir.string());
    }
    const auto& entries = manifest.at("images");
    require(entries.size() == ds.ids.size(),
            "protected set and dataset disagree on image count");
    ImageBatch<float> out;
    out.prompts = ds.data.prompts;
    out.pixels = Tensor<float>(ds.data.pixels.shape());
    const long per = out.pixels.size() / std::max(1, out.pixels.dim(0));
    int i = 0;
    for (const auto& entry : entries) {
      if (entry.at("id").get<std::string>() != ds.ids[static_cast<size_t>(i)]) {
        throw data_error("protected set image order disagrees with the dataset");
      }
      const fs::path file = dir / entry.at("file").get<std::string>();
      if (sha256_file(file.string()) != entry.at("sha256").get<std::string>()) {
        throw data_error("protected image checksum mismatch: " + file.string());
      }
      const Tensor<float> img = to_float(read_png(file.string()));
      require(img.size() == per, "protected image resolution disagrees with the dataset");
      std::copy(img.data(), img.data() + per, out.pixels.data() + i * per);
      ++i;
    }
    return out;
  } catch (const json::exception& e) {
    throw data_error(std::string("bad protected-set manifest: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// protect: optimize watermarks, export protected images, verify the budget
// ---------------------------------------------------------------------------

inline void cmd_protect(const RunConfig& cfg, const fs::path& out, int /*jobs*/) {
  check_output_dir(out, cfg);
  const double eta = cfg.watermark.eta;

  StyleDataset ds = obtain_dataset(cfg);
  save_dataset(out / "dataset", ds);
  std::printf("dataset: %d images at %dx%d (style %d)\n", ds.data.count(),
              ds.data.pixels.dim(2), ds.data.pixels.dim(3), ds.style_index);

  std::printf("pretraining base model (%d steps)...\n", cfg.scaled(cfg.pretrain_steps));
  DiffusionModel<float> base = pretrain_base(cfg, mix_seed(cfg.seed, 0x6a5e));
  save_model(out / "base_model", base);

  std::printf("optimizing watermarks (eta %.6f, %d epochs)...\n", eta, cfg.watermark.epochs);
  ProtectArtifacts art = run_protect(ds, base, cfg, cfg.seed);
  save_watermarks(out / "watermarks", art.optimization.watermarks);
  save_model(out / "cotrained_model", art.optimization.model);  // diagnostics only

  // 8-bit export of every protected image
  const fs::path prot_dir = out / "protected";
  fs::create_directories(prot_dir);
  json images = json::array();
  const long per = ds.data.pixels.size() / ds.data.count();
  Tensor<float> orig({3, ds.data.pixels.dim(2), ds.data.pixels.dim(3)});
  Tensor<float> prot(orig.shape());
  for (int i = 0; i < ds.data.count(); ++i) {
    std::copy(ds.data.pixels.data() + i * per, ds.data.pixels.data() + (i + 1) * per,
              orig.data());
    std::copy(art.protected_data.pixels.data() + i * per,
              art.protected_data.pixels.data() + (i + 1) * per, prot.data());
    const ImageU8 png = quantize_protected(orig, prot, eta);
    const std::string file = ds.ids[static_cast<size_t>(i)] + ".png";
    write_png((prot_dir / file).string(), png);
    images.push_back({{"id", ds.ids[static_cast<size_t>(i)]},
                      {"file", file},
                      {"sha256", sha256_file((prot_dir / file).string())}});
  }
  json prot_manifest{{"format_version", kCheckpointFormatVersion},
                     {"kind", "protected_set"},
                     {"eta", eta},
                     {"images", images}};
  write_text_file(prot_dir / "protected.json", prot_manifest.dump(2) + "\n");

  // loss trace: CSV + chart
  {
    std::string csv = "batch_visit,loss\n";
    Series s;
    s.label = "training loss";
    for (size_t i = 0; i < art.optimization.loss_trace.size(); ++i) {
      csv += std::to_string(i) + "," + csv_number(art.optimization.loss_trace[i]) + "\n";
      s.x.push_back(static_cast<double>(i));
      s.y.push_back(art.optimization.loss_trace[i]);
    }
    write_text_file(out / "watermark_loss.csv", csv);
    if (s.x.size() >= 2) {
      ChartSpec spec;
      spec.title = "co-training loss per batch visit";
      spec.x_label = "batch visit";
      spec.y_label = "loss";
      write_line_chart(out / "watermark_loss.png", spec, {s});
    }
  }

  // budget verification, float domain + the 8-bit files actually written
  const BudgetCheck chk = verify_budget(ds, art.protected_data, eta);
  const int qbudget = static_cast<int>(std::lround(eta * 255.0));
  long png_total = 0, png_within = 0;
  for (int i = 0; i < ds.data.count(); ++i) {
    std::copy(ds.data.pixels.data() + i * per, ds.data.pixels.data() + (i + 1) * per,
              orig.data());
    const ImageU8 released = read_png((prot_dir / (ds.ids[static_cast<size_t>(i)] + ".png")).string());
    const ImageU8 base_png = to_u8(orig);
    require(released.rgb.size() == base_png.rgb.size(), "released image size mismatch");
    for (size_t k = 0; k < released.rgb.size(); ++k) {
      png_total += 1;
      png_within += std::abs(static_cast<int>(released.rgb[k]) -
                             static_cast<int>(base_png.rgb[k])) <= qbudget;
    }
  }
  std::printf("budget verification (%ld pixel values):\n", chk.pixels_total);
  std::printf("  float domain : %ld/%ld within eta=%.6f (%.3f%%)\n", chk.pixels_within_float,
              chk.pixels_total, eta, 100.0 * chk.pixels_within_float / chk.pixels_total);
  std::printf("  8-bit domain : %ld/%ld within %d levels on released PNGs (%.3f%%)\n",
              png_within, png_total, qbudget, 100.0 * png_within / png_total);
  if (!chk.all_within() || png_within != png_total) {
    throw std::logic_error("watermark budget invariant violated on exported images");
  }

  json details;
  details["dataset_sha256"] = sha256_file((out / "dataset" / "dataset.json").string());
  details["protected_count"] = ds.data.count();
  details["budget"] = {{"eta", eta},
                       {"pixels", chk.pixels_total},
                       {"within_float", chk.pixels_within_float},
                       {"within_u8", png_within}};
  details["outputs"] = {{"dataset", "dataset"},
                        {"base_model", "base_model"},
                        {"watermarks", "watermarks"},
                        {"protected", "protected"},
                        {"cotrained_model", "cotrained_model"}};
  write_stage_manifest(out, "protect", cfg, details);
  std::printf("protect outputs written to %s\n", out.string().c_str());
}

// ---------------------------------------------------------------------------
// simulate-offender: fine-tune each configured method on clean and protected
// copies, generate image sets, and re-verify footprints on the saved files
// ---------------------------------------------------------------------------

inline void cmd_simulate_offender(const RunConfig& cfg, const fs::path& protect_dir,
                                  const fs::path& out, int jobs) {
  if (cfg.methods.empty()) {
    std::printf("warning: no fine-tuning methods configured; nothing to simulate\n");
    return;
  }
  check_output_dir(out, cfg);

  const StyleDataset ds = load_dataset(protect_dir / "dataset");
  DiffusionModel<float> base = load_model(protect_dir / "base_model");
  const ImageBatch<float> released = load_protected_set(protect_dir / "protected", ds);
  const std::string clean_sha = pixels_sha256(ds.data.pixels);
  const std::string released_sha = pixels_sha256(released.pixels);

  std::vector<NamedTask> tasks;
  for (FtKind kind : cfg.methods) {
    for (const bool watermarked : {false, true}) {
      const std::string name =
          std::string(ft_kind_name(kind)) + (watermarked ? "_wm" : "_clean");
      const fs::path dir = out / name;
      const ImageBatch<float>* data = watermarked ? &released : &ds.data;
      const std::string* sha = watermarked ? &released_sha : &clean_sha;
      tasks.push_back(
          {name, [&cfg, &base, data, sha, kind, watermarked, dir]() {
             OffenderRun run = run_offender(base, *data, kind, cfg, cfg.seed, watermarked);
             save_finetune_result(dir, run.result, cfg.seed, *sha, watermarked);
             save_generated_set(dir / "train_gen", run.train_gen);
             save_generated_set(dir / "eval_gen", run.eval_gen);
           }});
    }
  }
  run_tasks(tasks, jobs);

  // footprint re-verification on what actually landed on disk
  json footprints = json::array();
  for (FtKind kind : cfg.methods) {
    for (const char* arm : {"_clean", "_wm"}) {
      const std::string name = std::string(ft_kind_name(kind)) + arm;
      DiffusionModel<float> tuned = load_model(out / name / "checkpoint");
      const FootprintCheck chk = verify_footprint(base, tuned, kind);
      if (chk.pure) {
        std::printf("footprint %-28s ok (%d changed, %d frozen bit-identical)\n", name.c_str(),
                    chk.changed_params, chk.frozen_params);
      } else {
        for (const auto& v : chk.violations) {
          std::fprintf(stderr, "footprint %s violation: %s\n", name.c_str(), v.c_str());
        }
        throw std::logic_error("fine-tuning footprint violated for " + name);
      }
      footprints.push_back({{"run", name}, {"pure", chk.pure}, {"changed", chk.changed_params}});
    }
  }

  json details;
  details["protect_dir"] = protect_dir.string();
  details["clean_sha256"] = clean_sha;
  details["released_sha256"] = released_sha;
  details["footprints"] = footprints;
  write_stage_manifest(out, "simulate-offender", cfg, details);
  std::printf("offender runs written to %s\n", out.string().c_str());
}

// ---------------------------------------------------------------------------
// train-detectors: per-method experts (stage one), then the gating model
// over all methods (stage two) when there is more than one method
// ---------------------------------------------------------------------------

inline fs::path offender_run_dir(const fs::path& offender_dir, FtKind kind, bool watermarked) {
  return offender_dir / (std::string(ft_kind_name(kind)) + (watermarked ? "_wm" : "_clean"));
}

inline void require_offender_run(const fs::path& offender_dir, FtKind kind) {
  for (const bool wm : {false, true}) {
    const fs::path dir = offender_run_dir(offender_dir, kind, wm);
    if (!fs::exists(dir / "train_gen" / "gen.json")) {
      throw data_error(std::string("no offender run found for method '") + ft_kind_name(kind) +
                       "' under " + offender_dir.string() +
                       "; run simulate-offender with this method enabled first");
    }
  }
}

inline void cmd_train_detectors(const RunConfig& cfg, const fs::path& protect_dir,
                                const fs::path& offender_dir, const fs::path& out, int jobs) {
  check_output_dir(out, cfg);
  const StyleDataset ds = load_dataset(protect_dir / "dataset");
  const ImageBatch<float> released = load_protected_set(protect_dir / "protected", ds);

  std::vector<FtKind> kinds = cfg.methods;
  std::sort(kinds.begin(), kinds.end());
  require(!kinds.empty(), "at least one fine-tuning method must be configured");
  for (FtKind kind : kinds) require_offender_run(offender_dir, kind);

  DetectorHyper hyper = cfg.detector;
  hyper.steps = cfg.scaled(hyper.steps);

  std::vector<NamedTask> tasks;
  for (FtKind kind : kinds) {
    const std::string name = std::string("expert_") + ft_kind_name(kind);
    tasks.push_back({name, [&, kind, name]() {
                       GeneratedSet<float> gen_clean =
                           load_generated_set(offender_run_dir(offender_dir, kind, false) /
                                              "train_gen");
                       GeneratedSet<float> gen_wm = load_generated_set(
                           offender_run_dir(offender_dir, kind, true) / "train_gen");
                       if (hyper.ablation_no_generated) {
                         gen_clean.images.pixels = Tensor<float>();
                         gen_wm.images.pixels = Tensor<float>();
                       }
                       ExpertDetector<float> expert = train_expert(
                           ds.data.pixels, released.pixels, gen_clean, gen_wm, cfg.augmentation,
                           hyper, mix_seed(cfg.seed, 0xde7, static_cast<uint64_t>(kind)));
                       save_expert(out / name, expert);
                     }});
  }
  run_tasks(tasks, jobs);

  std::vector<ExpertDetector<float>> experts;
  json expert_summaries = json::array();
  for (FtKind kind : kinds) {
    const std::string name = std::string("expert_") + ft_kind_name(kind);
    ExpertDetector<float> expert = load_expert(out / name);
    const DetectorTrainReport& rep = expert.report();
    std::printf("expert %-24s train acc %.3f, holdout acc %.3f%s\n", ft_kind_name(kind),
                rep.train_accuracy, rep.holdout_accuracy,
                rep.imbalance_warning ? "  [class imbalance >10:1]" : "");
    if (!rep.note.empty()) std::printf("  note: %s\n", rep.note.c_str());
    expert_summaries.push_back({{"method", ft_kind_name(kind)},
                                {"dir", name},
                                {"train_accuracy", rep.train_accuracy},
                                {"holdout_accuracy", rep.holdout_accuracy},
                                {"imbalance_warning", rep.imbalance_warning}});
    experts.push_back(std::move(expert));
  }

  bool gating_trained = false;
  if (kinds.size() < 2) {
    std::printf(
        "gating refused: a mixture needs at least two experts; audits will use the single "
        "%s expert directly\n",
        ft_kind_name(kinds.front()));
    save_expert(out, experts.front());
  } else {
    std::vector<MethodImages<float>> classes;
    for (FtKind kind : kinds) {
      const GeneratedSet<float> gc =
          load_generated_set(offender_run_dir(offender_dir, kind, false) / "train_gen");
      const GeneratedSet<float> gw =
          load_generated_set(offender_run_dir(offender_dir, kind, true) / "train_gen");
      classes.push_back(
          MethodImages<float>{kind, concat_images(gc.images.pixels, gw.images.pixels)});
    }
    const GatingModel<float> gating =
        train_gating(classes, hyper, mix_seed(cfg.seed, 0x9a7e));
    std::printf("gating over %zu methods: train acc %.3f, holdout acc %.3f\n", kinds.size(),
                gating.report().train_accuracy, gating.report().holdout_accuracy);
    const MoEDetector<float> moe(experts, gating);
    save_moe(out, moe);
    gating_trained = true;
  }

  json details;
  details["protect_dir"] = protect_dir.string();
  details["offender_dir"] = offender_dir.string();
  details["experts"] = expert_summaries;
  details["gating_trained"] = gating_trained;
  write_stage_manifest(out, "train-detectors", cfg, details);
  std::printf("detector checkpoints written to %s\n", out.string().c_str());
}

// ---------------------------------------------------------------------------
// audit: score a directory of PNG images with a saved detector
// ---------------------------------------------------------------------------

// A saved detector directory holds either a mixture or a single expert; a
// single expert audits as a one-component mixture with constant gating.
inline MoEDetector<float> load_detector(const fs::path& dir) {
  const json manifest = read_json_file(dir / "detector.json");
  std::string kind;
  try {
    kind = manifest.at("kind").get<std::string>();
  } catch (const json::exception& e) {
    throw data_error(std::string("detector checkpoint: ") + e.what());
  }
  if (kind == "moe_detector") return load_moe(dir);
  if (kind == "expert_detector") return MoEDetector<float>::single(load_expert(dir));
  throw data_error("unknown detector checkpoint kind: " + kind);
}

struct AuditOutcome {
  int total = 0;
  int flagged = 0;
  int errors = 0;
};

inline AuditOutcome cmd_audit(const fs::path& detector_dir, const fs::path& images_dir,
                              const fs::path& out, const fs::path& labels_path = {}) {
  const MoEDetector<float> detector = load_detector(detector_dir);
  fs::create_directories(out);

  std::map<std::string, int> labels;
  if (!labels_path.empty()) {
    const json lj = read_json_file(labels_path);
    try {
      for (auto it = lj.begin(); it != lj.end(); ++it) {
        labels[it.key()] = it.value().get<int>();
      }
    } catch (const json::exception& e) {
      throw data_error(std::string("bad labels file: ") + e.what());
    }
  }

  std::vector<fs::path> files;
  if (!fs::exists(images_dir)) throw data_error("no such image directory: " + images_dir.string());
  for (const auto& entry : fs::directory_iterator(images_dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".png") {
      files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end());

  AuditOutcome outcome;
  json rows = json::array();
  std::vector<double> pos_scores, neg_scores;
  for (const fs::path& file : files) {
    outcome.total += 1;
    json row{{"file", file.filename().string()}};
    try {
      const Tensor<float> img = to_float(read_png(file.string()));
      const AuditScore<float> score = detector.audit(img);
      const bool verdict = static_cast<double>(score.final_score) >= detector.threshold();
      json weights = json::object(), scores = json::object();
      for (size_t i = 0; i < score.methods.size(); ++i) {
        weights[ft_kind_name(score.methods[i])] = score.gating_weights[i];
        scores[ft_kind_name(score.methods[i])] = score.expert_scores[i];
      }
      row["gating_weights"] = weights;
      row["expert_scores"] = scores;
      row["score"] = score.final_score;
      row["verdict"] = verdict ? "watermarked" : "clean";
      outcome.flagged += verdict;
      const auto lab = labels.find(file.filename().string());
      if (lab != labels.end()) {
        (lab->second != 0 ? pos_scores : neg_scores).push_back(score.final_score);
      }
    } catch (const std::exception& e) {
      row["error"] = e.what();
      outcome.errors += 1;
    }
    rows.push_back(std::move(row));
  }

  json report;
  report["detector"] = detector_dir.string();
  report["threshold"] = detector.threshold();
  report["images"] = rows;
  report["summary"] = {{"total", outcome.total},
                       {"flagged", outcome.flagged},
                       {"errors", outcome.errors}};
  if (!pos_scores.empty() && !neg_scores.empty()) {
    const DetectionReport r = compute_tpr_fpr(pos_scores, neg_scores, detector.threshold());
    report["summary"]["tpr"] = r.tpr;
    report["summary"]["fpr"] = r.fpr;
    std::printf("labeled subset: TPR %.3f, FPR %.3f at threshold %.2f\n", r.tpr, r.fpr,
                detector.threshold());
  }
  write_text_file(out / "audit_report.json", report.dump(2) + "\n");
  std::printf("audited %d images: %d flagged, %d errors; report at %s\n", outcome.total,
              outcome.flagged, outcome.errors,
              (out / "audit_report.json").string().c_str());
  return outcome;
}

// ---------------------------------------------------------------------------
// experiment: end-to-end sweeps producing CSV + JSON + charts
// ---------------------------------------------------------------------------

namespace cmddetail {

// Base model and protect artifacts are cached inside the output directory so
// consecutive experiment kinds reuse them. check_output_dir has already tied
// the directory to this exact configuration.
inline DiffusionModel<float> cached_base(const RunConfig& cfg, const fs::path& out) {
  const fs::path dir = out / "base_model";
  if (fs::exists(dir / "manifest.json")) {
    std::printf("reusing cached base model\n");
    return load_model(dir);
  }
  std::printf("pretraining base model (%d steps)...\n", cfg.scaled(cfg.pretrain_steps));
  DiffusionModel<float> base = pretrain_base(cfg, mix_seed(cfg.seed, 0x6a5e));
  save_model(dir, base);
  return base;
}

inline WatermarkSet<float> cached_watermarks(const RunConfig& cfg, const fs::path& out,
                                             const StyleDataset& ds,
                                             const DiffusionModel<float>& base) {
  const fs::path dir = out / "watermarks";
  if (fs::exists(dir / "wm_manifest.json")) {
    std::printf("reusing cached watermarks\n");
    return load_watermarks(dir);
  }
  std::printf("optimizing watermarks...\n");
  ProtectArtifacts art = run_protect(ds, base, cfg, cfg.seed);
  save_watermarks(dir, art.optimization.watermarks);
  return art.optimization.watermarks;
}

struct SharedArtifacts {
  StyleDataset ds;
  DiffusionModel<float> base;
  WatermarkSet<float> wm;
  ImageBatch<float> exported;
};

inline SharedArtifacts shared_artifacts(const RunConfig& cfg, const fs::path& out) {
  StyleDataset ds = obtain_dataset(cfg);
  if (!fs::exists(out / "dataset" / "dataset.json")) save_dataset(out / "dataset", ds);
  DiffusionModel<float> base = cached_base(cfg, out);
  WatermarkSet<float> wm = cached_watermarks(cfg, out, ds, base);
  ImageBatch<float> exported =
      export_views(ds.data, apply_watermarks(ds.data, ds.ids, wm), wm.config().eta);
  return SharedArtifacts{std::move(ds), std::move(base), std::move(wm), std::move(exported)};
}

// One method's offender runs plus experts, built or reloaded from cache.
struct MethodEvalArtifacts {
  FtKind kind = FtKind::kFullFt;
  GeneratedSet<float> clean_train, wm_train, clean_eval, wm_eval;
  std::optional<ExpertDetector<float>> expert;
  std::optional<ExpertDetector<float>> expert_aug;
};

inline void build_method_dir(const RunConfig& cfg, const SharedArtifacts& sh, FtKind kind,
                             bool with_aug_expert, const fs::path& dir) {
  if (!fs::exists(dir / "done.json")) {
    OffenderRun clean_run = run_offender(sh.base, sh.ds.data, kind, cfg, cfg.seed, false);
    OffenderRun wm_run = run_offender(sh.base, sh.exported, kind, cfg, cfg.seed, true);
    save_generated_set(dir / "clean_train", clean_run.train_gen);
    save_generated_set(dir / "clean_eval", clean_run.eval_gen);
    save_generated_set(dir / "wm_train", wm_run.train_gen);
    save_generated_set(dir / "wm_eval", wm_run.eval_gen);
    ExpertDetector<float> expert = build_expert(sh.ds, sh.exported, clean_run, wm_run,
                                                AugmentationPolicy::none(), cfg, cfg.seed);
    save_expert(dir / "expert", expert);
    if (with_aug_expert) {
      AugmentationPolicy policy = cfg.augmentation;
      if (!policy.any_enabled()) policy = AugmentationPolicy{};  // default-enabled ranges
      ExpertDetector<float> aug =
          build_expert(sh.ds, sh.exported, clean_run, wm_run, policy, cfg,
                       mix_seed(cfg.seed, 0xa96));
      save_expert(dir / "expert_aug", aug);
    }
    write_text_file(dir / "done.json", json{{"method", ft_kind_name(kind)}}.dump(2) + "\n");
  }
}

inline MethodEvalArtifacts load_method_dir(FtKind kind, const fs::path& dir) {
  MethodEvalArtifacts m;
  m.kind = kind;
  m.clean_train = load_generated_set(dir / "clean_train");
  m.clean_eval = load_generated_set(dir / "clean_eval");
  m.wm_train = load_generated_set(dir / "wm_train");
  m.wm_eval = load_generated_set(dir / "wm_eval");
  m.expert = load_expert(dir / "expert");
  if (fs::exists(dir / "expert_aug" / "detector.json")) {
    m.expert_aug = load_expert(dir / "expert_aug");
  }
  return m;
}

inline std::vector<MethodEvalArtifacts> method_artifacts(const RunConfig& cfg,
                                                         const SharedArtifacts& sh,
                                                         const fs::path& out,
                                                         const std::vector<FtKind>& kinds,
                                                         bool with_aug_expert, int jobs) {
  std::vector<NamedTask> tasks;
  for (FtKind kind : kinds) {
    const fs::path dir = out / "methods" / ft_kind_name(kind);
    tasks.push_back({std::string("method_") + ft_kind_name(kind),
                     [&cfg, &sh, kind, with_aug_expert, dir]() {
                       build_method_dir(cfg, sh, kind, with_aug_expert, dir);
                     }});
  }
  run_tasks(tasks, jobs);
  std::vector<MethodEvalArtifacts> arts;
  for (FtKind kind : kinds) {
    arts.push_back(load_method_dir(kind, out / "methods" / ft_kind_name(kind)));
  }
  return arts;
}

// Replicated sweep with optional process-level parallelism: each replicate
// writes a JSON chunk; chunks merge into one result in replicate order.
template <typename ReplicateFn>
inline SweepResult parallel_sweep(const std::string& axis_name, const RunConfig& cfg,
                                  const fs::path& chunk_dir, int jobs, ReplicateFn replicate_fn) {
  fs::create_directories(chunk_dir);
  std::vector<NamedTask> tasks;
  for (int r = 0; r < cfg.replicates; ++r) {
    const fs::path chunk = chunk_dir / ("replicate_" + std::to_string(r) + ".json");
    tasks.push_back({axis_name + "_replicate_" + std::to_string(r), [=]() {
                       if (fs::exists(chunk)) return;
                       SweepResult part;
                       part.axis_name = axis_name;
                       part.observations = replicate_fn(r);
                       write_text_file(chunk, sweep_json(part).dump(2) + "\n");
                     }});
  }
  run_tasks(tasks, jobs);
  SweepResult result;
  result.axis_name = axis_name;
  for (int r = 0; r < cfg.replicates; ++r) {
    const SweepResult part = sweep_from_json(
        read_json_file(chunk_dir / ("replicate_" + std::to_string(r) + ".json")));
    result.observations.insert(result.observations.end(), part.observations.begin(),
                               part.observations.end());
  }
  return result;
}

inline void write_sweep_outputs(const fs::path& out, const std::string& stem,
                                const SweepResult& result, const std::string& x_label) {
  write_sweep_csv(out / (stem + ".csv"), result);
  write_text_file(out / (stem + ".json"), sweep_json(result).dump(2) + "\n");

  Series tpr_series;
  tpr_series.label = "mean tpr";
  Series fid_series;
  fid_series.label = "mean distance to final";
  for (const auto& row : result.summary()) {
    tpr_series.x.push_back(row.axis);
    tpr_series.y.push_back(row.tpr_mean);
    if (!std::isnan(row.fid_mean)) {
      fid_series.x.push_back(row.axis);
      fid_series.y.push_back(row.fid_mean);
    }
  }
  ChartSpec spec;
  spec.title = stem + ": detection vs " + x_label;
  spec.x_label = x_label;
  spec.y_label = "tpr";
  spec.y_min = 0.0;
  spec.y_max = 1.05;
  write_line_chart(out / (stem + "_tpr.png"), spec, {tpr_series});
  if (fid_series.x.size() >= 2) {
    ChartSpec fid_spec;
    fid_spec.title = stem + ": generation drift vs " + x_label;
    fid_spec.x_label = x_label;
    fid_spec.y_label = "distance";
    write_line_chart(out / (stem + "_fid.png"), fid_spec, {fid_series});
  }
}

}  // namespace cmddetail

inline void cmd_experiment(const RunConfig& cfg, const std::string& which, const fs::path& out,
                           int jobs) {
  if (which != "steps" && which != "rate" && which != "robustness" && which != "transfer") {
    throw config_error("unknown experiment '" + which +
                       "' (expected steps, rate, robustness, or transfer)");
  }
  check_output_dir(out, cfg);
  cmddetail::SharedArtifacts sh = cmddetail::shared_artifacts(cfg, out);
  json details;
  details["which"] = which;

  if (which == "steps" || which == "rate") {
    // one FULL_FT expert anchors both single-axis sweeps
    const std::vector<cmddetail::MethodEvalArtifacts> arts =
        cmddetail::method_artifacts(cfg, sh, out, {FtKind::kFullFt}, false, jobs);
    const cmddetail::MethodEvalArtifacts& m = arts.front();
    SweepInputs in;
    in.dataset = &sh.ds;
    in.base = &sh.base;
    in.watermarks = &sh.wm;
    in.expert = &*m.expert;
    in.negatives = &m.clean_eval.images.pixels;

    if (which == "rate") {
      const SweepResult result = cmddetail::parallel_sweep(
          "watermark_rate", cfg, out / "chunks_rate", jobs, [&](int r) {
            return rate_replicate(in, cfg.rates, cfg, cfg.seed, r);
          });
      cmddetail::write_sweep_outputs(out, "rate", result, "watermark rate");
      details["spearman_rate_tpr"] = spearman(result.axis_values(), result.mean_tpr_by_axis());
    } else {
      const FidExtractor extractor(
          {sh.ds.data.pixels.dim(1), sh.ds.data.pixels.dim(2), sh.ds.data.pixels.dim(3)});
      const SweepResult result = cmddetail::parallel_sweep(
          "step_fraction", cfg, out / "chunks_steps", jobs, [&](int r) {
            return step_replicate(in, cfg.step_fractions, cfg, cfg.seed, r, extractor);
          });
      cmddetail::write_sweep_outputs(out, "steps", result, "fraction of fine-tune steps");
    }
  } else if (which == "robustness") {
    const std::vector<cmddetail::MethodEvalArtifacts> arts =
        cmddetail::method_artifacts(cfg, sh, out, cfg.methods, true, jobs);
    std::vector<ExpertDetector<float>> plain, aug;
    std::vector<MethodEvalSet<float>> sets;
    for (const auto& m : arts) {
      plain.push_back(*m.expert);
      aug.push_back(*m.expert_aug);
      sets.push_back(MethodEvalSet<float>{m.kind, m.wm_eval.images.pixels,
                                          m.clean_eval.images.pixels});
    }
    const RobustnessTable table = robustness_table(plain, aug, sets, default_eval_corruptions(),
                                                   mix_seed(cfg.seed, 0x20b));
    write_robustness_csv(out / "robustness.csv", table);
    Series ps, as;
    ps.label = "plain expert";
    as.label = "augmented expert";
    for (size_t k = 0; k < table.corruptions.size(); ++k) {
      double pm = 0.0, am = 0.0;
      for (size_t i = 0; i < table.methods.size(); ++i) {
        pm += table.plain.at(static_cast<int>(i), static_cast<int>(k));
        am += table.augmented.at(static_cast<int>(i), static_cast<int>(k));
      }
      ps.x.push_back(static_cast<double>(k));
      ps.y.push_back(pm / table.methods.size());
      as.x.push_back(static_cast<double>(k));
      as.y.push_back(am / table.methods.size());
    }
    ChartSpec spec;
    spec.title = "accuracy under corruption (0 jpeg, 1 noise, 2 blur, 3 crop)";
    spec.x_label = "corruption";
    spec.y_label = "balanced accuracy";
    spec.y_min = 0.0;
    spec.y_max = 1.05;
    write_line_chart(out / "robustness.png", spec, {ps, as});
    details["mean_gain"] = table.mean_gain();
    std::printf("mean augmented-over-plain gain across corruptions: %+.3f\n", table.mean_gain());
  } else {  // transfer
    require(cfg.methods.size() >= 2, "transfer experiment needs at least two methods");
    const std::vector<cmddetail::MethodEvalArtifacts> arts =
        cmddetail::method_artifacts(cfg, sh, out, cfg.methods, false, jobs);
    std::vector<ExpertDetector<float>> experts;
    std::vector<MethodEvalSet<float>> sets;
    for (const auto& m : arts) {
      experts.push_back(*m.expert);
      sets.push_back(MethodEvalSet<float>{m.kind, m.wm_eval.images.pixels,
                                          m.clean_eval.images.pixels});
    }
    const TransferMatrix table = transfer_matrix(experts, sets);
    write_transfer_csv(out / "transfer.csv", table);
    std::vector<Series> series;
    for (size_t j = 0; j < table.methods.size(); ++j) {
      Series s;
      s.label = std::string("expert ") + ft_kind_name(table.methods[j]);
      for (size_t i = 0; i < table.methods.size(); ++i) {
        s.x.push_back(static_cast<double>(i));
        s.y.push_back(table.accuracy.at(static_cast<int>(i), static_cast<int>(j)));
      }
      series.push_back(std::move(s));
    }
    ChartSpec spec;
    spec.title = "cross-method accuracy by evaluation method index";
    spec.x_label = "evaluation method";
    spec.y_label = "balanced accuracy";
    spec.y_min = 0.0;
    spec.y_max = 1.05;
    write_line_chart(out / "transfer.png", spec, series);
    details["diagonal_mean"] = table.diagonal_mean();
    details["offdiagonal_mean"] = table.offdiagonal_mean();
    std::printf("transfer: diagonal mean %.3f, off-diagonal mean %.3f\n", table.diagonal_mean(),
                table.offdiagonal_mean());
  }

  write_stage_manifest(out, "experiment", cfg, details);
  std::printf("experiment outputs written to %s\n", out.string().c_str());
}

}  // namespace tunemark
