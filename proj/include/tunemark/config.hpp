#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <string>
#include <vector>

#include "tunemark/checkpoint.hpp"
#include "tunemark/common.hpp"
#include "tunemark/corruption.hpp"
#include "tunemark/detector.hpp"
#include "tunemark/finetune.hpp"
#include "tunemark/hash.hpp"
#include "tunemark/watermark.hpp"

namespace tunemark {

namespace detail {

inline void check_keys(const json& obj, std::initializer_list<const char*> allowed,
                       const std::string& context) {
  if (!obj.is_object()) throw config_error("expected an object for " + context);
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool known = false;
    for (const char* k : allowed) known = known || it.key() == k;
    if (!known) throw config_error("unknown key '" + it.key() + "' in " + context);
  }
}

// Budgets and rates may be written as numbers or as fraction strings
// ("4/255"), which keeps pixel budgets exact in configs.
inline double parse_fraction(const json& v, const std::string& context) {
  if (v.is_number()) return v.get<double>();
  if (v.is_string()) {
    const std::string s = v.get<std::string>();
    const size_t slash = s.find('/');
    try {
      if (slash == std::string::npos) return std::stod(s);
      const double num = std::stod(s.substr(0, slash));
      const double den = std::stod(s.substr(slash + 1));
      require(den != 0.0, "fraction denominator is zero");
      return num / den;
    } catch (const std::invalid_argument&) {
      throw config_error("cannot parse number '" + s + "' for " + context);
    } catch (const std::out_of_range&) {
      throw config_error("number out of range '" + s + "' for " + context);
    }
  }
  throw config_error("expected a number or fraction string for " + context);
}

template <typename T>
inline void maybe(const json& obj, const char* key, T& out) {
  if (obj.contains(key)) out = obj.at(key).get<T>();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Full run configuration. Every stage reads from this one validated struct;
// unknown keys anywhere in the file are rejected up front.
// ---------------------------------------------------------------------------

struct RunConfig {
  uint64_t seed = 1;
  double scale = 1.0;  // global multiplier on step counts and set sizes
  std::string output_root = "runs/out";

  // dataset
  std::string dataset_path;  // empty: synthesize a style dataset
  int dataset_images = 64;
  int style_index = 0;

  // base model + pretraining corpus (public, disjoint styles)
  int model_width = 28;
  int timesteps = 200;
  int pretrain_steps = 600;
  double pretrain_lr = 2e-3;
  int pretrain_batch = 8;
  int pretrain_styles = 3;
  int pretrain_images_per_style = 32;

  WatermarkConfig watermark;

  std::vector<FtKind> methods = all_ft_kinds();
  double finetune_scale = 0.2;
  bool prior_preservation = false;

  DetectorHyper detector;
  // corruption policy for robustness-trained experts; the core experts train
  // without augmentation
  AugmentationPolicy augmentation = AugmentationPolicy::none();

  // generation sizes (per method and model)
  int train_generations = 48;
  int eval_generations = 32;
  int sample_steps = 15;

  // sweep grids
  double early_fraction = 0.1;
  std::vector<double> rates{1.0, 0.8, 0.5, 0.2};
  std::vector<double> step_fractions{0.1, 0.25, 0.5, 1.0};
  int replicates = 3;

  // Step counts and set sizes scale together; everything stays >= 1.
  int scaled(int base_count) const {
    return std::max(1, static_cast<int>(std::lround(base_count * scale)));
  }

  void validate() const {
    require(scale > 0.0, "scale must be positive");
    require(dataset_images >= 1, "dataset_images must be at least 1");
    require(model_width >= 4, "model width must be at least 4");
    require(timesteps >= 2, "timesteps must be at least 2");
    require(pretrain_steps >= 0, "pretrain_steps must be non-negative");
    require(pretrain_lr > 0.0, "pretrain_lr must be positive");
    require(pretrain_batch >= 1, "pretrain_batch must be at least 1");
    require(pretrain_styles >= 1 && pretrain_images_per_style >= 1,
            "pretraining corpus must be nonempty");
    watermark.validate();
    require(!methods.empty(), "at least one fine-tuning method must be configured");
    for (size_t i = 0; i < methods.size(); ++i) {
      for (size_t j = i + 1; j < methods.size(); ++j) {
        require(methods[i] != methods[j], "duplicate fine-tuning method in config");
      }
    }
    require(finetune_scale > 0.0, "finetune_scale must be positive");
    detector.validate();
    augmentation.validate();
    require(train_generations >= 1 && eval_generations >= 1,
            "generation counts must be at least 1");
    require(sample_steps >= 1 && sample_steps <= timesteps,
            "sample_steps must lie in [1, timesteps]");
    require(early_fraction > 0.0 && early_fraction <= 1.0, "early_fraction must be in (0,1]");
    require(!rates.empty(), "rate grid must be nonempty");
    for (double r : rates) {
      if (r <= 0.0) throw std::invalid_argument("watermark rate 0 is undefined (no positive class)");
      require(r <= 1.0, "watermark rates must lie in (0,1]");
    }
    require(!step_fractions.empty(), "step-fraction grid must be nonempty");
    for (double f : step_fractions) {
      require(f > 0.0 && f <= 1.0, "step fractions must lie in (0,1]");
    }
    require(replicates >= 1, "replicates must be at least 1");
  }

  json to_json() const {
    json methods_json = json::array();
    for (FtKind k : methods) methods_json.push_back(ft_kind_name(k));
    return json{
        {"seed", seed},
        {"scale", scale},
        {"output_root", output_root},
        {"dataset",
         {{"path", dataset_path}, {"images", dataset_images}, {"style_index", style_index}}},
        {"model",
         {{"width", model_width},
          {"timesteps", timesteps},
          {"pretrain_steps", pretrain_steps},
          {"pretrain_lr", pretrain_lr},
          {"pretrain_batch", pretrain_batch},
          {"pretrain_styles", pretrain_styles},
          {"pretrain_images_per_style", pretrain_images_per_style}}},
        // the watermark seed is derived from the run seed, not configured
        {"watermark",
         {{"eta", watermark.eta},
          {"pgd_step", watermark.pgd_step},
          {"inner_steps", watermark.inner_steps},
          {"epochs", watermark.epochs},
          {"batch_size", watermark.batch_size},
          {"model_lr", watermark.model_lr}}},
        {"methods", methods_json},
        {"finetune",
         {{"scale", finetune_scale}, {"prior_preservation", prior_preservation}}},
        {"detector",
         {{"lr", detector.lr},
          {"weight_decay", detector.weight_decay},
          {"steps", detector.steps},
          {"batch", detector.batch_size},
          {"holdout", detector.holdout_fraction},
          {"widths", detector.widths}}},
        {"augmentation", augmentation_policy_json(augmentation)},
        {"eval",
         {{"train_generations", train_generations},
          {"eval_generations", eval_generations},
          {"sample_steps", sample_steps}}},
        {"sweeps",
         {{"early_fraction", early_fraction},
          {"rates", rates},
          {"step_fractions", step_fractions},
          {"replicates", replicates}}}};
  }

  std::string config_hash() const { return sha256_hex(to_json().dump()); }

  static RunConfig from_json(const json& j) {
    RunConfig cfg;
    try {
      detail::check_keys(j,
                         {"seed", "scale", "output_root", "dataset", "model", "watermark",
                          "methods", "finetune", "detector", "augmentation", "eval", "sweeps"},
                         "run config");
      detail::maybe(j, "seed", cfg.seed);
      detail::maybe(j, "scale", cfg.scale);
      detail::maybe(j, "output_root", cfg.output_root);
      if (j.contains("dataset")) {
        const json& d = j.at("dataset");
        detail::check_keys(d, {"path", "images", "style_index"}, "dataset");
        detail::maybe(d, "path", cfg.dataset_path);
        detail::maybe(d, "images", cfg.dataset_images);
        detail::maybe(d, "style_index", cfg.style_index);
      }
      if (j.contains("model")) {
        const json& m = j.at("model");
        detail::check_keys(m,
                           {"width", "timesteps", "pretrain_steps", "pretrain_lr",
                            "pretrain_batch", "pretrain_styles", "pretrain_images_per_style"},
                           "model");
        detail::maybe(m, "width", cfg.model_width);
        detail::maybe(m, "timesteps", cfg.timesteps);
        detail::maybe(m, "pretrain_steps", cfg.pretrain_steps);
        detail::maybe(m, "pretrain_lr", cfg.pretrain_lr);
        detail::maybe(m, "pretrain_batch", cfg.pretrain_batch);
        detail::maybe(m, "pretrain_styles", cfg.pretrain_styles);
        detail::maybe(m, "pretrain_images_per_style", cfg.pretrain_images_per_style);
      }
      if (j.contains("watermark")) {
        const json& w = j.at("watermark");
        detail::check_keys(
            w, {"eta", "pgd_step", "inner_steps", "epochs", "batch_size", "model_lr"},
            "watermark");
        if (w.contains("eta")) cfg.watermark.eta = detail::parse_fraction(w.at("eta"), "watermark.eta");
        if (w.contains("pgd_step")) {
          cfg.watermark.pgd_step = detail::parse_fraction(w.at("pgd_step"), "watermark.pgd_step");
        }
        detail::maybe(w, "inner_steps", cfg.watermark.inner_steps);
        detail::maybe(w, "epochs", cfg.watermark.epochs);
        detail::maybe(w, "batch_size", cfg.watermark.batch_size);
        detail::maybe(w, "model_lr", cfg.watermark.model_lr);
      }
      if (j.contains("methods")) {
        cfg.methods.clear();
        for (const json& m : j.at("methods")) {
          cfg.methods.push_back(ft_kind_from_name(m.get<std::string>()));
        }
      }
      if (j.contains("finetune")) {
        const json& f = j.at("finetune");
        detail::check_keys(f, {"scale", "prior_preservation"}, "finetune");
        detail::maybe(f, "scale", cfg.finetune_scale);
        detail::maybe(f, "prior_preservation", cfg.prior_preservation);
      }
      if (j.contains("detector")) {
        const json& d = j.at("detector");
        detail::check_keys(d, {"lr", "weight_decay", "steps", "batch", "holdout", "widths"},
                           "detector");
        detail::maybe(d, "lr", cfg.detector.lr);
        detail::maybe(d, "weight_decay", cfg.detector.weight_decay);
        detail::maybe(d, "steps", cfg.detector.steps);
        detail::maybe(d, "batch", cfg.detector.batch_size);
        detail::maybe(d, "holdout", cfg.detector.holdout_fraction);
        detail::maybe(d, "widths", cfg.detector.widths);
      }
      if (j.contains("augmentation")) {
        const json& a = j.at("augmentation");
        detail::check_keys(a,
                           {"jpeg", "gauss_noise", "gauss_blur", "random_crop", "jpeg_quality",
                            "noise_sigma", "blur_sigma", "crop_ratio", "apply_prob"},
                           "augmentation");
        detail::maybe(a, "jpeg", cfg.augmentation.jpeg);
        detail::maybe(a, "gauss_noise", cfg.augmentation.gauss_noise);
        detail::maybe(a, "gauss_blur", cfg.augmentation.gauss_blur);
        detail::maybe(a, "random_crop", cfg.augmentation.random_crop);
        detail::maybe(a, "jpeg_quality", cfg.augmentation.jpeg_quality);
        detail::maybe(a, "noise_sigma", cfg.augmentation.noise_sigma);
        detail::maybe(a, "blur_sigma", cfg.augmentation.blur_sigma);
        detail::maybe(a, "crop_ratio", cfg.augmentation.crop_ratio);
        detail::maybe(a, "apply_prob", cfg.augmentation.apply_prob);
      }
      if (j.contains("eval")) {
        const json& e = j.at("eval");
        detail::check_keys(e, {"train_generations", "eval_generations", "sample_steps"}, "eval");
        detail::maybe(e, "train_generations", cfg.train_generations);
        detail::maybe(e, "eval_generations", cfg.eval_generations);
        detail::maybe(e, "sample_steps", cfg.sample_steps);
      }
      if (j.contains("sweeps")) {
        const json& s = j.at("sweeps");
        detail::check_keys(s, {"early_fraction", "rates", "step_fractions", "replicates"},
                           "sweeps");
        detail::maybe(s, "early_fraction", cfg.early_fraction);
        if (s.contains("rates")) {
          cfg.rates.clear();
          for (const json& r : s.at("rates")) {
            cfg.rates.push_back(detail::parse_fraction(r, "sweeps.rates"));
          }
        }
        if (s.contains("step_fractions")) {
          cfg.step_fractions.clear();
          for (const json& f : s.at("step_fractions")) {
            cfg.step_fractions.push_back(detail::parse_fraction(f, "sweeps.step_fractions"));
          }
        }
        detail::maybe(s, "replicates", cfg.replicates);
      }
    } catch (const json::exception& e) {
      throw config_error(std::string("run config: ") + e.what());
    }
    cfg.validate();
    return cfg;
  }

  static RunConfig from_file(const std::filesystem::path& path) {
    std::string text;
    try {
      text = read_text_file(path);
    } catch (const data_error& e) {
      throw config_error(e.what());
    }
    const json j = json::parse(text, nullptr, false);
    if (j.is_discarded()) throw config_error("malformed JSON in config: " + path.string());
    return from_json(j);
  }
};

}  // namespace tunemark
