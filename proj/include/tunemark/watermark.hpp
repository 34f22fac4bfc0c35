#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "tunemark/blob.hpp"
#include "tunemark/checkpoint.hpp"
#include "tunemark/common.hpp"
#include "tunemark/diffusion.hpp"
#include "tunemark/hash.hpp"
#include "tunemark/image_io.hpp"
#include "tunemark/rng.hpp"
#include "tunemark/tensor.hpp"

namespace tunemark {

struct WatermarkConfig {
  double eta = 4.0 / 255.0;  // L-inf budget in pixel units
  double pgd_step = 0.0;     // 0 means "use eta / 10"
  std::array<int, 3> inner_steps{5, 5, 5};  // clean updates, PGD steps, watermarked updates
  int epochs = 1;
  int batch_size = 4;
  double model_lr = 1e-4;
  uint64_t seed = 0;

  double alpha() const { return pgd_step > 0.0 ? pgd_step : eta / 10.0; }

  void validate() const {
    require(eta > 0.0, "watermark budget must be positive");
    require(eta <= 32.0 / 255.0, "watermark budget above 32/255 is visibly destructive");
    require(pgd_step >= 0.0, "pgd_step must be positive (or 0 for the eta/10 default)");
    require(inner_steps[0] >= 1 && inner_steps[1] >= 1 && inner_steps[2] >= 1,
            "all inner step counts must be at least 1");
    require(epochs >= 0, "epochs must be non-negative");
    require(batch_size >= 1, "batch_size must be at least 1");
    require(model_lr > 0.0, "model_lr must be positive");
  }
};

// Per-image perturbations with a hard L-inf budget, checked on construction.
template <typename T>
class WatermarkSet {
 public:
  WatermarkSet() = default;
  WatermarkSet(std::vector<Tensor<T>> deltas, std::vector<std::string> image_ids,
               WatermarkConfig config)
      : deltas_(std::move(deltas)), ids_(std::move(image_ids)), config_(config) {
    require(deltas_.size() == ids_.size(), "one id per delta required");
    const T budget = static_cast<T>(config_.eta);
    for (const auto& d : deltas_) {
      if (!d.all_finite() || d.max_abs() > budget) {
        throw std::logic_error("watermark budget invariant violated at construction");
      }
    }
  }

  const std::vector<Tensor<T>>& deltas() const { return deltas_; }
  const std::vector<std::string>& ids() const { return ids_; }
  const WatermarkConfig& config() const { return config_; }
  int count() const { return static_cast<int>(deltas_.size()); }

 private:
  std::vector<Tensor<T>> deltas_;
  std::vector<std::string> ids_;
  WatermarkConfig config_;
};

// ---------------------------------------------------------------------------
// PGD primitives
// ---------------------------------------------------------------------------

template <typename T>
inline Tensor<T> project_linf(const Tensor<T>& delta, double eta) {
  require(eta > 0.0, "projection radius must be positive");
  const T lo = -static_cast<T>(eta), hi = static_cast<T>(eta);
  Tensor<T> out = delta;
  for (long i = 0; i < out.size(); ++i) {
    out[i] = std::min(hi, std::max(lo, out[i]));
  }
  return out;
}

// Loss-descent step with the gradient sign (sign(0) = 0), then projection.
template <typename T>
inline Tensor<T> pgd_step(const Tensor<T>& delta, const Tensor<T>& grad, double alpha,
                          double eta) {
  check_same_shape(delta, grad, "pgd_step");
  require(alpha > 0.0, "pgd step size must be positive");
  const T a = static_cast<T>(alpha);
  Tensor<T> out = delta;
  for (long i = 0; i < out.size(); ++i) {
    const T g = grad[i];
    const T s = g > T(0) ? T(1) : (g < T(0) ? T(-1) : T(0));
    out[i] -= a * s;
  }
  return project_linf(out, eta);
}

// ---------------------------------------------------------------------------
// Alternating optimization (watermarks vs. co-trained denoiser)
// ---------------------------------------------------------------------------

enum class WmPhase { kCleanUpdate = 0, kPgd = 1, kWatermarkedUpdate = 2 };

// Seed of the Monte-Carlo draw used at one inner step. Public so traces can
// reproduce the exact realization the optimizer saw.
inline uint64_t wm_phase_seed(uint64_t cfg_seed, int epoch, int batch, WmPhase phase,
                              int step) {
  return mix_seed(cfg_seed, 0x77a7e7, static_cast<uint64_t>(epoch),
                  static_cast<uint64_t>(batch), static_cast<uint64_t>(phase),
                  static_cast<uint64_t>(step));
}

template <typename T>
struct WatermarkOptimizeResult {
  WatermarkSet<T> watermarks;
  DiffusionModel<T> model;  // the co-trained denoiser, for diagnostics
  std::vector<double> loss_trace;  // final watermarked-update loss per batch visit
};

// Double loop over epochs and fixed-order batches. Per batch: (1) copy the
// current model and take `inner_steps[0]` clean-image SGD steps on the copy,
// (2) take `inner_steps[1]` sign-descent steps on the batch deltas through
// the frozen copy, (3) take `inner_steps[2]` SGD steps on the persistent
// model using the watermarked images. Deltas start at zero and stay inside
// the budget ball after every step; x+delta is left unclamped here (clamping
// belongs to application).
template <typename T>
inline WatermarkOptimizeResult<T> optimize_watermarks(const ImageBatch<T>& dataset,
                                                      const std::vector<std::string>& image_ids,
                                                      const DiffusionModel<T>& base_model,
                                                      const WatermarkConfig& cfg) {
  cfg.validate();
  dataset.validate();
  const int n = dataset.count();
  require(n > 0, "dataset must be nonempty");
  require(static_cast<int>(image_ids.size()) == n, "one image id per image required");

  const auto& px = dataset.pixels;
  const long per = px.size() / n;
  std::vector<int> img_shape = {1, px.dim(1), px.dim(2), px.dim(3)};

  Tensor<T> deltas = Tensor<T>::zeros(px.shape());
  WatermarkOptimizeResult<T> result{WatermarkSet<T>{}, base_model, {}};
  DiffusionModel<T>& model = result.model;

  const int batches = (n + cfg.batch_size - 1) / cfg.batch_size;
  const double lr = cfg.model_lr, alpha = cfg.alpha();

  auto slice_batch = [&](const Tensor<T>& src, int b0, int bn) {
    Tensor<T> out({bn, px.dim(1), px.dim(2), px.dim(3)});
    std::copy(src.data() + b0 * per, src.data() + (b0 + static_cast<long>(bn)) * per,
              out.data());
    return out;
  };

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (int batch = 0; batch < batches; ++batch) {
      const int b0 = batch * cfg.batch_size;
      const int bn = std::min(cfg.batch_size, n - b0);
      ImageBatch<T> clean;
      clean.pixels = slice_batch(px, b0, bn);
      clean.prompts.assign(dataset.prompts.begin() + b0, dataset.prompts.begin() + b0 + bn);

      auto guard = [&](const char* phase, auto&& fn) {
        try {
          fn();
        } catch (const numeric_error& e) {
          throw numeric_error(std::string(e.what()) + " (epoch " + std::to_string(epoch) +
                                  ", batch " + std::to_string(batch) + ", " + phase +
                                  " loop)",
                              e.group());
        }
      };

      // (1) warm-up copy on clean images
      DiffusionModel<T> star = model;
      guard("clean-update", [&] {
        for (int s = 0; s < cfg.inner_steps[0]; ++s) {
          const auto draw = draw_realization<T>(
              model.schedule().timesteps, clean.pixels.shape(),
              wm_phase_seed(cfg.seed, epoch, batch, WmPhase::kCleanUpdate, s));
          const T loss = finetune_step_at(star, clean, lr, ParamSelection{true, false}, draw);
          if (!std::isfinite(static_cast<double>(loss))) {
            throw numeric_error("non-finite loss", "denoiser");
          }
        }
      });

      // (2) sign-descent on the batch deltas through the frozen copy
      guard("watermark-descent", [&] {
        for (int s = 0; s < cfg.inner_steps[1]; ++s) {
          ImageBatch<T> marked;
          marked.prompts = clean.prompts;
          marked.pixels = clean.pixels;
          for (long i = 0; i < marked.pixels.size(); ++i) {
            marked.pixels[i] += deltas[b0 * per + i];
          }
          const auto draw = draw_realization<T>(
              model.schedule().timesteps, marked.pixels.shape(),
              wm_phase_seed(cfg.seed, epoch, batch, WmPhase::kPgd, s));
          auto grads = grad_ldm_at(star, marked, draw, GradWrt::kInput);
          if (!std::isfinite(static_cast<double>(grads.loss))) {
            throw numeric_error("non-finite loss", "denoiser");
          }
          Tensor<T> batch_delta = slice_batch(deltas, b0, bn);
          batch_delta = pgd_step(batch_delta, grads.input_grad, alpha, cfg.eta);
          std::copy(batch_delta.data(), batch_delta.data() + batch_delta.size(),
                    deltas.data() + b0 * per);
        }
      });

      // (3) persistent-model update on watermarked images
      guard("watermarked-update", [&] {
        ImageBatch<T> marked;
        marked.prompts = clean.prompts;
        marked.pixels = clean.pixels;
        for (long i = 0; i < marked.pixels.size(); ++i) {
          marked.pixels[i] += deltas[b0 * per + i];
        }
        for (int s = 0; s < cfg.inner_steps[2]; ++s) {
          const auto draw = draw_realization<T>(
              model.schedule().timesteps, marked.pixels.shape(),
              wm_phase_seed(cfg.seed, epoch, batch, WmPhase::kWatermarkedUpdate, s));
          const T loss = finetune_step_at(model, marked, lr, ParamSelection{true, false}, draw);
          if (!std::isfinite(static_cast<double>(loss))) {
            throw numeric_error("non-finite loss", "denoiser");
          }
          if (s == cfg.inner_steps[2] - 1) {
            result.loss_trace.push_back(static_cast<double>(loss));
          }
        }
      });
    }
  }

  std::vector<Tensor<T>> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    Tensor<T> d(img_shape);
    std::copy(deltas.data() + i * per, deltas.data() + (i + 1) * per, d.data());
    out.push_back(project_linf(d, cfg.eta));  // belt and braces; PGD already projects
  }
  result.watermarks = WatermarkSet<T>(std::move(out), image_ids, cfg);
  return result;
}

// i.i.d. uniform deltas in [-eta, eta]: the equal-budget control baseline.
template <typename T>
inline WatermarkSet<T> random_watermarks(const std::vector<int>& image_shape, int count,
                                         double eta, uint64_t seed,
                                         std::vector<std::string> image_ids = {}) {
  require(eta >= 0.0, "budget must be non-negative");
  WatermarkConfig cfg;
  cfg.eta = eta;
  cfg.seed = seed;
  if (image_ids.empty()) {
    for (int i = 0; i < count; ++i) image_ids.push_back("img_" + std::to_string(i));
  }
  require(static_cast<int>(image_ids.size()) == count, "one id per image required");
  Rng rng(mix_seed(seed, 0x7a2d));
  std::vector<Tensor<T>> deltas;
  for (int i = 0; i < count; ++i) {
    Tensor<T> d(image_shape);
    for (long k = 0; k < d.size(); ++k) d[k] = static_cast<T>(rng.uniform(-eta, eta));
    if (eta > 0.0) d = project_linf(d, eta);
    deltas.push_back(std::move(d));
  }
  return WatermarkSet<T>(std::move(deltas), std::move(image_ids), cfg);
}

// ---------------------------------------------------------------------------
// Application: x_hat = clamp(x + delta, 0, 1), with the budget re-enforced
// in floating point after rounding (one nextafter nudge suffices, but the
// loop form keeps the invariant self-evident).
// ---------------------------------------------------------------------------

template <typename T>
inline ImageBatch<T> apply_watermarks(const ImageBatch<T>& dataset,
                                      const std::vector<std::string>& image_ids,
                                      const WatermarkSet<T>& wm) {
  require(image_ids == wm.ids(), "image ids do not align with the watermark set");
  require(dataset.count() == wm.count(), "image count mismatch");
  const double budget = wm.config().eta;
  ImageBatch<T> out;
  out.prompts = dataset.prompts;
  out.pixels = dataset.pixels;
  const long per = out.pixels.size() / std::max(1, dataset.count());
  for (int i = 0; i < dataset.count(); ++i) {
    const Tensor<T>& d = wm.deltas()[i];
    require(d.size() == per, "delta shape does not match image shape");
    T* xp = out.pixels.data() + i * per;
    for (long k = 0; k < per; ++k) {
      const T x = xp[k];
      T v = std::min(T(1), std::max(T(0), x + d[k]));
      while (std::abs(static_cast<double>(v) - static_cast<double>(x)) > budget) {
        v = std::nextafter(v, x);
      }
      xp[k] = v;
    }
  }
  return out;
}

// 8-bit export of a protected image: round-half-even quantization of both
// the original and protected pixels, then an integer-domain clamp so
// |q_hat - q| <= round(eta * 255) holds exactly.
template <typename T>
inline ImageU8 quantize_protected(const Tensor<T>& original, const Tensor<T>& protected_img,
                                  double eta) {
  check_same_shape(original, protected_img, "quantize_protected");
  const int qbudget = static_cast<int>(std::lround(eta * 255.0));
  ImageU8 img = to_u8(protected_img);
  const ImageU8 base = to_u8(original);
  for (size_t i = 0; i < img.rgb.size(); ++i) {
    const int q = base.rgb[i];
    int qh = img.rgb[i];
    qh = std::min(q + qbudget, std::max(q - qbudget, qh));
    qh = std::min(255, std::max(0, qh));
    img.rgb[i] = static_cast<unsigned char>(qh);
  }
  return img;
}

// ---------------------------------------------------------------------------
// Serialization: wm_manifest.json + one delta blob per image.
// ---------------------------------------------------------------------------

inline json watermark_config_json(const WatermarkConfig& cfg) {
  return json{{"eta", cfg.eta},
              {"pgd_step", cfg.pgd_step},
              {"inner_steps", cfg.inner_steps},
              {"epochs", cfg.epochs},
              {"batch_size", cfg.batch_size},
              {"model_lr", cfg.model_lr},
              {"seed", cfg.seed}};
}

inline WatermarkConfig watermark_config_from_json(const json& j) {
  WatermarkConfig cfg;
  try {
    cfg.eta = j.at("eta").get<double>();
    cfg.pgd_step = j.at("pgd_step").get<double>();
    cfg.inner_steps = j.at("inner_steps").get<std::array<int, 3>>();
    cfg.epochs = j.at("epochs").get<int>();
    cfg.batch_size = j.at("batch_size").get<int>();
    cfg.model_lr = j.at("model_lr").get<double>();
    cfg.seed = j.at("seed").get<uint64_t>();
  } catch (const json::exception& e) {
    throw data_error(std::string("bad watermark config: ") + e.what());
  }
  return cfg;
}

inline void save_watermarks(const std::filesystem::path& dir, const WatermarkSet<float>& wm) {
  std::filesystem::create_directories(dir);
  json manifest;
  manifest["format_version"] = kCheckpointFormatVersion;
  manifest["kind"] = "watermark_set";
  manifest["eta"] = wm.config().eta;
  manifest["config"] = watermark_config_json(wm.config());
  json images = json::array();
  for (int i = 0; i < wm.count(); ++i) {
    char file[32];
    std::snprintf(file, sizeof(file), "delta_%05d.bin", i);
    const auto bytes = encode_blob(wm.deltas()[i]);
    write_text_file(dir / file, std::string(bytes.begin(), bytes.end()));
    images.push_back({{"id", wm.ids()[i]},
                      {"file", file},
                      {"sha256", sha256_hex(bytes.data(), bytes.size())}});
  }
  manifest["images"] = images;
  write_text_file(dir / "wm_manifest.json", manifest.dump(2) + "\n");
}

inline WatermarkSet<float> load_watermarks(const std::filesystem::path& dir) {
  const json manifest = read_json_file(dir / "wm_manifest.json");
  try {
    if (manifest.at("kind").get<std::string>() != "watermark_set") {
      throw data_error("not a watermark-set directory: " + dir.string());
    }
    WatermarkConfig cfg = watermark_config_from_json(manifest.at("config"));
    std::vector<Tensor<float>> deltas;
    std::vector<std::string> ids;
    for (const auto& entry : manifest.at("images")) {
      const std::string text = read_text_file(dir / entry.at("file").get<std::string>());
      const std::vector<unsigned char> bytes(text.begin(), text.end());
      if (sha256_hex(bytes.data(), bytes.size()) != entry.at("sha256").get<std::string>()) {
        throw data_error("checksum mismatch for " + entry.at("file").get<std::string>());
      }
      deltas.push_back(decode_blob(bytes.data(), bytes.size()));
      ids.push_back(entry.at("id").get<std::string>());
    }
    return WatermarkSet<float>(std::move(deltas), std::move(ids), cfg);
  } catch (const json::exception& e) {
    throw data_error(std::string("bad watermark manifest: ") + e.what());
  }
}

}  // namespace tunemark
