#pragma once

#include <algorithm>
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
#include "tunemark/nn.hpp"
#include "tunemark/rng.hpp"

namespace tunemark {

// The four fine-tuning footprints an offender might use. Each kind is
// defined by exactly which parameters it may touch:
//   kFullFt            — the whole denoiser
//   kDreamboothLike    — denoiser + the full condition-embedding table
//   kTextualInversion  — one freshly added embedding row, nothing else
//   kLoraLike          — low-rank adapters only, base model frozen
enum class FtKind { kFullFt, kDreamboothLike, kTextualInversionLike, kLoraLike };

inline const char* ft_kind_name(FtKind k) {
  switch (k) {
    case FtKind::kFullFt: return "full_ft";
    case FtKind::kDreamboothLike: return "dreambooth_like";
    case FtKind::kTextualInversionLike: return "textual_inversion_like";
    case FtKind::kLoraLike: return "lora_like";
  }
  throw std::invalid_argument("unknown fine-tune kind");
}

inline FtKind ft_kind_from_name(const std::string& name) {
  for (FtKind k : {FtKind::kFullFt, FtKind::kDreamboothLike, FtKind::kTextualInversionLike,
                   FtKind::kLoraLike}) {
    if (name == ft_kind_name(k)) return k;
  }
  throw std::invalid_argument("unknown fine-tune kind: " + name);
}

inline const std::vector<FtKind>& all_ft_kinds() {
  static const std::vector<FtKind> kinds = {FtKind::kFullFt, FtKind::kDreamboothLike,
                                            FtKind::kTextualInversionLike, FtKind::kLoraLike};
  return kinds;
}

struct FineTuneMethod {
  FtKind kind = FtKind::kFullFt;
  double lr = 1e-3;
  int max_steps = 60;
  int batch_size = 6;
  int lora_rank = 4;
  double lora_scale = 1.0;
  int identifier_token = -1;       // the dataset's reserved placeholder id
  bool prior_preservation = false;  // dreambooth-style class-image mixing

  void validate() const {
    require(lr > 0.0, "learning rate must be positive");
    require(max_steps >= 1, "max_steps must be at least 1");
    require(batch_size >= 1, "batch_size must be at least 1");
    if (kind == FtKind::kLoraLike) require(lora_rank >= 1, "adapter rank must be >= 1");
    if (kind == FtKind::kTextualInversionLike) {
      require(identifier_token >= 0,
              "textual-inversion-style tuning needs the dataset's placeholder token id");
    }
  }

  // Step counts follow a 300 : 800 : 1500 : 3000 ratio across the four
  // kinds, multiplied by `scale`; learning rates are tuned for this model
  // size, keeping the ordering (embedding-row-only trains hottest).
  static FineTuneMethod defaults(FtKind kind, double scale = 0.2) {
    FineTuneMethod m;
    m.kind = kind;
    switch (kind) {
      case FtKind::kFullFt:
        m.lr = 1e-3;
        m.max_steps = scaled_steps(300, scale);
        m.batch_size = 6;
        break;
      case FtKind::kDreamboothLike:
        m.lr = 7e-4;
        m.max_steps = scaled_steps(800, scale);
        m.batch_size = 4;
        break;
      case FtKind::kTextualInversionLike:
        m.lr = 3e-2;
        m.max_steps = scaled_steps(1500, scale);
        m.batch_size = 4;
        break;
      case FtKind::kLoraLike:
        m.lr = 2e-3;
        m.max_steps = scaled_steps(3000, scale);
        m.batch_size = 6;
        break;
    }
    return m;
  }

 private:
  static int scaled_steps(int base, double scale) {
    return std::max(1, static_cast<int>(std::lround(base * scale)));
  }
};

template <typename T>
struct FineTuneResult {
  DiffusionModel<T> model;
  FineTuneMethod method;
  int steps_run = 0;
  std::vector<double> loss_trace;  // one entry per step
  int new_token_id = -1;           // set only by the new-token method
};

namespace detail {

inline Prompt strip_token(const Prompt& p, int token) {
  Prompt out;
  for (int id : p.tokens) {
    if (id != token) out.tokens.push_back(id);
  }
  if (out.tokens.empty()) out.tokens.push_back(0);
  return out;
}

inline Prompt replace_token(const Prompt& p, int from, int to) {
  Prompt out = p;
  for (int& id : out.tokens) {
    if (id == from) id = to;
  }
  return out;
}

}  // namespace detail

template <typename T>
inline FineTuneResult<T> finetune(const DiffusionModel<T>& base, const ImageBatch<T>& data,
                                  const FineTuneMethod& method, uint64_t seed) {
  method.validate();
  data.validate();
  const int n = data.count();
  require(n > 0, "fine-tune data must be nonempty");

  FineTuneResult<T> res{base, method, 0, {}, -1};
  DiffusionModel<T>& model = res.model;

  std::vector<Prompt> prompts = data.prompts;
  if (method.kind == FtKind::kTextualInversionLike) {
    require(method.identifier_token >= 0,
            "textual-inversion-style tuning needs the dataset's placeholder token id");
    res.new_token_id = model.add_token(mix_seed(seed, 0x4e77));
    for (auto& p : prompts) {
      p = detail::replace_token(p, method.identifier_token, res.new_token_id);
    }
  }
  if (method.kind == FtKind::kLoraLike) {
    auto* unet = dynamic_cast<CondUNet<T>*>(&model.denoiser());
    require(unet != nullptr, "adapters require the production denoiser architecture");
    unet->attach_lora(method.lora_rank, method.lora_scale, mix_seed(seed, 0x10ad));
  }

  // Trainable parameters and the gradient paths they need.
  std::vector<Param<T>*> trainable;
  GradFlags flags;
  int row_lo = -1, row_hi = -1;
  switch (method.kind) {
    case FtKind::kFullFt:
      trainable = model.denoiser().params();
      flags.denoiser = true;
      break;
    case FtKind::kDreamboothLike:
      trainable = model.denoiser().params();
      trainable.push_back(&model.cond_embed());
      flags.denoiser = true;
      flags.cond_embed = true;
      break;
    case FtKind::kTextualInversionLike:
      trainable = {&model.cond_embed()};
      flags.cond_embed = true;
      row_lo = res.new_token_id;
      row_hi = res.new_token_id + 1;
      break;
    case FtKind::kLoraLike:
      trainable = dynamic_cast<CondUNet<T>*>(&model.denoiser())->lora_params();
      flags.denoiser = true;
      break;
  }

  // Optional class-image mixing: sample prior images from the frozen base
  // with the placeholder stripped, then interleave 1:1 with the data.
  ImageBatch<T> prior;
  if (method.kind == FtKind::kDreamboothLike && method.prior_preservation) {
    DiffusionModel<T> frozen = base;
    std::vector<Prompt> class_prompts;
    const int n_prior = std::min(n, 16);
    for (int i = 0; i < n_prior; ++i) {
      class_prompts.push_back(detail::strip_token(prompts[i % prompts.size()],
                                                  method.identifier_token));
    }
    prior = sample(frozen, class_prompts, std::min(20, frozen.schedule().timesteps),
                   mix_seed(seed, 0x9b0a));
  }

  std::vector<AdamState<T>> opt(trainable.size());
  AdamConfig adam;
  adam.lr = method.lr;

  Rng batch_rng(mix_seed(seed, 0xba7c4e5));
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;

  const auto& px = data.pixels;
  const long per = px.size() / n;
  const int bs = std::min(method.batch_size, n);

  for (int step = 0; step < method.max_steps; ++step) {
    // without-replacement batch: re-shuffle whenever the deck runs dry
    const int pos = (step * bs) % n;
    if (pos == 0) batch_rng.shuffle(order);

    const bool mix_prior = prior.count() > 0;
    const int take = mix_prior ? std::max(1, bs / 2) : bs;
    ImageBatch<T> batch;
    batch.pixels = Tensor<T>({take + (mix_prior ? take : 0), px.dim(1), px.dim(2), px.dim(3)});
    for (int k = 0; k < take; ++k) {
      const int idx = order[(pos + k) % n];
      std::copy(px.data() + idx * per, px.data() + (idx + 1) * per,
                batch.pixels.data() + static_cast<long>(k) * per);
      batch.prompts.push_back(prompts[idx]);
    }
    if (mix_prior) {
      for (int k = 0; k < take; ++k) {
        const int idx = static_cast<int>(batch_rng.randint(prior.count()));
        std::copy(prior.pixels.data() + idx * per, prior.pixels.data() + (idx + 1) * per,
                  batch.pixels.data() + static_cast<long>(take + k) * per);
        batch.prompts.push_back(prior.prompts[idx]);
      }
    }

    const auto draw = draw_realization<T>(model.schedule().timesteps, batch.pixels.shape(),
                                          mix_seed(seed, 0xd7a3, static_cast<uint64_t>(step)));
    const auto grads = grad_ldm_multi(model, batch, draw, flags);
    if (!std::isfinite(static_cast<double>(grads.loss))) {
      throw numeric_error("non-finite loss during fine-tuning", "denoiser");
    }
    for (size_t i = 0; i < trainable.size(); ++i) {
      adam_step(*trainable[i], opt[i], adam, row_lo, row_hi);
    }
    res.loss_trace.push_back(static_cast<double>(grads.loss));
    res.steps_run += 1;
  }
  return res;
}

// ---------------------------------------------------------------------------
// Evaluation-set generation from a fine-tuned model
// ---------------------------------------------------------------------------

template <typename T>
struct GeneratedSet {
  ImageBatch<T> images;
  FtKind method = FtKind::kFullFt;
  bool watermark_trained = false;

  std::string tag() const {
    return std::string(ft_kind_name(method)) + (watermark_trained ? ":wm" : ":clean");
  }
};

template <typename T>
inline GeneratedSet<T> generate_eval_set(FineTuneResult<T>& result,
                                         const std::vector<Prompt>& prompts,
                                         int n_per_prompt, int sample_steps, uint64_t seed,
                                         bool watermark_trained) {
  require(!prompts.empty(), "prompt list must be nonempty");
  require(n_per_prompt >= 0, "n_per_prompt must be non-negative");
  std::vector<Prompt> expanded;
  for (const auto& p : prompts) {
    Prompt q = p;
    if (result.new_token_id >= 0) {
      q = detail::replace_token(q, result.method.identifier_token, result.new_token_id);
    }
    for (int i = 0; i < n_per_prompt; ++i) expanded.push_back(q);
  }
  GeneratedSet<T> out;
  out.method = result.method.kind;
  out.watermark_trained = watermark_trained;
  out.images = sample(result.model, expanded, sample_steps, mix_seed(seed, 0x9e4));
  return out;
}

// ---------------------------------------------------------------------------
// Persistence: checkpoint directory + finetune.json sidecar
// ---------------------------------------------------------------------------

inline json finetune_method_json(const FineTuneMethod& m) {
  json j{{"kind", ft_kind_name(m.kind)},
         {"lr", m.lr},
         {"max_steps", m.max_steps},
         {"batch_size", m.batch_size},
         {"identifier_token", m.identifier_token},
         {"prior_preservation", m.prior_preservation}};
  if (m.kind == FtKind::kLoraLike) {
    j["lora_rank"] = m.lora_rank;
    j["lora_scale"] = m.lora_scale;
  }
  return j;
}

inline void save_finetune_result(const std::filesystem::path& dir,
                                 FineTuneResult<float>& result, uint64_t seed,
                                 const std::string& dataset_checksum, bool watermarked) {
  std::filesystem::create_directories(dir);
  save_model(dir / "checkpoint", result.model);
  json sidecar;
  sidecar["kind"] = ft_kind_name(result.method.kind);
  sidecar["method"] = finetune_method_json(result.method);
  sidecar["seed"] = seed;
  sidecar["dataset_sha256"] = dataset_checksum;
  sidecar["watermarked"] = watermarked;
  sidecar["steps_run"] = result.steps_run;
  sidecar["new_token_id"] = result.new_token_id;
  sidecar["loss_trace"] = result.loss_trace;
  write_text_file(dir / "finetune.json", sidecar.dump(2) + "\n");
}

inline void save_generated_set(const std::filesystem::path& dir, const GeneratedSet<float>& set) {
  std::filesystem::create_directories(dir);
  const auto bytes = encode_blob(set.images.pixels);
  write_text_file(dir / "images.bin", std::string(bytes.begin(), bytes.end()));
  json manifest{{"format_version", kCheckpointFormatVersion},
                {"kind", "generated_set"},
                {"method", ft_kind_name(set.method)},
                {"watermark_trained", set.watermark_trained},
                {"count", set.images.count()},
                {"file", "images.bin"},
                {"sha256", sha256_hex(bytes.data(), bytes.size())}};
  write_text_file(dir / "gen.json", manifest.dump(2) + "\n");
}

inline GeneratedSet<float> load_generated_set(const std::filesystem::path& dir) {
  const json manifest = read_json_file(dir / "gen.json");
  try {
    if (manifest.at("kind").get<std::string>() != "generated_set") {
      throw data_error("not a generated-set directory: " + dir.string());
    }
    const std::string text = read_text_file(dir / manifest.at("file").get<std::string>());
    const std::vector<unsigned char> bytes(text.begin(), text.end());
    if (sha256_hex(bytes.data(), bytes.size()) != manifest.at("sha256").get<std::string>()) {
      throw data_error("generated-set checksum mismatch: " + dir.string());
    }
    GeneratedSet<float> set;
    set.method = ft_kind_from_name(manifest.at("method").get<std::string>());
    set.watermark_trained = manifest.at("watermark_trained").get<bool>();
    set.images.pixels = decode_blob(bytes.data(), bytes.size());
    if (set.images.pixels.rank() != 4 ||
        set.images.pixels.dim(0) != manifest.at("count").get<int>()) {
      throw data_error("generated-set blob shape disagrees with its manifest");
    }
    set.images.prompts.assign(static_cast<size_t>(set.images.count()), Prompt{{0}});
    return set;
  } catch (const json::exception& e) {
    throw data_error(std::string("bad generated-set manifest: ") + e.what());
  }
}

}  // namespace tunemark
