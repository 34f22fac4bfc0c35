#pragma once

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "tunemark/config.hpp"
#include "tunemark/dataset.hpp"
#include "tunemark/denoiser.hpp"
#include "tunemark/detector.hpp"
#include "tunemark/diffusion.hpp"
#include "tunemark/finetune.hpp"
#include "tunemark/metrics.hpp"
#include "tunemark/watermark.hpp"

namespace tunemark {

// ---------------------------------------------------------------------------
// Base model: a conditional denoiser pretrained on a public multi-style
// corpus that excludes the protected style. Both the protector and the
// simulated offender start from this checkpoint, mirroring the
// public-pretrained-model threat setting.
// ---------------------------------------------------------------------------

inline DiffusionModel<float> make_base_model(const RunConfig& cfg, uint64_t seed) {
  auto net = std::make_unique<CondUNet<float>>(/*cond_dim=*/16, cfg.model_width,
                                               mix_seed(seed, 0x0de7));
  return DiffusionModel<float>(std::move(net), vocab::kSize, NoiseSchedule::linear(cfg.timesteps),
                               {3, 32, 32}, mix_seed(seed, 0xe9b));
}

inline ImageBatch<float> make_pretrain_corpus(const RunConfig& cfg, uint64_t seed) {
  ImageBatch<float> corpus;
  const int per_style = cfg.pretrain_images_per_style;
  const int total = cfg.pretrain_styles * per_style;
  corpus.pixels = Tensor<float>({total, 3, 32, 32});
  const long per_image = corpus.pixels.size() / total;
  for (int s = 0; s < cfg.pretrain_styles; ++s) {
    // styles are offset so the protected style is never in the corpus
    const int style = cfg.style_index + 1 + s;
    StyleDataset part = make_style_dataset(per_style, {3, 32, 32}, style, mix_seed(seed, 0xc0a9));
    for (int i = 0; i < per_style; ++i) {
      const int dst = s * per_style + i;
      std::copy(part.data.pixels.data() + static_cast<long>(i) * per_image,
                part.data.pixels.data() + static_cast<long>(i + 1) * per_image,
                corpus.pixels.data() + static_cast<long>(dst) * per_image);
      // public captions name a style word, never the reserved identifier
      corpus.prompts.push_back(
          Prompt{{vocab::kA, vocab::kPainting, vocab::kOf,
                  vocab::object_token(i % vocab::kObjectCount), vocab::kIn,
                  vocab::style_token(style % vocab::kStyleCount), vocab::kStyleWord}});
    }
  }
  return corpus;
}

// Adam pretraining over all model parameters (denoiser + condition table).
inline DiffusionModel<float> pretrain_base(const RunConfig& cfg, uint64_t seed) {
  DiffusionModel<float> model = make_base_model(cfg, seed);
  const ImageBatch<float> corpus = make_pretrain_corpus(cfg, seed);
  const int steps = cfg.scaled(cfg.pretrain_steps);
  const int n = corpus.count();
  const int bs = std::min(cfg.pretrain_batch, n);

  std::vector<Param<float>*> params = all_params(model);
  std::vector<AdamState<float>> opt(params.size());
  AdamConfig adam;
  adam.lr = cfg.pretrain_lr;

  Rng batch_rng(mix_seed(seed, 0xba5e));
  std::vector<int> order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  long cursor = 0;

  ImageBatch<float> batch;
  batch.pixels = Tensor<float>({bs, 3, 32, 32});
  const long per_image = batch.pixels.size() / bs;
  GradFlags flags;
  flags.denoiser = true;
  flags.cond_embed = true;
  for (int step = 0; step < steps; ++step) {
    batch.prompts.clear();
    for (int i = 0; i < bs; ++i) {
      if (cursor % n == 0) batch_rng.shuffle(order);
      const int src = order[static_cast<size_t>(cursor % n)];
      ++cursor;
      std::copy(corpus.pixels.data() + static_cast<long>(src) * per_image,
                corpus.pixels.data() + static_cast<long>(src + 1) * per_image,
                batch.pixels.data() + static_cast<long>(i) * per_image);
      batch.prompts.push_back(corpus.prompts[static_cast<size_t>(src)]);
    }
    const auto draw = draw_realization<float>(model.schedule().timesteps, batch.pixels.shape(),
                                              mix_seed(seed, 0xba5e57e9, static_cast<uint64_t>(step)));
    const LossGrads<float> lg = grad_ldm_multi(model, batch, draw, flags);
    if (!std::isfinite(lg.loss)) throw numeric_error("non-finite pretraining loss", "pipeline");
    for (size_t p = 0; p < params.size(); ++p) adam_step(*params[p], opt[p], adam);
  }
  model.check_finite();
  return model;
}

// ---------------------------------------------------------------------------
// Protect stage
// ---------------------------------------------------------------------------

struct ProtectArtifacts {
  WatermarkOptimizeResult<float> optimization;
  ImageBatch<float> protected_data;  // float pixels, exactly budget-bounded
  ImageBatch<float> exported;        // 8-bit interchange view of the same images
};

// What a scraper actually obtains: the protected images after 8-bit export
// (budget clamped in the integer domain) read back as floats.
inline ImageBatch<float> export_views(const ImageBatch<float>& originals,
                                      const ImageBatch<float>& protected_data, double eta) {
  require(originals.pixels.shape() == protected_data.pixels.shape(),
          "original and protected sets must align");
  ImageBatch<float> out;
  out.prompts = protected_data.prompts;
  out.pixels = Tensor<float>(protected_data.pixels.shape());
  const int n = protected_data.count();
  const long per = protected_data.pixels.size() / std::max(1, n);
  Tensor<float> orig({protected_data.pixels.dim(1), protected_data.pixels.dim(2),
                      protected_data.pixels.dim(3)});
  Tensor<float> prot(orig.shape());
  for (int i = 0; i < n; ++i) {
    std::copy(originals.pixels.data() + i * per, originals.pixels.data() + (i + 1) * per,
              orig.data());
    std::copy(protected_data.pixels.data() + i * per,
              protected_data.pixels.data() + (i + 1) * per, prot.data());
    const Tensor<float> view = to_float(quantize_protected(orig, prot, eta));
    std::copy(view.data(), view.data() + per, out.pixels.data() + i * per);
  }
  return out;
}

inline ProtectArtifacts run_protect(const StyleDataset& ds, const DiffusionModel<float>& base,
                                    const RunConfig& cfg, uint64_t seed) {
  WatermarkConfig wm_cfg = cfg.watermark;
  wm_cfg.seed = mix_seed(seed, 0x77a);
  ProtectArtifacts out{optimize_watermarks(ds.data, ds.ids, base, wm_cfg), {}, {}};
  out.protected_data = apply_watermarks(ds.data, ds.ids, out.optimization.watermarks);
  out.exported = export_views(ds.data, out.protected_data, wm_cfg.eta);
  return out;
}

// Watermark only a uniform random fraction of the dataset: unselected
// images keep a zero delta, so one application path serves every rate.
struct RateApplication {
  ImageBatch<float> data;      // float pixels after partial application
  ImageBatch<float> exported;  // 8-bit interchange view
  std::vector<char> marked;
  int marked_count = 0;
};

inline RateApplication apply_at_rate(const StyleDataset& ds, const WatermarkSet<float>& wm,
                                     double rate, uint64_t seed) {
  if (rate <= 0.0) {
    throw std::invalid_argument("watermark rate 0 is undefined (no positive class)");
  }
  require(rate <= 1.0, "watermark rate must lie in (0,1]");
  const int n = wm.count();
  const int k = std::max(1, static_cast<int>(std::lround(rate * n)));
  std::vector<int> order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  Rng rng(mix_seed(seed, 0x9a7e5));
  rng.shuffle(order);

  RateApplication out;
  out.marked.assign(static_cast<size_t>(n), 0);
  for (int i = 0; i < k; ++i) out.marked[static_cast<size_t>(order[static_cast<size_t>(i)])] = 1;
  out.marked_count = k;

  std::vector<Tensor<float>> deltas = wm.deltas();
  for (int i = 0; i < n; ++i) {
    if (!out.marked[static_cast<size_t>(i)]) deltas[static_cast<size_t>(i)].fill(0.0f);
  }
  const WatermarkSet<float> partial(std::move(deltas), wm.ids(), wm.config());
  out.data = apply_watermarks(ds.data, ds.ids, partial);
  out.exported = export_views(ds.data, out.data, wm.config().eta);
  return out;
}

// ---------------------------------------------------------------------------
// Offender stage: fine-tune one method on one dataset copy, then sample
// training and evaluation generation sets with disjoint seeds.
// ---------------------------------------------------------------------------

inline std::vector<Prompt> cycled_prompts(const std::vector<Prompt>& pool, int count) {
  require(!pool.empty(), "prompt pool must be nonempty");
  std::vector<Prompt> unique;
  for (const Prompt& p : pool) {
    bool seen = false;
    for (const Prompt& q : unique) seen = seen || q.tokens == p.tokens;
    if (!seen) unique.push_back(p);
  }
  std::vector<Prompt> out;
  out.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) out.push_back(unique[static_cast<size_t>(i) % unique.size()]);
  return out;
}

struct OffenderRun {
  FineTuneResult<float> result;
  GeneratedSet<float> train_gen;  // detector training pool
  GeneratedSet<float> eval_gen;   // held-out generation batch
};

inline FineTuneMethod method_for(const RunConfig& cfg, FtKind kind) {
  FineTuneMethod m = FineTuneMethod::defaults(kind, cfg.finetune_scale * cfg.scale);
  m.identifier_token = vocab::kIdentifier;
  m.prior_preservation = cfg.prior_preservation && kind == FtKind::kDreamboothLike;
  return m;
}

inline OffenderRun run_offender(const DiffusionModel<float>& base, const ImageBatch<float>& data,
                                FtKind kind, const RunConfig& cfg, uint64_t seed,
                                bool watermarked) {
  const FineTuneMethod method = method_for(cfg, kind);
  OffenderRun run{finetune(base, data, method, mix_seed(seed, 0xf7, static_cast<uint64_t>(kind))),
                  {},
                  {}};
  const int n_train = cfg.scaled(cfg.train_generations);
  const int n_eval = cfg.scaled(cfg.eval_generations);
  const std::vector<Prompt> train_prompts = cycled_prompts(data.prompts, n_train);
  const std::vector<Prompt> eval_prompts = cycled_prompts(data.prompts, n_eval);
  const uint64_t tag = static_cast<uint64_t>(kind) * 2 + (watermarked ? 1 : 0);
  run.train_gen = generate_eval_set(run.result, train_prompts, 1, cfg.sample_steps,
                                    mix_seed(seed, 0x6e71, tag), watermarked);
  run.eval_gen = generate_eval_set(run.result, eval_prompts, 1, cfg.sample_steps,
                                   mix_seed(seed, 0x6e72, tag), watermarked);
  return run;
}

// ---------------------------------------------------------------------------
// Full experiment for one seed: protect, per-method clean/watermarked
// offender runs, per-method experts (stage 1), shared gating (stage 2).
// ---------------------------------------------------------------------------

struct MethodArtifacts {
  FtKind kind = FtKind::kFullFt;
  OffenderRun clean_run;
  OffenderRun wm_run;
  std::optional<ExpertDetector<float>> expert;
};

struct ExperimentRun {
  ProtectArtifacts protect;
  std::vector<MethodArtifacts> methods;  // canonical order
  std::optional<GatingModel<float>> gating;
  std::optional<MoEDetector<float>> moe;

  const MethodArtifacts& method(FtKind kind) const {
    for (const auto& m : methods) {
      if (m.kind == kind) return m;
    }
    throw std::invalid_argument("method not part of this run");
  }
};

// Expert trained on originals + generations for one method. The corruption
// policy defaults to "none" to match the core protocol; robustness
// experiments pass the configured policy instead.
inline ExpertDetector<float> build_expert(const StyleDataset& ds,
                                          const ImageBatch<float>& protected_data,
                                          const OffenderRun& clean_run, const OffenderRun& wm_run,
                                          const AugmentationPolicy& policy, const RunConfig& cfg,
                                          uint64_t seed) {
  DetectorHyper hyper = cfg.detector;
  hyper.steps = cfg.scaled(hyper.steps);
  return train_expert(ds.data.pixels, protected_data.pixels, clean_run.train_gen, wm_run.train_gen,
                      policy, hyper,
                      mix_seed(seed, 0xde7, static_cast<uint64_t>(wm_run.train_gen.method)));
}

inline Tensor<float> concat_images(const Tensor<float>& a, const Tensor<float>& b) {
  if (a.size() == 0) return b;
  if (b.size() == 0) return a;
  require(a.rank() == 4 && b.rank() == 4 && a.dim(1) == b.dim(1) && a.dim(2) == b.dim(2) &&
              a.dim(3) == b.dim(3),
          "cannot concatenate image sets with different shapes");
  Tensor<float> out({a.dim(0) + b.dim(0), a.dim(1), a.dim(2), a.dim(3)});
  std::copy(a.data(), a.data() + a.size(), out.data());
  std::copy(b.data(), b.data() + b.size(), out.data() + a.size());
  return out;
}

// Gating classes: per method, clean-trained and watermark-trained
// generations together (the gate routes by method, not by watermark state).
inline std::vector<MethodImages<float>> gating_classes(const std::vector<MethodArtifacts>& methods) {
  std::vector<MethodImages<float>> classes;
  for (const MethodArtifacts& m : methods) {
    classes.push_back(MethodImages<float>{
        m.kind, concat_images(m.clean_run.train_gen.images.pixels,
                              m.wm_run.train_gen.images.pixels)});
  }
  return classes;
}

inline ExperimentRun run_experiment(const StyleDataset& ds, const DiffusionModel<float>& base,
                                    const RunConfig& cfg, uint64_t seed) {
  ExperimentRun run{run_protect(ds, base, cfg, seed), {}, std::nullopt, std::nullopt};

  std::vector<FtKind> kinds = cfg.methods;
  std::sort(kinds.begin(), kinds.end());
  for (FtKind kind : kinds) {
    MethodArtifacts m{kind, run_offender(base, ds.data, kind, cfg, seed, false),
                      run_offender(base, run.protect.exported, kind, cfg, seed, true),
                      std::nullopt};
    m.expert = build_expert(ds, run.protect.exported, m.clean_run, m.wm_run,
                            AugmentationPolicy::none(), cfg, seed);
    run.methods.push_back(std::move(m));
  }

  if (run.methods.size() >= 2) {
    DetectorHyper hyper = cfg.detector;
    hyper.steps = cfg.scaled(hyper.steps);
    run.gating = train_gating(gating_classes(run.methods), hyper, mix_seed(seed, 0x9a7e));
    std::vector<ExpertDetector<float>> experts;
    for (const auto& m : run.methods) experts.push_back(*m.expert);
    run.moe = MoEDetector<float>(std::move(experts), *run.gating);
  }
  return run;
}

// ---------------------------------------------------------------------------
// Evaluation helpers on experiment artifacts
// ---------------------------------------------------------------------------

inline DetectionReport method_detection_report(const MethodArtifacts& m, double threshold = 0.5) {
  return compute_tpr_fpr(score_images(*m.expert, m.wm_run.eval_gen.images.pixels),
                         score_images(*m.expert, m.clean_run.eval_gen.images.pixels), threshold);
}

inline double method_expert_accuracy(const MethodArtifacts& m, double threshold = 0.5) {
  return balanced_accuracy(score_images(*m.expert, m.wm_run.eval_gen.images.pixels),
                           score_images(*m.expert, m.clean_run.eval_gen.images.pixels), threshold);
}

inline double method_moe_accuracy(const MoEDetector<float>& moe, const MethodArtifacts& m,
                                  double threshold = 0.5) {
  return balanced_accuracy(score_images(moe, m.wm_run.eval_gen.images.pixels),
                           score_images(moe, m.clean_run.eval_gen.images.pixels), threshold);
}

inline std::vector<MethodEvalSet<float>> experiment_eval_sets(const ExperimentRun& run) {
  std::vector<MethodEvalSet<float>> sets;
  for (const MethodArtifacts& m : run.methods) {
    sets.push_back(MethodEvalSet<float>{m.kind, m.wm_run.eval_gen.images.pixels,
                                        m.clean_run.eval_gen.images.pixels});
  }
  return sets;
}

inline std::vector<ExpertDetector<float>> experiment_experts(const ExperimentRun& run) {
  std::vector<ExpertDetector<float>> experts;
  for (const auto& m : run.methods) experts.push_back(*m.expert);
  return experts;
}

// ---------------------------------------------------------------------------
// Early-learnability comparison: optimized vs random watermark of the same
// budget, each arm scored by an expert trained on its own full-length run.
// The early model is the deterministic prefix of the full run (same seed).
// ---------------------------------------------------------------------------

struct EarlyComparison {
  double tpr_optimized = 0.0;
  double tpr_random = 0.0;
  int early_steps = 0;
  int full_steps = 0;
};

inline EarlyComparison early_learnability(const StyleDataset& ds,
                                          const DiffusionModel<float>& base,
                                          const ExperimentRun& shared, const RunConfig& cfg,
                                          uint64_t seed) {
  const FtKind kind = FtKind::kFullFt;
  const MethodArtifacts& shared_m = shared.method(kind);
  const FineTuneMethod full_method = method_for(cfg, kind);
  EarlyComparison out;
  out.full_steps = full_method.max_steps;
  out.early_steps = std::max(1, static_cast<int>(std::lround(cfg.early_fraction *
                                                             full_method.max_steps)));
  FineTuneMethod early_method = full_method;
  early_method.max_steps = out.early_steps;

  const int n_eval = cfg.scaled(cfg.eval_generations);
  const std::vector<Prompt> eval_prompts = cycled_prompts(ds.data.prompts, n_eval);

  // Optimized arm: early fine-tune on the protected data, scored by the
  // shared full-run expert.
  {
    FineTuneResult<float> early = finetune(base, shared.protect.exported, early_method,
                                           mix_seed(seed, 0xf7, static_cast<uint64_t>(kind)));
    GeneratedSet<float> gen = generate_eval_set(early, eval_prompts, 1, cfg.sample_steps,
                                                mix_seed(seed, 0xea51), true);
    const DetectionReport r =
        compute_tpr_fpr(score_images(*shared_m.expert, gen.images.pixels),
                        score_images(*shared_m.expert, shared_m.clean_run.eval_gen.images.pixels),
                        0.5);
    out.tpr_optimized = r.tpr;
  }

  // Random arm: same budget, fresh noise; full run trains the matched
  // expert, the early prefix is what gets scored.
  {
    const std::vector<int> shape{ds.data.pixels.dim(1), ds.data.pixels.dim(2),
                                 ds.data.pixels.dim(3)};
    const WatermarkSet<float> random_wm = random_watermarks<float>(
        shape, ds.data.count(), cfg.watermark.eta, mix_seed(seed, 0x9a2d), ds.ids);
    const ImageBatch<float> random_protected = export_views(
        ds.data, apply_watermarks(ds.data, ds.ids, random_wm), cfg.watermark.eta);

    const uint64_t arm_seed = mix_seed(seed, 0x9a2d0);
    OffenderRun full_run = run_offender(base, random_protected, kind, cfg, arm_seed, true);
    ExpertDetector<float> random_expert =
        build_expert(ds, random_protected, shared_m.clean_run, full_run,
                     AugmentationPolicy::none(), cfg, arm_seed);

    FineTuneResult<float> early = finetune(base, random_protected, early_method,
                                           mix_seed(arm_seed, 0xf7, static_cast<uint64_t>(kind)));
    GeneratedSet<float> gen = generate_eval_set(early, eval_prompts, 1, cfg.sample_steps,
                                                mix_seed(arm_seed, 0xea51), true);
    const DetectionReport r = compute_tpr_fpr(
        score_images(random_expert, gen.images.pixels),
        score_images(random_expert, shared_m.clean_run.eval_gen.images.pixels), 0.5);
    out.tpr_random = r.tpr;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Footprint purity: each fine-tuning method may modify exactly its own
// parameter set; everything else must survive bit-identically.
// ---------------------------------------------------------------------------

inline bool bitwise_equal(const Tensor<float>& a, const Tensor<float>& b) {
  return a.shape() == b.shape() &&
         (a.size() == 0 ||
          std::memcmp(a.data(), b.data(), sizeof(float) * static_cast<size_t>(a.size())) == 0);
}

struct FootprintCheck {
  FtKind kind = FtKind::kFullFt;
  bool pure = true;
  int changed_params = 0;  // parameters inside the footprint that moved
  int frozen_params = 0;   // parameters verified bit-identical
  std::vector<std::string> violations;

  void frozen(bool ok, const std::string& what) {
    if (ok) {
      frozen_params += 1;
    } else {
      pure = false;
      violations.push_back(what + " changed but is outside the footprint");
    }
  }
};

inline bool is_adapter_param(const std::string& name) { return name.rfind("lora.", 0) == 0; }

inline FootprintCheck verify_footprint(DiffusionModel<float>& base, DiffusionModel<float>& tuned,
                                       FtKind kind) {
  FootprintCheck chk;
  chk.kind = kind;

  std::vector<Param<float>*> base_denoiser, tuned_denoiser, tuned_adapters;
  for (auto* p : base.denoiser().params()) {
    require(!is_adapter_param(p->name), "reference model must not carry adapters");
    base_denoiser.push_back(p);
  }
  for (auto* p : tuned.denoiser().params()) {
    (is_adapter_param(p->name) ? tuned_adapters : tuned_denoiser).push_back(p);
  }
  require(base_denoiser.size() == tuned_denoiser.size(),
          "models have different denoiser parameter sets");

  if (kind == FtKind::kLoraLike) {
    if (tuned_adapters.empty()) {
      chk.pure = false;
      chk.violations.push_back("no adapters present in an adapter-only checkpoint");
    }
  } else if (!tuned_adapters.empty()) {
    chk.pure = false;
    chk.violations.push_back("unexpected adapters attached");
  }

  for (size_t i = 0; i < base_denoiser.size(); ++i) {
    Param<float>* b = base_denoiser[i];
    Param<float>* t = nullptr;
    for (auto* p : tuned_denoiser) {
      if (p->name == b->name) {
        t = p;
        break;
      }
    }
    require(t != nullptr, "denoiser parameter missing from tuned model: " + b->name);
    const bool equal = bitwise_equal(b->value, t->value);
    if (kind == FtKind::kFullFt || kind == FtKind::kDreamboothLike) {
      chk.changed_params += !equal;
    } else {
      chk.frozen(equal, "denoiser parameter " + b->name);
    }
  }
  for (auto* p : tuned_adapters) chk.changed_params += p->value.size() > 0;

  const Tensor<float>& be = base.cond_embed().value;
  const Tensor<float>& te = tuned.cond_embed().value;
  if (kind == FtKind::kTextualInversionLike) {
    if (te.dim(0) != be.dim(0) + 1 || te.dim(1) != be.dim(1)) {
      chk.pure = false;
      chk.violations.push_back("embedding table shape is not base plus one new row");
    } else {
      // row-major layout: the pre-existing rows are exactly the first
      // be.size() floats of the grown table
      const bool rows_equal =
          std::memcmp(be.data(), te.data(), sizeof(float) * static_cast<size_t>(be.size())) == 0;
      chk.frozen(rows_equal, "pre-existing embedding rows");
      chk.changed_params += 1;  // the new row
    }
  } else if (kind == FtKind::kDreamboothLike) {
    if (be.shape() != te.shape()) {
      chk.pure = false;
      chk.violations.push_back("embedding table shape changed");
    } else {
      chk.changed_params += !bitwise_equal(be, te);
    }
  } else {
    chk.frozen(bitwise_equal(be, te), "condition embedding table");
  }
  return chk;
}

// ---------------------------------------------------------------------------
// Budget verification for exported 8-bit images
// ---------------------------------------------------------------------------

struct BudgetCheck {
  long pixels_total = 0;
  long pixels_within_float = 0;
  long pixels_within_u8 = 0;
  bool all_within() const {
    return pixels_total == pixels_within_float && pixels_total == pixels_within_u8;
  }
};

inline BudgetCheck verify_budget(const StyleDataset& ds, const ImageBatch<float>& protected_data,
                                 double eta) {
  BudgetCheck chk;
  // application re-projects pixels against exactly this double bound
  const double budget = eta;
  const int qbudget = static_cast<int>(std::lround(eta * 255.0));
  const long per = static_cast<long>(ds.data.pixels.dim(1)) * ds.data.pixels.dim(2) *
                   ds.data.pixels.dim(3);
  for (int i = 0; i < ds.data.count(); ++i) {
    Tensor<float> orig({ds.data.pixels.dim(1), ds.data.pixels.dim(2), ds.data.pixels.dim(3)});
    Tensor<float> prot(orig.shape());
    std::copy(ds.data.pixels.data() + i * per, ds.data.pixels.data() + (i + 1) * per, orig.data());
    std::copy(protected_data.pixels.data() + i * per, protected_data.pixels.data() + (i + 1) * per,
              prot.data());
    const ImageU8 q = quantize_protected(orig, prot, eta);
    const ImageU8 qo = to_u8(orig);
    for (long p = 0; p < per; ++p) {
      chk.pixels_total += 1;
      const double diff = std::abs(static_cast<double>(prot[p]) - static_cast<double>(orig[p]));
      chk.pixels_within_float += diff <= budget;
      // planar (C,H,W) vs interleaved u8 index
      const long c = p / (per / 3), rem = p % (per / 3);
      const long u8_idx = rem * 3 + c;
      const int dq = std::abs(static_cast<int>(q.rgb[static_cast<size_t>(u8_idx)]) -
                              static_cast<int>(qo.rgb[static_cast<size_t>(u8_idx)]));
      chk.pixels_within_u8 += dq <= qbudget;
    }
  }
  return chk;
}

}  // namespace tunemark
