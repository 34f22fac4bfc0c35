#pragma once

#include <array>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "tunemark/common.hpp"
#include "tunemark/denoiser.hpp"
#include "tunemark/rng.hpp"
#include "tunemark/schedule.hpp"
#include "tunemark/tensor.hpp"

namespace tunemark {

struct Prompt {
  std::vector<int> tokens;
};

template <typename T>
struct ImageBatch {
  Tensor<T> pixels;  // (B, C, H, W), values in [0, 1]
  std::vector<Prompt> prompts;

  int count() const { return pixels.empty() ? 0 : pixels.dim(0); }

  void validate() const {
    require(pixels.rank() == 4, "image batch must be rank 4");
    require(static_cast<int>(prompts.size()) == pixels.dim(0),
            "prompt count must match image count");
    for (long i = 0; i < pixels.size(); ++i) {
      if (!(pixels[i] >= T(0) && pixels[i] <= T(1))) {
        throw std::invalid_argument("image pixels must lie in [0,1]");
      }
    }
  }
};

// Conditional diffusion model: a denoiser network plus a prompt-embedding
// table, tied to a noise schedule. The two parameter collections are
// disjoint; copies are deep and independently mutable.
template <typename T>
class DiffusionModel {
 public:
  DiffusionModel(std::unique_ptr<DenoiserBase<T>> denoiser, int vocab_size,
                 NoiseSchedule schedule, std::array<int, 3> image_shape, uint64_t seed)
      : denoiser_(std::move(denoiser)),
        schedule_(std::move(schedule)),
        image_shape_(image_shape) {
    require(denoiser_ != nullptr, "denoiser required");
    require(vocab_size > 0, "vocab_size must be positive");
    Rng rng(mix_seed(seed, 0x7ab1e));
    Tensor<T> table({vocab_size, denoiser_->cond_dim()});
    for (long i = 0; i < table.size(); ++i) table[i] = static_cast<T>(rng.normal() * 0.05);
    cond_embed_.init("cond_embed.table", std::move(table));
  }

  DiffusionModel(const DiffusionModel& o)
      : denoiser_(o.denoiser_->clone()),
        cond_embed_(o.cond_embed_),
        schedule_(o.schedule_),
        image_shape_(o.image_shape_) {}
  DiffusionModel& operator=(const DiffusionModel& o) {
    if (this != &o) {
      denoiser_ = o.denoiser_->clone();
      cond_embed_ = o.cond_embed_;
      schedule_ = o.schedule_;
      image_shape_ = o.image_shape_;
    }
    return *this;
  }
  DiffusionModel(DiffusionModel&&) noexcept = default;
  DiffusionModel& operator=(DiffusionModel&&) noexcept = default;

  DenoiserBase<T>& denoiser() { return *denoiser_; }
  const DenoiserBase<T>& denoiser() const { return *denoiser_; }
  void set_denoiser(std::unique_ptr<DenoiserBase<T>> d) {
    require(d != nullptr, "denoiser required");
    denoiser_ = std::move(d);
  }
  Param<T>& cond_embed() { return cond_embed_; }
  const Param<T>& cond_embed() const { return cond_embed_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  const std::array<int, 3>& image_shape() const { return image_shape_; }
  int vocab_size() const { return cond_embed_.value.dim(0); }
  int cond_dim() const { return cond_embed_.value.dim(1); }

  // Appends a fresh row to the embedding table (used when a fine-tuning
  // method introduces a new placeholder token). Returns the new token id.
  int add_token(uint64_t seed) {
    const int vocab = vocab_size(), dim = cond_dim();
    Tensor<T> table({vocab + 1, dim});
    for (long i = 0; i < cond_embed_.value.size(); ++i) table[i] = cond_embed_.value[i];
    Rng rng(mix_seed(seed, 0x70c)); // new-row init
    for (int k = 0; k < dim; ++k) table.at(vocab, k) = static_cast<T>(rng.normal() * 0.05);
    cond_embed_.init(cond_embed_.name, std::move(table));
    return vocab;
  }

  void validate_prompt(const Prompt& p) const {
    require(!p.tokens.empty(), "prompt must contain at least one token");
    for (int id : p.tokens) {
      require_range(id >= 0 && id < vocab_size(), "prompt token id out of embedding range");
    }
  }

  // Mean of the embedding rows named by each prompt.
  Tensor<T> embed(const std::vector<Prompt>& prompts) const {
    const int B = static_cast<int>(prompts.size());
    Tensor<T> cond = Tensor<T>::zeros({B, cond_dim()});
    for (int b = 0; b < B; ++b) {
      validate_prompt(prompts[b]);
      const T inv = T(1) / static_cast<T>(prompts[b].tokens.size());
      for (int id : prompts[b].tokens) {
        const T* row = &cond_embed_.value.at(id, 0);
        T* out = &cond.at(b, 0);
        for (int k = 0; k < cond_dim(); ++k) out[k] += row[k] * inv;
      }
    }
    return cond;
  }

  // Scatters dL/dcond back onto the embedding-table gradient.
  void embed_backward(const std::vector<Prompt>& prompts, const Tensor<T>& dcond) {
    const int B = static_cast<int>(prompts.size());
    for (int b = 0; b < B; ++b) {
      const T inv = T(1) / static_cast<T>(prompts[b].tokens.size());
      for (int id : prompts[b].tokens) {
        T* grow = &cond_embed_.grad.at(id, 0);
        const T* d = &dcond.at(b, 0);
        for (int k = 0; k < cond_dim(); ++k) grow[k] += d[k] * inv;
      }
    }
  }

  void zero_grads() {
    denoiser_->zero_grads();
    cond_embed_.zero_grad();
  }

  void check_finite() const {
    for (auto* p : const_cast<DiffusionModel*>(this)->denoiser_->params()) {
      if (!p->value.all_finite()) throw numeric_error("non-finite parameter value", "denoiser");
    }
    if (!cond_embed_.value.all_finite()) {
      throw numeric_error("non-finite parameter value", "cond_embed");
    }
  }

 private:
  std::unique_ptr<DenoiserBase<T>> denoiser_;
  Param<T> cond_embed_;
  NoiseSchedule schedule_;
  std::array<int, 3> image_shape_;
};

// ---------------------------------------------------------------------------
// Forward diffusion
// ---------------------------------------------------------------------------

template <typename T>
inline Tensor<T> forward_diffuse(const Tensor<T>& x0, const std::vector<int>& t,
                                 const Tensor<T>& eps, const NoiseSchedule& schedule) {
  check_same_shape(x0, eps, "forward_diffuse");
  require(x0.rank() == 4, "forward_diffuse expects a rank-4 batch");
  require(static_cast<int>(t.size()) == x0.dim(0), "one timestep per image");
  Tensor<T> xt(x0.shape());
  const long per = x0.size() / x0.dim(0);
  for (int b = 0; b < x0.dim(0); ++b) {
    const double ab = schedule.alpha_bar(t[b]);
    const T sa = static_cast<T>(std::sqrt(ab));
    const T sb = static_cast<T>(std::sqrt(1.0 - ab));
    const T* xp = x0.data() + static_cast<long>(b) * per;
    const T* ep = eps.data() + static_cast<long>(b) * per;
    T* op = xt.data() + static_cast<long>(b) * per;
    for (long i = 0; i < per; ++i) op[i] = sa * xp[i] + sb * ep[i];
  }
  return xt;
}

// ---------------------------------------------------------------------------
// Shared Monte-Carlo realization: one (t, eps) draw per image. Loss and
// gradient calls with the same seed operate on the identical realization,
// and callers may draw once and evaluate both. Draw order is fixed: all
// timesteps first (batch order), then the full noise tensor.
// ---------------------------------------------------------------------------

template <typename T>
struct DrawRealization {
  std::vector<int> t;
  Tensor<T> eps;
};

template <typename T>
inline DrawRealization<T> draw_realization(int timesteps, const std::vector<int>& shape,
                                           uint64_t seed) {
  require(timesteps > 0, "timesteps must be positive");
  Rng rng(seed);
  DrawRealization<T> d;
  d.t.resize(shape[0]);
  for (int b = 0; b < shape[0]; ++b) d.t[b] = static_cast<int>(rng.randint(timesteps));
  d.eps = Tensor<T>(shape);
  for (long i = 0; i < d.eps.size(); ++i) d.eps[i] = static_cast<T>(rng.normal());
  return d;
}

namespace detail {

// Per-image L2 norms of (eps − pred) and the loss (batch mean of norms).
template <typename T>
inline double residual_norms(const Tensor<T>& pred, const Tensor<T>& eps,
                             std::vector<double>& norms) {
  const int B = pred.dim(0);
  const long per = pred.size() / B;
  norms.assign(B, 0.0);
  double total = 0.0;
  for (int b = 0; b < B; ++b) {
    const T* pp = pred.data() + static_cast<long>(b) * per;
    const T* ep = eps.data() + static_cast<long>(b) * per;
    double acc = 0.0;
    for (long i = 0; i < per; ++i) {
      const double r = static_cast<double>(ep[i]) - static_cast<double>(pp[i]);
      acc += r * r;
    }
    norms[b] = std::sqrt(acc);
    total += norms[b];
  }
  return total / B;
}

}  // namespace detail

// Denoising loss on one Monte-Carlo realization: mean over the batch of
// ‖eps − pred(x_t, t, c)‖₂ (L2 norm per image, not squared).
template <typename T>
inline T ldm_loss_at(DiffusionModel<T>& model, const ImageBatch<T>& batch,
                     const DrawRealization<T>& draw) {
  Tensor<T> xt = forward_diffuse(batch.pixels, draw.t, draw.eps, model.schedule());
  Tensor<T> cond = model.embed(batch.prompts);
  Tensor<T> pred = model.denoiser().forward(xt, draw.t, cond);
  if (!pred.all_finite()) throw numeric_error("non-finite activations", "denoiser");
  std::vector<double> norms;
  const double loss = detail::residual_norms(pred, draw.eps, norms);
  return static_cast<T>(loss);
}

template <typename T>
inline T ldm_loss(DiffusionModel<T>& model, const ImageBatch<T>& batch, uint64_t seed) {
  const auto draw =
      draw_realization<T>(model.schedule().timesteps, batch.pixels.shape(), seed);
  return ldm_loss_at(model, batch, draw);
}

enum class GradWrt { kDenoiser, kCondEmbed, kInput };

struct GradFlags {
  bool denoiser = false;
  bool cond_embed = false;
  bool input = false;
};

template <typename T>
struct LossGrads {
  T loss{};
  Tensor<T> input_grad;  // populated only when the input gradient is requested
};

// Gradients of the same realization ldm_loss_at evaluates, for any subset
// of {denoiser params, embedding table, input} in a single backward pass.
// Parameter gradients land in the model's .grad fields, which are zeroed
// first; the input gradient is returned. Where a residual norm is exactly
// zero the subgradient 0 is used.
template <typename T>
inline LossGrads<T> grad_ldm_multi(DiffusionModel<T>& model, const ImageBatch<T>& batch,
                                   const DrawRealization<T>& draw, GradFlags flags) {
  model.zero_grads();
  Tensor<T> xt = forward_diffuse(batch.pixels, draw.t, draw.eps, model.schedule());
  Tensor<T> cond = model.embed(batch.prompts);
  Tensor<T> pred = model.denoiser().forward(xt, draw.t, cond);
  if (!pred.all_finite()) throw numeric_error("non-finite activations", "denoiser");

  std::vector<double> norms;
  LossGrads<T> out;
  out.loss = static_cast<T>(detail::residual_norms(pred, draw.eps, norms));

  const int B = pred.dim(0);
  const long per = pred.size() / B;
  Tensor<T> dpred(pred.shape());
  for (int b = 0; b < B; ++b) {
    const double scale = norms[b] > 0.0 ? 1.0 / (norms[b] * B) : 0.0;
    const T* pp = pred.data() + static_cast<long>(b) * per;
    const T* ep = draw.eps.data() + static_cast<long>(b) * per;
    T* dp = dpred.data() + static_cast<long>(b) * per;
    for (long i = 0; i < per; ++i) {
      dp[i] = static_cast<T>((static_cast<double>(pp[i]) - static_cast<double>(ep[i])) * scale);
    }
  }

  Tensor<T> dcond;
  Tensor<T> dxt = model.denoiser().backward(dpred, flags.input, flags.denoiser,
                                            flags.cond_embed ? &dcond : nullptr);
  if (flags.cond_embed) model.embed_backward(batch.prompts, dcond);
  if (flags.input) {
    // x_t = sqrt(ab)·x0 + sqrt(1−ab)·eps, so dL/dx0 = sqrt(ab)·dL/dx_t.
    out.input_grad = Tensor<T>(dxt.shape());
    for (int b = 0; b < B; ++b) {
      const T sa = static_cast<T>(std::sqrt(model.schedule().alpha_bar(draw.t[b])));
      const T* sp = dxt.data() + static_cast<long>(b) * per;
      T* op = out.input_grad.data() + static_cast<long>(b) * per;
      for (long i = 0; i < per; ++i) op[i] = sa * sp[i];
    }
  }
  return out;
}

template <typename T>
inline LossGrads<T> grad_ldm_at(DiffusionModel<T>& model, const ImageBatch<T>& batch,
                                const DrawRealization<T>& draw, GradWrt wrt) {
  GradFlags flags;
  flags.denoiser = wrt == GradWrt::kDenoiser;
  flags.cond_embed = wrt == GradWrt::kCondEmbed;
  flags.input = wrt == GradWrt::kInput;
  return grad_ldm_multi(model, batch, draw, flags);
}

template <typename T>
inline LossGrads<T> grad_ldm(DiffusionModel<T>& model, const ImageBatch<T>& batch,
                             GradWrt wrt, uint64_t seed) {
  const auto draw =
      draw_realization<T>(model.schedule().timesteps, batch.pixels.shape(), seed);
  return grad_ldm_at(model, batch, draw, wrt);
}

// ---------------------------------------------------------------------------
// One plain gradient-descent step on the selected parameter collections.
// Unselected collections are left bit-identical.
// ---------------------------------------------------------------------------

struct ParamSelection {
  bool denoiser = true;
  bool cond_embed = false;
};

template <typename T>
inline T finetune_step_at(DiffusionModel<T>& model, const ImageBatch<T>& batch,
                          double lr, ParamSelection sel, const DrawRealization<T>& draw) {
  require(lr >= 0.0, "learning rate must be non-negative");
  if (!sel.denoiser && !sel.cond_embed) return ldm_loss_at(model, batch, draw);
  GradFlags flags;
  flags.denoiser = sel.denoiser;
  flags.cond_embed = sel.cond_embed;
  const T loss = grad_ldm_multi(model, batch, draw, flags).loss;
  if (sel.denoiser) {
    for (auto* p : model.denoiser().params()) sgd_step(*p, lr);
  }
  if (sel.cond_embed) sgd_step(model.cond_embed(), lr);
  return loss;
}

template <typename T>
inline T finetune_step(DiffusionModel<T>& model, const ImageBatch<T>& batch, double lr,
                       ParamSelection sel, uint64_t seed) {
  const auto draw =
      draw_realization<T>(model.schedule().timesteps, batch.pixels.shape(), seed);
  return finetune_step_at(model, batch, lr, sel, draw);
}

// ---------------------------------------------------------------------------
// Ancestral sampling, optionally on an evenly respaced timestep subsequence.
// ---------------------------------------------------------------------------

template <typename T>
inline ImageBatch<T> sample(DiffusionModel<T>& model, const std::vector<Prompt>& prompts,
                            int steps, uint64_t seed) {
  const int S = steps, total = model.schedule().timesteps;
  require_range(S >= 1 && S <= total, "sampler steps must lie in [1, T]");
  const int n = static_cast<int>(prompts.size());
  const auto& shape = model.image_shape();
  ImageBatch<T> out;
  out.prompts = prompts;
  out.pixels = Tensor<T>({n, shape[0], shape[1], shape[2]});
  if (n == 0) {
    out.pixels = Tensor<T>();
    return out;
  }

  // Evenly spaced ascending subsequence ending at T-1.
  std::vector<int> taus(S);
  for (int i = 0; i < S; ++i) {
    taus[i] = static_cast<int>(std::llround(static_cast<double>(i) * (total - 1) /
                                            std::max(1, S - 1)));
  }
  if (S == 1) taus[0] = total - 1;

  Rng rng(seed);
  Tensor<T>& x = out.pixels;
  for (long i = 0; i < x.size(); ++i) x[i] = static_cast<T>(rng.normal());
  Tensor<T> cond = model.embed(prompts);

  for (int i = S - 1; i >= 0; --i) {
    const int t = taus[i];
    const double ab = model.schedule().alpha_bar(t);
    const double ab_prev = i > 0 ? model.schedule().alpha_bar(taus[i - 1]) : 1.0;
    std::vector<int> tvec(n, t);
    Tensor<T> pred = model.denoiser().forward(x, tvec, cond);
    if (!pred.all_finite()) throw numeric_error("non-finite activations", "denoiser");

    const double beta = 1.0 - ab / ab_prev;
    const double c_x0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
    const double c_xt = std::sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab);
    const double sigma = i > 0 ? std::sqrt(beta * (1.0 - ab_prev) / (1.0 - ab)) : 0.0;
    const double inv_sab = 1.0 / std::sqrt(ab);
    const double s1mab = std::sqrt(1.0 - ab);
    for (long k = 0; k < x.size(); ++k) {
      const double x0_pred =
          (static_cast<double>(x[k]) - s1mab * static_cast<double>(pred[k])) * inv_sab;
      double v = c_x0 * x0_pred + c_xt * static_cast<double>(x[k]);
      if (sigma > 0.0) v += sigma * rng.normal();
      x[k] = static_cast<T>(v);
    }
  }
  clamp01(x);
  return out;
}

template <typename T>
inline ImageBatch<T> sample(DiffusionModel<T>& model, const Prompt& prompt, int n,
                            int steps, uint64_t seed) {
  return sample(model, std::vector<Prompt>(static_cast<size_t>(n), prompt), steps, seed);
}

}  // namespace tunemark
