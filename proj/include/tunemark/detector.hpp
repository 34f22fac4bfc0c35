#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "tunemark/checkpoint.hpp"
#include "tunemark/common.hpp"
#include "tunemark/corruption.hpp"
#include "tunemark/finetune.hpp"
#include "tunemark/hash.hpp"
#include "tunemark/nn.hpp"
#include "tunemark/rng.hpp"
#include "tunemark/tensor.hpp"

namespace tunemark {

// ---------------------------------------------------------------------------
// Scorer interface: a network mapping an image batch to raw logits. The
// detector types below are written against this interface so tests can plug
// in closed-form stubs. logits() must be cache-free (const objects are safe
// for concurrent callers); logits_train()/backward() are the training path.
// ---------------------------------------------------------------------------

template <typename T>
class ScorerBase {
 public:
  virtual ~ScorerBase() = default;
  virtual std::unique_ptr<ScorerBase<T>> clone() const = 0;
  virtual std::string arch_tag() const = 0;
  virtual std::vector<int> input_shape() const = 0;  // (C, H, W)
  virtual int output_dim() const = 0;
  virtual Tensor<T> logits(const Tensor<T>& batch) const = 0;  // (B, out)
  virtual Tensor<T> logits_train(const Tensor<T>& batch) = 0;
  virtual void backward(const Tensor<T>& dlogits) = 0;
  virtual std::vector<Param<T>*> params() = 0;

  std::vector<const Param<T>*> params() const {
    auto mutable_params = const_cast<ScorerBase<T>*>(this)->params();
    return {mutable_params.begin(), mutable_params.end()};
  }
  void zero_grads() {
    for (Param<T>* p : params()) p->zero_grad();
  }
  void check_input(const Tensor<T>& batch) const {
    const auto shape = input_shape();
    require(batch.rank() == 4 && batch.dim(1) == shape[0] && batch.dim(2) == shape[1] &&
                batch.dim(3) == shape[2],
            "detector input resolution mismatch (inputs are never resized silently)");
  }
};

// ---------------------------------------------------------------------------
// Default scorer: stack of stride-2 conv blocks with SiLU, global average
// pool, linear head. Standing in for a full residual classifier; the depth
// and widths are knobs, the contract is the logit output.
// ---------------------------------------------------------------------------

template <typename T>
class ConvScorer : public ScorerBase<T> {
 public:
  ConvScorer(std::vector<int> input_shape, int out_dim, std::vector<int> widths, uint64_t seed)
      : in_shape_(std::move(input_shape)), widths_(std::move(widths)), out_dim_(out_dim) {
    require(in_shape_.size() == 3, "scorer input shape must be (C,H,W)");
    require(!widths_.empty(), "scorer needs at least one conv block");
    require(out_dim_ >= 1, "scorer output dimension must be >= 1");
    Rng rng(mix_seed(seed, 0xdec7));
    int c = in_shape_[0], h = in_shape_[1], w = in_shape_[2];
    convs_.resize(widths_.size());
    for (size_t i = 0; i < widths_.size(); ++i) {
      require(widths_[i] >= 1, "scorer widths must be positive");
      convs_[i].init("block" + std::to_string(i) + ".conv", c, widths_[i], /*stride=*/2, rng);
      c = widths_[i];
      h = conv_out_dim(h, 2);
      w = conv_out_dim(w, 2);
      require(h >= 1 && w >= 1, "input too small for the requested scorer depth");
    }
    head_.init("head", c, out_dim_, rng);
  }

  std::unique_ptr<ScorerBase<T>> clone() const override {
    return std::make_unique<ConvScorer<T>>(*this);
  }
  std::string arch_tag() const override { return "conv_scorer_v1"; }
  std::vector<int> input_shape() const override { return in_shape_; }
  int output_dim() const override { return out_dim_; }
  const std::vector<int>& widths() const { return widths_; }

  Tensor<T> logits(const Tensor<T>& batch) const override {
    this->check_input(batch);
    Tensor<T> x = batch;
    for (const Conv2d<T>& cv : convs_) {
      x = silu_forward(conv2d_fwd(x, cv.w.value, cv.b.value, cv.stride));
    }
    return linear_fwd(gap_forward(x), head_.w.value, head_.b.value);
  }

  Tensor<T> logits_train(const Tensor<T>& batch) override {
    this->check_input(batch);
    Tensor<T> x = batch;
    pre_.resize(convs_.size());
    for (size_t i = 0; i < convs_.size(); ++i) {
      pre_[i] = convs_[i].forward(x);
      x = silu_forward(pre_[i]);
    }
    gap_in_shape_ = x.shape();
    return head_.forward(gap_forward(x));
  }

  void backward(const Tensor<T>& dlogits) override {
    Tensor<T> dx = head_.backward(dlogits, /*need_din=*/true, /*need_wgrad=*/true);
    dx = gap_backward(dx, gap_in_shape_);
    for (size_t i = convs_.size(); i-- > 0;) {
      dx = silu_backward(pre_[i], dx);
      dx = convs_[i].backward(dx, /*need_din=*/i > 0, /*need_wgrad=*/true);
    }
  }

  std::vector<Param<T>*> params() override {
    std::vector<Param<T>*> out;
    for (Conv2d<T>& cv : convs_) {
      out.push_back(&cv.w);
      out.push_back(&cv.b);
    }
    out.push_back(&head_.w);
    out.push_back(&head_.b);
    return out;
  }

 private:
  std::vector<int> in_shape_;
  std::vector<int> widths_;
  int out_dim_ = 1;
  std::vector<Conv2d<T>> convs_;
  Linear<T> head_;
  std::vector<Tensor<T>> pre_;  // pre-activation caches for backward
  std::vector<int> gap_in_shape_;
};

// ---------------------------------------------------------------------------
// Training configuration and report
// ---------------------------------------------------------------------------

struct DetectorHyper {
  double lr = 0.001;          // optimizer defaults for the detector family
  double weight_decay = 0.01;
  int steps = 300;
  int batch_size = 16;
  double holdout_fraction = 0.15;
  std::vector<int> widths{32, 64, 96, 128};
  // Explicit ablation mode: train an expert from original images only,
  // leaving the generated sets empty. Off by default; without this flag,
  // empty generated sets are a precondition violation.
  bool ablation_no_generated = false;

  void validate() const {
    require(lr > 0.0, "detector learning rate must be positive");
    require(weight_decay >= 0.0, "weight decay must be non-negative");
    require(steps >= 1, "detector training needs at least one step");
    require(batch_size >= 2, "detector batch size must be at least 2");
    require(holdout_fraction >= 0.0 && holdout_fraction < 1.0,
            "holdout fraction must be in [0,1)");
    require(!widths.empty(), "detector needs at least one conv block");
  }
};

struct DetectorTrainReport {
  double train_accuracy = 0.0;
  double holdout_accuracy = 0.0;
  double final_loss = 0.0;
  long steps = 0;
  bool imbalance_warning = false;
  std::string note;
  std::string data_sha256;
};

// ---------------------------------------------------------------------------
// Expert: binary watermark classifier for one fine-tuning method
// ---------------------------------------------------------------------------

template <typename T>
class ExpertDetector {
 public:
  ExpertDetector(FtKind method, std::unique_ptr<ScorerBase<T>> scorer, AugmentationPolicy policy,
                 DetectorTrainReport report = {}, double threshold = 0.5)
      : method_(method),
        scorer_(std::move(scorer)),
        policy_(std::move(policy)),
        report_(std::move(report)),
        threshold_(threshold) {
    require(scorer_ != nullptr, "expert needs a scorer");
    require(scorer_->output_dim() == 1, "expert scorer must produce a single logit");
  }

  ExpertDetector(const ExpertDetector& o)
      : method_(o.method_),
        scorer_(o.scorer_->clone()),
        policy_(o.policy_),
        report_(o.report_),
        threshold_(o.threshold_) {}
  ExpertDetector& operator=(const ExpertDetector& o) {
    if (this != &o) *this = ExpertDetector(o);
    return *this;
  }
  ExpertDetector(ExpertDetector&&) noexcept = default;
  ExpertDetector& operator=(ExpertDetector&&) noexcept = default;

  FtKind method() const { return method_; }
  const AugmentationPolicy& policy() const { return policy_; }
  const DetectorTrainReport& report() const { return report_; }
  double threshold() const { return threshold_; }
  void set_threshold(double t) {
    require(t >= 0.0 && t <= 1.0, "threshold must be in [0,1]");
    threshold_ = t;
  }
  const ScorerBase<T>& scorer() const { return *scorer_; }

  // Probability the image carries the watermark, in [0,1].
  T score(const Tensor<T>& image) const {
    return score_batch(detail_single_batch(image))[0];
  }

  std::vector<T> score_batch(const Tensor<T>& batch) const {
    const Tensor<T> z = scorer_->logits(batch);
    std::vector<T> out(static_cast<size_t>(z.dim(0)));
    for (int b = 0; b < z.dim(0); ++b) out[static_cast<size_t>(b)] = sigmoid(z.at(b, 0));
    return out;
  }

 private:
  static Tensor<T> detail_single_batch(const Tensor<T>& image) {
    require(image.rank() == 3, "expected a single (C,H,W) image");
    Tensor<T> batch({1, image.dim(0), image.dim(1), image.dim(2)});
    std::copy(image.data(), image.data() + image.size(), batch.data());
    return batch;
  }

  FtKind method_;
  std::unique_ptr<ScorerBase<T>> scorer_;
  AugmentationPolicy policy_;
  DetectorTrainReport report_;
  double threshold_ = 0.5;
};

// ---------------------------------------------------------------------------
// Gating: M-way classifier over fine-tuning methods
// ---------------------------------------------------------------------------

template <typename T>
class GatingModel {
 public:
  GatingModel(std::vector<FtKind> methods, std::unique_ptr<ScorerBase<T>> scorer,
              DetectorTrainReport report = {})
      : methods_(std::move(methods)), scorer_(std::move(scorer)), report_(std::move(report)) {
    require(!methods_.empty(), "gating needs at least one method");
    for (size_t i = 1; i < methods_.size(); ++i) {
      require(methods_[i - 1] < methods_[i], "gating method list must be canonically ordered");
    }
    if (methods_.size() == 1) {
      // Degenerate single-method gate: weight is identically 1, no scorer.
      require(scorer_ == nullptr, "single-method gating takes no scorer");
    } else {
      require(scorer_ != nullptr, "gating needs a scorer");
      require(scorer_->output_dim() == static_cast<int>(methods_.size()),
              "gating scorer output dimension must match the method count");
    }
  }

  static GatingModel constant(FtKind method) { return GatingModel({method}, nullptr); }

  GatingModel(const GatingModel& o)
      : methods_(o.methods_),
        scorer_(o.scorer_ ? o.scorer_->clone() : nullptr),
        report_(o.report_) {}
  GatingModel& operator=(const GatingModel& o) {
    if (this != &o) *this = GatingModel(o);
    return *this;
  }
  GatingModel(GatingModel&&) noexcept = default;
  GatingModel& operator=(GatingModel&&) noexcept = default;

  int method_count() const { return static_cast<int>(methods_.size()); }
  const std::vector<FtKind>& methods() const { return methods_; }
  const DetectorTrainReport& report() const { return report_; }
  bool has_scorer() const { return scorer_ != nullptr; }
  const ScorerBase<T>& scorer() const {
    require(scorer_ != nullptr, "degenerate gating has no scorer");
    return *scorer_;
  }

  // Softmax routing weights for one (C,H,W) image; sums to 1.
  std::vector<T> weights(const Tensor<T>& image) const {
    require(image.rank() == 3, "expected a single (C,H,W) image");
    if (!scorer_) return {T(1)};
    Tensor<T> batch({1, image.dim(0), image.dim(1), image.dim(2)});
    std::copy(image.data(), image.data() + image.size(), batch.data());
    const Tensor<T> probs = softmax_rows(scorer_->logits(batch));
    std::vector<T> out(static_cast<size_t>(method_count()));
    for (int m = 0; m < method_count(); ++m) out[static_cast<size_t>(m)] = probs.at(0, m);
    return out;
  }

 private:
  std::vector<FtKind> methods_;
  std::unique_ptr<ScorerBase<T>> scorer_;
  DetectorTrainReport report_;
};

// ---------------------------------------------------------------------------
// Mixture of experts
// ---------------------------------------------------------------------------

template <typename T>
struct AuditScore {
  T final_score = T(0);
  std::vector<FtKind> methods;
  std::vector<T> gating_weights;
  std::vector<T> expert_scores;
};

template <typename T>
class MoEDetector {
 public:
  MoEDetector(std::vector<ExpertDetector<T>> experts, GatingModel<T> gating,
              double threshold = 0.5)
      : experts_(std::move(experts)), gating_(std::move(gating)), threshold_(threshold) {
    require(!experts_.empty(), "mixture needs at least one expert");
    std::sort(experts_.begin(), experts_.end(),
              [](const ExpertDetector<T>& a, const ExpertDetector<T>& b) {
                return a.method() < b.method();
              });
    require(static_cast<int>(experts_.size()) == gating_.method_count(),
            "expert count must match the gating method count");
    for (size_t i = 0; i < experts_.size(); ++i) {
      if (i > 0 && experts_[i - 1].method() == experts_[i].method()) {
        throw std::invalid_argument("duplicate expert method in mixture");
      }
      require(experts_[i].method() == gating_.methods()[i],
              "expert order must match the gating method list");
    }
  }

  static MoEDetector single(ExpertDetector<T> expert) {
    const FtKind m = expert.method();
    std::vector<ExpertDetector<T>> experts;
    experts.push_back(std::move(expert));
    return MoEDetector(std::move(experts), GatingModel<T>::constant(m));
  }

  int expert_count() const { return static_cast<int>(experts_.size()); }
  const std::vector<ExpertDetector<T>>& experts() const { return experts_; }
  const ExpertDetector<T>& expert_for(FtKind method) const {
    for (const auto& e : experts_) {
      if (e.method() == method) return e;
    }
    throw std::invalid_argument("no expert for the requested method");
  }
  const GatingModel<T>& gating() const { return gating_; }
  double threshold() const { return threshold_; }
  void set_threshold(double t) {
    require(t >= 0.0 && t <= 1.0, "threshold must be in [0,1]");
    threshold_ = t;
  }

  // Routed score: sum_i softmax_i(gate(x)) * expert_i(x). A convex
  // combination, so the result is clamped into [min, max] of the expert
  // scores to keep the bound exact under floating-point rounding.
  AuditScore<T> audit(const Tensor<T>& image) const {
    AuditScore<T> a;
    a.methods = gating_.methods();
    a.gating_weights = gating_.weights(image);
    a.expert_scores.reserve(experts_.size());
    double acc = 0.0;
    T lo = T(1), hi = T(0);
    for (size_t i = 0; i < experts_.size(); ++i) {
      const T s = experts_[i].score(image);
      a.expert_scores.push_back(s);
      acc += static_cast<double>(a.gating_weights[i]) * static_cast<double>(s);
      lo = std::min(lo, s);
      hi = std::max(hi, s);
    }
    a.final_score = std::clamp(static_cast<T>(acc), lo, hi);
    return a;
  }

  T detect(const Tensor<T>& image) const { return audit(image).final_score; }

 private:
  std::vector<ExpertDetector<T>> experts_;
  GatingModel<T> gating_;
  double threshold_ = 0.5;
};

template <typename T>
inline T detect_specific(const ExpertDetector<T>& expert, const Tensor<T>& image) {
  return expert.score(image);
}

// Extends a mixture with one additional method. The existing experts are
// copied bit-for-bit (never retrained); only the gating is replaced.
template <typename T>
inline MoEDetector<T> add_expert(const MoEDetector<T>& moe, ExpertDetector<T> new_expert,
                                 GatingModel<T> new_gating) {
  for (const auto& e : moe.experts()) {
    if (e.method() == new_expert.method()) {
      throw std::invalid_argument("an expert for this method already exists");
    }
  }
  std::vector<ExpertDetector<T>> experts = moe.experts();
  experts.push_back(std::move(new_expert));
  return MoEDetector<T>(std::move(experts), std::move(new_gating), moe.threshold());
}

// ---------------------------------------------------------------------------
// Expert training: BCE over {originals, generations} x {clean, watermarked},
// with stochastic corruption augmentation
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
inline Tensor<T> image_of(const Tensor<T>& set, long idx) {
  Tensor<T> img({set.dim(1), set.dim(2), set.dim(3)});
  const long per = img.size();
  std::copy(set.data() + idx * per, set.data() + (idx + 1) * per, img.data());
  return img;
}

// Index split into (train, holdout) with a deterministic shuffle.
inline void split_indices(long n, double holdout_fraction, Rng& rng, std::vector<long>& train,
                          std::vector<long>& holdout) {
  std::vector<long> idx(static_cast<size_t>(n));
  for (long i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
  rng.shuffle(idx);
  const long k = static_cast<long>(std::floor(static_cast<double>(n) * holdout_fraction));
  holdout.assign(idx.begin(), idx.begin() + k);
  train.assign(idx.begin() + k, idx.end());
}

template <typename T>
struct LabeledPool {
  const Tensor<T>* set = nullptr;  // (N,C,H,W)
  std::vector<long> indices;
  int label = 0;
  long size() const { return static_cast<long>(indices.size()); }
};

template <typename T>
inline double pooled_accuracy(const ScorerBase<T>& scorer,
                              const std::vector<LabeledPool<T>>& pools, double threshold) {
  long correct = 0, total = 0;
  for (const auto& pool : pools) {
    for (long idx : pool.indices) {
      Tensor<T> batch({1, pool.set->dim(1), pool.set->dim(2), pool.set->dim(3)});
      const long per = batch.size();
      std::copy(pool.set->data() + idx * per, pool.set->data() + (idx + 1) * per, batch.data());
      const T p = sigmoid(scorer.logits(batch).at(0, 0));
      const int pred = static_cast<double>(p) >= threshold ? 1 : 0;
      correct += pred == pool.label;
      total += 1;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
}

}  // namespace detail

template <typename T>
inline ExpertDetector<T> train_expert(const Tensor<T>& clean_images, const Tensor<T>& wm_images,
                                      const GeneratedSet<T>& gen_clean,
                                      const GeneratedSet<T>& gen_wm,
                                      const AugmentationPolicy& policy, const DetectorHyper& hyper,
                                      uint64_t seed) {
  hyper.validate();
  policy.validate();
  require(gen_clean.method == gen_wm.method,
          "generated sets must come from the same fine-tuning method");
  require(!gen_clean.watermark_trained && gen_wm.watermark_trained,
          "generated sets are (clean-trained, watermark-trained) in that order");
  const Tensor<T>& gc = gen_clean.images.pixels;
  const Tensor<T>& gw = gen_wm.images.pixels;
  require(clean_images.rank() == 4 && clean_images.dim(0) >= 1,
          "clean original set must be nonempty");
  require(wm_images.rank() == 4 && wm_images.dim(0) >= 1,
          "watermarked original set must be nonempty");
  if (!hyper.ablation_no_generated) {
    require(gc.size() > 0 && gw.size() > 0,
            "generated sets must be nonempty outside the no-augmentation ablation");
  }
  const std::vector<int> shape{clean_images.dim(1), clean_images.dim(2), clean_images.dim(3)};
  for (const Tensor<T>* s : {&wm_images, &gc, &gw}) {
    if (s->size() == 0) continue;
    require(s->rank() == 4 && s->dim(1) == shape[0] && s->dim(2) == shape[1] &&
                s->dim(3) == shape[2],
            "all training sets must share one resolution");
  }

  DetectorTrainReport report;
  {
    std::string blob = sha256_hex(clean_images.data(), clean_images.size() * sizeof(T));
    blob += sha256_hex(wm_images.data(), static_cast<size_t>(wm_images.size()) * sizeof(T));
    if (gc.size() > 0) blob += sha256_hex(gc.data(), static_cast<size_t>(gc.size()) * sizeof(T));
    if (gw.size() > 0) blob += sha256_hex(gw.data(), static_cast<size_t>(gw.size()) * sizeof(T));
    report.data_sha256 = sha256_hex(blob);
  }
  const long n_pos = wm_images.dim(0) + (gw.size() > 0 ? gw.dim(0) : 0);
  const long n_neg = clean_images.dim(0) + (gc.size() > 0 ? gc.dim(0) : 0);
  if (n_pos > 10 * n_neg || n_neg > 10 * n_pos) {
    report.imbalance_warning = true;
    report.note = "class imbalance beyond 10:1 (" + std::to_string(n_pos) + " positive vs " +
                  std::to_string(n_neg) + " negative); batches are rebalanced, interpret "
                  "reported accuracies with care";
  }

  // Per-pool train/holdout split.
  Rng split_rng(mix_seed(seed, 0x5917));
  std::vector<detail::LabeledPool<T>> train_pools, holdout_pools;
  const std::pair<const Tensor<T>*, int> sources[4] = {
      {&clean_images, 0}, {&wm_images, 1}, {&gc, 0}, {&gw, 1}};
  for (const auto& [set, label] : sources) {
    if (set->size() == 0) continue;
    detail::LabeledPool<T> tr, ho;
    tr.set = ho.set = set;
    tr.label = ho.label = label;
    detail::split_indices(set->dim(0), hyper.holdout_fraction, split_rng, tr.indices, ho.indices);
    if (tr.indices.empty()) tr.indices.push_back(ho.indices.back());  // keep every pool drawable
    train_pools.push_back(std::move(tr));
    if (!ho.indices.empty()) holdout_pools.push_back(std::move(ho));
  }

  // Pool lookup per (label, generated?) with fallback to originals when the
  // generated pool is absent (ablation mode).
  auto pool_for = [&](int label, bool generated) -> const detail::LabeledPool<T>* {
    const Tensor<T>* want = label == 1 ? (generated ? &gw : &wm_images)
                                       : (generated ? &gc : &clean_images);
    for (const auto& pool : train_pools) {
      if (pool.set == want) return &pool;
    }
    return nullptr;
  };

  auto scorer = std::make_unique<ConvScorer<T>>(shape, 1, hyper.widths, mix_seed(seed, 0x5c0de));
  std::vector<Param<T>*> params = scorer->params();
  std::vector<AdamState<T>> opt(params.size());
  AdamConfig adam;
  adam.lr = hyper.lr;
  adam.weight_decay = hyper.weight_decay;

  Rng rng(mix_seed(seed, 0xba7c4));
  const int B = hyper.batch_size;
  Tensor<T> batch({B, shape[0], shape[1], shape[2]});
  const long per_image = static_cast<long>(shape[0]) * shape[1] * shape[2];
  std::vector<int> labels(static_cast<size_t>(B));
  double loss = 0.0;
  for (int step = 0; step < hyper.steps; ++step) {
    for (int i = 0; i < B; ++i) {
      const int label = i % 2;  // balanced batches regardless of pool sizes
      const bool generated = (i / 2) % 2 == 1;  // 1:1 original/generated mixing per class
      const detail::LabeledPool<T>* pool = pool_for(label, generated);
      if (pool == nullptr) pool = pool_for(label, false);
      const long idx = pool->indices[rng.randint(static_cast<uint64_t>(pool->size()))];
      Tensor<T> img = detail::image_of(*pool->set, idx);
      img = policy.maybe_apply(img, rng);
      std::copy(img.data(), img.data() + per_image, batch.data() + static_cast<long>(i) * per_image);
      labels[static_cast<size_t>(i)] = label;
    }
    Tensor<T> z = scorer->logits_train(batch);
    Tensor<T> dz({B, 1});
    loss = 0.0;
    for (int i = 0; i < B; ++i) {
      const double zi = static_cast<double>(z.at(i, 0));
      const double y = labels[static_cast<size_t>(i)];
      loss += std::max(zi, 0.0) - zi * y + std::log1p(std::exp(-std::abs(zi)));
      dz.at(i, 0) = static_cast<T>((1.0 / (1.0 + std::exp(-zi)) - y) / B);
    }
    loss /= B;
    if (!std::isfinite(loss)) throw numeric_error("non-finite training loss", "detector");
    scorer->zero_grads();
    scorer->backward(dz);
    for (size_t p = 0; p < params.size(); ++p) adam_step(*params[p], opt[p], adam);
  }

  report.steps = hyper.steps;
  report.final_loss = loss;
  report.train_accuracy = detail::pooled_accuracy(*scorer, train_pools, 0.5);
  if (holdout_pools.empty()) {
    report.holdout_accuracy = report.train_accuracy;
    report.note += std::string(report.note.empty() ? "" : "; ") +
                   "no holdout images (fraction too small), reporting training accuracy";
  } else {
    report.holdout_accuracy = detail::pooled_accuracy(*scorer, holdout_pools, 0.5);
  }
  return ExpertDetector<T>(gen_wm.method, std::move(scorer), policy, std::move(report));
}

// ---------------------------------------------------------------------------
// Gating training: M-way cross-entropy over per-method generation sets.
// Second stage of the two-stage procedure — experts are already frozen and
// are not inputs here, so they cannot be modified.
// ---------------------------------------------------------------------------

template <typename T>
struct MethodImages {
  FtKind method;
  Tensor<T> images;  // (N,C,H,W) generations from that method
};

template <typename T>
inline GatingModel<T> train_gating(std::vector<MethodImages<T>> classes,
                                   const DetectorHyper& hyper, uint64_t seed) {
  hyper.validate();
  if (classes.size() < 2) {
    throw std::invalid_argument(
        "gating requires at least two methods; use a single expert directly for one method");
  }
  // Canonical method order: training is invariant to the order in which the
  // caller lists the classes.
  std::sort(classes.begin(), classes.end(), [](const MethodImages<T>& a, const MethodImages<T>& b) {
    return a.method < b.method;
  });
  const int M = static_cast<int>(classes.size());
  std::vector<FtKind> methods;
  for (int m = 0; m < M; ++m) {
    if (m > 0 && classes[static_cast<size_t>(m - 1)].method == classes[static_cast<size_t>(m)].method) {
      throw std::invalid_argument("duplicate method in gating training sets");
    }
    const Tensor<T>& imgs = classes[static_cast<size_t>(m)].images;
    require(imgs.rank() == 4 && imgs.dim(0) >= 1, "every gating class needs at least one image");
    methods.push_back(classes[static_cast<size_t>(m)].method);
  }
  const std::vector<int> shape{classes[0].images.dim(1), classes[0].images.dim(2),
                               classes[0].images.dim(3)};
  for (const auto& c : classes) {
    require(c.images.dim(1) == shape[0] && c.images.dim(2) == shape[1] &&
                c.images.dim(3) == shape[2],
            "all gating classes must share one resolution");
  }

  DetectorTrainReport report;
  {
    std::string blob;
    for (const auto& c : classes) {
      blob += ft_kind_name(c.method);
      blob += sha256_hex(c.images.data(), static_cast<size_t>(c.images.size()) * sizeof(T));
    }
    report.data_sha256 = sha256_hex(blob);
  }

  Rng split_rng(mix_seed(seed, 0x5917e));
  std::vector<std::vector<long>> train_idx(static_cast<size_t>(M)),
      holdout_idx(static_cast<size_t>(M));
  for (int m = 0; m < M; ++m) {
    detail::split_indices(classes[static_cast<size_t>(m)].images.dim(0), hyper.holdout_fraction,
                          split_rng, train_idx[static_cast<size_t>(m)],
                          holdout_idx[static_cast<size_t>(m)]);
    if (train_idx[static_cast<size_t>(m)].empty()) {
      train_idx[static_cast<size_t>(m)].push_back(holdout_idx[static_cast<size_t>(m)].back());
    }
  }

  auto scorer = std::make_unique<ConvScorer<T>>(shape, M, hyper.widths, mix_seed(seed, 0x9a7e1));
  std::vector<Param<T>*> params = scorer->params();
  std::vector<AdamState<T>> opt(params.size());
  AdamConfig adam;
  adam.lr = hyper.lr;
  adam.weight_decay = hyper.weight_decay;

  Rng rng(mix_seed(seed, 0x9a7c4));
  const int B = hyper.batch_size;
  Tensor<T> batch({B, shape[0], shape[1], shape[2]});
  const long per_image = static_cast<long>(shape[0]) * shape[1] * shape[2];
  std::vector<int> targets(static_cast<size_t>(B));
  double loss = 0.0;
  for (int step = 0; step < hyper.steps; ++step) {
    for (int i = 0; i < B; ++i) {
      const int m = (step * B + i) % M;  // round-robin keeps classes balanced
      const auto& idxs = train_idx[static_cast<size_t>(m)];
      const long idx = idxs[rng.randint(idxs.size())];
      const Tensor<T>& set = classes[static_cast<size_t>(m)].images;
      std::copy(set.data() + idx * per_image, set.data() + (idx + 1) * per_image,
                batch.data() + static_cast<long>(i) * per_image);
      targets[static_cast<size_t>(i)] = m;
    }
    Tensor<T> z = scorer->logits_train(batch);
    Tensor<T> probs = softmax_rows(z);
    Tensor<T> dz = probs;
    loss = 0.0;
    for (int i = 0; i < B; ++i) {
      const int t = targets[static_cast<size_t>(i)];
      loss -= std::log(std::max(static_cast<double>(probs.at(i, t)), 1e-300));
      dz.at(i, t) -= T(1);
    }
    loss /= B;
    for (long i = 0; i < dz.size(); ++i) dz[i] /= static_cast<T>(B);
    if (!std::isfinite(loss)) throw numeric_error("non-finite training loss", "detector");
    scorer->zero_grads();
    scorer->backward(dz);
    for (size_t p = 0; p < params.size(); ++p) adam_step(*params[p], opt[p], adam);
  }

  auto class_accuracy = [&](const std::vector<std::vector<long>>& index_sets) {
    long correct = 0, total = 0;
    for (int m = 0; m < M; ++m) {
      const Tensor<T>& set = classes[static_cast<size_t>(m)].images;
      for (long idx : index_sets[static_cast<size_t>(m)]) {
        Tensor<T> one({1, shape[0], shape[1], shape[2]});
        std::copy(set.data() + idx * per_image, set.data() + (idx + 1) * per_image, one.data());
        const Tensor<T> z = scorer->logits(one);
        int arg = 0;
        for (int k = 1; k < M; ++k) {
          if (z.at(0, k) > z.at(0, arg)) arg = k;
        }
        correct += arg == m;
        total += 1;
      }
    }
    return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
  };
  report.steps = hyper.steps;
  report.final_loss = loss;
  report.train_accuracy = class_accuracy(train_idx);
  bool any_holdout = false;
  for (const auto& h : holdout_idx) any_holdout = any_holdout || !h.empty();
  report.holdout_accuracy = any_holdout ? class_accuracy(holdout_idx) : report.train_accuracy;

  return GatingModel<T>(std::move(methods), std::move(scorer), std::move(report));
}

// ---------------------------------------------------------------------------
// Serialization: detector.json sidecar + one blob per parameter. Only the
// built-in conv scorer is serializable; stub scorers are test-only.
// ---------------------------------------------------------------------------

inline json augmentation_policy_json(const AugmentationPolicy& p) {
  return json{{"jpeg", p.jpeg},
              {"gauss_noise", p.gauss_noise},
              {"gauss_blur", p.gauss_blur},
              {"random_crop", p.random_crop},
              {"jpeg_quality", p.jpeg_quality},
              {"noise_sigma", p.noise_sigma},
              {"blur_sigma", p.blur_sigma},
              {"crop_ratio", p.crop_ratio},
              {"apply_prob", p.apply_prob}};
}

inline AugmentationPolicy augmentation_policy_from_json(const json& j) {
  AugmentationPolicy p;
  try {
    p.jpeg = j.at("jpeg").get<bool>();
    p.gauss_noise = j.at("gauss_noise").get<bool>();
    p.gauss_blur = j.at("gauss_blur").get<bool>();
    p.random_crop = j.at("random_crop").get<bool>();
    p.jpeg_quality = j.at("jpeg_quality").get<std::array<int, 2>>();
    p.noise_sigma = j.at("noise_sigma").get<std::array<double, 2>>();
    p.blur_sigma = j.at("blur_sigma").get<std::array<double, 2>>();
    p.crop_ratio = j.at("crop_ratio").get<std::array<double, 2>>();
    p.apply_prob = j.at("apply_prob").get<double>();
  } catch (const json::exception& e) {
    throw data_error(std::string("augmentation policy: ") + e.what());
  }
  p.validate();
  return p;
}

inline json detector_report_json(const DetectorTrainReport& r) {
  return json{{"train_accuracy", r.train_accuracy},
              {"holdout_accuracy", r.holdout_accuracy},
              {"final_loss", r.final_loss},
              {"steps", r.steps},
              {"imbalance_warning", r.imbalance_warning},
              {"note", r.note},
              {"training_data_sha256", r.data_sha256}};
}

inline DetectorTrainReport detector_report_from_json(const json& j) {
  DetectorTrainReport r;
  try {
    r.train_accuracy = j.at("train_accuracy").get<double>();
    r.holdout_accuracy = j.at("holdout_accuracy").get<double>();
    r.final_loss = j.at("final_loss").get<double>();
    r.steps = j.at("steps").get<long>();
    r.imbalance_warning = j.at("imbalance_warning").get<bool>();
    r.note = j.at("note").get<std::string>();
    r.data_sha256 = j.at("training_data_sha256").get<std::string>();
  } catch (const json::exception& e) {
    throw data_error(std::string("detector report: ") + e.what());
  }
  return r;
}

namespace detail {

inline const ConvScorer<float>& as_conv_scorer(const ScorerBase<float>& s) {
  const auto* cs = dynamic_cast<const ConvScorer<float>*>(&s);
  require(cs != nullptr, "only the built-in conv scorer can be saved");
  return *cs;
}

inline json scorer_arch_json(const ConvScorer<float>& s) {
  return json{{"tag", s.arch_tag()},
              {"input_shape", s.input_shape()},
              {"widths", s.widths()},
              {"out_dim", s.output_dim()}};
}

inline void save_scorer_params(const std::filesystem::path& dir, const ScorerBase<float>& s,
                               json& manifest) {
  manifest["params"] = json::array();
  for (const Param<float>* p : s.params()) {
    const std::string file = param_blob_filename(p->name);
    manifest["params"].push_back(
        {{"name", p->name}, {"file", file}, {"shape", p->value.shape()}});
    write_blob(dir / file, p->value);
  }
}

inline std::unique_ptr<ConvScorer<float>> load_scorer(const std::filesystem::path& dir,
                                                      const json& manifest) {
  std::unique_ptr<ConvScorer<float>> scorer;
  try {
    const json& arch = manifest.at("arch");
    if (arch.at("tag").get<std::string>() != "conv_scorer_v1") {
      throw data_error("unknown scorer architecture tag");
    }
    scorer = std::make_unique<ConvScorer<float>>(arch.at("input_shape").get<std::vector<int>>(),
                                                 arch.at("out_dim").get<int>(),
                                                 arch.at("widths").get<std::vector<int>>(),
                                                 /*seed=*/0);
    std::vector<Param<float>*> params = scorer->params();
    size_t loaded = 0;
    for (const json& entry : manifest.at("params")) {
      const std::string name = entry.at("name").get<std::string>();
      Tensor<float> value = read_blob(dir / entry.at("file").get<std::string>());
      bool matched = false;
      for (Param<float>* p : params) {
        if (p->name != name) continue;
        if (p->value.shape() != value.shape()) {
          throw data_error("parameter shape mismatch for " + name);
        }
        p->value = std::move(value);
        matched = true;
        loaded += 1;
        break;
      }
      if (!matched) throw data_error("unknown parameter in checkpoint: " + name);
    }
    if (loaded != params.size()) throw data_error("checkpoint does not cover all parameters");
    for (const Param<float>* p : params) {
      if (!p->value.all_finite()) {
        throw numeric_error("non-finite parameter value", "detector");
      }
    }
  } catch (const json::exception& e) {
    throw data_error(std::string("detector checkpoint: ") + e.what());
  }
  return scorer;
}

}  // namespace detail

inline void save_expert(const std::filesystem::path& dir, const ExpertDetector<float>& expert) {
  std::filesystem::create_directories(dir);
  const ConvScorer<float>& scorer = detail::as_conv_scorer(expert.scorer());
  json manifest{{"format_version", kCheckpointFormatVersion},
                {"kind", "expert_detector"},
                {"method", ft_kind_name(expert.method())},
                {"threshold", expert.threshold()},
                {"arch", detail::scorer_arch_json(scorer)},
                {"policy", augmentation_policy_json(expert.policy())},
                {"report", detector_report_json(expert.report())}};
  detail::save_scorer_params(dir, scorer, manifest);
  write_text_file(dir / "detector.json", manifest.dump(2));
}

inline ExpertDetector<float> load_expert(const std::filesystem::path& dir) {
  const json manifest = read_json_file(dir / "detector.json");
  try {
    if (manifest.at("format_version").get<int>() != kCheckpointFormatVersion) {
      throw data_error("unsupported detector checkpoint version");
    }
    if (manifest.at("kind").get<std::string>() != "expert_detector") {
      throw data_error("checkpoint is not an expert detector");
    }
    return ExpertDetector<float>(ft_kind_from_name(manifest.at("method").get<std::string>()),
                                 detail::load_scorer(dir, manifest),
                                 augmentation_policy_from_json(manifest.at("policy")),
                                 detector_report_from_json(manifest.at("report")),
                                 manifest.at("threshold").get<double>());
  } catch (const json::exception& e) {
    throw data_error(std::string("detector checkpoint: ") + e.what());
  }
}

inline void save_gating(const std::filesystem::path& dir, const GatingModel<float>& gating) {
  std::filesystem::create_directories(dir);
  json methods = json::array();
  for (FtKind m : gating.methods()) methods.push_back(ft_kind_name(m));
  json manifest{{"format_version", kCheckpointFormatVersion},
                {"kind", "gating_model"},
                {"methods", methods},
                {"report", detector_report_json(gating.report())}};
  if (gating.has_scorer()) {
    const ConvScorer<float>& scorer = detail::as_conv_scorer(gating.scorer());
    manifest["arch"] = detail::scorer_arch_json(scorer);
    detail::save_scorer_params(dir, scorer, manifest);
  }
  write_text_file(dir / "detector.json", manifest.dump(2));
}

inline GatingModel<float> load_gating(const std::filesystem::path& dir) {
  const json manifest = read_json_file(dir / "detector.json");
  try {
    if (manifest.at("format_version").get<int>() != kCheckpointFormatVersion) {
      throw data_error("unsupported detector checkpoint version");
    }
    if (manifest.at("kind").get<std::string>() != "gating_model") {
      throw data_error("checkpoint is not a gating model");
    }
    std::vector<FtKind> methods;
    for (const json& m : manifest.at("methods")) {
      methods.push_back(ft_kind_from_name(m.get<std::string>()));
    }
    std::unique_ptr<ScorerBase<float>> scorer;
    if (manifest.contains("arch")) scorer = detail::load_scorer(dir, manifest);
    return GatingModel<float>(std::move(methods), std::move(scorer),
                              detector_report_from_json(manifest.at("report")));
  } catch (const json::exception& e) {
    throw data_error(std::string("detector checkpoint: ") + e.what());
  }
}

inline void save_moe(const std::filesystem::path& dir, const MoEDetector<float>& moe) {
  std::filesystem::create_directories(dir);
  json experts = json::array();
  for (const ExpertDetector<float>& e : moe.experts()) {
    const std::string sub = std::string("expert_") + ft_kind_name(e.method());
    save_expert(dir / sub, e);
    experts.push_back({{"method", ft_kind_name(e.method())}, {"dir", sub}});
  }
  save_gating(dir / "gating", moe.gating());
  json manifest{{"format_version", kCheckpointFormatVersion},
                {"kind", "moe_detector"},
                {"threshold", moe.threshold()},
                {"experts", experts},
                {"gating_dir", "gating"}};
  write_text_file(dir / "detector.json", manifest.dump(2));
}

inline MoEDetector<float> load_moe(const std::filesystem::path& dir) {
  const json manifest = read_json_file(dir / "detector.json");
  try {
    if (manifest.at("format_version").get<int>() != kCheckpointFormatVersion) {
      throw data_error("unsupported detector checkpoint version");
    }
    if (manifest.at("kind").get<std::string>() != "moe_detector") {
      throw data_error("checkpoint is not a mixture detector");
    }
    std::vector<ExpertDetector<float>> experts;
    for (const json& e : manifest.at("experts")) {
      experts.push_back(load_expert(dir / e.at("dir").get<std::string>()));
    }
    GatingModel<float> gating = load_gating(dir / manifest.at("gating_dir").get<std::string>());
    return MoEDetector<float>(std::move(experts), std::move(gating),
                              manifest.at("threshold").get<double>());
  } catch (const json::exception& e) {
    throw data_error(std::string("detector checkpoint: ") + e.what());
  }
}

}  // namespace tunemark
