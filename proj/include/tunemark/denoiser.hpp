#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "tunemark/nn.hpp"
#include "tunemark/rng.hpp"
#include "tunemark/tensor.hpp"

namespace tunemark {

// Noise-prediction network interface. Production code uses CondUNet below;
// tests substitute tiny stubs with hand-computable gradients.
template <typename T>
class DenoiserBase {
 public:
  virtual ~DenoiserBase() = default;

  virtual std::unique_ptr<DenoiserBase<T>> clone() const = 0;
  virtual std::string arch_tag() const = 0;
  virtual int cond_dim() const = 0;

  // xt: (B, C, H, W); t: one integer timestep per image; cond: (B, cond_dim).
  // Returns the noise prediction, same shape as xt. Caches for backward.
  virtual Tensor<T> forward(const Tensor<T>& xt, const std::vector<int>& t,
                            const Tensor<T>& cond) = 0;

  // dpred: upstream gradient w.r.t. the prediction from the latest forward.
  // Accumulates parameter gradients when need_param_grads. Returns the
  // gradient w.r.t. xt when need_input_grad (empty tensor otherwise).
  // When dcond is non-null it receives the gradient w.r.t. cond.
  virtual Tensor<T> backward(const Tensor<T>& dpred, bool need_input_grad,
                             bool need_param_grads, Tensor<T>* dcond) = 0;

  virtual std::vector<Param<T>*> params() = 0;

  void zero_grads() {
    for (auto* p : params()) p->zero_grad();
  }
};

template <typename T>
inline void fill_time_embedding(int t, T* out, int dim) {
  const int half = dim / 2;
  for (int k = 0; k < half; ++k) {
    const double freq = std::exp(-std::log(10000.0) * k / std::max(1, half - 1));
    out[k] = static_cast<T>(std::sin(t * freq));
    out[half + k] = static_cast<T>(std::cos(t * freq));
  }
}

// Conditional encoder-decoder denoiser for 32x32 RGB: two stride-2 encode
// blocks, two nearest-upsample decode blocks with additive skips, and a
// per-block learned bias computed from [sinusoidal-time ‖ condition].
template <typename T>
class CondUNet : public DenoiserBase<T> {
 public:
  static constexpr int kTimeDim = 16;

  CondUNet(int cond_dim, int width, uint64_t seed) : cond_dim_(cond_dim), width_(width) {
    require(cond_dim > 0 && width > 0, "cond_dim and width must be positive");
    Rng rng(seed);
    const int f = width, f2 = 2 * width, e = kTimeDim + cond_dim;
    enc1_.init("denoiser.enc1", 3, f, 1, e, rng);
    enc2_.init("denoiser.enc2", f, f2, 2, e, rng);
    enc3_.init("denoiser.enc3", f2, f2, 2, e, rng);
    mid_.init("denoiser.mid", f2, f2, 1, e, rng);
    dec1_.init("denoiser.dec1", f2, f, 1, e, rng);
    dec2_.init("denoiser.dec2", f, f, 1, e, rng);
    head_.init("denoiser.head", f, 3, 1, rng);
    // Start near the identity-free regime: a zeroed head makes the initial
    // prediction 0 so early losses are O(1) regardless of seed.
    head_.w.value.fill(T(0));
  }

  CondUNet(const CondUNet& o)
      : cond_dim_(o.cond_dim_),
        width_(o.width_),
        enc1_(o.enc1_),
        enc2_(o.enc2_),
        enc3_(o.enc3_),
        mid_(o.mid_),
        dec1_(o.dec1_),
        dec2_(o.dec2_),
        head_(o.head_),
        emb_(o.emb_),
        lora_(o.lora_) {
    wire_lora();
  }
  CondUNet& operator=(const CondUNet& o) {
    if (this != &o) {
      CondUNet tmp(o);
      *this = std::move(tmp);
    }
    return *this;
  }
  CondUNet(CondUNet&& o) noexcept
      : cond_dim_(o.cond_dim_),
        width_(o.width_),
        enc1_(std::move(o.enc1_)),
        enc2_(std::move(o.enc2_)),
        enc3_(std::move(o.enc3_)),
        mid_(std::move(o.mid_)),
        dec1_(std::move(o.dec1_)),
        dec2_(std::move(o.dec2_)),
        head_(std::move(o.head_)),
        emb_(std::move(o.emb_)),
        lora_(std::move(o.lora_)) {
    wire_lora();
  }
  CondUNet& operator=(CondUNet&& o) noexcept {
    if (this != &o) {
      cond_dim_ = o.cond_dim_;
      width_ = o.width_;
      enc1_ = std::move(o.enc1_);
      enc2_ = std::move(o.enc2_);
      enc3_ = std::move(o.enc3_);
      mid_ = std::move(o.mid_);
      dec1_ = std::move(o.dec1_);
      dec2_ = std::move(o.dec2_);
      head_ = std::move(o.head_);
      emb_ = std::move(o.emb_);
      lora_ = std::move(o.lora_);
      wire_lora();
    }
    return *this;
  }

  std::unique_ptr<DenoiserBase<T>> clone() const override {
    return std::make_unique<CondUNet<T>>(*this);
  }
  std::string arch_tag() const override { return "cond_unet_v1"; }
  int cond_dim() const override { return cond_dim_; }
  int width() const { return width_; }

  // ---- low-rank adapters on the two deepest blocks' weight matrices ----

  void attach_lora(int rank, double scale, uint64_t seed) {
    require(!lora_.attached, "adapters already attached");
    Rng rng(mix_seed(seed, 0x10a)); // adapter init stream
    const int f2 = 2 * width_, e = kTimeDim + cond_dim_;
    lora_.enc3_conv.init("lora.enc3.conv", f2, f2 * 9, rank, scale, rng);
    lora_.enc3_emb.init("lora.enc3.emb", f2, e, rank, scale, rng);
    lora_.mid_conv.init("lora.mid.conv", f2, f2 * 9, rank, scale, rng);
    lora_.mid_emb.init("lora.mid.emb", f2, e, rank, scale, rng);
    lora_.attached = true;
    wire_lora();
  }

  bool lora_attached() const { return lora_.attached; }
  int lora_rank() const {
    require(lora_.attached, "no adapters attached");
    return lora_.enc3_conv.rank();
  }
  double lora_scale() const {
    require(lora_.attached, "no adapters attached");
    return lora_.enc3_conv.scale;
  }

  std::vector<Param<T>*> lora_params() {
    require(lora_.attached, "no adapters attached");
    return {&lora_.enc3_conv.down, &lora_.enc3_conv.up, &lora_.enc3_emb.down,
            &lora_.enc3_emb.up,    &lora_.mid_conv.down, &lora_.mid_conv.up,
            &lora_.mid_emb.down,   &lora_.mid_emb.up};
  }

  // Folds the adapter compositions into the base weights and detaches,
  // leaving a plain network with identical input-output behaviour.
  void merge_lora() {
    require(lora_.attached, "no adapters attached");
    lora_.enc3_conv.add_composition(enc3_.conv.w.value);
    lora_.enc3_emb.add_composition(enc3_.emb.w.value);
    lora_.mid_conv.add_composition(mid_.conv.w.value);
    lora_.mid_emb.add_composition(mid_.emb.w.value);
    lora_ = LoraSlots{};
    wire_lora();
  }

  Tensor<T> forward(const Tensor<T>& xt, const std::vector<int>& t,
                    const Tensor<T>& cond) override {
    require(xt.rank() == 4 && xt.dim(1) == 3, "denoiser expects (B,3,H,W) input");
    require(static_cast<int>(t.size()) == xt.dim(0), "one timestep per image");
    require(cond.rank() == 2 && cond.dim(0) == xt.dim(0) && cond.dim(1) == cond_dim_,
            "condition shape mismatch");
    const int B = xt.dim(0);
    emb_ = Tensor<T>({B, kTimeDim + cond_dim_});
    for (int b = 0; b < B; ++b) {
      fill_time_embedding(t[b], &emb_.at(b, 0), kTimeDim);
      for (int k = 0; k < cond_dim_; ++k) emb_.at(b, kTimeDim + k) = cond.at(b, k);
    }
    Tensor<T> e1 = enc1_.forward(xt, emb_);
    Tensor<T> e2 = enc2_.forward(e1, emb_);
    Tensor<T> e3 = enc3_.forward(e2, emb_);
    Tensor<T> m = mid_.forward(e3, emb_);
    Tensor<T> u1 = upsample2x_forward(m);
    check_same_shape(u1, e2, "skip connection (deep)");
    Tensor<T> d1 = dec1_.forward(u1 + e2, emb_);
    Tensor<T> u2 = upsample2x_forward(d1);
    check_same_shape(u2, e1, "skip connection (shallow)");
    Tensor<T> d2 = dec2_.forward(u2 + e1, emb_);
    return head_.forward(d2);
  }

  Tensor<T> backward(const Tensor<T>& dpred, bool need_input_grad,
                     bool need_param_grads, Tensor<T>* dcond) override {
    const bool need_demb = dcond != nullptr;
    Tensor<T> demb;
    if (need_demb) demb = Tensor<T>::zeros(emb_.shape());
    Tensor<T> dd2 = head_.backward(dpred, true, need_param_grads);
    Tensor<T> ds2 = dec2_.backward(dd2, true, need_param_grads, need_demb ? &demb : nullptr);
    Tensor<T> dd1 = upsample2x_backward(ds2);
    Tensor<T> ds1 = dec1_.backward(dd1, true, need_param_grads, need_demb ? &demb : nullptr);
    Tensor<T> dm = upsample2x_backward(ds1);
    Tensor<T> de3 = mid_.backward(dm, true, need_param_grads, need_demb ? &demb : nullptr);
    Tensor<T> de2 = enc3_.backward(de3, true, need_param_grads, need_demb ? &demb : nullptr);
    de2 = de2 + ds1;  // skip
    Tensor<T> de1 = enc2_.backward(de2, true, need_param_grads, need_demb ? &demb : nullptr);
    de1 = de1 + ds2;  // skip
    Tensor<T> dx = enc1_.backward(de1, need_input_grad, need_param_grads,
                                  need_demb ? &demb : nullptr);
    if (need_demb) {
      const int B = demb.dim(0);
      *dcond = Tensor<T>({B, cond_dim_});
      for (int b = 0; b < B; ++b) {
        for (int k = 0; k < cond_dim_; ++k) dcond->at(b, k) = demb.at(b, kTimeDim + k);
      }
    }
    return dx;
  }

  std::vector<Param<T>*> params() override {
    std::vector<Param<T>*> out;
    for (auto* blk : {&enc1_, &enc2_, &enc3_, &mid_, &dec1_, &dec2_}) blk->collect(out);
    out.push_back(&head_.w);
    out.push_back(&head_.b);
    if (lora_.attached) {
      for (auto* p : lora_params()) out.push_back(p);
    }
    return out;
  }

  // Base (non-adapter) parameters only: the frozen set while adapters train.
  std::vector<Param<T>*> base_params() {
    std::vector<Param<T>*> out;
    for (auto* blk : {&enc1_, &enc2_, &enc3_, &mid_, &dec1_, &dec2_}) blk->collect(out);
    out.push_back(&head_.w);
    out.push_back(&head_.b);
    return out;
  }

 private:
  struct Block {
    Conv2d<T> conv;
    Linear<T> emb;
    Tensor<T> pre;

    void init(const std::string& name, int cin, int cout, int stride, int emb_dim, Rng& rng) {
      conv.init(name, cin, cout, stride, rng);
      emb.init(name + ".emb", emb_dim, cout, rng);
    }
    void collect(std::vector<Param<T>*>& out) {
      out.push_back(&conv.w);
      out.push_back(&conv.b);
      out.push_back(&emb.w);
      out.push_back(&emb.b);
    }
    Tensor<T> forward(const Tensor<T>& in, const Tensor<T>& embv) {
      Tensor<T> h = conv.forward(in);
      Tensor<T> bias = emb.forward(embv);
      const int B = h.dim(0), C = h.dim(1);
      const long plane = static_cast<long>(h.dim(2)) * h.dim(3);
      for (int b = 0; b < B; ++b) {
        for (int c = 0; c < C; ++c) {
          T* p = &h.at(b, c, 0, 0);
          const T bv = bias.at(b, c);
          for (long i = 0; i < plane; ++i) p[i] += bv;
        }
      }
      pre = h;
      return silu_forward(h);
    }
    Tensor<T> backward(const Tensor<T>& dout, bool need_din, bool need_wgrad,
                       Tensor<T>* demb_accum) {
      Tensor<T> dpre = silu_backward(pre, dout);
      if (need_wgrad || demb_accum != nullptr) {
        const int B = dpre.dim(0), C = dpre.dim(1);
        const long plane = static_cast<long>(dpre.dim(2)) * dpre.dim(3);
        Tensor<T> dbias({B, C});
        for (int b = 0; b < B; ++b) {
          for (int c = 0; c < C; ++c) {
            const T* p = &dpre.at(b, c, 0, 0);
            T acc = T(0);
            for (long i = 0; i < plane; ++i) acc += p[i];
            dbias.at(b, c) = acc;
          }
        }
        Tensor<T> demb = emb.backward(dbias, demb_accum != nullptr, need_wgrad);
        if (demb_accum != nullptr) *demb_accum = *demb_accum + demb;
      }
      return conv.backward(dpre, need_din, need_wgrad);
    }
  };

  struct LoraSlots {
    bool attached = false;
    LoraAdapter<T> enc3_conv, enc3_emb, mid_conv, mid_emb;
  };

  // Layer adapter pointers must target this object's own slots (copies would
  // otherwise alias the source object's adapters).
  void wire_lora() {
    enc3_.conv.adapter = lora_.attached ? &lora_.enc3_conv : nullptr;
    enc3_.emb.adapter = lora_.attached ? &lora_.enc3_emb : nullptr;
    mid_.conv.adapter = lora_.attached ? &lora_.mid_conv : nullptr;
    mid_.emb.adapter = lora_.attached ? &lora_.mid_emb : nullptr;
  }

  int cond_dim_;
  int width_;
  Block enc1_, enc2_, enc3_, mid_, dec1_, dec2_;
  Conv2d<T> head_;
  Tensor<T> emb_;
  LoraSlots lora_;
};

}  // namespace tunemark
