#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "tunemark/common.hpp"
#include "tunemark/rng.hpp"
#include "tunemark/tensor.hpp"

namespace tunemark {

template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  void init(std::string n, Tensor<T> v) {
    name = std::move(n);
    grad = Tensor<T>::zeros(v.shape());
    value = std::move(v);
  }
  void zero_grad() { grad.fill(T(0)); }
};

template <typename T>
inline Tensor<T> kaiming_normal(const std::vector<int>& shape, long fan_in, Rng& rng) {
  Tensor<T> t(shape);
  const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (long i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.normal() * std_dev);
  return t;
}

// ---------------------------------------------------------------------------
// Elementwise activations
// ---------------------------------------------------------------------------

template <typename T>
inline T sigmoid(T x) {
  return static_cast<T>(1.0 / (1.0 + std::exp(-static_cast<double>(x))));
}

template <typename T>
inline Tensor<T> silu_forward(const Tensor<T>& x) {
  Tensor<T> y = x;
  for (long i = 0; i < y.size(); ++i) y[i] = x[i] * sigmoid(x[i]);
  return y;
}

template <typename T>
inline Tensor<T> silu_backward(const Tensor<T>& x, const Tensor<T>& dy) {
  Tensor<T> dx = dy;
  for (long i = 0; i < dx.size(); ++i) {
    const T s = sigmoid(x[i]);
    dx[i] = dy[i] * (s * (T(1) + x[i] * (T(1) - s)));
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Low-rank adapter attached to a weight matrix (a conv weight is treated as
// its (out, in*k*k) matrix view). Effective weight = base + scale·up·down;
// the base tensor itself is never written while the adapter trains.
// ---------------------------------------------------------------------------

template <typename T>
struct LoraAdapter {
  Param<T> down;  // (rank, in)
  Param<T> up;    // (out, rank)
  double scale = 1.0;

  void init(const std::string& name, int out_dim, int in_dim, int rank, double scale_in,
            Rng& rng) {
    require(rank >= 1 && rank <= std::min(out_dim, in_dim),
            "adapter rank must be in [1, min matrix dimension]");
    scale = scale_in;
    down.init(name + ".down", kaiming_normal<T>({rank, in_dim}, in_dim, rng));
    up.init(name + ".up", Tensor<T>::zeros({out_dim, rank}));  // zero start: eff == base
  }

  int rank() const { return down.value.dim(0); }
  long added_values() const { return down.value.size() + up.value.size(); }

  // weff (same element count as the base weight, viewed (out, in)) += scale·up·down
  void add_composition(Tensor<T>& weff) const {
    const int out = up.value.dim(0), r = up.value.dim(1), in = down.value.dim(1);
    const T s = static_cast<T>(scale);
    for (int o = 0; o < out; ++o) {
      T* wrow = weff.data() + static_cast<long>(o) * in;
      for (int k = 0; k < r; ++k) {
        const T u = s * up.value.at(o, k);
        if (u == T(0)) continue;
        const T* drow = &down.value.at(k, 0);
        for (int i = 0; i < in; ++i) wrow[i] += u * drow[i];
      }
    }
  }

  // Chain the effective-weight gradient into the factor gradients.
  void accumulate_grads(const Tensor<T>& dweff) {
    const int out = up.value.dim(0), r = up.value.dim(1), in = down.value.dim(1);
    const T s = static_cast<T>(scale);
    for (int o = 0; o < out; ++o) {
      const T* grow = dweff.data() + static_cast<long>(o) * in;
      for (int k = 0; k < r; ++k) {
        const T* drow = &down.value.at(k, 0);
        T acc = T(0);
        for (int i = 0; i < in; ++i) acc += grow[i] * drow[i];
        up.grad.at(o, k) += s * acc;
      }
    }
    for (int k = 0; k < r; ++k) {
      T* dgrow = &down.grad.at(k, 0);
      for (int o = 0; o < out; ++o) {
        const T u = s * up.value.at(o, k);
        if (u == T(0)) continue;
        const T* grow = dweff.data() + static_cast<long>(o) * in;
        for (int i = 0; i < in; ++i) dgrow[i] += u * grow[i];
      }
    }
  }
};

// ---------------------------------------------------------------------------
// 3x3 convolution, zero padding 1, stride 1 or 2
// ---------------------------------------------------------------------------

inline int conv_out_dim(int in, int stride) { return (in + 2 - 3) / stride + 1; }

// Stateless forward pass; Conv2d wraps it with caching for backward.
template <typename T>
inline Tensor<T> conv2d_fwd(const Tensor<T>& in, const Tensor<T>& w, const Tensor<T>& b,
                            int stride) {
  const int B = in.dim(0), Cin = in.dim(1), H = in.dim(2), W = in.dim(3);
  const int Cout = w.dim(0);
  const int Ho = conv_out_dim(H, stride), Wo = conv_out_dim(W, stride);
  Tensor<T> out({B, Cout, Ho, Wo});
  const T* wp = w.data();
  for (int bi = 0; bi < B; ++bi) {
    for (int co = 0; co < Cout; ++co) {
      T* outp = &out.at(bi, co, 0, 0);
      const T bias = b[co];
      for (long i = 0; i < static_cast<long>(Ho) * Wo; ++i) outp[i] = bias;
      for (int ci = 0; ci < Cin; ++ci) {
        const T* inp = &in.at(bi, ci, 0, 0);
        for (int ky = 0; ky < 3; ++ky) {
          for (int kx = 0; kx < 3; ++kx) {
            const T wv = wp[((static_cast<long>(co) * Cin + ci) * 3 + ky) * 3 + kx];
            if (wv == T(0)) continue;
            for (int y = 0; y < Ho; ++y) {
              const int iy = y * stride + ky - 1;
              if (iy < 0 || iy >= H) continue;
              const T* irow = inp + static_cast<long>(iy) * W;
              T* orow = outp + static_cast<long>(y) * Wo;
              // x range with ix = x*stride + kx - 1 inside [0, W)
              int x0 = 0;
              while (x0 < Wo && x0 * stride + kx - 1 < 0) ++x0;
              int x1 = Wo;
              while (x1 > x0 && (x1 - 1) * stride + kx - 1 >= W) --x1;
              if (stride == 1) {
                const T* ir = irow + kx - 1;
                for (int x = x0; x < x1; ++x) orow[x] += wv * ir[x];
              } else {
                for (int x = x0; x < x1; ++x) orow[x] += wv * irow[x * stride + kx - 1];
              }
            }
          }
        }
      }
    }
  }
  return out;
}

template <typename T>
struct Conv2d {
  Param<T> w;  // (Cout, Cin, 3, 3)
  Param<T> b;  // (Cout)
  int stride = 1;
  LoraAdapter<T>* adapter = nullptr;  // non-owning; see CondUNet
  Tensor<T> cached_in;
  Tensor<T> cached_weff;

  void init(const std::string& name, int cin, int cout, int stride_in, Rng& rng) {
    stride = stride_in;
    w.init(name + ".w", kaiming_normal<T>({cout, cin, 3, 3}, static_cast<long>(cin) * 9, rng));
    b.init(name + ".b", Tensor<T>::zeros({cout}));
  }

  Tensor<T> forward(const Tensor<T>& in) {
    cached_in = in;
    if (adapter != nullptr) {
      cached_weff = w.value;
      adapter->add_composition(cached_weff);
      return conv2d_fwd(in, cached_weff, b.value, stride);
    }
    return conv2d_fwd(in, w.value, b.value, stride);
  }

  // Gradients of the cached forward. din/dw/db accumulation is skipped for
  // null outputs, which saves a large share of the work when only the
  // input gradient (PGD) or only adapter gradients (LoRA) are needed.
  Tensor<T> backward(const Tensor<T>& dout, bool need_din, bool need_wgrad) {
    const Tensor<T>& in = cached_in;
    const int B = in.dim(0), Cin = in.dim(1), H = in.dim(2), W = in.dim(3);
    const int Cout = w.value.dim(0);
    const int Ho = dout.dim(2), Wo = dout.dim(3);
    Tensor<T> din;
    if (need_din) din = Tensor<T>::zeros(in.shape());
    const T* wp = adapter != nullptr ? cached_weff.data() : w.value.data();
    Tensor<T> dweff;
    T* dwp = w.grad.data();
    if (adapter != nullptr && need_wgrad) {
      dweff = Tensor<T>::zeros(w.value.shape());
      dwp = dweff.data();
    }
    for (int bi = 0; bi < B; ++bi) {
      for (int co = 0; co < Cout; ++co) {
        const T* doutp = &dout.at(bi, co, 0, 0);
        if (need_wgrad) {
          T acc = T(0);
          for (long i = 0; i < static_cast<long>(Ho) * Wo; ++i) acc += doutp[i];
          b.grad[co] += acc;
        }
        for (int ci = 0; ci < Cin; ++ci) {
          const T* inp = &in.at(bi, ci, 0, 0);
          T* dinp = need_din ? &din.at(bi, ci, 0, 0) : nullptr;
          for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
              const long widx = ((static_cast<long>(co) * Cin + ci) * 3 + ky) * 3 + kx;
              const T wv = wp[widx];
              T wacc = T(0);
              for (int y = 0; y < Ho; ++y) {
                const int iy = y * stride + ky - 1;
                if (iy < 0 || iy >= H) continue;
                const T* drow = doutp + static_cast<long>(y) * Wo;
                int x0 = 0;
                while (x0 < Wo && x0 * stride + kx - 1 < 0) ++x0;
                int x1 = Wo;
                while (x1 > x0 && (x1 - 1) * stride + kx - 1 >= W) --x1;
                if (need_wgrad) {
                  const T* irow = inp + static_cast<long>(iy) * W + (kx - 1);
                  if (stride == 1) {
                    for (int x = x0; x < x1; ++x) wacc += drow[x] * irow[x];
                  } else {
                    for (int x = x0; x < x1; ++x) wacc += drow[x] * inp[static_cast<long>(iy) * W + x * stride + kx - 1];
                  }
                }
                if (need_din) {
                  T* dirow = dinp + static_cast<long>(iy) * W + (kx - 1);
                  if (stride == 1) {
                    for (int x = x0; x < x1; ++x) dirow[x] += wv * drow[x];
                  } else {
                    for (int x = x0; x < x1; ++x) dinp[static_cast<long>(iy) * W + x * stride + kx - 1] += wv * drow[x];
                  }
                }
              }
              if (need_wgrad) dwp[widx] += wacc;
            }
          }
        }
      }
    }
    if (adapter != nullptr && need_wgrad) {
      for (long i = 0; i < dweff.size(); ++i) w.grad[i] += dweff[i];
      adapter->accumulate_grads(dweff);
    }
    return din;
  }
};

// ---------------------------------------------------------------------------
// Fully connected layer on (B, D) inputs
// ---------------------------------------------------------------------------

// Stateless (B, D) x (O, D)^T + b forward; Linear wraps it with caching.
template <typename T>
inline Tensor<T> linear_fwd(const Tensor<T>& in, const Tensor<T>& w, const Tensor<T>& b) {
  const int B = in.dim(0), D = in.dim(1), O = w.dim(0);
  Tensor<T> out({B, O});
  for (int bi = 0; bi < B; ++bi) {
    const T* ip = &in.at(bi, 0);
    for (int o = 0; o < O; ++o) {
      const T* wp = &w.at(o, 0);
      T acc = b[o];
      for (int d = 0; d < D; ++d) acc += wp[d] * ip[d];
      out.at(bi, o) = acc;
    }
  }
  return out;
}

template <typename T>
struct Linear {
  Param<T> w;  // (Out, In)
  Param<T> b;  // (Out)
  LoraAdapter<T>* adapter = nullptr;  // non-owning; see CondUNet
  Tensor<T> cached_in;
  Tensor<T> cached_weff;

  void init(const std::string& name, int in, int out, Rng& rng) {
    w.init(name + ".w", kaiming_normal<T>({out, in}, in, rng));
    b.init(name + ".b", Tensor<T>::zeros({out}));
  }

  Tensor<T> forward(const Tensor<T>& in) {
    cached_in = in;
    if (adapter != nullptr) {
      cached_weff = w.value;
      adapter->add_composition(cached_weff);
      return linear_fwd(in, cached_weff, b.value);
    }
    return linear_fwd(in, w.value, b.value);
  }

  Tensor<T> backward(const Tensor<T>& dout, bool need_din, bool need_wgrad) {
    const int B = cached_in.dim(0), D = cached_in.dim(1), O = w.value.dim(0);
    Tensor<T> din;
    if (need_din) din = Tensor<T>::zeros(cached_in.shape());
    const T* wbase = adapter != nullptr ? cached_weff.data() : w.value.data();
    Tensor<T> dweff;
    T* dwbase = w.grad.data();
    if (adapter != nullptr && need_wgrad) {
      dweff = Tensor<T>::zeros(w.value.shape());
      dwbase = dweff.data();
    }
    for (int bi = 0; bi < B; ++bi) {
      const T* ip = &cached_in.at(bi, 0);
      const T* dp = &dout.at(bi, 0);
      for (int o = 0; o < O; ++o) {
        const T d = dp[o];
        if (need_wgrad) {
          b.grad[o] += d;
          T* wg = dwbase + static_cast<long>(o) * D;
          for (int k = 0; k < D; ++k) wg[k] += d * ip[k];
        }
        if (need_din) {
          const T* wp = wbase + static_cast<long>(o) * D;
          T* dip = &din.at(bi, 0);
          for (int k = 0; k < D; ++k) dip[k] += d * wp[k];
        }
      }
    }
    if (adapter != nullptr && need_wgrad) {
      for (long i = 0; i < dweff.size(); ++i) w.grad[i] += dweff[i];
      adapter->accumulate_grads(dweff);
    }
    return din;
  }
};

// ---------------------------------------------------------------------------
// Nearest-neighbour 2x upsample
// ---------------------------------------------------------------------------

template <typename T>
inline Tensor<T> upsample2x_forward(const Tensor<T>& in) {
  const int B = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3);
  Tensor<T> out({B, C, 2 * H, 2 * W});
  for (int b = 0; b < B; ++b) {
    for (int c = 0; c < C; ++c) {
      for (int y = 0; y < H; ++y) {
        const T* irow = &in.at(b, c, y, 0);
        T* o0 = &out.at(b, c, 2 * y, 0);
        T* o1 = &out.at(b, c, 2 * y + 1, 0);
        for (int x = 0; x < W; ++x) {
          o0[2 * x] = o0[2 * x + 1] = irow[x];
          o1[2 * x] = o1[2 * x + 1] = irow[x];
        }
      }
    }
  }
  return out;
}

template <typename T>
inline Tensor<T> upsample2x_backward(const Tensor<T>& dout) {
  const int B = dout.dim(0), C = dout.dim(1), H = dout.dim(2) / 2, W = dout.dim(3) / 2;
  Tensor<T> din({B, C, H, W});
  for (int b = 0; b < B; ++b) {
    for (int c = 0; c < C; ++c) {
      for (int y = 0; y < H; ++y) {
        const T* d0 = &dout.at(b, c, 2 * y, 0);
        const T* d1 = &dout.at(b, c, 2 * y + 1, 0);
        T* drow = &din.at(b, c, y, 0);
        for (int x = 0; x < W; ++x) {
          drow[x] = d0[2 * x] + d0[2 * x + 1] + d1[2 * x] + d1[2 * x + 1];
        }
      }
    }
  }
  return din;
}

// ---------------------------------------------------------------------------
// Global average pool (B,C,H,W) -> (B,C)
// ---------------------------------------------------------------------------

template <typename T>
inline Tensor<T> gap_forward(const Tensor<T>& in) {
  const int B = in.dim(0), C = in.dim(1);
  const long plane = static_cast<long>(in.dim(2)) * in.dim(3);
  Tensor<T> out({B, C});
  for (int b = 0; b < B; ++b) {
    for (int c = 0; c < C; ++c) {
      const T* p = &in.at(b, c, 0, 0);
      T acc = T(0);
      for (long i = 0; i < plane; ++i) acc += p[i];
      out.at(b, c) = acc / static_cast<T>(plane);
    }
  }
  return out;
}

template <typename T>
inline Tensor<T> gap_backward(const Tensor<T>& dout, const std::vector<int>& in_shape) {
  Tensor<T> din(in_shape);
  const int B = in_shape[0], C = in_shape[1];
  const long plane = static_cast<long>(in_shape[2]) * in_shape[3];
  for (int b = 0; b < B; ++b) {
    for (int c = 0; c < C; ++c) {
      const T g = dout.at(b, c) / static_cast<T>(plane);
      T* p = &din.at(b, c, 0, 0);
      for (long i = 0; i < plane; ++i) p[i] = g;
    }
  }
  return din;
}

// ---------------------------------------------------------------------------
// Softmax over the last axis of (B, M)
// ---------------------------------------------------------------------------

template <typename T>
inline Tensor<T> softmax_rows(const Tensor<T>& logits) {
  Tensor<T> out = logits;
  const int B = logits.dim(0), M = logits.dim(1);
  for (int b = 0; b < B; ++b) {
    T* row = &out.at(b, 0);
    T mx = row[0];
    for (int m = 1; m < M; ++m) mx = std::max(mx, row[m]);
    double sum = 0.0;
    for (int m = 0; m < M; ++m) {
      row[m] = static_cast<T>(std::exp(static_cast<double>(row[m] - mx)));
      sum += static_cast<double>(row[m]);
    }
    for (int m = 0; m < M; ++m) row[m] = static_cast<T>(static_cast<double>(row[m]) / sum);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Optimizers. Adam moments are kept per parameter; a row window restricts
// the update to rows [row_begin, row_end) of a 2-D parameter (used when a
// single embedding row is the only trainable weight). Weight decay is
// decoupled, applied only where the window allows updates.
// ---------------------------------------------------------------------------

template <typename T>
struct AdamState {
  Tensor<T> m, v;
  long step = 0;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

template <typename T>
inline void adam_step(Param<T>& p, AdamState<T>& st, const AdamConfig& cfg,
                      int row_begin = -1, int row_end = -1) {
  if (st.m.size() == 0) {
    st.m = Tensor<T>::zeros(p.value.shape());
    st.v = Tensor<T>::zeros(p.value.shape());
  }
  st.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
  long lo = 0, hi = p.value.size();
  if (row_begin >= 0) {
    require(p.value.rank() == 2, "row-windowed update needs a 2-D parameter");
    const long cols = p.value.dim(1);
    lo = static_cast<long>(row_begin) * cols;
    hi = static_cast<long>(row_end) * cols;
  }
  for (long i = lo; i < hi; ++i) {
    const double g = static_cast<double>(p.grad[i]);
    const double m = cfg.beta1 * static_cast<double>(st.m[i]) + (1.0 - cfg.beta1) * g;
    const double v = cfg.beta2 * static_cast<double>(st.v[i]) + (1.0 - cfg.beta2) * g * g;
    st.m[i] = static_cast<T>(m);
    st.v[i] = static_cast<T>(v);
    double upd = cfg.lr * (m / bc1) / (std::sqrt(v / bc2) + cfg.eps);
    upd += cfg.lr * cfg.weight_decay * static_cast<double>(p.value[i]);
    p.value[i] = static_cast<T>(static_cast<double>(p.value[i]) - upd);
  }
}

template <typename T>
inline void sgd_step(Param<T>& p, double lr) {
  for (long i = 0; i < p.value.size(); ++i) {
    p.value[i] = static_cast<T>(static_cast<double>(p.value[i]) - lr * static_cast<double>(p.grad[i]));
  }
}

}  // namespace tunemark
