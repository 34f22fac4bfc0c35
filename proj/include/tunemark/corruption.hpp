#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "tunemark/common.hpp"
#include "tunemark/image_io.hpp"
#include "tunemark/rng.hpp"
#include "tunemark/tensor.hpp"

namespace tunemark {

enum class CorruptionKind { kJpeg, kGaussNoise, kGaussBlur, kRandomCrop };

inline const char* corruption_name(CorruptionKind k) {
  switch (k) {
    case CorruptionKind::kJpeg: return "jpeg";
    case CorruptionKind::kGaussNoise: return "gauss_noise";
    case CorruptionKind::kGaussBlur: return "gauss_blur";
    case CorruptionKind::kRandomCrop: return "random_crop";
  }
  throw std::invalid_argument("unknown corruption kind");
}

inline CorruptionKind corruption_from_name(const std::string& name) {
  for (CorruptionKind k : {CorruptionKind::kJpeg, CorruptionKind::kGaussNoise,
                           CorruptionKind::kGaussBlur, CorruptionKind::kRandomCrop}) {
    if (name == corruption_name(k)) return k;
  }
  throw std::invalid_argument("unknown corruption kind: " + name);
}

struct Corruption {
  CorruptionKind kind = CorruptionKind::kGaussNoise;
  int jpeg_quality = 75;    // 1..100
  double noise_sigma = 0.05;  // >= 0
  double blur_sigma = 1.0;    // > 0; kernel derived as 2*ceil(2*sigma)+1
  double crop_ratio = 0.8;    // (0, 1]

  void validate() const {
    switch (kind) {
      case CorruptionKind::kJpeg:
        require(jpeg_quality >= 1 && jpeg_quality <= 100, "jpeg quality must be in [1,100]");
        break;
      case CorruptionKind::kGaussNoise:
        require(noise_sigma >= 0.0, "noise sigma must be non-negative");
        break;
      case CorruptionKind::kGaussBlur:
        require(blur_sigma > 0.0, "blur sigma must be positive");
        break;
      case CorruptionKind::kRandomCrop:
        require(crop_ratio > 0.0 && crop_ratio <= 1.0, "crop ratio must be in (0,1]");
        break;
    }
  }
};

namespace detail {

// numpy-style 'reflect' index (edge not repeated): valid for any i when n >= 1.
inline int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i = std::abs(i) % period;
  return i < n ? i : period - i;
}

template <typename T>
inline Tensor<T> gaussian_blur(const Tensor<T>& img, double sigma) {
  const int C = img.dim(0), H = img.dim(1), W = img.dim(2);
  const int radius = std::max(1, static_cast<int>(std::ceil(2.0 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    sum += k[i + radius];
  }
  for (double& v : k) v /= sum;

  Tensor<T> tmp(img.shape()), out(img.shape());
  for (int c = 0; c < C; ++c) {
    for (int y = 0; y < H; ++y) {  // horizontal pass
      const T* row = &img.at(c, y, 0);
      T* trow = &tmp.at(c, y, 0);
      for (int x = 0; x < W; ++x) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) {
          acc += k[i + radius] * static_cast<double>(row[reflect_index(x + i, W)]);
        }
        trow[x] = static_cast<T>(acc);
      }
    }
    for (int x = 0; x < W; ++x) {  // vertical pass
      for (int y = 0; y < H; ++y) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) {
          acc += k[i + radius] * static_cast<double>(tmp.at(c, reflect_index(y + i, H), x));
        }
        out.at(c, y, x) = static_cast<T>(acc);
      }
    }
  }
  return out;
}

// Bilinear resize with corner-aligned sampling, so a same-size resize is an
// exact copy (required by the full-frame crop identity).
template <typename T>
inline Tensor<T> bilinear_resize(const Tensor<T>& img, int out_h, int out_w) {
  const int C = img.dim(0), H = img.dim(1), W = img.dim(2);
  Tensor<T> out({C, out_h, out_w});
  const double sy = out_h > 1 ? static_cast<double>(H - 1) / (out_h - 1) : 0.0;
  const double sx = out_w > 1 ? static_cast<double>(W - 1) / (out_w - 1) : 0.0;
  for (int c = 0; c < C; ++c) {
    for (int y = 0; y < out_h; ++y) {
      const double fy = y * sy;
      const int y0 = std::min(static_cast<int>(fy), H - 1);
      const int y1 = std::min(y0 + 1, H - 1);
      const double wy = fy - y0;
      for (int x = 0; x < out_w; ++x) {
        const double fx = x * sx;
        const int x0 = std::min(static_cast<int>(fx), W - 1);
        const int x1 = std::min(x0 + 1, W - 1);
        const double wx = fx - x0;
        if (wy == 0.0 && wx == 0.0) {
          out.at(c, y, x) = img.at(c, y0, x0);
          continue;
        }
        const double v = (1 - wy) * ((1 - wx) * img.at(c, y0, x0) + wx * img.at(c, y0, x1)) +
                         wy * ((1 - wx) * img.at(c, y1, x0) + wx * img.at(c, y1, x1));
        out.at(c, y, x) = static_cast<T>(v);
      }
    }
  }
  return out;
}

}  // namespace detail

// Applies one corruption to a (C, H, W) image in [0,1]. JPEG and blur are
// deterministic; noise and crop consume the seed.
template <typename T>
inline Tensor<T> corrupt(const Tensor<T>& image, const Corruption& spec, uint64_t seed) {
  spec.validate();
  require(image.rank() == 3, "corrupt expects a single (C,H,W) image");
  const int H = image.dim(1), W = image.dim(2);
  switch (spec.kind) {
    case CorruptionKind::kJpeg: {
      const ImageU8 encoded = jpeg_decode(jpeg_encode(to_u8(image.template cast<float>()),
                                                      spec.jpeg_quality));
      return to_float(encoded).template cast<T>();
    }
    case CorruptionKind::kGaussNoise: {
      if (spec.noise_sigma == 0.0) return image;
      Rng rng(mix_seed(seed, 0x4015e));
      Tensor<T> out = image;
      for (long i = 0; i < out.size(); ++i) {
        out[i] = static_cast<T>(static_cast<double>(out[i]) + spec.noise_sigma * rng.normal());
      }
      clamp01(out);
      return out;
    }
    case CorruptionKind::kGaussBlur:
      return detail::gaussian_blur(image, spec.blur_sigma);
    case CorruptionKind::kRandomCrop: {
      const int ch = std::max(1, static_cast<int>(std::lround(spec.crop_ratio * H)));
      const int cw = std::max(1, static_cast<int>(std::lround(spec.crop_ratio * W)));
      if (ch == H && cw == W) return image;  // full-frame crop is the identity
      Rng rng(mix_seed(seed, 0xc209));
      const int y0 = static_cast<int>(rng.randint(H - ch + 1));
      const int x0 = static_cast<int>(rng.randint(W - cw + 1));
      Tensor<T> crop({image.dim(0), ch, cw});
      for (int c = 0; c < image.dim(0); ++c) {
        for (int y = 0; y < ch; ++y) {
          for (int x = 0; x < cw; ++x) crop.at(c, y, x) = image.at(c, y0 + y, x0 + x);
        }
      }
      return detail::bilinear_resize(crop, H, W);
    }
  }
  throw std::invalid_argument("unknown corruption kind");
}

// ---------------------------------------------------------------------------
// Stochastic training-time corruption policy
// ---------------------------------------------------------------------------

struct AugmentationPolicy {
  bool jpeg = true;
  bool gauss_noise = true;
  bool gauss_blur = true;
  bool random_crop = true;
  std::array<int, 2> jpeg_quality{40, 90};
  std::array<double, 2> noise_sigma{0.01, 0.08};
  std::array<double, 2> blur_sigma{0.4, 1.2};
  std::array<double, 2> crop_ratio{0.7, 0.95};
  double apply_prob = 0.5;

  static AugmentationPolicy none() {
    AugmentationPolicy p;
    p.jpeg = p.gauss_noise = p.gauss_blur = p.random_crop = false;
    p.apply_prob = 0.0;
    return p;
  }

  bool any_enabled() const { return jpeg || gauss_noise || gauss_blur || random_crop; }

  void validate() const {
    require(apply_prob >= 0.0 && apply_prob <= 1.0, "apply_prob must be in [0,1]");
    if (jpeg) {
      require(jpeg_quality[0] >= 1 && jpeg_quality[1] <= 100 &&
                  jpeg_quality[0] <= jpeg_quality[1],
              "jpeg quality range must be a nonempty subrange of [1,100]");
    }
    if (gauss_noise) {
      require(noise_sigma[0] >= 0.0 && noise_sigma[0] <= noise_sigma[1],
              "noise sigma range must be nonempty and non-negative");
    }
    if (gauss_blur) {
      require(blur_sigma[0] > 0.0 && blur_sigma[0] <= blur_sigma[1],
              "blur sigma range must be nonempty and positive");
    }
    if (random_crop) {
      require(crop_ratio[0] > 0.0 && crop_ratio[1] <= 1.0 && crop_ratio[0] <= crop_ratio[1],
              "crop ratio range must be a nonempty subrange of (0,1]");
    }
  }

  std::vector<CorruptionKind> enabled() const {
    std::vector<CorruptionKind> out;
    if (jpeg) out.push_back(CorruptionKind::kJpeg);
    if (gauss_noise) out.push_back(CorruptionKind::kGaussNoise);
    if (gauss_blur) out.push_back(CorruptionKind::kGaussBlur);
    if (random_crop) out.push_back(CorruptionKind::kRandomCrop);
    return out;
  }

  // With probability apply_prob: pick an enabled corruption uniformly,
  // sample its parameter from the configured range, and apply it.
  template <typename T>
  Tensor<T> maybe_apply(const Tensor<T>& image, Rng& rng) const {
    const auto kinds = enabled();
    if (kinds.empty() || rng.uniform() >= apply_prob) return image;
    Corruption spec;
    spec.kind = kinds[rng.randint(kinds.size())];
    switch (spec.kind) {
      case CorruptionKind::kJpeg:
        spec.jpeg_quality = jpeg_quality[0] +
                            static_cast<int>(rng.randint(jpeg_quality[1] - jpeg_quality[0] + 1));
        break;
      case CorruptionKind::kGaussNoise:
        spec.noise_sigma = rng.uniform(noise_sigma[0], noise_sigma[1]);
        break;
      case CorruptionKind::kGaussBlur:
        spec.blur_sigma = rng.uniform(blur_sigma[0], blur_sigma[1]);
        break;
      case CorruptionKind::kRandomCrop:
        spec.crop_ratio = rng.uniform(crop_ratio[0], crop_ratio[1]);
        break;
    }
    return corrupt(image, spec, rng.next_u64());
  }
};

}  // namespace tunemark
