#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "tunemark/common.hpp"
#include "tunemark/detector.hpp"
#include "tunemark/rng.hpp"
#include "tunemark/tensor.hpp"

namespace tunemark {

// ---------------------------------------------------------------------------
// Detection rates
// ---------------------------------------------------------------------------

struct DetectionReport {
  double tpr = 0.0;
  double fpr = 0.0;
  double threshold = 0.5;
  std::vector<double> pos_scores;
  std::vector<double> neg_scores;
  long n_pos = 0;
  long n_neg = 0;
};

// A score counts as "detected" when it is >= threshold.
inline DetectionReport compute_tpr_fpr(const std::vector<double>& pos_scores,
                                       const std::vector<double>& neg_scores, double threshold) {
  require(!pos_scores.empty() && !neg_scores.empty(),
          "detection rates need nonempty positive and negative score lists");
  DetectionReport r;
  r.threshold = threshold;
  r.pos_scores = pos_scores;
  r.neg_scores = neg_scores;
  r.n_pos = static_cast<long>(pos_scores.size());
  r.n_neg = static_cast<long>(neg_scores.size());
  long tp = 0, fp = 0;
  for (double s : pos_scores) tp += s >= threshold;
  for (double s : neg_scores) fp += s >= threshold;
  r.tpr = static_cast<double>(tp) / static_cast<double>(r.n_pos);
  r.fpr = static_cast<double>(fp) / static_cast<double>(r.n_neg);
  return r;
}

inline std::vector<DetectionReport> roc_sweep(const std::vector<double>& pos_scores,
                                              const std::vector<double>& neg_scores,
                                              const std::vector<double>& thresholds) {
  require(!thresholds.empty(), "threshold grid must be nonempty");
  std::vector<DetectionReport> out;
  out.reserve(thresholds.size());
  for (double t : thresholds) out.push_back(compute_tpr_fpr(pos_scores, neg_scores, t));
  return out;
}

// Area under the ROC curve by the trapezoid rule, sweeping every distinct
// score as a threshold and closing the curve at (0,0) and (1,1).
inline double roc_auc(const std::vector<double>& pos_scores,
                      const std::vector<double>& neg_scores) {
  require(!pos_scores.empty() && !neg_scores.empty(),
          "AUC needs nonempty positive and negative score lists");
  std::vector<double> grid = pos_scores;
  grid.insert(grid.end(), neg_scores.begin(), neg_scores.end());
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());

  std::vector<std::pair<double, double>> curve;  // (fpr, tpr), fpr ascending
  curve.emplace_back(0.0, 0.0);
  for (size_t i = grid.size(); i-- > 0;) {
    const DetectionReport r = compute_tpr_fpr(pos_scores, neg_scores, grid[i]);
    curve.emplace_back(r.fpr, r.tpr);
  }
  curve.emplace_back(1.0, 1.0);
  double auc = 0.0;
  for (size_t i = 1; i < curve.size(); ++i) {
    auc += 0.5 * (curve[i].first - curve[i - 1].first) * (curve[i].second + curve[i - 1].second);
  }
  return auc;
}

// ---------------------------------------------------------------------------
// Fréchet distance between feature distributions
// ---------------------------------------------------------------------------

struct FidResult {
  double value = 0.0;
  std::string extractor_id;
  long size_a = 0;
  long size_b = 0;
  bool regularized = false;  // +1e-6 diagonal added to singular covariances
};

namespace detail {

// Cyclic Jacobi eigendecomposition of a symmetric matrix (row-major n x n).
// a is destroyed; on return eigvals holds the eigenvalues and v the
// eigenvectors as columns (v[i*n+j] = component i of eigenvector j).
inline void jacobi_eigen(std::vector<double>& a, int n, std::vector<double>& eigvals,
                         std::vector<double>* v) {
  if (v != nullptr) {
    v->assign(static_cast<size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i) (*v)[static_cast<size_t>(i) * n + i] = 1.0;
  }
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (int p = 0; p < n; ++p) {
      for (int q = p + 1; q < n; ++q) off += a[static_cast<size_t>(p) * n + q] * a[static_cast<size_t>(p) * n + q];
    }
    if (off < 1e-24) break;
    for (int p = 0; p < n; ++p) {
      for (int q = p + 1; q < n; ++q) {
        const double apq = a[static_cast<size_t>(p) * n + q];
        if (std::abs(apq) < 1e-300) continue;
        const double app = a[static_cast<size_t>(p) * n + p];
        const double aqq = a[static_cast<size_t>(q) * n + q];
        const double theta = (aqq - app) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (int k = 0; k < n; ++k) {
          const double akp = a[static_cast<size_t>(k) * n + p];
          const double akq = a[static_cast<size_t>(k) * n + q];
          a[static_cast<size_t>(k) * n + p] = c * akp - s * akq;
          a[static_cast<size_t>(k) * n + q] = s * akp + c * akq;
        }
        for (int k = 0; k < n; ++k) {
          const double apk = a[static_cast<size_t>(p) * n + k];
          const double aqk = a[static_cast<size_t>(q) * n + k];
          a[static_cast<size_t>(p) * n + k] = c * apk - s * aqk;
          a[static_cast<size_t>(q) * n + k] = s * apk + c * aqk;
        }
        if (v != nullptr) {
          for (int k = 0; k < n; ++k) {
            const double vkp = (*v)[static_cast<size_t>(k) * n + p];
            const double vkq = (*v)[static_cast<size_t>(k) * n + q];
            (*v)[static_cast<size_t>(k) * n + p] = c * vkp - s * vkq;
            (*v)[static_cast<size_t>(k) * n + q] = s * vkp + c * vkq;
          }
        }
      }
    }
  }
  eigvals.resize(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) eigvals[static_cast<size_t>(i)] = a[static_cast<size_t>(i) * n + i];
}

// Symmetric PSD square root via eigendecomposition. Eigenvalues in
// [-tol, 0) are clipped to zero; anything below -tol is a numeric failure.
inline std::vector<double> sqrtm_psd(std::vector<double> a, int n, double tol = 1e-6) {
  std::vector<double> eigvals, v;
  jacobi_eigen(a, n, eigvals, &v);
  for (double& e : eigvals) {
    if (e < -tol) {
      throw numeric_error("matrix square root of a non-PSD matrix", "metrics");
    }
    e = e > 0.0 ? std::sqrt(e) : 0.0;
  }
  std::vector<double> out(static_cast<size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j <= i; ++j) {
      double acc = 0.0;
      for (int k = 0; k < n; ++k) {
        acc += v[static_cast<size_t>(i) * n + k] * eigvals[static_cast<size_t>(k)] *
               v[static_cast<size_t>(j) * n + k];
      }
      out[static_cast<size_t>(i) * n + j] = acc;
      out[static_cast<size_t>(j) * n + i] = acc;
    }
  }
  return out;
}

struct Moments {
  std::vector<double> mean;
  std::vector<double> cov;  // row-major D x D
};

template <typename T>
inline Moments feature_moments(const Tensor<T>& features) {
  const int n = features.dim(0), d = features.dim(1);
  Moments m;
  m.mean.assign(static_cast<size_t>(d), 0.0);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) m.mean[static_cast<size_t>(j)] += static_cast<double>(features.at(i, j));
  }
  for (double& v : m.mean) v /= n;
  m.cov.assign(static_cast<size_t>(d) * d, 0.0);
  for (int i = 0; i < n; ++i) {
    for (int a = 0; a < d; ++a) {
      const double da = static_cast<double>(features.at(i, a)) - m.mean[static_cast<size_t>(a)];
      for (int b = a; b < d; ++b) {
        const double db = static_cast<double>(features.at(i, b)) - m.mean[static_cast<size_t>(b)];
        m.cov[static_cast<size_t>(a) * d + b] += da * db;
      }
    }
  }
  const double denom = n > 1 ? n - 1 : 1;
  for (int a = 0; a < d; ++a) {
    for (int b = a; b < d; ++b) {
      m.cov[static_cast<size_t>(a) * d + b] /= denom;
      m.cov[static_cast<size_t>(b) * d + a] = m.cov[static_cast<size_t>(a) * d + b];
    }
  }
  return m;
}

inline double min_eigenvalue(std::vector<double> a, int n) {
  std::vector<double> eigvals;
  jacobi_eigen(a, n, eigvals, nullptr);
  return *std::min_element(eigvals.begin(), eigvals.end());
}

}  // namespace detail

// Fréchet distance on pre-extracted (N, D) feature matrices:
//   ||mu_a - mu_b||^2 + tr(Ca + Cb - 2 (Ca Cb)^{1/2})
// The cross term is computed as tr sqrtm(sqrtm(Ca) Cb sqrtm(Ca)), which is
// the same matrix up to similarity but keeps every factor symmetric PSD.
template <typename T>
inline FidResult fid_from_features(const Tensor<T>& features_a, const Tensor<T>& features_b,
                                   const std::string& extractor_id) {
  require(features_a.rank() == 2 && features_b.rank() == 2 &&
              features_a.dim(1) == features_b.dim(1),
          "feature matrices must be (N, D) with matching D");
  require(features_a.dim(0) >= 2 && features_b.dim(0) >= 2,
          "distribution distance needs at least 2 images per set");
  const int d = features_a.dim(1);
  detail::Moments ma = detail::feature_moments(features_a);
  detail::Moments mb = detail::feature_moments(features_b);

  FidResult result;
  result.extractor_id = extractor_id;
  result.size_a = features_a.dim(0);
  result.size_b = features_b.dim(0);

  // Singular covariances (always the case when N <= D) get a small ridge.
  const double min_eig = std::min(detail::min_eigenvalue(ma.cov, d),
                                  detail::min_eigenvalue(mb.cov, d));
  if (min_eig < 1e-10) {
    result.regularized = true;
    for (int i = 0; i < d; ++i) {
      ma.cov[static_cast<size_t>(i) * d + i] += 1e-6;
      mb.cov[static_cast<size_t>(i) * d + i] += 1e-6;
    }
  }

  double mean_term = 0.0, trace_a = 0.0, trace_b = 0.0;
  for (int i = 0; i < d; ++i) {
    const double dm = ma.mean[static_cast<size_t>(i)] - mb.mean[static_cast<size_t>(i)];
    mean_term += dm * dm;
    trace_a += ma.cov[static_cast<size_t>(i) * d + i];
    trace_b += mb.cov[static_cast<size_t>(i) * d + i];
  }

  const std::vector<double> ra = detail::sqrtm_psd(ma.cov, d);
  std::vector<double> inner(static_cast<size_t>(d) * d, 0.0);
  {
    std::vector<double> tmp(static_cast<size_t>(d) * d, 0.0);  // ra * Cb
    for (int i = 0; i < d; ++i) {
      for (int k = 0; k < d; ++k) {
        const double r = ra[static_cast<size_t>(i) * d + k];
        if (r == 0.0) continue;
        for (int j = 0; j < d; ++j) tmp[static_cast<size_t>(i) * d + j] += r * mb.cov[static_cast<size_t>(k) * d + j];
      }
    }
    for (int i = 0; i < d; ++i) {  // (ra * Cb) * ra
      for (int k = 0; k < d; ++k) {
        const double t = tmp[static_cast<size_t>(i) * d + k];
        if (t == 0.0) continue;
        for (int j = 0; j < d; ++j) inner[static_cast<size_t>(i) * d + j] += t * ra[static_cast<size_t>(k) * d + j];
      }
    }
    for (int i = 0; i < d; ++i) {  // exact symmetry for the eigensolver
      for (int j = i + 1; j < d; ++j) {
        const double s = 0.5 * (inner[static_cast<size_t>(i) * d + j] + inner[static_cast<size_t>(j) * d + i]);
        inner[static_cast<size_t>(i) * d + j] = s;
        inner[static_cast<size_t>(j) * d + i] = s;
      }
    }
  }
  std::vector<double> eigvals;
  detail::jacobi_eigen(inner, d, eigvals, nullptr);
  double cross = 0.0;
  for (double e : eigvals) {
    if (e < -1e-6) throw numeric_error("negative eigenvalue in covariance cross term", "metrics");
    cross += e > 0.0 ? std::sqrt(e) : 0.0;
  }

  result.value = mean_term + trace_a + trace_b - 2.0 * cross;
  if (!std::isfinite(result.value)) throw numeric_error("non-finite distribution distance", "metrics");
  if (result.value < -1e-6) throw numeric_error("distribution distance below numeric floor", "metrics");
  result.value = std::max(result.value, 0.0);
  return result;
}

// Fixed, seed-frozen random conv embedder. Random features preserve
// distributional differences well enough for trend comparisons at this
// resolution, and freezing the seed makes values comparable across runs.
inline constexpr uint64_t kFidExtractorSeed = 0xf1de;
inline constexpr int kFidFeatureDim = 48;

struct FidExtractor {
  ConvScorer<float> net;
  std::string id;

  explicit FidExtractor(const std::vector<int>& image_shape)
      : net(image_shape, kFidFeatureDim, {16, 32, 48}, kFidExtractorSeed),
        id("frozen_rconv_v1") {}

  Tensor<float> features(const Tensor<float>& images) const {
    require(images.rank() == 4, "feature extraction expects an (N,C,H,W) batch");
    const int n = images.dim(0);
    Tensor<float> out({n, kFidFeatureDim});
    const long per = static_cast<long>(images.dim(1)) * images.dim(2) * images.dim(3);
    const int chunk = 32;
    for (int base = 0; base < n; base += chunk) {
      const int m = std::min(chunk, n - base);
      Tensor<float> batch({m, images.dim(1), images.dim(2), images.dim(3)});
      std::copy(images.data() + static_cast<long>(base) * per,
                images.data() + static_cast<long>(base + m) * per, batch.data());
      const Tensor<float> z = net.logits(batch);
      std::copy(z.data(), z.data() + z.size(), out.data() + static_cast<long>(base) * kFidFeatureDim);
    }
    return out;
  }
};

inline FidResult compute_fid(const Tensor<float>& set_a, const Tensor<float>& set_b,
                             const FidExtractor& extractor) {
  require(set_a.rank() == 4 && set_b.rank() == 4, "image sets must be (N,C,H,W)");
  require(set_a.dim(0) >= 2 && set_b.dim(0) >= 2,
          "distribution distance needs at least 2 images per set");
  return fid_from_features(extractor.features(set_a), extractor.features(set_b), extractor.id);
}

// ---------------------------------------------------------------------------
// Scoring helpers and the method-transfer matrix
// ---------------------------------------------------------------------------

template <typename T>
inline std::vector<double> score_images(const ExpertDetector<T>& expert, const Tensor<T>& images) {
  require(images.rank() == 4, "scoring expects an (N,C,H,W) batch");
  const int n = images.dim(0);
  std::vector<double> out;
  out.reserve(static_cast<size_t>(n));
  const long per = static_cast<long>(images.dim(1)) * images.dim(2) * images.dim(3);
  const int chunk = 32;
  for (int base = 0; base < n; base += chunk) {
    const int m = std::min(chunk, n - base);
    Tensor<T> batch({m, images.dim(1), images.dim(2), images.dim(3)});
    std::copy(images.data() + static_cast<long>(base) * per,
              images.data() + static_cast<long>(base + m) * per, batch.data());
    for (T s : expert.score_batch(batch)) out.push_back(static_cast<double>(s));
  }
  return out;
}

template <typename T>
inline std::vector<double> score_images(const MoEDetector<T>& moe, const Tensor<T>& images) {
  require(images.rank() == 4, "scoring expects an (N,C,H,W) batch");
  std::vector<double> out;
  out.reserve(static_cast<size_t>(images.dim(0)));
  const long per = static_cast<long>(images.dim(1)) * images.dim(2) * images.dim(3);
  for (int i = 0; i < images.dim(0); ++i) {
    Tensor<T> img({images.dim(1), images.dim(2), images.dim(3)});
    std::copy(images.data() + static_cast<long>(i) * per,
              images.data() + static_cast<long>(i + 1) * per, img.data());
    out.push_back(static_cast<double>(moe.detect(img)));
  }
  return out;
}

// Balanced accuracy (TPR + TNR) / 2 at the given threshold.
inline double balanced_accuracy(const std::vector<double>& pos_scores,
                                const std::vector<double>& neg_scores, double threshold) {
  const DetectionReport r = compute_tpr_fpr(pos_scores, neg_scores, threshold);
  return 0.5 * (r.tpr + (1.0 - r.fpr));
}

template <typename T>
struct MethodEvalSet {
  FtKind method;
  Tensor<T> positives;  // generated by the watermark-trained model
  Tensor<T> negatives;  // generated by the clean-trained model
};

struct TransferMatrix {
  std::vector<FtKind> methods;
  Tensor<double> accuracy;  // (M, M): row = evaluation method, column = expert

  double diagonal_mean() const {
    double s = 0.0;
    for (size_t i = 0; i < methods.size(); ++i) s += accuracy.at(static_cast<int>(i), static_cast<int>(i));
    return s / static_cast<double>(methods.size());
  }
  double offdiagonal_mean() const {
    const int m = static_cast<int>(methods.size());
    if (m < 2) return 0.0;
    double s = 0.0;
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < m; ++j) {
        if (i != j) s += accuracy.at(i, j);
      }
    }
    return s / static_cast<double>(m * (m - 1));
  }
};

// Entry (i, j): balanced accuracy of the expert trained on method j when
// judging generations of method i.
template <typename T>
inline TransferMatrix transfer_matrix(const std::vector<ExpertDetector<T>>& experts,
                                      std::vector<MethodEvalSet<T>> eval_sets) {
  require(!experts.empty(), "transfer matrix needs at least one expert");
  require(experts.size() == eval_sets.size(),
          "transfer matrix needs one evaluation set per expert method");
  std::vector<const ExpertDetector<T>*> cols;
  for (const auto& e : experts) cols.push_back(&e);
  std::sort(cols.begin(), cols.end(), [](const ExpertDetector<T>* a, const ExpertDetector<T>* b) {
    return a->method() < b->method();
  });
  std::sort(eval_sets.begin(), eval_sets.end(),
            [](const MethodEvalSet<T>& a, const MethodEvalSet<T>& b) { return a.method < b.method; });
  const int m = static_cast<int>(cols.size());
  TransferMatrix out;
  out.accuracy = Tensor<double>({m, m});
  for (int j = 0; j < m; ++j) {
    if (cols[static_cast<size_t>(j)]->method() != eval_sets[static_cast<size_t>(j)].method) {
      throw std::invalid_argument("expert and evaluation method universes do not match");
    }
    out.methods.push_back(cols[static_cast<size_t>(j)]->method());
  }
  for (int i = 0; i < m; ++i) {
    const auto& set = eval_sets[static_cast<size_t>(i)];
    require(set.positives.size() > 0 && set.negatives.size() > 0,
            "evaluation sets must be nonempty");
    for (int j = 0; j < m; ++j) {
      const ExpertDetector<T>& expert = *cols[static_cast<size_t>(j)];
      out.accuracy.at(i, j) = balanced_accuracy(score_images(expert, set.positives),
                                                score_images(expert, set.negatives),
                                                expert.threshold());
    }
  }
  return out;
}

}  // namespace tunemark
