#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <memory>
#include <vector>

#include <gtest/gtest.h>

#include "support/stub_models.hpp"
#include "tunemark/corruption.hpp"
#include "tunemark/detector.hpp"
#include "tunemark/metrics.hpp"

using namespace tunemark;
using tunemark::testing::LinearScorer;

namespace {

constexpr int kC = 3, kH = 16, kW = 16;

Tensor<float> random_images(int n, uint64_t seed, double lo = 0.0, double hi = 1.0) {
  Rng rng(seed);
  Tensor<float> t({n, kC, kH, kW});
  for (long i = 0; i < t.size(); ++i) t[i] = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

Tensor<float> single(const Tensor<float>& set, int idx) {
  Tensor<float> img({set.dim(1), set.dim(2), set.dim(3)});
  const long per = img.size();
  std::copy(set.data() + idx * per, set.data() + (idx + 1) * per, img.data());
  return img;
}

// Images whose channel-0 mean separates the classes by a wide margin.
Tensor<float> shifted_images(int n, uint64_t seed, double shift) {
  Tensor<float> t = random_images(n, seed, 0.0, 0.45);
  const long hw = static_cast<long>(kH) * kW;
  for (int i = 0; i < n; ++i) {
    float* p = t.data() + static_cast<long>(i) * kC * hw;
    for (long k = 0; k < hw; ++k) p[k] = static_cast<float>(std::min(1.0, p[k] + shift));
  }
  return t;
}

GeneratedSet<float> as_generated(Tensor<float> pixels, FtKind method, bool wm) {
  GeneratedSet<float> g;
  g.images.pixels = std::move(pixels);
  for (int i = 0; i < g.images.pixels.dim(0); ++i) g.images.prompts.push_back(Prompt{{0}});
  g.method = method;
  g.watermark_trained = wm;
  return g;
}

std::vector<double> channel_means(const Tensor<float>& img) {
  std::vector<double> out(static_cast<size_t>(img.dim(0)), 0.0);
  const long hw = static_cast<long>(img.dim(1)) * img.dim(2);
  for (int c = 0; c < img.dim(0); ++c) {
    const float* p = img.data() + c * hw;
    double acc = 0.0;
    for (long i = 0; i < hw; ++i) acc += p[i];
    out[static_cast<size_t>(c)] = acc / static_cast<double>(hw);
  }
  return out;
}

}  // namespace

// Routed score against a from-scratch reimplementation of the mixture rule:
// softmax gate weights, sigmoid expert scores, convex combination.
TEST(MixtureAlgebra, MatchesHandComputationOnRandomConfigurations) {
  const std::vector<FtKind> all = all_ft_kinds();
  for (int trial = 0; trial < 100; ++trial) {
    Rng rng(mix_seed(9000, static_cast<uint64_t>(trial)));
    const int m = 2 + static_cast<int>(rng.randint(3));  // 2..4 experts
    std::vector<FtKind> methods(all.begin(), all.begin() + m);

    std::vector<ExpertDetector<float>> experts;
    std::vector<std::vector<double>> ew(static_cast<size_t>(m));
    std::vector<double> eb(static_cast<size_t>(m));
    for (int i = 0; i < m; ++i) {
      Tensor<float> w({1, kC});
      for (int c = 0; c < kC; ++c) {
        ew[static_cast<size_t>(i)].push_back(rng.uniform(-2.0, 2.0));
        w.at(0, c) = static_cast<float>(ew[static_cast<size_t>(i)][static_cast<size_t>(c)]);
      }
      eb[static_cast<size_t>(i)] = rng.uniform(-1.0, 1.0);
      experts.emplace_back(
          methods[static_cast<size_t>(i)],
          std::make_unique<LinearScorer>(std::vector<int>{kC, kH, kW}, std::move(w),
                                         std::vector<float>{static_cast<float>(
                                             eb[static_cast<size_t>(i)])}),
          AugmentationPolicy::none(), DetectorTrainReport{}, 0.5);
    }

    Tensor<float> gw({m, kC});
    std::vector<float> gb(static_cast<size_t>(m));
    std::vector<std::vector<double>> gwd(static_cast<size_t>(m));
    for (int i = 0; i < m; ++i) {
      for (int c = 0; c < kC; ++c) {
        gwd[static_cast<size_t>(i)].push_back(rng.uniform(-2.0, 2.0));
        gw.at(i, c) = static_cast<float>(gwd[static_cast<size_t>(i)][static_cast<size_t>(c)]);
      }
      gb[static_cast<size_t>(i)] = static_cast<float>(rng.uniform(-1.0, 1.0));
    }
    std::vector<double> gbd(gb.begin(), gb.end());
    GatingModel<float> gating(
        methods, std::make_unique<LinearScorer>(std::vector<int>{kC, kH, kW}, std::move(gw), gb));
    const MoEDetector<float> moe(std::move(experts), std::move(gating));

    const Tensor<float> img = single(random_images(1, mix_seed(9001, trial)), 0);
    const auto means = channel_means(img);

    // oracle in double precision
    std::vector<double> scores(static_cast<size_t>(m)), logits(static_cast<size_t>(m));
    for (int i = 0; i < m; ++i) {
      double z = eb[static_cast<size_t>(i)];
      double g = gbd[static_cast<size_t>(i)];
      for (int c = 0; c < kC; ++c) {
        z += ew[static_cast<size_t>(i)][static_cast<size_t>(c)] * means[static_cast<size_t>(c)];
        g += gwd[static_cast<size_t>(i)][static_cast<size_t>(c)] * means[static_cast<size_t>(c)];
      }
      scores[static_cast<size_t>(i)] = 1.0 / (1.0 + std::exp(-z));
      logits[static_cast<size_t>(i)] = g;
    }
    const double zmax = *std::max_element(logits.begin(), logits.end());
    double denom = 0.0;
    for (double& l : logits) {
      l = std::exp(l - zmax);
      denom += l;
    }
    double want = 0.0;
    for (int i = 0; i < m; ++i) {
      want += (logits[static_cast<size_t>(i)] / denom) * scores[static_cast<size_t>(i)];
    }

    const AuditScore<float> a = moe.audit(img);
    EXPECT_NEAR(static_cast<double>(a.final_score), want, 1e-6) << "trial " << trial;

    // convexity: the mixture lies inside the expert score range
    const float lo = *std::min_element(a.expert_scores.begin(), a.expert_scores.end());
    const float hi = *std::max_element(a.expert_scores.begin(), a.expert_scores.end());
    EXPECT_GE(a.final_score, lo);
    EXPECT_LE(a.final_score, hi);
    double wsum = 0.0;
    for (float w : a.gating_weights) wsum += w;
    EXPECT_NEAR(wsum, 1.0, 1e-6);
  }
}

TEST(MixtureAlgebra, InsertionOrderDoesNotMatter) {
  Rng rng(77);
  auto make_expert = [&](FtKind k) {
    Tensor<float> w({1, kC});
    for (int c = 0; c < kC; ++c) w.at(0, c) = static_cast<float>(rng.uniform(-1.0, 1.0));
    return ExpertDetector<float>(
        k, std::make_unique<LinearScorer>(std::vector<int>{kC, kH, kW}, std::move(w),
                                          std::vector<float>{0.1f}),
        AugmentationPolicy::none(), DetectorTrainReport{}, 0.5);
  };
  std::vector<FtKind> methods{FtKind::kFullFt, FtKind::kDreamboothLike, FtKind::kLoraLike};
  auto e1 = make_expert(methods[0]);
  auto e2 = make_expert(methods[1]);
  auto e3 = make_expert(methods[2]);
  Tensor<float> gw = Tensor<float>::zeros({3, kC});
  GatingModel<float> gating(methods, std::make_unique<LinearScorer>(
                                         std::vector<int>{kC, kH, kW}, std::move(gw),
                                         std::vector<float>{0.0f, 0.0f, 0.0f}));
  const MoEDetector<float> ordered({e1, e2, e3}, gating);
  const MoEDetector<float> shuffled({e3, e1, e2}, gating);
  const Tensor<float> img = single(random_images(1, 5), 0);
  EXPECT_EQ(ordered.detect(img), shuffled.detect(img));

  // duplicate methods are rejected
  EXPECT_THROW(MoEDetector<float>({e1, e1}, gating), std::invalid_argument);
}

TEST(MixtureAlgebra, SingleExpertMixtureIsTheExpert) {
  Rng rng(78);
  Tensor<float> w({1, kC});
  for (int c = 0; c < kC; ++c) w.at(0, c) = static_cast<float>(rng.uniform(-1.0, 1.0));
  ExpertDetector<float> expert(
      FtKind::kLoraLike,
      std::make_unique<LinearScorer>(std::vector<int>{kC, kH, kW}, std::move(w),
                                     std::vector<float>{-0.2f}),
      AugmentationPolicy::none(), DetectorTrainReport{}, 0.5);
  const auto moe = MoEDetector<float>::single(expert);
  const Tensor<float> img = single(random_images(1, 9), 0);
  EXPECT_EQ(moe.detect(img), expert.score(img));
  const auto a = moe.audit(img);
  ASSERT_EQ(a.gating_weights.size(), 1u);
  EXPECT_EQ(a.gating_weights[0], 1.0f);
}

TEST(ExpertTraining, SeparableTaskReachesHighAccuracy) {
  const Tensor<float> clean = shifted_images(24, 100, 0.0);
  const Tensor<float> wm = shifted_images(24, 101, 0.5);
  const auto gen_clean = as_generated(shifted_images(24, 102, 0.0), FtKind::kFullFt, false);
  const auto gen_wm = as_generated(shifted_images(24, 103, 0.5), FtKind::kFullFt, true);

  DetectorHyper hyper;
  hyper.steps = 80;
  hyper.batch_size = 8;
  hyper.widths = {8, 16};
  const auto expert =
      train_expert(clean, wm, gen_clean, gen_wm, AugmentationPolicy::none(), hyper, 999);

  const Tensor<float> test_pos = shifted_images(20, 104, 0.5);
  const Tensor<float> test_neg = shifted_images(20, 105, 0.0);
  const double acc = balanced_accuracy(score_images(expert, test_pos),
                                       score_images(expert, test_neg), expert.threshold());
  EXPECT_GE(acc, 0.95);
  EXPECT_GT(expert.report().train_accuracy, 0.9);
}

TEST(ExpertTraining, SameSeedIsBitwiseReproducible) {
  const Tensor<float> clean = shifted_images(12, 110, 0.0);
  const Tensor<float> wm = shifted_images(12, 111, 0.5);
  const auto gc = as_generated(shifted_images(12, 112, 0.0), FtKind::kFullFt, false);
  const auto gw = as_generated(shifted_images(12, 113, 0.5), FtKind::kFullFt, true);
  DetectorHyper hyper;
  hyper.steps = 20;
  hyper.batch_size = 4;
  hyper.widths = {8};
  const auto e1 = train_expert(clean, wm, gc, gw, AugmentationPolicy::none(), hyper, 5);
  const auto e2 = train_expert(clean, wm, gc, gw, AugmentationPolicy::none(), hyper, 5);
  auto p1 = const_cast<ScorerBase<float>&>(e1.scorer()).params();
  auto p2 = const_cast<ScorerBase<float>&>(e2.scorer()).params();
  ASSERT_EQ(p1.size(), p2.size());
  for (size_t i = 0; i < p1.size(); ++i) {
    ASSERT_EQ(0, std::memcmp(p1[i]->value.data(), p2[i]->value.data(),
                             sizeof(float) * static_cast<size_t>(p1[i]->value.size())));
  }
}

TEST(ExpertTraining, MismatchedGeneratedSetsAreRejected) {
  const Tensor<float> clean = shifted_images(8, 120, 0.0);
  const Tensor<float> wm = shifted_images(8, 121, 0.5);
  DetectorHyper hyper;
  hyper.widths = {8};
  auto gc = as_generated(shifted_images(8, 122, 0.0), FtKind::kFullFt, false);
  auto gw = as_generated(shifted_images(8, 123, 0.5), FtKind::kLoraLike, true);
  EXPECT_THROW(train_expert(clean, wm, gc, gw, AugmentationPolicy::none(), hyper, 1),
               std::invalid_argument);
  gw.method = FtKind::kFullFt;
  gw.watermark_trained = false;  // both claim clean-trained now
  EXPECT_THROW(train_expert(clean, wm, gc, gw, AugmentationPolicy::none(), hyper, 1),
               std::invalid_argument);
}

TEST(GatingTraining, RoutesSeparableMethodsCorrectly) {
  // method A: bright channel 0; method B: dark everything
  std::vector<MethodImages<float>> classes;
  classes.push_back(MethodImages<float>{FtKind::kFullFt, shifted_images(24, 130, 0.5)});
  classes.push_back(MethodImages<float>{FtKind::kLoraLike, shifted_images(24, 131, 0.0)});
  DetectorHyper hyper;
  hyper.steps = 80;
  hyper.batch_size = 8;
  hyper.widths = {8, 16};
  const auto gating = train_gating(classes, hyper, 333);
  ASSERT_EQ(gating.method_count(), 2);

  const Tensor<float> a = single(shifted_images(1, 132, 0.5), 0);
  const Tensor<float> b = single(shifted_images(1, 133, 0.0), 0);
  const auto wa = gating.weights(a);
  const auto wb = gating.weights(b);
  EXPECT_GT(wa[0], wa[1]);  // first method (kFullFt) wins on bright images
  EXPECT_GT(wb[1], wb[0]);
}

TEST(DetectorIo, ExpertAndMixtureRoundTripBitwise) {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "tunemark_detector_io_test";
  fs::remove_all(dir);

  DetectorHyper hyper;
  hyper.steps = 20;
  hyper.batch_size = 4;
  hyper.widths = {8};
  const Tensor<float> clean = shifted_images(12, 140, 0.0);
  const Tensor<float> wm = shifted_images(12, 141, 0.5);
  std::vector<ExpertDetector<float>> experts;
  for (FtKind k : {FtKind::kFullFt, FtKind::kLoraLike}) {
    experts.push_back(train_expert(
        clean, wm, as_generated(shifted_images(12, 142, 0.0), k, false),
        as_generated(shifted_images(12, 143, 0.5), k, true), AugmentationPolicy::none(), hyper,
        mix_seed(7, static_cast<uint64_t>(k))));
  }
  std::vector<MethodImages<float>> classes;
  classes.push_back(MethodImages<float>{FtKind::kFullFt, shifted_images(12, 144, 0.5)});
  classes.push_back(MethodImages<float>{FtKind::kLoraLike, shifted_images(12, 145, 0.0)});
  const auto gating = train_gating(classes, hyper, 8);
  const MoEDetector<float> moe(experts, gating);

  save_moe(dir, moe);
  const auto loaded = load_moe(dir);
  const Tensor<float> img = single(random_images(1, 146), 0);
  const auto a = moe.audit(img);
  const auto b = loaded.audit(img);
  EXPECT_EQ(a.final_score, b.final_score);
  ASSERT_EQ(a.expert_scores.size(), b.expert_scores.size());
  for (size_t i = 0; i < a.expert_scores.size(); ++i) {
    EXPECT_EQ(a.expert_scores[i], b.expert_scores[i]);
    EXPECT_EQ(a.gating_weights[i], b.gating_weights[i]);
  }
  fs::remove_all(dir);
}

// ---------------------------------------------------------------------------
// Corruption operators
// ---------------------------------------------------------------------------

TEST(Corruptions, BlurMatchesDirectConvolutionOracle) {
  const double sigma = 0.8;
  const Tensor<float> img = single(random_images(1, 150), 0);
  Corruption spec;
  spec.kind = CorruptionKind::kGaussBlur;
  spec.blur_sigma = sigma;
  const Tensor<float> got = corrupt(img, spec, 0);

  // independent oracle: dense 2-D convolution with the outer-product kernel
  const int radius = std::max(1, static_cast<int>(std::ceil(2.0 * sigma)));
  std::vector<double> k(static_cast<size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[static_cast<size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
    sum += k[static_cast<size_t>(i + radius)];
  }
  for (double& v : k) v /= sum;
  auto reflect = [](int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * (n - 1);
    i = std::abs(i) % period;
    return i < n ? i : period - i;
  };
  for (int c = 0; c < kC; ++c) {
    for (int y = 0; y < kH; ++y) {
      for (int x = 0; x < kW; ++x) {
        double acc = 0.0;
        for (int dy = -radius; dy <= radius; ++dy) {
          for (int dx = -radius; dx <= radius; ++dx) {
            acc += k[static_cast<size_t>(dy + radius)] * k[static_cast<size_t>(dx + radius)] *
                   img.at(c, reflect(y + dy, kH), reflect(x + dx, kW));
          }
        }
        ASSERT_NEAR(got.at(c, y, x), acc, 1e-5) << c << "," << y << "," << x;
      }
    }
  }
}

TEST(Corruptions, JpegQualityOrderingAndDeterminism) {
  const Tensor<float> img = single(random_images(1, 151), 0);
  Corruption hi, lo;
  hi.kind = lo.kind = CorruptionKind::kJpeg;
  hi.jpeg_quality = 95;
  lo.jpeg_quality = 10;
  const Tensor<float> a = corrupt(img, hi, 0);
  const Tensor<float> b = corrupt(img, lo, 0);
  double da = 0.0, db = 0.0;
  for (long i = 0; i < img.size(); ++i) {
    da += (a[i] - img[i]) * (a[i] - img[i]);
    db += (b[i] - img[i]) * (b[i] - img[i]);
  }
  EXPECT_LT(da, db);  // higher quality is closer to the source
  const Tensor<float> a2 = corrupt(img, hi, 99);  // jpeg ignores the seed
  for (long i = 0; i < a.size(); ++i) ASSERT_EQ(a[i], a2[i]);
}

TEST(Corruptions, FullFrameCropIsTheIdentity) {
  const Tensor<float> img = single(random_images(1, 152), 0);
  Corruption spec;
  spec.kind = CorruptionKind::kRandomCrop;
  spec.crop_ratio = 1.0;
  const Tensor<float> out = corrupt(img, spec, 3);
  for (long i = 0; i < img.size(); ++i) ASSERT_EQ(out[i], img[i]);
}

TEST(Corruptions, CropIsSeededAndInRange) {
  const Tensor<float> img = single(random_images(1, 153), 0);
  Corruption spec;
  spec.kind = CorruptionKind::kRandomCrop;
  spec.crop_ratio = 0.75;
  const Tensor<float> a = corrupt(img, spec, 5);
  const Tensor<float> b = corrupt(img, spec, 5);
  const Tensor<float> c = corrupt(img, spec, 6);
  bool same = true, differ = false;
  for (long i = 0; i < a.size(); ++i) {
    same = same && a[i] == b[i];
    differ = differ || a[i] != c[i];
  }
  EXPECT_TRUE(same);
  EXPECT_TRUE(differ);
  EXPECT_EQ(a.dim(1), kH);  // resized back to the source frame
  EXPECT_EQ(a.dim(2), kW);
}

TEST(Corruptions, NoiseSigmaIsCalibrated) {
  Tensor<float> img({kC, kH, kW});
  img.fill(0.5f);  // mid-gray avoids clamp bias
  Corruption spec;
  spec.kind = CorruptionKind::kGaussNoise;
  spec.noise_sigma = 0.1;
  const Tensor<float> out = corrupt(img, spec, 7);
  double mean = 0.0, var = 0.0;
  for (long i = 0; i < out.size(); ++i) mean += out[i] - 0.5;
  mean /= static_cast<double>(out.size());
  for (long i = 0; i < out.size(); ++i) {
    const double d = out[i] - 0.5 - mean;
    var += d * d;
  }
  var /= static_cast<double>(out.size() - 1);
  EXPECT_NEAR(std::sqrt(var), 0.1, 0.02);
}

TEST(Corruptions, PolicyNoneNeverTouchesTheImage) {
  const auto policy = AugmentationPolicy::none();
  Rng rng(9);
  const Tensor<float> img = single(random_images(1, 154), 0);
  const Tensor<float> out = policy.maybe_apply(img, rng);
  for (long i = 0; i < img.size(); ++i) ASSERT_EQ(out[i], img[i]);
  EXPECT_FALSE(policy.any_enabled());
  const AugmentationPolicy all;  // default: everything enabled
  EXPECT_TRUE(all.any_enabled());
  all.validate();
}
