#include <cmath>
#include <cstring>
#include <filesystem>
#include <memory>
#include <vector>

#include <gtest/gtest.h>

#include "support/stub_models.hpp"
#include "tunemark/image_io.hpp"
#include "tunemark/watermark.hpp"

using namespace tunemark;
using tunemark::testing::AffineDenoiser;

namespace {

DiffusionModel<float> tiny_model(uint64_t seed) {
  return DiffusionModel<float>(std::make_unique<AffineDenoiser<float>>(4), 6,
                               NoiseSchedule::linear(20), {2, 2, 2}, seed);
}

ImageBatch<float> tiny_batch(int n, uint64_t seed) {
  Rng rng(seed);
  ImageBatch<float> b;
  b.pixels = Tensor<float>({n, 2, 2, 2});
  for (long i = 0; i < b.pixels.size(); ++i) b.pixels[i] = static_cast<float>(rng.uniform());
  for (int i = 0; i < n; ++i) b.prompts.push_back(Prompt{{i % 6}});
  return b;
}

std::vector<std::string> ids_for(int n) {
  std::vector<std::string> out;
  for (int i = 0; i < n; ++i) out.push_back("img_" + std::to_string(i));
  return out;
}

}  // namespace

TEST(PgdPrimitives, ProjectionClampsToTheBall) {
  Tensor<float> d({4});
  d[0] = 0.5f;
  d[1] = -0.5f;
  d[2] = 0.001f;
  d[3] = 0.0f;
  const Tensor<float> p = project_linf(d, 0.01);
  EXPECT_EQ(p[0], 0.01f);
  EXPECT_EQ(p[1], -0.01f);
  EXPECT_EQ(p[2], 0.001f);
  EXPECT_EQ(p[3], 0.0f);
  EXPECT_THROW(project_linf(d, 0.0), std::invalid_argument);
}

TEST(PgdPrimitives, SignStepDescendsAndProjects) {
  Tensor<float> d({3}), g({3});
  d[0] = 0.0f;
  d[1] = 0.009f;
  d[2] = 0.0f;
  g[0] = 3.0f;   // positive grad: step down
  g[1] = -2.0f;  // negative grad: step up, then clamp
  g[2] = 0.0f;   // sign(0) = 0: no movement
  const double alpha = 0.004, eta = 0.01;
  const Tensor<float> out = pgd_step(d, g, alpha, eta);
  EXPECT_EQ(out[0], 0.0f - static_cast<float>(alpha) * 1.0f);
  EXPECT_EQ(out[1], 0.01f);  // 0.009 + 0.004 clamped
  EXPECT_EQ(out[2], 0.0f);
}

// One image, one epoch, inner steps (1,1,1), two-parameter stub: the
// produced delta must equal the explicitly traced step sequence bit for bit.
TEST(OptimizeWatermarks, SingleStepTraceIsExact) {
  WatermarkConfig cfg;
  cfg.eta = 4.0 / 255.0;
  cfg.inner_steps = {1, 1, 1};
  cfg.epochs = 1;
  cfg.batch_size = 1;
  cfg.model_lr = 1e-2;
  cfg.seed = 424242;

  const auto base = tiny_model(9);
  const auto data = tiny_batch(1, 10);
  const auto result = optimize_watermarks(data, ids_for(1), base, cfg);
  ASSERT_EQ(result.watermarks.count(), 1);
  const Tensor<float>& got = result.watermarks.deltas()[0];

  // trace: (1) copy the model, one clean SGD step on the copy
  DiffusionModel<float> star = base;
  {
    const auto draw = draw_realization<float>(
        20, data.pixels.shape(), wm_phase_seed(cfg.seed, 0, 0, WmPhase::kCleanUpdate, 0));
    auto grads = grad_ldm_multi(star, data, draw, GradFlags{true, false, false});
    for (auto* p : star.denoiser().params()) sgd_step(*p, cfg.model_lr);
  }
  // (2) one sign step on the (zero-initialized) delta through the frozen copy
  const auto draw = draw_realization<float>(
      20, data.pixels.shape(), wm_phase_seed(cfg.seed, 0, 0, WmPhase::kPgd, 0));
  const auto grads = grad_ldm_at(star, data, draw, GradWrt::kInput);
  const float alpha = static_cast<float>(cfg.alpha());
  const float eta = static_cast<float>(cfg.eta);
  Tensor<float> want({1, 2, 2, 2});
  for (long i = 0; i < want.size(); ++i) {
    const float g = grads.input_grad[i];
    const float s = g > 0.0f ? 1.0f : (g < 0.0f ? -1.0f : 0.0f);
    float v = 0.0f - alpha * s;
    v = std::min(eta, std::max(-eta, v));
    want[i] = v;
  }

  ASSERT_EQ(got.size(), want.size());
  for (long i = 0; i < want.size(); ++i) {
    EXPECT_EQ(got[i], want[i]) << "coordinate " << i;  // float32-exact
  }
  // the step actually moved something
  EXPECT_GT(got.max_abs(), 0.0f);
}

TEST(OptimizeWatermarks, DeltasStayInsideTheBudgetBall) {
  WatermarkConfig cfg;
  cfg.eta = 4.0 / 255.0;
  cfg.inner_steps = {2, 3, 2};
  cfg.epochs = 2;
  cfg.batch_size = 2;
  cfg.seed = 7;
  const auto base = tiny_model(3);
  const auto data = tiny_batch(5, 4);  // odd count: last batch is short
  const auto result = optimize_watermarks(data, ids_for(5), base, cfg);
  ASSERT_EQ(result.watermarks.count(), 5);
  for (const auto& d : result.watermarks.deltas()) {
    EXPECT_LE(d.max_abs(), static_cast<float>(cfg.eta));
  }
  EXPECT_EQ(result.loss_trace.size(), 2u * 3u);  // epochs x ceil(5/2) batches
  // reruns are bit-identical
  const auto again = optimize_watermarks(data, ids_for(5), base, cfg);
  for (int i = 0; i < 5; ++i) {
    const auto& a = result.watermarks.deltas()[static_cast<size_t>(i)];
    const auto& b = again.watermarks.deltas()[static_cast<size_t>(i)];
    for (long k = 0; k < a.size(); ++k) ASSERT_EQ(a[k], b[k]);
  }
}

TEST(WatermarkSet, RejectsOversizedDeltas) {
  WatermarkConfig cfg;
  cfg.eta = 0.01;
  Tensor<float> d({1, 1, 2, 2});
  d.fill(0.5f);
  std::vector<Tensor<float>> deltas{d};
  EXPECT_THROW(WatermarkSet<float>(std::move(deltas), {"a"}, cfg), std::logic_error);
}

TEST(RandomWatermarks, UniformInsideTheBall) {
  const auto wm = random_watermarks<float>({1, 3, 4, 4}, 10, 0.02, 99);
  ASSERT_EQ(wm.count(), 10);
  float max_seen = 0.0f;
  for (const auto& d : wm.deltas()) {
    EXPECT_LE(d.max_abs(), 0.02f);
    max_seen = std::max(max_seen, d.max_abs());
  }
  EXPECT_GT(max_seen, 0.01f);  // actually spread out
}

TEST(ApplyWatermarks, HoldsTheDoubleBudgetOnEveryPixel) {
  const double eta = 4.0 / 255.0;
  auto data = tiny_batch(6, 20);
  // push some pixels against the [0,1] rim where clamping must re-project
  data.pixels[0] = 0.0f;
  data.pixels[1] = 1.0f;
  const auto wm = random_watermarks<float>({1, 2, 2, 2}, 6, eta, 5, ids_for(6));
  const auto out = apply_watermarks(data, ids_for(6), wm);
  for (long i = 0; i < out.pixels.size(); ++i) {
    const double diff =
        std::abs(static_cast<double>(out.pixels[i]) - static_cast<double>(data.pixels[i]));
    ASSERT_LE(diff, eta) << "pixel " << i;
    ASSERT_GE(out.pixels[i], 0.0f);
    ASSERT_LE(out.pixels[i], 1.0f);
  }
  // reapplication is byte-identical
  const auto out2 = apply_watermarks(data, ids_for(6), wm);
  EXPECT_EQ(0, std::memcmp(out.pixels.data(), out2.pixels.data(),
                           sizeof(float) * static_cast<size_t>(out.pixels.size())));
}

TEST(QuantizeProtected, IntegerBudgetHoldsExactly) {
  const double eta = 4.0 / 255.0;
  const int qbudget = static_cast<int>(std::lround(eta * 255.0));
  Rng rng(31);
  Tensor<float> orig({3, 4, 4}), prot({3, 4, 4});
  for (long i = 0; i < orig.size(); ++i) {
    orig[i] = static_cast<float>(rng.uniform());
    const double d = rng.uniform(-eta, eta);
    prot[i] = static_cast<float>(std::min(1.0, std::max(0.0, orig[i] + d)));
  }
  const ImageU8 q = quantize_protected(orig, prot, eta);
  const ImageU8 qo = to_u8(orig);
  ASSERT_EQ(q.rgb.size(), qo.rgb.size());
  for (size_t i = 0; i < q.rgb.size(); ++i) {
    ASSERT_LE(std::abs(static_cast<int>(q.rgb[i]) - static_cast<int>(qo.rgb[i])), qbudget);
  }
}

TEST(WatermarkIo, RoundTripsBitwiseAndDetectsTampering) {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "tunemark_wm_io_test";
  fs::remove_all(dir);

  const auto wm = random_watermarks<float>({1, 2, 3, 3}, 4, 0.015, 17);
  save_watermarks(dir, wm);
  const auto loaded = load_watermarks(dir);
  ASSERT_EQ(loaded.count(), wm.count());
  EXPECT_EQ(loaded.ids(), wm.ids());
  EXPECT_EQ(loaded.config().eta, wm.config().eta);
  for (int i = 0; i < wm.count(); ++i) {
    const auto& a = wm.deltas()[static_cast<size_t>(i)];
    const auto& b = loaded.deltas()[static_cast<size_t>(i)];
    ASSERT_EQ(0, std::memcmp(a.data(), b.data(), sizeof(float) * static_cast<size_t>(a.size())));
  }

  // flip one payload byte: the checksum must catch it
  const fs::path blob = dir / "delta_00002.bin";
  ASSERT_TRUE(fs::exists(blob));
  {
    std::fstream f(blob, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(20);
    char c;
    f.seekg(20);
    f.get(c);
    c = static_cast<char>(c ^ 0x01);
    f.seekp(20);
    f.put(c);
  }
  EXPECT_THROW(load_watermarks(dir), data_error);
  fs::remove_all(dir);
}
