#include <cmath>
#include <memory>
#include <vector>

#include <gtest/gtest.h>

#include "support/stub_models.hpp"
#include "tunemark/diffusion.hpp"
#include "tunemark/schedule.hpp"

using namespace tunemark;
using tunemark::testing::AffineDenoiser;

namespace {

// Small double-precision model around the affine stub.
DiffusionModel<double> stub_model(int timesteps, std::array<int, 3> shape, uint64_t seed,
                                  int cond_dim = 4) {
  return DiffusionModel<double>(std::make_unique<AffineDenoiser<double>>(cond_dim), 6,
                                NoiseSchedule::linear(timesteps), shape, seed);
}

ImageBatch<double> random_batch(int n, std::array<int, 3> shape, uint64_t seed, int vocab) {
  Rng rng(seed);
  ImageBatch<double> b;
  b.pixels = Tensor<double>({n, shape[0], shape[1], shape[2]});
  for (long i = 0; i < b.pixels.size(); ++i) b.pixels[i] = rng.uniform();
  for (int i = 0; i < n; ++i) {
    Prompt p;
    const int len = 1 + static_cast<int>(rng.randint(3));
    for (int k = 0; k < len; ++k) p.tokens.push_back(static_cast<int>(rng.randint(vocab)));
    b.prompts.push_back(p);
  }
  return b;
}

}  // namespace

TEST(Schedule, LinearEndpointsAndMonotonicity) {
  const NoiseSchedule s = NoiseSchedule::linear(200, 1e-3, 0.05);
  ASSERT_EQ(s.timesteps, 200);
  EXPECT_DOUBLE_EQ(s.betas.front(), 1e-3);
  EXPECT_DOUBLE_EQ(s.betas.back(), 0.05);
  for (size_t t = 1; t < s.betas.size(); ++t) {
    EXPECT_GT(s.betas[t], s.betas[t - 1]);  // strictly increasing
  }
  for (int t = 0; t < s.timesteps; ++t) {
    EXPECT_GT(s.alpha_bar(t), 0.0);
    EXPECT_LT(s.alpha_bar(t), 1.0);
    if (t > 0) EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
  }
}

TEST(Schedule, AlphaBarMatchesDirectProduct) {
  const NoiseSchedule s = NoiseSchedule::linear(50, 1e-3, 0.05);
  double prod = 1.0;
  for (int t = 0; t < 50; ++t) {
    prod *= 1.0 - s.betas[static_cast<size_t>(t)];
    EXPECT_NEAR(s.alpha_bar(t), prod, 1e-15);
  }
}

TEST(Schedule, RejectsBadBetas) {
  EXPECT_THROW(NoiseSchedule::from_betas({0.5, 1.0}), std::invalid_argument);
  EXPECT_THROW(NoiseSchedule::from_betas({0.0}), std::invalid_argument);
  EXPECT_THROW(NoiseSchedule::linear(0), std::invalid_argument);
}

TEST(ForwardDiffuse, HandComputedPixel) {
  const NoiseSchedule s = NoiseSchedule::linear(10, 0.1, 0.2);
  Tensor<double> x0({1, 1, 1, 1}), eps({1, 1, 1, 1});
  x0[0] = 0.7;
  eps[0] = -0.3;
  const Tensor<double> xt = forward_diffuse(x0, {3}, eps, s);
  const double ab = s.alpha_bar(3);
  EXPECT_NEAR(xt[0], std::sqrt(ab) * 0.7 + std::sqrt(1.0 - ab) * (-0.3), 1e-15);
}

TEST(LdmLoss, MatchesBatchMeanOfResidualNorms) {
  auto model = stub_model(20, {2, 3, 3}, 99);
  auto batch = random_batch(3, {2, 3, 3}, 7, model.vocab_size());
  const auto draw = draw_realization<double>(20, batch.pixels.shape(), 1234);

  // independent recomputation: mean over images of || eps - pred ||_2
  Tensor<double> xt = forward_diffuse(batch.pixels, draw.t, draw.eps, model.schedule());
  Tensor<double> cond = model.embed(batch.prompts);
  Tensor<double> pred = model.denoiser().forward(xt, draw.t, cond);
  const long per = pred.size() / pred.dim(0);
  double expected = 0.0;
  for (int b = 0; b < pred.dim(0); ++b) {
    double acc = 0.0;
    for (long i = 0; i < per; ++i) {
      const double r = draw.eps.data()[b * per + i] - pred.data()[b * per + i];
      acc += r * r;
    }
    expected += std::sqrt(acc);
  }
  expected /= pred.dim(0);

  EXPECT_NEAR(ldm_loss_at(model, batch, draw), expected, 1e-12);
}

TEST(LdmLoss, DrawIsDeterministicInSeed) {
  auto a = draw_realization<double>(100, {2, 3, 4, 4}, 5);
  auto b = draw_realization<double>(100, {2, 3, 4, 4}, 5);
  auto c = draw_realization<double>(100, {2, 3, 4, 4}, 6);
  EXPECT_EQ(a.t, b.t);
  for (long i = 0; i < a.eps.size(); ++i) EXPECT_EQ(a.eps[i], b.eps[i]);
  bool differ = a.t != c.t;
  for (long i = 0; i < a.eps.size() && !differ; ++i) differ = a.eps[i] != c.eps[i];
  EXPECT_TRUE(differ);
}

// Central finite differences around the loss on the same fixed realization.
// rtol 1e-3 / atol 1e-5 in float64, mirroring the end-to-end gradient gate.
namespace {

constexpr double kRtol = 1e-3, kAtol = 1e-5, kFdStep = 1e-6;

void expect_close(double got, double want, const std::string& what) {
  const double tol = kAtol + kRtol * std::abs(want);
  EXPECT_NEAR(got, want, tol) << what;
}

double fd_loss(DiffusionModel<double>& model, const ImageBatch<double>& batch,
               const DrawRealization<double>& draw, double* slot) {
  const double orig = *slot;
  *slot = orig + kFdStep;
  const double up = ldm_loss_at(model, batch, draw);
  *slot = orig - kFdStep;
  const double dn = ldm_loss_at(model, batch, draw);
  *slot = orig;
  return (up - dn) / (2.0 * kFdStep);
}

}  // namespace

TEST(GradLdm, MatchesFiniteDifferencesEverywhere) {
  for (int trial = 0; trial < 20; ++trial) {
    const uint64_t seed = 1000 + static_cast<uint64_t>(trial);
    Rng pick(mix_seed(seed, 0xfd));
    const int n = 1 + static_cast<int>(pick.randint(3));
    auto model = stub_model(30, {2, 2, 2}, seed);
    auto batch = random_batch(n, {2, 2, 2}, mix_seed(seed, 1), model.vocab_size());
    const auto draw = draw_realization<double>(30, batch.pixels.shape(), mix_seed(seed, 2));

    // denoiser parameters (both of them)
    auto grads = grad_ldm_at(model, batch, draw, GradWrt::kDenoiser);
    auto* stub = dynamic_cast<AffineDenoiser<double>*>(&model.denoiser());
    ASSERT_NE(stub, nullptr);
    expect_close(stub->a().grad[0], fd_loss(model, batch, draw, &stub->a().value[0]),
                 "d/da, trial " + std::to_string(trial));
    expect_close(stub->b().grad[0], fd_loss(model, batch, draw, &stub->b().value[0]),
                 "d/db, trial " + std::to_string(trial));

    // embedding rows touched by the prompts: 5 random coordinates
    grads = grad_ldm_at(model, batch, draw, GradWrt::kCondEmbed);
    Tensor<double> embed_grad = model.cond_embed().grad;
    for (int k = 0; k < 5; ++k) {
      const long idx = static_cast<long>(pick.randint(model.cond_embed().value.size()));
      expect_close(embed_grad[idx],
                   fd_loss(model, batch, draw, &model.cond_embed().value[idx]),
                   "embed coord " + std::to_string(idx));
    }

    // input pixels: 5 random coordinates
    grads = grad_ldm_at(model, batch, draw, GradWrt::kInput);
    for (int k = 0; k < 5; ++k) {
      const long idx = static_cast<long>(pick.randint(batch.pixels.size()));
      expect_close(grads.input_grad[idx], fd_loss(model, batch, draw, &batch.pixels[idx]),
                   "input coord " + std::to_string(idx));
    }
  }
}

// The production denoiser's backward pass, spot-checked the same way.
TEST(GradLdm, CondUnetBackwardMatchesFiniteDifferences) {
  DiffusionModel<double> model(std::make_unique<CondUNet<double>>(8, 4, 77), 6,
                               NoiseSchedule::linear(20), {3, 8, 8}, 77);
  auto batch = random_batch(2, {3, 8, 8}, 21, model.vocab_size());
  const auto draw = draw_realization<double>(20, batch.pixels.shape(), 22);

  auto grads = grad_ldm_multi(model, batch, draw, GradFlags{true, true, true});
  Rng pick(31);

  auto params = model.denoiser().params();
  for (int k = 0; k < 6; ++k) {
    auto* p = params[pick.randint(params.size())];
    const long idx = static_cast<long>(pick.randint(p->value.size()));
    const double analytic = p->grad[idx];
    expect_close(analytic, fd_loss(model, batch, draw, &p->value[idx]), p->name);
  }
  for (int k = 0; k < 4; ++k) {
    const long idx = static_cast<long>(pick.randint(model.cond_embed().value.size()));
    expect_close(model.cond_embed().grad[idx],
                 fd_loss(model, batch, draw, &model.cond_embed().value[idx]), "cond_embed");
  }
  for (int k = 0; k < 4; ++k) {
    const long idx = static_cast<long>(pick.randint(batch.pixels.size()));
    expect_close(grads.input_grad[idx], fd_loss(model, batch, draw, &batch.pixels[idx]),
                 "input");
  }
}

TEST(FinetuneStep, LeavesUnselectedCollectionsBitIdentical) {
  auto model = stub_model(20, {2, 2, 2}, 5);
  auto batch = random_batch(2, {2, 2, 2}, 6, model.vocab_size());
  const Tensor<double> embed_before = model.cond_embed().value;

  finetune_step(model, batch, 1e-2, ParamSelection{true, false}, 9);
  for (long i = 0; i < embed_before.size(); ++i) {
    EXPECT_EQ(model.cond_embed().value[i], embed_before[i]);
  }

  auto* stub = dynamic_cast<AffineDenoiser<double>*>(&model.denoiser());
  const double a_before = stub->a().value[0];
  finetune_step(model, batch, 1e-2, ParamSelection{false, true}, 10);
  EXPECT_EQ(stub->a().value[0], a_before);
}

TEST(FinetuneStep, AppliesPlainSgdOnTheSharedRealization) {
  auto model = stub_model(20, {2, 2, 2}, 5);
  auto batch = random_batch(2, {2, 2, 2}, 6, model.vocab_size());
  const auto draw = draw_realization<double>(20, batch.pixels.shape(), 44);

  DiffusionModel<double> manual = model;
  auto grads = grad_ldm_multi(manual, batch, draw, GradFlags{true, false, false});
  for (auto* p : manual.denoiser().params()) sgd_step(*p, 1e-2);

  const double loss = finetune_step_at(model, batch, 1e-2, ParamSelection{true, false}, draw);
  EXPECT_EQ(loss, grads.loss);
  auto got = model.denoiser().params();
  auto want = manual.denoiser().params();
  for (size_t i = 0; i < got.size(); ++i) {
    for (long k = 0; k < got[i]->value.size(); ++k) {
      EXPECT_EQ(got[i]->value[k], want[i]->value[k]);
    }
  }
}

TEST(Sample, ShapeDeterminismAndFiniteness) {
  auto model = stub_model(50, {2, 4, 4}, 8);
  std::vector<Prompt> prompts{Prompt{{0, 1}}, Prompt{{2}}};
  auto a = sample(model, prompts, 10, 77);
  auto b = sample(model, prompts, 10, 77);
  auto c = sample(model, prompts, 10, 78);
  ASSERT_EQ(a.pixels.rank(), 4);
  EXPECT_EQ(a.pixels.dim(0), 2);
  EXPECT_EQ(a.pixels.dim(1), 2);
  EXPECT_TRUE(a.pixels.all_finite());
  for (long i = 0; i < a.pixels.size(); ++i) EXPECT_EQ(a.pixels[i], b.pixels[i]);
  bool differ = false;
  for (long i = 0; i < a.pixels.size() && !differ; ++i) differ = a.pixels[i] != c.pixels[i];
  EXPECT_TRUE(differ);

  auto one = sample(model, prompts, 1, 5);  // single-step path
  EXPECT_TRUE(one.pixels.all_finite());
  EXPECT_THROW(sample(model, prompts, 51, 5), std::out_of_range);
}

TEST(Model, CopiesAreDeepAndTokenGrowthWorks) {
  auto model = stub_model(20, {2, 2, 2}, 5);
  DiffusionModel<double> copy = model;
  auto* stub = dynamic_cast<AffineDenoiser<double>*>(&copy.denoiser());
  stub->a().value[0] += 1.0;
  auto* orig = dynamic_cast<AffineDenoiser<double>*>(&model.denoiser());
  EXPECT_NE(stub->a().value[0], orig->a().value[0]);

  const int old_vocab = model.vocab_size();
  const int token = model.add_token(123);
  EXPECT_EQ(token, old_vocab);
  EXPECT_EQ(model.vocab_size(), old_vocab + 1);
  EXPECT_THROW(model.embed({Prompt{{model.vocab_size()}}}), std::out_of_range);
}
