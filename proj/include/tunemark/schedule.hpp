#pragma once

#include <cmath>
#include <vector>

#include "tunemark/common.hpp"

namespace tunemark {

// Variance schedule of the forward noising process. alpha_bar[t] is the
// cumulative product of (1 - beta) up to and including step t.
struct NoiseSchedule {
  int timesteps = 0;
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;

  static NoiseSchedule from_betas(std::vector<double> betas_in) {
    NoiseSchedule s;
    s.timesteps = static_cast<int>(betas_in.size());
    require(s.timesteps > 0, "schedule needs at least one step");
    s.betas = std::move(betas_in);
    s.alphas.resize(s.betas.size());
    s.alpha_bars.resize(s.betas.size());
    double prod = 1.0;
    for (size_t t = 0; t < s.betas.size(); ++t) {
      require(s.betas[t] > 0.0 && s.betas[t] < 1.0, "betas must lie in (0,1)");
      s.alphas[t] = 1.0 - s.betas[t];
      prod *= s.alphas[t];
      s.alpha_bars[t] = prod;
    }
    // prod of values in (0,1) is strictly decreasing and stays in (0,1].
    return s;
  }

  static NoiseSchedule linear(int timesteps, double beta_start = 1e-3, double beta_end = 0.05) {
    require(timesteps > 0, "timesteps must be positive");
    std::vector<double> b(static_cast<size_t>(timesteps));
    if (timesteps == 1) {
      b[0] = beta_start;
    } else {
      for (int t = 0; t < timesteps; ++t) {
        b[static_cast<size_t>(t)] =
            beta_start + (beta_end - beta_start) * static_cast<double>(t) / (timesteps - 1);
      }
    }
    return from_betas(std::move(b));
  }

  double alpha_bar(int t) const {
    require_range(t >= 0 && t < timesteps, "schedule step out of range");
    return alpha_bars[static_cast<size_t>(t)];
  }
};

}  // namespace tunemark
