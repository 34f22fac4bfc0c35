#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "json.hpp"
#include "tunemark/checkpoint.hpp"
#include "tunemark/corruption.hpp"
#include "tunemark/metrics.hpp"
#include "tunemark/pipeline.hpp"

namespace tunemark {

// Per-point seed = hash(base seed, axis value, replicate). The axis value
// enters through its exact bit pattern so nearby grid points never collide.
inline uint64_t point_seed(uint64_t base_seed, double axis_value, int replicate) {
  return mix_seed(base_seed, std::bit_cast<uint64_t>(axis_value),
                  static_cast<uint64_t>(replicate));
}

// ---------------------------------------------------------------------------
// Rank correlation (average ranks for ties; zero rank variance => 0)
// ---------------------------------------------------------------------------

inline std::vector<double> average_ranks(const std::vector<double>& values) {
  const size_t n = values.size();
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(n, 0.0);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
    const double r = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
    for (size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

inline double spearman(const std::vector<double>& xs, const std::vector<double>& ys) {
  require(xs.size() == ys.size() && xs.size() >= 2,
          "rank correlation needs two equal-length series");
  const std::vector<double> rx = average_ranks(xs), ry = average_ranks(ys);
  const size_t n = xs.size();
  double mx = 0.0, my = 0.0;
  for (size_t i = 0; i < n; ++i) {
    mx += rx[i];
    my += ry[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (size_t i = 0; i < n; ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;  // a constant series carries no order signal
  return sxy / std::sqrt(sxx * syy);
}

// ---------------------------------------------------------------------------
// Shared inputs for sweep points: the protected dataset, one trained expert,
// and the clean-run generations that serve as the fixed negative class.
// ---------------------------------------------------------------------------

struct SweepInputs {
  const StyleDataset* dataset = nullptr;
  const DiffusionModel<float>* base = nullptr;
  const WatermarkSet<float>* watermarks = nullptr;
  const ExpertDetector<float>* expert = nullptr;
  const Tensor<float>* negatives = nullptr;  // clean-model generations (N,C,H,W)

  void validate() const {
    require(dataset && base && watermarks && expert && negatives, "sweep inputs incomplete");
    require(negatives->rank() == 4 && negatives->dim(0) >= 1,
            "sweep needs a nonempty negative generation set");
  }
};

struct SweepObservation {
  double axis = 0.0;
  int replicate = 0;
  uint64_t seed = 0;
  double tpr = 0.0;
  double fpr = 0.0;
  int steps = 0;                                          // fine-tuning steps actually run
  double fid = std::numeric_limits<double>::quiet_NaN();  // step sweep only
};

struct SweepSummaryRow {
  double axis = 0.0;
  int replicates = 0;
  double tpr_mean = 0.0;
  double tpr_stdev = 0.0;
  double fpr_mean = 0.0;
  double fid_mean = std::numeric_limits<double>::quiet_NaN();
};

struct SweepResult {
  std::string axis_name;
  std::vector<SweepObservation> observations;

  std::vector<double> axis_values() const {
    std::vector<double> vals;
    for (const auto& o : observations) {
      if (std::find(vals.begin(), vals.end(), o.axis) == vals.end()) vals.push_back(o.axis);
    }
    std::sort(vals.begin(), vals.end());
    return vals;
  }

  std::vector<SweepSummaryRow> summary() const {
    std::vector<SweepSummaryRow> rows;
    for (double v : axis_values()) {
      SweepSummaryRow row;
      row.axis = v;
      double fid_sum = 0.0;
      int fid_n = 0;
      std::vector<double> tprs;
      for (const auto& o : observations) {
        if (o.axis != v) continue;
        row.replicates += 1;
        row.tpr_mean += o.tpr;
        row.fpr_mean += o.fpr;
        tprs.push_back(o.tpr);
        if (!std::isnan(o.fid)) {
          fid_sum += o.fid;
          fid_n += 1;
        }
      }
      row.tpr_mean /= row.replicates;
      row.fpr_mean /= row.replicates;
      if (row.replicates > 1) {
        double ss = 0.0;
        for (double t : tprs) ss += (t - row.tpr_mean) * (t - row.tpr_mean);
        row.tpr_stdev = std::sqrt(ss / (row.replicates - 1));
      }
      if (fid_n > 0) row.fid_mean = fid_sum / fid_n;
      rows.push_back(row);
    }
    return rows;
  }

  // Mean TPR per axis value, ordered by ascending axis.
  std::vector<double> mean_tpr_by_axis() const {
    std::vector<double> out;
    for (const auto& row : summary()) out.push_back(row.tpr_mean);
    return out;
  }
};

// ---------------------------------------------------------------------------
// Watermark-rate sweep: fine-tune on a partially watermarked dataset and
// score the resulting generations with the fixed expert.
// ---------------------------------------------------------------------------

inline SweepObservation rate_point(const SweepInputs& in, double rate, const RunConfig& cfg,
                                   uint64_t seed, int replicate = 0) {
  in.validate();
  const RateApplication applied = apply_at_rate(*in.dataset, *in.watermarks, rate, seed);
  OffenderRun run = run_offender(*in.base, applied.exported, FtKind::kFullFt, cfg, seed, true);
  const DetectionReport r =
      compute_tpr_fpr(score_images(*in.expert, run.eval_gen.images.pixels),
                      score_images(*in.expert, *in.negatives), in.expert->threshold());
  SweepObservation obs;
  obs.axis = rate;
  obs.replicate = replicate;
  obs.seed = seed;
  obs.tpr = r.tpr;
  obs.fpr = r.fpr;
  obs.steps = run.result.steps_run;
  return obs;
}

inline std::vector<SweepObservation> rate_replicate(const SweepInputs& in,
                                                    std::vector<double> rates,
                                                    const RunConfig& cfg, uint64_t base_seed,
                                                    int replicate) {
  require(!rates.empty(), "rate sweep needs at least one rate");
  std::sort(rates.begin(), rates.end());
  std::vector<SweepObservation> out;
  for (double rate : rates) {
    out.push_back(rate_point(in, rate, cfg, point_seed(base_seed, rate, replicate), replicate));
  }
  return out;
}

inline SweepResult rate_sweep(const SweepInputs& in, const std::vector<double>& rates,
                              const RunConfig& cfg, uint64_t base_seed) {
  SweepResult result;
  result.axis_name = "watermark_rate";
  for (int r = 0; r < cfg.replicates; ++r) {
    auto obs = rate_replicate(in, rates, cfg, base_seed, r);
    result.observations.insert(result.observations.end(), obs.begin(), obs.end());
  }
  return result;
}

// ---------------------------------------------------------------------------
// Training-step sweep: one fine-tuning trajectory per replicate, observed at
// several step counts (a shorter run is the deterministic prefix of the full
// one because it replays the same seed). The distribution-distance column
// compares each observation's generations with the completed run's.
// ---------------------------------------------------------------------------

inline std::vector<double> normalized_fractions(std::vector<double> fractions) {
  require(!fractions.empty(), "step sweep needs at least one fraction");
  for (double f : fractions) {
    require(f > 0.0 && f <= 1.0, "step fractions must lie in (0, 1]");
  }
  fractions.push_back(1.0);  // the completion point anchors the distance column
  std::sort(fractions.begin(), fractions.end());
  fractions.erase(std::unique(fractions.begin(), fractions.end()), fractions.end());
  return fractions;
}

inline std::vector<SweepObservation> step_replicate(const SweepInputs& in,
                                                    const std::vector<double>& fractions,
                                                    const RunConfig& cfg, uint64_t base_seed,
                                                    int replicate,
                                                    const FidExtractor& extractor) {
  in.validate();
  const std::vector<double> grid = normalized_fractions(fractions);
  const ImageBatch<float> protected_data =
      export_views(in.dataset->data,
                   apply_watermarks(in.dataset->data, in.dataset->ids, *in.watermarks),
                   in.watermarks->config().eta);
  const FineTuneMethod full_method = method_for(cfg, FtKind::kFullFt);
  const uint64_t traj_seed = mix_seed(base_seed, 0x57e9, static_cast<uint64_t>(replicate));

  const int n_eval = cfg.scaled(cfg.eval_generations);
  const std::vector<Prompt> prompts = cycled_prompts(in.dataset->data.prompts, n_eval);

  struct PointGen {
    SweepObservation obs;
    Tensor<float> images;
  };
  std::vector<PointGen> points;
  for (double f : grid) {
    FineTuneMethod method = full_method;
    method.max_steps = std::max(1, static_cast<int>(std::lround(f * full_method.max_steps)));
    FineTuneResult<float> ft = finetune(*in.base, protected_data, method, traj_seed);
    const uint64_t gen_seed = point_seed(base_seed, f, replicate);
    GeneratedSet<float> gen =
        generate_eval_set(ft, prompts, 1, cfg.sample_steps, gen_seed, true);
    const DetectionReport r =
        compute_tpr_fpr(score_images(*in.expert, gen.images.pixels),
                        score_images(*in.expert, *in.negatives), in.expert->threshold());
    PointGen pg;
    pg.obs.axis = f;
    pg.obs.replicate = replicate;
    pg.obs.seed = gen_seed;
    pg.obs.tpr = r.tpr;
    pg.obs.fpr = r.fpr;
    pg.obs.steps = ft.steps_run;
    pg.images = std::move(gen.images.pixels);
    points.push_back(std::move(pg));
  }

  const Tensor<float>& final_images = points.back().images;  // grid ends at 1.0
  std::vector<SweepObservation> out;
  for (auto& pg : points) {
    pg.obs.fid = compute_fid(pg.images, final_images, extractor).value;
    out.push_back(pg.obs);
  }
  return out;
}

inline SweepResult step_sweep(const SweepInputs& in, const std::vector<double>& fractions,
                              const RunConfig& cfg, uint64_t base_seed) {
  in.validate();
  const FidExtractor extractor({in.negatives->dim(1), in.negatives->dim(2), in.negatives->dim(3)});
  SweepResult result;
  result.axis_name = "step_fraction";
  for (int r = 0; r < cfg.replicates; ++r) {
    auto obs = step_replicate(in, fractions, cfg, base_seed, r, extractor);
    result.observations.insert(result.observations.end(), obs.begin(), obs.end());
  }
  return result;
}

// ---------------------------------------------------------------------------
// Robustness table: balanced accuracy per method and corruption, side by
// side for a plain-trained and an augmentation-trained expert pair.
// ---------------------------------------------------------------------------

inline std::vector<Corruption> default_eval_corruptions() {
  Corruption jpeg;
  jpeg.kind = CorruptionKind::kJpeg;
  jpeg.jpeg_quality = 60;
  Corruption noise;
  noise.kind = CorruptionKind::kGaussNoise;
  noise.noise_sigma = 0.05;
  Corruption blur;
  blur.kind = CorruptionKind::kGaussBlur;
  blur.blur_sigma = 0.8;
  Corruption crop;
  crop.kind = CorruptionKind::kRandomCrop;
  crop.crop_ratio = 0.8;
  return {jpeg, noise, blur, crop};
}

inline Tensor<float> corrupt_set(const Tensor<float>& images, const Corruption& spec,
                                 uint64_t base_seed) {
  require(images.rank() == 4, "corruption expects an (N,C,H,W) batch");
  Tensor<float> out(images.shape());
  const long per = images.size() / images.dim(0);
  Tensor<float> one({images.dim(1), images.dim(2), images.dim(3)});
  for (int i = 0; i < images.dim(0); ++i) {
    std::copy(images.data() + i * per, images.data() + (i + 1) * per, one.data());
    const Tensor<float> c = corrupt(
        one, spec, mix_seed(base_seed, static_cast<uint64_t>(spec.kind), static_cast<uint64_t>(i)));
    std::copy(c.data(), c.data() + per, out.data() + i * per);
  }
  return out;
}

struct RobustnessTable {
  std::vector<FtKind> methods;
  std::vector<Corruption> corruptions;
  std::vector<double> clean_plain;      // uncorrupted accuracy per method
  std::vector<double> clean_augmented;  //   "        "     (augmented expert)
  Tensor<double> plain;                 // (methods, corruptions)
  Tensor<double> augmented;             // (methods, corruptions)

  double mean_gain() const {
    double g = 0.0;
    for (long i = 0; i < plain.size(); ++i) g += augmented[i] - plain[i];
    return plain.size() > 0 ? g / static_cast<double>(plain.size()) : 0.0;
  }
};

// `plain_experts` / `augmented_experts` are matched per method; evaluation
// sets provide both classes of generations for that method.
inline RobustnessTable robustness_table(const std::vector<ExpertDetector<float>>& plain_experts,
                                        const std::vector<ExpertDetector<float>>& augmented_experts,
                                        std::vector<MethodEvalSet<float>> eval_sets,
                                        const std::vector<Corruption>& corruptions,
                                        uint64_t base_seed) {
  require(!corruptions.empty(), "robustness table needs at least one corruption");
  require(plain_experts.size() == augmented_experts.size() &&
              plain_experts.size() == eval_sets.size() && !eval_sets.empty(),
          "robustness table needs matched expert pairs and evaluation sets");
  for (const Corruption& c : corruptions) c.validate();

  auto by_method = [](const auto& a, const auto& b) { return a.method < b.method; };
  std::vector<ExpertDetector<float>> plain = plain_experts, aug = augmented_experts;
  std::sort(plain.begin(), plain.end(),
            [](const auto& a, const auto& b) { return a.method() < b.method(); });
  std::sort(aug.begin(), aug.end(),
            [](const auto& a, const auto& b) { return a.method() < b.method(); });
  std::sort(eval_sets.begin(), eval_sets.end(), by_method);
  for (size_t i = 0; i < plain.size(); ++i) {
    require(plain[i].method() == eval_sets[i].method && aug[i].method() == eval_sets[i].method,
            "expert and evaluation method universes do not match");
  }

  const int M = static_cast<int>(eval_sets.size());
  const int K = static_cast<int>(corruptions.size());
  RobustnessTable table;
  table.corruptions = corruptions;
  table.plain = Tensor<double>({M, K});
  table.augmented = Tensor<double>({M, K});
  for (int i = 0; i < M; ++i) {
    const auto& set = eval_sets[static_cast<size_t>(i)];
    table.methods.push_back(set.method);
    table.clean_plain.push_back(balanced_accuracy(
        score_images(plain[static_cast<size_t>(i)], set.positives),
        score_images(plain[static_cast<size_t>(i)], set.negatives),
        plain[static_cast<size_t>(i)].threshold()));
    table.clean_augmented.push_back(balanced_accuracy(
        score_images(aug[static_cast<size_t>(i)], set.positives),
        score_images(aug[static_cast<size_t>(i)], set.negatives),
        aug[static_cast<size_t>(i)].threshold()));
    for (int k = 0; k < K; ++k) {
      const Corruption& spec = corruptions[static_cast<size_t>(k)];
      const uint64_t seed =
          mix_seed(base_seed, static_cast<uint64_t>(set.method), static_cast<uint64_t>(k));
      const Tensor<float> pos = corrupt_set(set.positives, spec, mix_seed(seed, 0x905));
      const Tensor<float> neg = corrupt_set(set.negatives, spec, mix_seed(seed, 0x4e9));
      table.plain.at(i, k) = balanced_accuracy(
          score_images(plain[static_cast<size_t>(i)], pos),
          score_images(plain[static_cast<size_t>(i)], neg),
          plain[static_cast<size_t>(i)].threshold());
      table.augmented.at(i, k) = balanced_accuracy(
          score_images(aug[static_cast<size_t>(i)], pos),
          score_images(aug[static_cast<size_t>(i)], neg),
          aug[static_cast<size_t>(i)].threshold());
    }
  }
  return table;
}

// ---------------------------------------------------------------------------
// CSV / JSON export
// ---------------------------------------------------------------------------

inline std::string csv_number(double v) {
  if (std::isnan(v)) return "";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

inline void write_sweep_csv(const std::filesystem::path& path, const SweepResult& result) {
  std::string text = result.axis_name + ",replicate,seed,tpr,fpr,steps,fid_to_final\n";
  for (const auto& o : result.observations) {
    text += csv_number(o.axis) + "," + std::to_string(o.replicate) + "," +
            std::to_string(o.seed) + "," + csv_number(o.tpr) + "," + csv_number(o.fpr) + "," +
            std::to_string(o.steps) + "," + csv_number(o.fid) + "\n";
  }
  write_text_file(path, text);
}

inline json sweep_json(const SweepResult& result) {
  json j;
  j["axis"] = result.axis_name;
  j["observations"] = json::array();
  for (const auto& o : result.observations) {
    json row{{"axis", o.axis},   {"replicate", o.replicate}, {"seed", o.seed},
             {"tpr", o.tpr},     {"fpr", o.fpr},             {"steps", o.steps}};
    if (!std::isnan(o.fid)) row["fid_to_final"] = o.fid;
    j["observations"].push_back(row);
  }
  j["summary"] = json::array();
  for (const auto& row : result.summary()) {
    json s{{"axis", row.axis},
           {"replicates", row.replicates},
           {"tpr_mean", row.tpr_mean},
           {"tpr_stdev", row.tpr_stdev},
           {"fpr_mean", row.fpr_mean}};
    if (!std::isnan(row.fid_mean)) s["fid_mean"] = row.fid_mean;
    j["summary"].push_back(s);
  }
  return j;
}

inline SweepResult sweep_from_json(const json& j) {
  SweepResult result;
  try {
    result.axis_name = j.at("axis").get<std::string>();
    for (const auto& row : j.at("observations")) {
      SweepObservation o;
      o.axis = row.at("axis").get<double>();
      o.replicate = row.at("replicate").get<int>();
      o.seed = row.at("seed").get<uint64_t>();
      o.tpr = row.at("tpr").get<double>();
      o.fpr = row.at("fpr").get<double>();
      o.steps = row.at("steps").get<int>();
      if (row.contains("fid_to_final")) o.fid = row.at("fid_to_final").get<double>();
      result.observations.push_back(o);
    }
  } catch (const json::exception& e) {
    throw data_error(std::string("bad sweep record: ") + e.what());
  }
  return result;
}

inline void write_robustness_csv(const std::filesystem::path& path, const RobustnessTable& t) {
  std::string text = "method,corruption,clean_plain,clean_augmented,plain,augmented\n";
  for (size_t i = 0; i < t.methods.size(); ++i) {
    for (size_t k = 0; k < t.corruptions.size(); ++k) {
      text += std::string(ft_kind_name(t.methods[i])) + "," +
              corruption_name(t.corruptions[k].kind) + "," + csv_number(t.clean_plain[i]) + "," +
              csv_number(t.clean_augmented[i]) + "," +
              csv_number(t.plain.at(static_cast<int>(i), static_cast<int>(k))) + "," +
              csv_number(t.augmented.at(static_cast<int>(i), static_cast<int>(k))) + "\n";
    }
  }
  write_text_file(path, text);
}

inline void write_transfer_csv(const std::filesystem::path& path, const TransferMatrix& t) {
  std::string text = "eval_method";
  for (FtKind m : t.methods) text += std::string(",expert_") + ft_kind_name(m);
  text += "\n";
  for (size_t i = 0; i < t.methods.size(); ++i) {
    text += ft_kind_name(t.methods[i]);
    for (size_t j = 0; j < t.methods.size(); ++j) {
      text += "," + csv_number(t.accuracy.at(static_cast<int>(i), static_cast<int>(j)));
    }
    text += "\n";
  }
  write_text_file(path, text);
}

}  // namespace tunemark
