#include <cmath>
#include <cstring>
#include <filesystem>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "tunemark/commands.hpp"
#include "tunemark/plot.hpp"
#include "tunemark/sweeps.hpp"

using namespace tunemark;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& leaf) {
  const fs::path dir = fs::temp_directory_path() / leaf;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

SweepResult sample_sweep() {
  SweepResult r;
  r.axis_name = "watermark_rate";
  for (int rep = 0; rep < 2; ++rep) {
    for (double axis : {0.2, 0.5, 1.0}) {
      SweepObservation o;
      o.axis = axis;
      o.replicate = rep;
      o.seed = point_seed(7, axis, rep);
      o.tpr = 0.5 + 0.4 * axis + 0.05 * rep;
      o.fpr = 0.1;
      o.steps = 60;
      if (axis == 1.0) o.fid = 3.25;
      r.observations.push_back(o);
    }
  }
  return r;
}

}  // namespace

TEST(PointSeeds, DistinctAcrossAxisAndReplicate) {
  std::set<uint64_t> seen;
  for (double axis : {0.1, 0.2, 0.25, 0.5, 1.0}) {
    for (int rep = 0; rep < 4; ++rep) seen.insert(point_seed(42, axis, rep));
  }
  EXPECT_EQ(seen.size(), 20u);
  // nearby axis values do not collide, and the base seed matters
  EXPECT_NE(point_seed(42, 0.1, 0), point_seed(42, std::nextafter(0.1, 1.0), 0));
  EXPECT_NE(point_seed(42, 0.1, 0), point_seed(43, 0.1, 0));
}

TEST(RankCorrelation, HandCases) {
  EXPECT_DOUBLE_EQ(spearman({1, 2, 3, 4}, {10, 20, 30, 40}), 1.0);
  EXPECT_DOUBLE_EQ(spearman({1, 2, 3, 4}, {9, 7, 5, 3}), -1.0);
  // monotone in ranks even when wildly nonlinear in values
  EXPECT_DOUBLE_EQ(spearman({1, 2, 3, 4}, {0.0, 1.0, 100.0, 1e6}), 1.0);
  // one swapped pair out of four: classic 1 - 6*2/(4*15) = 0.8
  EXPECT_NEAR(spearman({1, 2, 3, 4}, {1, 3, 2, 4}), 0.8, 1e-12);
  // a constant series carries no order information
  EXPECT_DOUBLE_EQ(spearman({1, 2, 3}, {5, 5, 5}), 0.0);
  EXPECT_THROW(spearman({1.0}, {2.0}), std::invalid_argument);

  const std::vector<double> ranks = average_ranks({3.0, 1.0, 3.0, 2.0});
  EXPECT_EQ(ranks, (std::vector<double>{3.5, 1.0, 3.5, 2.0}));
}

TEST(StepGrid, NormalizationAppendsSortsAndDedups) {
  const std::vector<double> grid = normalized_fractions({0.5, 0.1, 0.5, 1.0});
  EXPECT_EQ(grid, (std::vector<double>{0.1, 0.5, 1.0}));
  EXPECT_EQ(normalized_fractions({0.25}), (std::vector<double>{0.25, 1.0}));
  EXPECT_THROW(normalized_fractions({}), std::invalid_argument);
  EXPECT_THROW(normalized_fractions({0.0}), std::invalid_argument);
  EXPECT_THROW(normalized_fractions({1.5}), std::invalid_argument);
}

TEST(RateApplication, FullRateEqualsFullApplication) {
  const StyleDataset ds = make_style_dataset(6, {3, 16, 16}, 0, 11);
  const WatermarkSet<float> wm = random_watermarks<float>({1, 3, 16, 16}, 6, 4.0 / 255.0, 21, ds.ids);
  const RateApplication applied = apply_at_rate(ds, wm, 1.0, 5);
  EXPECT_EQ(applied.marked_count, 6);
  for (char m : applied.marked) EXPECT_EQ(m, 1);

  const ImageBatch<float> full = apply_watermarks(ds.data, ds.ids, wm);
  ASSERT_EQ(applied.data.pixels.shape(), full.pixels.shape());
  EXPECT_EQ(0, std::memcmp(applied.data.pixels.data(), full.pixels.data(),
                           sizeof(float) * static_cast<size_t>(full.pixels.size())));
}

TEST(RateApplication, PartialRateMarksTheRoundedCount) {
  const StyleDataset ds = make_style_dataset(12, {3, 16, 16}, 0, 12);
  const WatermarkSet<float> wm = random_watermarks<float>({1, 3, 16, 16}, 12, 4.0 / 255.0, 22, ds.ids);
  const RateApplication applied = apply_at_rate(ds, wm, 0.5, 9);
  EXPECT_EQ(applied.marked_count, 6);
  int marked = 0;
  const long per = static_cast<long>(3) * 16 * 16;
  for (int i = 0; i < 12; ++i) {
    marked += applied.marked[static_cast<size_t>(i)];
    const bool same = 0 == std::memcmp(applied.data.pixels.data() + i * per,
                                       ds.data.pixels.data() + i * per,
                                       sizeof(float) * static_cast<size_t>(per));
    // unmarked images keep their original pixels bitwise; marked ones move
    EXPECT_EQ(same, applied.marked[static_cast<size_t>(i)] == 0) << "image " << i;
  }
  EXPECT_EQ(marked, 6);

  // tiny rates still watermark at least one image
  EXPECT_EQ(apply_at_rate(ds, wm, 0.01, 9).marked_count, 1);

  // the selection is a pure function of the seed
  const RateApplication again = apply_at_rate(ds, wm, 0.5, 9);
  EXPECT_EQ(again.marked, applied.marked);

  EXPECT_THROW(apply_at_rate(ds, wm, 0.0, 9), std::invalid_argument);
  EXPECT_THROW(apply_at_rate(ds, wm, -0.3, 9), std::invalid_argument);
  EXPECT_THROW(apply_at_rate(ds, wm, 1.2, 9), std::invalid_argument);
}

TEST(SweepRecords, JsonRoundTripPreservesObservations) {
  const SweepResult r = sample_sweep();
  const SweepResult back = sweep_from_json(sweep_json(r));
  EXPECT_EQ(back.axis_name, r.axis_name);
  ASSERT_EQ(back.observations.size(), r.observations.size());
  for (size_t i = 0; i < r.observations.size(); ++i) {
    const auto& a = r.observations[i];
    const auto& b = back.observations[i];
    EXPECT_EQ(b.axis, a.axis);
    EXPECT_EQ(b.replicate, a.replicate);
    EXPECT_EQ(b.seed, a.seed);
    EXPECT_EQ(b.tpr, a.tpr);
    EXPECT_EQ(b.fpr, a.fpr);
    EXPECT_EQ(b.steps, a.steps);
    EXPECT_EQ(std::isnan(b.fid), std::isnan(a.fid));
    if (!std::isnan(a.fid)) EXPECT_EQ(b.fid, a.fid);
  }
  EXPECT_THROW(sweep_from_json(json{{"axis", "x"}}), data_error);
}

TEST(SweepRecords, SummaryAveragesPerAxisValue) {
  const SweepResult r = sample_sweep();
  EXPECT_EQ(r.axis_values(), (std::vector<double>{0.2, 0.5, 1.0}));
  const auto rows = r.summary();
  ASSERT_EQ(rows.size(), 3u);
  for (const auto& row : rows) {
    EXPECT_EQ(row.replicates, 2);
    const double want = 0.5 + 0.4 * row.axis + 0.025;  // mean over the two replicates
    EXPECT_NEAR(row.tpr_mean, want, 1e-12);
    EXPECT_NEAR(row.tpr_stdev, std::sqrt(2.0) * 0.025, 1e-12);
  }
  EXPECT_TRUE(std::isnan(rows[0].fid_mean));
  EXPECT_EQ(rows[2].fid_mean, 3.25);
  EXPECT_GE(spearman(r.axis_values(), r.mean_tpr_by_axis()), 0.99);
}

TEST(SweepRecords, CsvHasHeaderAndOneRowPerObservation) {
  const fs::path dir = fresh_dir("tunemark_sweep_csv_test");
  const SweepResult r = sample_sweep();
  write_sweep_csv(dir / "s.csv", r);
  const std::string text = read_text_file(dir / "s.csv");
  EXPECT_EQ(text.rfind("watermark_rate,replicate,seed,tpr,fpr,steps,fid_to_final\n", 0), 0u);
  size_t lines = 0;
  for (char c : text) lines += c == '\n';
  EXPECT_EQ(lines, 1 + r.observations.size());
  // NaN distances serialize as empty cells, never as "nan"
  EXPECT_EQ(text.find("nan"), std::string::npos);
  fs::remove_all(dir);
}

TEST(Charts, WritesReadablePngAndBreaksAtGaps) {
  const fs::path dir = fresh_dir("tunemark_chart_test");
  ChartSpec spec;
  spec.title = "tpr by rate";
  spec.x_label = "rate";
  spec.y_label = "tpr";
  spec.y_min = 0.0;
  spec.y_max = 1.05;
  Series a{"optimized", {0.2, 0.5, 0.8, 1.0}, {0.6, 0.75, 0.9, 0.95}};
  Series b{"random", {0.2, 0.5, 0.8, 1.0}, {0.4, std::nan(""), 0.55, 0.6}};
  write_line_chart(dir / "chart.png", spec, {a, b});

  const ImageU8 img = read_png((dir / "chart.png").string());
  EXPECT_EQ(img.width, spec.width);
  EXPECT_EQ(img.height, spec.height);
  // something was actually drawn on the white canvas
  size_t non_white = 0;
  for (size_t i = 0; i < img.rgb.size(); i += 3) non_white += img.rgb[i] != 255;
  EXPECT_GT(non_white, 1000u);

  EXPECT_THROW(write_line_chart(dir / "x.png", spec, {}), std::invalid_argument);
  Series empty{"none", {std::nan("")}, {std::nan("")}};
  EXPECT_THROW(write_line_chart(dir / "y.png", spec, {empty}), std::invalid_argument);
  fs::remove_all(dir);
}

TEST(TaskPool, ParallelAndSequentialWriteTheSameFiles) {
  const fs::path seq = fresh_dir("tunemark_tasks_seq");
  const fs::path par = fresh_dir("tunemark_tasks_par");
  auto make_tasks = [](const fs::path& dir) {
    std::vector<NamedTask> tasks;
    for (int i = 0; i < 5; ++i) {
      tasks.push_back(NamedTask{"t" + std::to_string(i), [dir, i] {
                                  write_text_file(dir / ("f" + std::to_string(i) + ".txt"),
                                                  "payload " + std::to_string(i * i));
                                }});
    }
    return tasks;
  };
  run_tasks(make_tasks(seq), 1);
  run_tasks(make_tasks(par), 3);
  for (int i = 0; i < 5; ++i) {
    const std::string name = "f" + std::to_string(i) + ".txt";
    EXPECT_EQ(read_text_file(seq / name), read_text_file(par / name));
  }
  fs::remove_all(seq);
  fs::remove_all(par);
}

TEST(TaskPool, WorkerFailurePropagatesItsExitCode) {
  std::vector<NamedTask> tasks;
  tasks.push_back(NamedTask{"ok", [] {}});
  tasks.push_back(NamedTask{"bad", [] { throw data_error("missing artifact"); }});
  tasks.push_back(NamedTask{"ok2", [] {}});
  try {
    run_tasks(tasks, 2);
    FAIL() << "expected worker_error";
  } catch (const worker_error& e) {
    EXPECT_EQ(e.code(), kExitDataError);
    EXPECT_NE(std::string(e.what()).find("bad"), std::string::npos);
  }
  // sequential mode surfaces the original exception type unchanged
  EXPECT_THROW(run_tasks(tasks, 1), data_error);

  EXPECT_EQ(exit_code_for(config_error("x")), kExitConfigError);
  EXPECT_EQ(exit_code_for(data_error("x")), kExitDataError);
  EXPECT_EQ(exit_code_for(numeric_error("x")), kExitNumericError);
  EXPECT_EQ(exit_code_for(std::invalid_argument("x")), kExitConfigError);
  EXPECT_EQ(exit_code_for(std::runtime_error("x")), kExitFailure);
  EXPECT_EQ(exit_code_for(worker_error("x", 4)), 4);
}
