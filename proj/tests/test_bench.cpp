#include <gtest/gtest.h>

#include <sstream>

#include "oracles.hpp"

using namespace cpconv;

namespace {

struct SmallToy {
  LabeledDataset<double> train_set, eval_set;
  NetworkSpec<double> net;
};

// A 12x12 toy problem small enough for per-test training.
const SmallToy& small_toy() {
  static const SmallToy toy = [] {
    SyntheticConfig sc;
    sc.size = 12;
    sc.per_class = 30;
    sc.num_classes = 3;
    sc.seed = 1;
    SmallToy t{gen_synthetic<double>(sc), {}, {}};
    sc.seed = 2;
    sc.per_class = 20;
    t.eval_set = gen_synthetic<double>(sc);
    ToyNetConfig tc;
    tc.image_size = 12;
    tc.num_classes = 3;
    tc.conv1_kernel = 3;
    tc.conv1_channels = 6;
    TrainConfig cfg;
    cfg.epochs = 5;
    t.net = train(make_toy_net<double>(tc), t.train_set, cfg).net;
    return t;
  }();
  return toy;
}

SweepConfig quick_sweep() {
  SweepConfig c;
  c.measure_time = false;
  c.finetune.epochs = 1;
  c.finetune.learning_rate = 0.001;
  c.finetune.grad_clip_norm = 5.0;
  c.solver.seed = 3;
  return c;
}

}  // namespace

TEST(Timing, RequiresThreeIterations) {
  EXPECT_THROW(time_median_ms([] {}, 0, 2), std::invalid_argument);
  EXPECT_GE(time_median_ms([] {}, 0, 3), 0.0);
}

TEST(Timing, SameLayerTwiceIsSelfConsistent) {
  std::mt19937_64 rng(1);
  const auto layer = make_conv_layer<float>(5, 5, 8, 8, 1, Padding::valid, true, rng);
  TimingConfig cfg;
  cfg.warmup = 3;
  cfg.iters = 9;
  const double a = time_layer(layer, {8, 16, 16}, cfg);
  const double b = time_layer(layer, {8, 16, 16}, cfg);
  EXPECT_GT(a, 0.0);
  EXPECT_NEAR(a / b, 1.0, 0.25);
}

TEST(Timing, TrivialLayerAgainstItself) {
  std::mt19937_64 rng(2);
  const auto layer = make_conv_layer<float>(1, 1, 4, 4, 1, Padding::valid, false, rng);
  TimingConfig cfg;
  cfg.iters = 15;
  const double a = time_layer(layer, {4, 16, 16}, cfg);
  const double b = time_layer(layer, {4, 16, 16}, cfg);
  EXPECT_NEAR(a / b, 1.0, 0.3);
}

TEST(BenchCsv, HeaderAndRowFormat) {
  std::ostringstream os;
  BenchReport r;
  r.layer_name = "conv1";
  r.method = "nls";
  r.rank = 4;
  r.rel_error = 0.5;
  r.params_original = 300;
  r.params_cp = 56;
  r.param_ratio = 300.0 / 56.0;
  r.predicted_madds_original = 300;
  r.predicted_madds_cp = 56;
  r.acc_before = 1;
  r.acc_after_no_ft = 0.75;
  r.acc_after_ft = 0.875;
  r.seed = 9;
  r.status = "error: a, b";
  write_bench_csv(os, {r});
  std::istringstream is(os.str());
  std::string header, row;
  std::getline(is, header);
  std::getline(is, row);
  EXPECT_EQ(header,
            "layer_name,method,rank,rel_error,params_original,params_cp,param_ratio,predicted_madds_original,"
            "predicted_madds_cp,measured_ms_original,measured_ms_cp,speedup,acc_before,acc_after_no_ft,acc_after_ft,"
            "seed,status");
  EXPECT_EQ(row, "conv1,nls,4,0.5,300,56,5.3571428571428568,300,56,nan,nan,nan,1,0.75,0.875,9,error: a; b");
  EXPECT_DOUBLE_EQ(r.drop_no_ft(), 0.25);
  EXPECT_DOUBLE_EQ(r.drop_ft(), 0.125);
}

TEST(RankSweep, StaticColumnsMatchComplexity) {
  const auto& toy = small_toy();
  auto cfg = quick_sweep();
  cfg.finetune_enabled = false;
  const auto reports = rank_sweep(toy.net, "conv1", {3, 1, 2}, {CpMethod::greedy}, cfg, {toy.train_set, toy.eval_set});
  ASSERT_EQ(reports.size(), 3u);
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const auto& r = reports[i];
    EXPECT_EQ(r.rank, i + 1);
    EXPECT_EQ(r.status, "ok");
    const auto c = complexity(3, 1, 6, r.rank);
    EXPECT_EQ(r.params_original, c.original);
    EXPECT_EQ(r.params_cp, c.cp);
    EXPECT_EQ(r.param_ratio, c.original_over_cp);
    EXPECT_EQ(static_cast<double>(r.predicted_madds_original) / static_cast<double>(r.predicted_madds_cp), r.param_ratio);
    EXPECT_TRUE(std::isnan(r.acc_after_ft));
    EXPECT_TRUE(std::isnan(r.speedup));
  }
}

TEST(RankSweep, ExtendPreviousRankIsMonotone) {
  const auto& toy = small_toy();
  auto cfg = quick_sweep();
  cfg.finetune_enabled = false;
  cfg.solver.init = InitMethod::extend_previous_rank;
  const auto reports =
      rank_sweep(toy.net, "conv2", {1, 2, 3, 4, 5, 6}, {CpMethod::nls}, cfg, {toy.train_set, toy.eval_set});
  for (std::size_t i = 1; i < reports.size(); ++i) EXPECT_LE(reports[i].rel_error, reports[i - 1].rel_error + 1e-10);
}

TEST(RankSweep, CellErrorsAreRecordedAndSweepContinues) {
  const auto& toy = small_toy();
  auto cfg = quick_sweep();
  cfg.finetune.momentum = 1.5;  // rejected by TrainConfig::validate inside every cell
  const auto reports =
      rank_sweep(toy.net, "conv1", {1, 2}, {CpMethod::nls, CpMethod::greedy}, cfg, {toy.train_set, toy.eval_set});
  ASSERT_EQ(reports.size(), 4u);
  for (const auto& r : reports) {
    EXPECT_EQ(r.status.rfind("error: ", 0), 0u) << r.status;
    EXPECT_FALSE(std::isnan(r.rel_error));
  }
}

TEST(RankSweep, ReproducibleExceptTiming) {
  const auto& toy = small_toy();
  auto cfg = quick_sweep();
  cfg.measure_time = true;
  cfg.timing.iters = 3;
  cfg.timing.warmup = 0;
  const SweepData<double> data{toy.train_set, toy.eval_set};
  const auto a = rank_sweep(toy.net, "conv1", {1, 2}, {CpMethod::nls, CpMethod::als}, cfg, data);
  const auto b = rank_sweep(toy.net, "conv1", {1, 2}, {CpMethod::nls, CpMethod::als}, cfg, data);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    auto ra = a[i], rb = b[i];
    EXPECT_GT(ra.measured_ms_cp, 0.0);
    ra.measured_ms_original = rb.measured_ms_original = 0;
    ra.measured_ms_cp = rb.measured_ms_cp = 0;
    ra.speedup = rb.speedup = 0;
    EXPECT_EQ(bench_csv_row(ra), bench_csv_row(rb));
  }
}

TEST(DropTable, ExactRankGivesZeroNoFineTuneDrop) {
  const auto& toy = small_toy();
  std::mt19937_64 rng(4);
  auto net = toy.net;
  auto& conv = net.layer("conv1").conv();
  const auto f = std::vector<FactorMatrix<double>>{oracle::randn_factor(3, 2, rng), oracle::randn_factor(3, 2, rng),
                                                   oracle::randn_factor(1, 2, rng), oracle::randn_factor(6, 2, rng)};
  conv.kernel = oracle::brute_reconstruct(f);
  auto cfg = quick_sweep();
  const auto t = greedy_vs_nls_table(net, "conv1", {2}, false, cfg, {toy.train_set, toy.eval_set});
  EXPECT_EQ(t.rows, (std::vector<std::string>{"random-init", "greedy", "nls"}));
  EXPECT_NEAR(t.drop_no_ft.at("nls")[0], 0.0, 1e-12);
  EXPECT_TRUE(std::isnan(t.drop_ft.at("nls")[0]));
  std::ostringstream os;
  write_drop_table(os, t, false);
  EXPECT_EQ(os.str().substr(0, os.str().find('\n')), "method,R=2");
}

TEST(DropTable, RowsAndFineTuneColumns) {
  const auto& toy = small_toy();
  const auto t = greedy_vs_nls_table(toy.net, "conv1", {2, 1}, true, quick_sweep(), {toy.train_set, toy.eval_set});
  EXPECT_EQ(t.ranks, (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(t.cells.size(), 6u);
  for (const auto& row : t.rows)
    for (std::size_t i = 0; i < 2; ++i) {
      EXPECT_FALSE(std::isnan(t.drop_ft.at(row)[i])) << row;
      EXPECT_FALSE(std::isnan(t.drop_no_ft.at(row)[i])) << row;
    }
  for (const auto& c : t.cells) EXPECT_EQ(c.status, "ok");
}
