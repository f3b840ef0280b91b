#pragma once

// Measurements for a rewritten layer: relative kernel error, parameter and
// multiply-add counts, CPU timing of the original layer against the
// four-layer stack, and classification accuracy before/after fine-tuning.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "cpconv/cp_decomposition.hpp"
#include "cpconv/network.hpp"
#include "cpconv/rewrite.hpp"

namespace cpconv {

struct TimingConfig {
  std::size_t batch = 64;
  std::size_t warmup = 2;
  std::size_t iters = 5;
  std::uint64_t seed = 0;
};

// Timed sections take this lock so concurrent sweep cells never overlap
// while a clock is running.
inline std::mutex& timing_mutex() {
  static std::mutex m;
  return m;
}

// Median wall-clock milliseconds of `iters` calls after `warmup` untimed calls.
template <typename F>
double time_median_ms(F&& run, std::size_t warmup, std::size_t iters) {
  if (iters < 3) throw std::invalid_argument("time_median_ms: need at least 3 timed iterations");
  std::lock_guard lock(timing_mutex());
  for (std::size_t i = 0; i < warmup; ++i) run();
  std::vector<double> ms;
  ms.reserve(iters);
  for (std::size_t i = 0; i < iters; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    run();
    const auto t1 = std::chrono::steady_clock::now();
    ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  std::sort(ms.begin(), ms.end());
  return iters % 2 ? ms[iters / 2] : 0.5 * (ms[iters / 2 - 1] + ms[iters / 2]);
}

template <typename T>
DenseTensor<T> random_batch(const Shape& sample_shape, std::size_t batch, std::uint64_t seed) {
  Shape s{batch};
  s.insert(s.end(), sample_shape.begin(), sample_shape.end());
  DenseTensor<T> x(s);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& v : x.data()) v = static_cast<T>(normal(rng));
  return x;
}

// `input_shape` is C x H x W of one sample.
template <typename T>
double time_layer(const ConvLayerSpec<T>& layer, const Shape& input_shape, const TimingConfig& cfg = {}) {
  const auto x = random_batch<T>(input_shape, cfg.batch, cfg.seed);
  volatile T sink = 0;
  return time_median_ms([&] { sink = conv_forward(layer, x)[0]; }, cfg.warmup, cfg.iters);
}

template <typename T>
double time_layer(const ConvStack<T>& stack, const Shape& input_shape, const TimingConfig& cfg = {}) {
  const auto x = random_batch<T>(input_shape, cfg.batch, cfg.seed);
  volatile T sink = 0;
  return time_median_ms([&] { sink = stack_forward(stack, x)[0]; }, cfg.warmup, cfg.iters);
}

struct BenchReport {
  std::string layer_name;
  std::string method;
  std::size_t rank = 0;
  std::uint64_t seed = 0;
  double rel_error = std::numeric_limits<double>::quiet_NaN();
  std::size_t params_original = 0;
  std::size_t params_cp = 0;
  double param_ratio = 0;
  std::size_t predicted_madds_original = 0;
  std::size_t predicted_madds_cp = 0;
  double measured_ms_original = std::numeric_limits<double>::quiet_NaN();
  double measured_ms_cp = std::numeric_limits<double>::quiet_NaN();
  double speedup = std::numeric_limits<double>::quiet_NaN();
  double acc_before = std::numeric_limits<double>::quiet_NaN();
  double acc_after_no_ft = std::numeric_limits<double>::quiet_NaN();
  double acc_after_ft = std::numeric_limits<double>::quiet_NaN();
  // "ok" or the error that stopped this cell.
  std::string status = "ok";

  // Accuracy drops, original minus approximated (negative = improvement).
  double drop_no_ft() const { return acc_before - acc_after_no_ft; }
  double drop_ft() const { return acc_before - acc_after_ft; }
};

inline const char* kBenchCsvHeader =
    "layer_name,method,rank,rel_error,params_original,params_cp,param_ratio,predicted_madds_original,"
    "predicted_madds_cp,measured_ms_original,measured_ms_cp,speedup,acc_before,acc_after_no_ft,acc_after_ft,seed,status";

inline std::string format_double(double v, int digits = 17) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

inline std::string bench_csv_row(const BenchReport& r) {
  std::string row;
  auto add = [&](const std::string& s) {
    if (!row.empty()) row += ',';
    row += s;
  };
  add(r.layer_name);
  add(r.method);
  add(std::to_string(r.rank));
  add(format_double(r.rel_error));
  add(std::to_string(r.params_original));
  add(std::to_string(r.params_cp));
  add(format_double(r.param_ratio));
  add(std::to_string(r.predicted_madds_original));
  add(std::to_string(r.predicted_madds_cp));
  add(format_double(r.measured_ms_original, 6));
  add(format_double(r.measured_ms_cp, 6));
  add(format_double(r.speedup, 6));
  add(format_double(r.acc_before));
  add(format_double(r.acc_after_no_ft));
  add(format_double(r.acc_after_ft));
  add(std::to_string(r.seed));
  std::string status = r.status;
  std::replace(status.begin(), status.end(), ',', ';');
  std::replace(status.begin(), status.end(), '\n', ' ');
  add(status);
  return row;
}

inline void write_bench_csv(std::ostream& os, const std::vector<BenchReport>& reports) {
  os << kBenchCsvHeader << '\n';
  for (const auto& r : reports) os << bench_csv_row(r) << '\n';
}

struct SweepConfig {
  SolverConfig solver;
  TrainConfig finetune;
  TimingConfig timing;
  bool measure_time = true;
  bool finetune_enabled = true;
};

template <typename T>
struct SweepData {
  const LabeledDataset<T>& train;
  const LabeledDataset<T>& eval;
};

namespace detail {

template <typename T>
void fill_static_counts(BenchReport& r, const ConvKernel<T>& k, std::size_t rank) {
  const CostReport c = complexity(k.d(), k.in_channels(), k.out_channels(), rank);
  r.params_original = c.original;
  r.params_cp = c.cp;
  r.param_ratio = c.original_over_cp;
  r.predicted_madds_original = c.original;
  r.predicted_madds_cp = c.cp;
}

template <typename T>
void measure_cell(BenchReport& r, const NetworkSpec<T>& net, const std::string& layer_name,
                  const NetworkSpec<T>& rewritten, const ConvStack<T>& stack, const SweepConfig& cfg,
                  const SweepData<T>& data) {
  if (cfg.measure_time) {
    const Shape in = net.shape_before(net.index_of(layer_name));
    r.measured_ms_original = time_layer(net.layer(layer_name).conv().template cast<float>(), in, cfg.timing);
    ConvStack<float> fstack{{stack.layers[0].template cast<float>(), stack.layers[1].template cast<float>(),
                             stack.layers[2].template cast<float>(), stack.layers[3].template cast<float>()}};
    r.measured_ms_cp = time_layer(fstack, in, cfg.timing);
    r.speedup = r.measured_ms_original / r.measured_ms_cp;
  }
  r.acc_after_no_ft = evaluate(rewritten, data.eval);
  if (cfg.finetune_enabled) {
    const auto tuned = train(rewritten, data.train, cfg.finetune);
    r.acc_after_ft = evaluate(tuned.net, data.eval);
  }
}

}  // namespace detail

// One report per (rank, method). With InitMethod::extend_previous_rank, NLS
// cells start from the NLS solution of the previous rank in `ranks`
// (sorted ascending first). Solver failures are recorded in the cell's
// status and the sweep moves on.
template <typename T>
std::vector<BenchReport> rank_sweep(const NetworkSpec<T>& net, const std::string& layer_name,
                                    std::vector<std::size_t> ranks, const std::vector<CpMethod>& methods,
                                    const SweepConfig& cfg, const SweepData<T>& data) {
  const ConvKernel<T> kernel = rewritable_kernel(net, layer_name);
  std::sort(ranks.begin(), ranks.end());
  const double acc_before = evaluate(net, data.eval);
  std::vector<BenchReport> reports;
  for (CpMethod method : methods) {
    std::optional<CPDecomposition<T>> previous;
    for (std::size_t rank : ranks) {
      BenchReport r;
      r.layer_name = layer_name;
      r.method = to_string(method);
      r.rank = rank;
      r.seed = cfg.solver.seed;
      r.acc_before = acc_before;
      detail::fill_static_counts(r, kernel, rank);
      try {
        CPDecomposition<T> d;
        if (method == CpMethod::nls) {
          SolverConfig sc = cfg.solver;
          const bool chain = sc.init == InitMethod::extend_previous_rank && previous.has_value();
          if (sc.init == InitMethod::extend_previous_rank && !chain) sc.init = InitMethod::als_warm_start;
          d = cp_nls(kernel.tensor, rank, sc, chain ? previous : std::nullopt);
          previous = d;
        } else {
          d = cp_decompose(kernel.tensor, rank, method, cfg.solver);
        }
        const auto factors = KernelCPFactors<T>::from_decomposition(d);
        r.rel_error = static_cast<double>(relative_error(reconstruct_kernel(factors), kernel.tensor));
        const ConvStack<T> stack = build_conv_stack(factors, kernel.bias, net.layer(layer_name).conv().padding);
        const NetworkSpec<T> rewritten = splice_stack(net, layer_name, stack);
        detail::measure_cell(r, net, layer_name, rewritten, stack, cfg, data);
      } catch (const std::exception& e) {
        r.status = std::string("error: ") + e.what();
        if (method == CpMethod::nls) previous.reset();
      }
      reports.push_back(std::move(r));
    }
  }
  return reports;
}

// Accuracy-drop table with rows random-init, greedy and nls, one column per
// rank. The random-init row replaces the layer with a freshly initialised
// stack of the same shape.
struct DropTable {
  std::vector<std::size_t> ranks;
  std::vector<std::string> rows;
  // rows x ranks, original minus approximated accuracy.
  std::map<std::string, std::vector<double>> drop_no_ft;
  std::map<std::string, std::vector<double>> drop_ft;
  std::vector<BenchReport> cells;
};

template <typename T>
DropTable greedy_vs_nls_table(const NetworkSpec<T>& net, const std::string& layer_name, std::vector<std::size_t> ranks,
                              bool with_ft, const SweepConfig& cfg, const SweepData<T>& data) {
  std::sort(ranks.begin(), ranks.end());
  SweepConfig sc = cfg;
  sc.finetune_enabled = with_ft;
  sc.solver.init = InitMethod::als_warm_start;
  DropTable table{ranks, {"random-init", "greedy", "nls"}, {}, {}, {}};

  const ConvKernel<T> kernel = rewritable_kernel(net, layer_name);
  const Padding padding = net.layer(layer_name).conv().padding;
  const double acc_before = evaluate(net, data.eval);
  for (std::size_t rank : ranks) {
    BenchReport r;
    r.layer_name = layer_name;
    r.method = "random-init";
    r.rank = rank;
    r.seed = cfg.solver.seed;
    r.acc_before = acc_before;
    detail::fill_static_counts(r, kernel, rank);
    std::mt19937_64 rng(cfg.solver.seed ^ (0xA5A5A5A5ull + rank));
    const auto stack = random_conv_stack<T>(kernel.d(), kernel.in_channels(), kernel.out_channels(), rank, kernel.bias,
                                            padding, rng);
    r.rel_error = static_cast<double>(relative_error(reconstruct_kernel(factors_from_stack(stack)), kernel.tensor));
    detail::measure_cell(r, net, layer_name, splice_stack(net, layer_name, stack), stack, sc, data);
    table.cells.push_back(r);
  }
  auto swept = rank_sweep(net, layer_name, ranks, {CpMethod::greedy, CpMethod::nls}, sc, data);
  table.cells.insert(table.cells.end(), swept.begin(), swept.end());

  for (const auto& row : table.rows) {
    table.drop_no_ft[row].assign(ranks.size(), std::numeric_limits<double>::quiet_NaN());
    table.drop_ft[row].assign(ranks.size(), std::numeric_limits<double>::quiet_NaN());
  }
  for (const auto& c : table.cells) {
    const auto col = static_cast<std::size_t>(std::find(ranks.begin(), ranks.end(), c.rank) - ranks.begin());
    table.drop_no_ft[c.method][col] = c.drop_no_ft();
    if (with_ft) table.drop_ft[c.method][col] = c.drop_ft();
  }
  return table;
}

inline void write_drop_table(std::ostream& os, const DropTable& t, bool with_ft) {
  os << "method";
  for (std::size_t r : t.ranks) os << ",R=" << r;
  os << '\n';
  for (const auto& row : t.rows) {
    os << row;
    for (double v : (with_ft ? t.drop_ft : t.drop_no_ft).at(row)) os << ',' << format_double(v, 6);
    os << '\n';
  }
}

}  // namespace cpconv
