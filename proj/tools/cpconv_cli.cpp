// cpconv: decompose, rewrite, fine-tune and benchmark convolution layers.
//
// Exit codes: 0 success, 1 usage or input error, 2 solver failure,
// 3 verification failure (appendix-check).

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "cpconv/cpconv.hpp"

namespace fs = std::filesystem;
using namespace cpconv;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitSolver = 2;
constexpr int kExitVerify = 3;

struct VerificationFailed : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

InitMethod parse_init(const std::string& s) {
  if (s == "random") return InitMethod::random_gaussian;
  if (s == "als") return InitMethod::als_warm_start;
  if (s == "extend") return InitMethod::extend_previous_rank;
  throw std::invalid_argument("unknown --init '" + s + "' (expected random, als or extend)");
}

// The 2 x 2 x 2 tensor with frontal slices [[1,0],[0,1]] and [[1,1],[0,2]].
DenseTensor<double> appendix_tensor() {
  DenseTensor<double> g({2, 2, 2});
  g(0, 0, 0) = 1;
  g(1, 1, 0) = 1;
  g(0, 0, 1) = 1;
  g(0, 1, 1) = 1;
  g(1, 1, 1) = 2;
  return g;
}

struct SolverFlags {
  std::uint64_t seed = 0;
  std::size_t restarts = 3;
  std::size_t max_iterations = 0;
  double tolerance = 1e-10;
  std::string init = "als";

  void add(CLI::App* cmd) {
    cmd->add_option("--seed", seed, "RNG seed");
    cmd->add_option("--restarts", restarts, "random restarts, best kept")->check(CLI::PositiveNumber);
    cmd->add_option("--max-iter", max_iterations, "iteration cap (0 = method default)");
    cmd->add_option("--tol", tolerance, "stop when the relative residual changes less than this");
  }

  SolverConfig config() const {
    SolverConfig c;
    c.seed = seed;
    c.restarts = restarts;
    if (max_iterations) c.max_iterations = max_iterations;
    c.tolerance = tolerance;
    c.init = parse_init(init);
    return c;
  }
};

void write_history_csv(const fs::path& path, const std::vector<EpochStats>& history) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw FormatError("cannot write " + path.string());
  os << "epoch,loss,train_acc,eval_acc\n";
  for (const auto& h : history) {
    os << h.epoch << ',' << format_double(h.loss) << ',' << format_double(h.train_acc) << ','
       << (h.eval_acc ? format_double(*h.eval_acc) : std::string("nan")) << '\n';
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CP-decomposition rewrite of convolution layers"};
  app.require_subcommand(1);

  // decompose
  std::string model, layer, method = "nls", out, factors_dir, data_dir, eval_dir;
  std::size_t rank = 0;
  SolverFlags solver;
  auto* decompose = app.add_subcommand("decompose", "CP-decompose one convolution kernel");
  decompose->add_option("--model", model, "model directory")->required();
  decompose->add_option("--layer", layer, "layer name")->required();
  decompose->add_option("--rank", rank, "CP rank")->required()->check(CLI::PositiveNumber);
  decompose->add_option("--method", method, "nls, als or greedy")->check(CLI::IsMember({"nls", "als", "greedy"}));
  decompose->add_option("--out", out, "output directory for the factors")->required();
  solver.add(decompose);

  // rewrite
  auto* rewrite = app.add_subcommand("rewrite", "replace a layer by its four-layer CP stack");
  rewrite->add_option("--model", model, "model directory")->required();
  rewrite->add_option("--layer", layer, "layer name")->required();
  rewrite->add_option("--factors", factors_dir, "directory written by decompose")->required();
  rewrite->add_option("--out", out, "output model directory")->required();

  // finetune
  TrainConfig train_cfg;
  double clip = 0;
  auto* finetune = app.add_subcommand("finetune", "momentum-SGD fine-tuning of a whole network");
  finetune->add_option("--model", model, "model directory")->required();
  finetune->add_option("--data", data_dir, "training dataset directory")->required();
  finetune->add_option("--eval-data", eval_dir, "held-out dataset for the eval_acc column");
  finetune->add_option("--epochs", train_cfg.epochs, "epochs")->required();
  finetune->add_option("--lr", train_cfg.learning_rate, "learning rate")->required();
  finetune->add_option("--momentum", train_cfg.momentum, "momentum")->required();
  finetune->add_option("--batch", train_cfg.batch_size, "batch size");
  finetune->add_flag("--freeze-inserted", train_cfg.freeze_inserted, "keep CP-inserted layers fixed");
  finetune->add_option("--clip", clip, "global gradient-norm ceiling (0 disables)")->default_val(5.0);
  finetune->add_option("--seed", train_cfg.seed, "shuffling seed");
  finetune->add_option("--out", out, "output model directory")->required();

  // train-toy
  ToyNetConfig toy;
  auto* train_toy = app.add_subcommand("train-toy", "build and train the two-convolution toy network");
  train_toy->add_option("--data", data_dir, "training dataset directory")->required();
  train_toy->add_option("--eval-data", eval_dir, "held-out dataset for the eval_acc column");
  train_toy->add_option("--epochs", train_cfg.epochs, "epochs");
  train_toy->add_option("--lr", train_cfg.learning_rate, "learning rate");
  train_toy->add_option("--momentum", train_cfg.momentum, "momentum");
  train_toy->add_option("--seed", toy.seed, "initialisation and shuffling seed");
  train_toy->add_option("--out", out, "output model directory")->required();

  // bench
  std::string ranks_arg, methods_arg = "nls,greedy", table_out;
  SweepConfig sweep;
  std::size_t ft_epochs = 4;
  double ft_lr = 0.001;
  bool no_time = false, no_ft = false, ft_freeze = false;
  auto* bench = app.add_subcommand("bench", "rank x method sweep with error, size, speed and accuracy columns");
  bench->add_option("--model", model, "model directory")->required();
  bench->add_option("--layer", layer, "layer name")->required();
  bench->add_option("--ranks", ranks_arg, "comma-separated ranks")->required();
  bench->add_option("--methods", methods_arg, "comma-separated methods (nls, als, greedy)");
  bench->add_option("--data", data_dir, "fine-tuning dataset directory")->required();
  bench->add_option("--eval-data", eval_dir, "accuracy dataset (defaults to --data)");
  bench->add_option("--init", solver.init, "NLS start: random, als or extend")->check(CLI::IsMember({"random", "als", "extend"}));
  bench->add_option("--ft-epochs", ft_epochs, "fine-tuning epochs per cell");
  bench->add_option("--ft-lr", ft_lr, "fine-tuning learning rate");
  bench->add_flag("--freeze-inserted", ft_freeze, "keep the CP layers fixed while fine-tuning");
  bench->add_option("--iters", sweep.timing.iters, "timed repetitions per measurement")->check(CLI::Range(3, 1000));
  bench->add_flag("--no-time", no_time, "skip CPU timings");
  bench->add_flag("--no-ft", no_ft, "skip fine-tuning");
  bench->add_option("--table", table_out, "also write the random/greedy/nls accuracy-drop table here");
  bench->add_option("--out", out, "report CSV path")->required();
  solver.add(bench);

  // complexity
  std::size_t cd = 0, cs = 0, ct = 0;
  auto* cost = app.add_subcommand("complexity", "parameter / multiply-add counts of the three schemes");
  cost->add_option("--d", cd, "kernel size")->required()->check(CLI::PositiveNumber);
  cost->add_option("--s", cs, "input channels")->required()->check(CLI::PositiveNumber);
  cost->add_option("--t", ct, "output channels")->required()->check(CLI::PositiveNumber);
  cost->add_option("--rank", rank, "CP rank")->required()->check(CLI::PositiveNumber);

  // appendix-check
  auto* appendix = app.add_subcommand("appendix-check", "greedy vs NLS on the 2x2x2 rank-2 example tensor");
  solver.add(appendix);

  // gen-data
  SyntheticConfig synth;
  auto* gen = app.add_subcommand("gen-data", "synthetic blob-location classification data");
  gen->add_option("--classes", synth.num_classes, "number of classes")->required()->check(CLI::Range(2, 1000));
  gen->add_option("--per-class", synth.per_class, "samples per class")->required()->check(CLI::PositiveNumber);
  gen->add_option("--seed", synth.seed, "RNG seed");
  gen->add_option("--noise", synth.noise, "pixel noise standard deviation");
  gen->add_option("--jitter", synth.jitter, "blob-centre jitter standard deviation");
  gen->add_option("--size", synth.size, "image side length");
  gen->add_option("--out", out, "output dataset directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*decompose) {
      const auto net = load_network<double>(model);
      const auto kernel = rewritable_kernel(net, layer);
      SolverTrace trace;
      const auto f = decompose_kernel(kernel, rank, parse_cp_method(method), solver.config(), &trace);
      save_decomposition(out, f.as_decomposition(),
                         {{"layer", layer},
                          {"method", method},
                          {"seed", std::to_string(solver.seed)},
                          {"rel_error", format_double(*f.rel_error)}});
      std::printf("layer %s rank %zu method %s rel_error %.10g\n", layer.c_str(), rank, method.c_str(), *f.rel_error);
    } else if (*rewrite) {
      const auto net = load_network<double>(model);
      const auto d = load_decomposition<double>(factors_dir);
      const auto rewritten = rewrite_network(net, layer, KernelCPFactors<double>::from_decomposition(d));
      save_network(out, rewritten);
      std::printf("rewrote %s into %zu layers (%zu -> %zu parameters)\n", layer.c_str(), rewritten.layers.size(),
                  net.parameter_count(), rewritten.parameter_count());
    } else if (*finetune) {
      if (clip > 0) train_cfg.grad_clip_norm = clip;
      const auto net = load_network<double>(model);
      const auto data = load_dataset<double>(data_dir, net.num_classes());
      std::optional<LabeledDataset<double>> eval;
      if (!eval_dir.empty()) eval = load_dataset<double>(eval_dir, net.num_classes());
      const auto result = train(net, data, train_cfg, eval ? &*eval : nullptr);
      save_network(out, result.net);
      write_history_csv(fs::path(out) / "history.csv", result.history);
      const auto& last = result.history.empty() ? EpochStats{} : result.history.back();
      std::printf("epochs %zu loss %.6g train_acc %.4f\n", result.history.size(), last.loss, last.train_acc);
    } else if (*train_toy) {
      const auto data = load_dataset<double>(data_dir);
      toy.num_classes = data.num_classes;
      toy.image_size = data.images.dim(2);
      train_cfg.seed = toy.seed;
      std::optional<LabeledDataset<double>> eval;
      if (!eval_dir.empty()) eval = load_dataset<double>(eval_dir, data.num_classes);
      const auto result = train(make_toy_net<double>(toy), data, train_cfg, eval ? &*eval : nullptr);
      save_network(out, result.net);
      write_history_csv(fs::path(out) / "history.csv", result.history);
      std::printf("train_acc %.4f\n", result.history.empty() ? 0.0 : result.history.back().train_acc);
    } else if (*bench) {
      const auto net = load_network<double>(model);
      rewritable_kernel(net, layer);
      const auto data = load_dataset<double>(data_dir, net.num_classes());
      const auto eval = eval_dir.empty() ? data : load_dataset<double>(eval_dir, net.num_classes());
      std::vector<std::size_t> ranks;
      for (const auto& r : split_csv(ranks_arg)) {
        const long v = std::stol(r);
        if (v <= 0) throw std::invalid_argument("--ranks: ranks must be positive");
        ranks.push_back(static_cast<std::size_t>(v));
      }
      if (ranks.empty()) throw std::invalid_argument("--ranks: no ranks given");
      std::vector<CpMethod> methods;
      for (const auto& m : split_csv(methods_arg)) methods.push_back(parse_cp_method(m));
      sweep.solver = solver.config();
      sweep.finetune.epochs = ft_epochs;
      sweep.finetune.learning_rate = ft_lr;
      sweep.finetune.grad_clip_norm = 5.0;
      sweep.finetune.seed = solver.seed;
      sweep.finetune.freeze_inserted = ft_freeze;
      sweep.measure_time = !no_time;
      sweep.finetune_enabled = !no_ft;
      const SweepData<double> sd{data, eval};
      const auto reports = rank_sweep(net, layer, ranks, methods, sweep, sd);
      std::ofstream os(out, std::ios::trunc);
      if (!os) throw FormatError("cannot write " + out);
      write_bench_csv(os, reports);
      for (const auto& r : reports) std::printf("%s\n", bench_csv_row(r).c_str());
      if (!table_out.empty()) {
        const auto table = greedy_vs_nls_table(net, layer, ranks, !no_ft, sweep, sd);
        std::ofstream ts(table_out, std::ios::trunc);
        if (!ts) throw FormatError("cannot write " + table_out);
        write_drop_table(ts, table, !no_ft);
        write_drop_table(std::cout, table, !no_ft);
      }
    } else if (*cost) {
      std::fputs(format_cost_report(complexity(cd, cs, ct, rank)).c_str(), stdout);
    } else if (*appendix) {
      const auto g = appendix_tensor();
      const auto cfg = solver.config();
      const auto t0 = std::chrono::steady_clock::now();
      const auto greedy = cp_greedy(g, 2, cfg);
      const auto nls = cp_nls(g, 2, cfg);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      const double greedy_rel = cp_relative_error(greedy, g);
      const double nls_rel = cp_relative_error(nls, g);
      std::printf("greedy R=2 rel_error %.6f (residual norm %.6f)\n", greedy_rel, frobenius_norm(reconstruct(greedy) - g));
      std::printf("nls    R=2 rel_error %.3e\n", nls_rel);
      std::printf("elapsed %.3f s\n", secs);
      const bool greedy_ok = greedy_rel >= 0.33 && greedy_rel <= 0.37;
      const bool nls_ok = nls_rel <= 1e-6;
      if (!greedy_ok || !nls_ok) {
        throw VerificationFailed(std::string("expected greedy rel_error in [0.33, 0.37] and nls <= 1e-6:") +
                                 (greedy_ok ? "" : " greedy out of range") + (nls_ok ? "" : " nls too large"));
      }
    } else if (*gen) {
      const auto ds = gen_synthetic<double>(synth);
      save_dataset(out, ds);
      std::printf("wrote %zu samples, %zu classes\n", ds.size(), ds.num_classes);
    }
  } catch (const VerificationFailed& e) {
    std::fflush(stdout);
    std::fprintf(stderr, "verification failed: %s\n", e.what());
    return kExitVerify;
  } catch (const SolverFailure& e) {
    std::fprintf(stderr, "solver failure: %s\n", e.what());
    return kExitSolver;
  } catch (const TrainingDiverged& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return kExitSolver;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  }
  return 0;
}
