#pragma once

// Rank-R CP (CANDECOMP/PARAFAC) decompositions of dense tensors:
//   X(i_0, .., i_{D-1}) ~= sum_r A_0(i_0, r) * .. * A_{D-1}(i_{D-1}, r).
//
// Three solvers share one configuration type:
//   cp_als    - alternating least squares with a small ridge on the normal
//               equations;
//   cp_nls    - damped Gauss-Newton (Levenberg-Marquardt) over all factor
//               entries at once;
//   cp_greedy - repeated best rank-1 fits of the running residual.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "cpconv/tensor.hpp"

namespace cpconv {

class SolverFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class InitMethod { random_gaussian, als_warm_start, extend_previous_rank };

enum class CpMethod { nls, als, greedy };

inline std::string to_string(CpMethod m) {
  switch (m) {
    case CpMethod::nls: return "nls";
    case CpMethod::als: return "als";
    case CpMethod::greedy: return "greedy";
  }
  return "?";
}

inline CpMethod parse_cp_method(const std::string& s) {
  if (s == "nls") return CpMethod::nls;
  if (s == "als") return CpMethod::als;
  if (s == "greedy") return CpMethod::greedy;
  throw std::invalid_argument("unknown CP method '" + s + "' (expected nls, als or greedy)");
}

struct SolverConfig {
  // Unset means the per-method default: 500 ALS sweeps, 200 Gauss-Newton
  // iterations, 500 sweeps per greedy rank-1 fit.
  std::optional<std::size_t> max_iterations;
  // Stop once the relative residual ||X - X'|| / ||X|| changes by less than this.
  double tolerance = 1e-10;
  // Initial LM damping, relative to the mean diagonal of J^T J.
  double damping_init = 1e-3;
  std::size_t restarts = 3;
  std::uint64_t seed = 0;
  InitMethod init = InitMethod::als_warm_start;
  std::size_t warm_start_sweeps = 20;
  double ridge = 1e-10;

  void validate() const {
    if (max_iterations && *max_iterations == 0) throw std::invalid_argument("SolverConfig: max_iterations must be >= 1");
    if (!(tolerance > 0)) throw std::invalid_argument("SolverConfig: tolerance must be > 0");
    if (restarts == 0) throw std::invalid_argument("SolverConfig: restarts must be >= 1");
    if (!(damping_init > 0)) throw std::invalid_argument("SolverConfig: damping_init must be > 0");
  }
};

template <typename T>
struct CPDecomposition {
  std::vector<FactorMatrix<T>> factors;
  // Per-component scale; empty once absorbed into the factors.
  std::vector<T> weights;

  std::size_t rank() const { return factors.empty() ? 0 : factors.front().rank(); }
  std::size_t order() const { return factors.size(); }

  Shape shape() const {
    Shape s;
    for (const auto& f : factors) s.push_back(f.rows());
    return s;
  }

  void validate() const {
    if (factors.size() < 2) throw std::invalid_argument("CPDecomposition: need at least two factor matrices");
    const std::size_t r = rank();
    if (r == 0) throw std::invalid_argument("CPDecomposition: rank must be >= 1");
    for (const auto& f : factors) {
      if (f.rank() != r) throw std::invalid_argument("CPDecomposition: factor ranks differ");
    }
    if (!weights.empty() && weights.size() != r) throw std::invalid_argument("CPDecomposition: weights length != rank");
  }

  template <typename U>
  CPDecomposition<U> cast() const {
    CPDecomposition<U> out;
    for (const auto& f : factors) out.factors.push_back(f.template cast<U>());
    out.weights.assign(weights.begin(), weights.end());
    return out;
  }

  friend bool operator==(const CPDecomposition&, const CPDecomposition&) = default;
};

// Diagnostics filled in by the solvers when requested.
struct SolverTrace {
  // Relative residual after initialization and after every sweep/iteration
  // (ALS, NLS) or after every added component (greedy), for the kept restart.
  std::vector<double> history;
  std::size_t iterations = 0;
  std::size_t best_restart = 0;
  std::size_t failed_restarts = 0;
  double rel_error = 0;
};

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
Eigen::Map<const RowMat<T>> as_matrix(const FactorMatrix<T>& f) {
  return {f.data().data(), static_cast<Eigen::Index>(f.rows()), static_cast<Eigen::Index>(f.rank())};
}

template <typename T>
Eigen::Map<RowMat<T>> as_matrix(FactorMatrix<T>& f) {
  return {f.data().data(), static_cast<Eigen::Index>(f.rows()), static_cast<Eigen::Index>(f.rank())};
}

template <typename T>
RowMat<T> gram(const FactorMatrix<T>& f) {
  auto a = as_matrix(f);
  return a.transpose() * a;
}

// unfold(X, m) * khatri_rao_except(factors, m): the matricized tensor times
// Khatri-Rao product shared by the ALS normal equations and the NLS gradient.
template <typename T>
RowMat<T> mttkrp(const DenseTensor<T>& x, const std::vector<FactorMatrix<T>>& factors, std::size_t mode) {
  const DenseTensor<T> unf = unfold(x, mode);
  const FactorMatrix<T> kr = khatri_rao_except(factors, mode);
  Eigen::Map<const RowMat<T>> u(unf.data().data(), static_cast<Eigen::Index>(unf.dim(0)),
                                static_cast<Eigen::Index>(unf.dim(1)));
  return u * as_matrix(kr);
}

template <typename T>
std::mt19937_64 restart_rng(std::uint64_t seed, std::size_t restart, std::uint32_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(restart), stream};
  return std::mt19937_64(seq);
}

template <typename T>
std::vector<FactorMatrix<T>> random_factors(const Shape& shape, std::size_t rank, T target_norm,
                                            std::mt19937_64& rng) {
  std::normal_distribution<T> normal(T{0}, T{1});
  // Gaussian factors reconstruct to roughly sqrt(R * N) in norm; scale each
  // factor so the start has about the target's magnitude.
  const T natural = std::sqrt(static_cast<T>(rank) * static_cast<T>(shape_size(shape)));
  const T ratio = target_norm > T{0} ? target_norm / natural : T{1};
  const T per_factor = std::pow(ratio, T{1} / static_cast<T>(shape.size()));
  std::vector<FactorMatrix<T>> factors;
  for (std::size_t n : shape) {
    FactorMatrix<T> f(n, rank);
    for (auto& v : f.data()) v = per_factor * normal(rng);
    factors.push_back(std::move(f));
  }
  return factors;
}

template <typename T>
bool factors_finite(const std::vector<FactorMatrix<T>>& factors) {
  return std::all_of(factors.begin(), factors.end(), [](const auto& f) { return f.all_finite(); });
}

}  // namespace detail

// Element (i_0..i_{D-1}) = sum_r w_r * prod_m factors[m](i_m, r).
template <typename T>
DenseTensor<T> reconstruct(const CPDecomposition<T>& d) {
  d.validate();
  FactorMatrix<T> first = d.factors.front();
  if (!d.weights.empty()) {
    for (std::size_t r = 0; r < d.rank(); ++r) first.scale_column(r, d.weights[r]);
  }
  // Row-major layout of X equals its mode-0 unfolding.
  const FactorMatrix<T> kr = khatri_rao_except(d.factors, 0);
  DenseTensor<T> out(d.shape());
  Eigen::Map<detail::RowMat<T>> dst(out.data().data(), static_cast<Eigen::Index>(first.rows()),
                                    static_cast<Eigen::Index>(kr.rows()));
  dst.noalias() = detail::as_matrix(first) * detail::as_matrix(kr).transpose();
  return out;
}

template <typename T>
CPDecomposition<T> absorb_weights(CPDecomposition<T> d) {
  if (!d.weights.empty()) {
    for (std::size_t r = 0; r < d.rank(); ++r) d.factors.front().scale_column(r, d.weights[r]);
    d.weights.clear();
  }
  return d;
}

// Balanced form: within each component every factor column has the same
// norm, (prod of column norms)^(1/D). Signs are left where they are.
template <typename T>
CPDecomposition<T> normalize(CPDecomposition<T> d) {
  d = absorb_weights(std::move(d));
  const auto order = static_cast<T>(d.order());
  for (std::size_t r = 0; r < d.rank(); ++r) {
    T log_product = 0;
    bool zero = false;
    std::vector<T> norms;
    for (const auto& f : d.factors) {
      const T n = f.column_norm(r);
      norms.push_back(n);
      if (n == T{0}) zero = true;
      else log_product += std::log(n);
    }
    if (zero) {
      for (auto& f : d.factors) f.scale_column(r, T{0});
      continue;
    }
    const T target = std::exp(log_product / order);
    for (std::size_t m = 0; m < d.order(); ++m) d.factors[m].scale_column(r, target / norms[m]);
  }
  return d;
}

template <typename T>
T cp_relative_error(const CPDecomposition<T>& d, const DenseTensor<T>& x) {
  return relative_error(reconstruct(d), x);
}

namespace detail {

template <typename T>
void check_problem(const DenseTensor<T>& x, std::size_t rank, const SolverConfig& cfg) {
  cfg.validate();
  if (rank == 0) throw std::invalid_argument("CP rank must be >= 1");
  if (x.ndim() < 2) throw std::invalid_argument("CP decomposition needs a tensor with at least two axes");
  if (!x.all_finite()) throw std::invalid_argument("CP decomposition input has non-finite elements");
}

template <typename T>
T safe_rel_error(const CPDecomposition<T>& d, const DenseTensor<T>& x, T x_norm) {
  if (x_norm == T{0}) return frobenius_norm(reconstruct(d));
  return frobenius_norm(reconstruct(d) - x) / x_norm;
}

// One ALS run from the given start; returns per-sweep relative residuals.
template <typename T>
std::vector<double> als_iterate(const DenseTensor<T>& x, std::vector<FactorMatrix<T>>& factors, std::size_t max_sweeps,
                                double tolerance, double ridge, T x_norm) {
  const std::size_t order = factors.size();
  const std::size_t rank = factors.front().rank();
  std::vector<double> history;
  CPDecomposition<T> view{factors, {}};
  history.push_back(static_cast<double>(safe_rel_error(view, x, x_norm)));

  std::vector<RowMat<T>> grams;
  for (const auto& f : factors) grams.push_back(gram(f));

  for (std::size_t sweep = 0; sweep < max_sweeps; ++sweep) {
    for (std::size_t m = 0; m < order; ++m) {
      RowMat<T> v = RowMat<T>::Ones(rank, rank);
      for (std::size_t k = 0; k < order; ++k)
        if (k != m) v = v.cwiseProduct(grams[k]);
      v.diagonal().array() += static_cast<T>(ridge);
      const RowMat<T> rhs = mttkrp(x, factors, m);
      // A_m V = M  <=>  V A_m^T = M^T (V symmetric).
      const RowMat<T> solved = v.ldlt().solve(rhs.transpose()).transpose();
      as_matrix(factors[m]) = solved;
      grams[m] = gram(factors[m]);
    }
    view.factors = factors;
    view = normalize(std::move(view));
    factors = view.factors;
    for (std::size_t m = 0; m < order; ++m) grams[m] = gram(factors[m]);

    const double err = static_cast<double>(safe_rel_error(view, x, x_norm));
    history.push_back(err);
    if (!std::isfinite(err)) break;
    if (std::abs(history[history.size() - 2] - err) < tolerance) break;
  }
  return history;
}

// Best rank-1 fit of x by rank-1 ALS, keeping the best of `restarts` seeded
// starts; ties go to the lowest restart.
template <typename T>
CPDecomposition<T> best_rank1(const DenseTensor<T>& x, const SolverConfig& cfg, std::uint32_t stream,
                              std::size_t* sweeps = nullptr) {
  const T x_norm = frobenius_norm(x);
  const std::size_t max_sweeps = cfg.max_iterations.value_or(500);
  CPDecomposition<T> best;
  double best_err = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < cfg.restarts; ++k) {
    auto rng = restart_rng<T>(cfg.seed, k, stream);
    auto factors = random_factors<T>(x.shape(), 1, x_norm, rng);
    const auto hist = als_iterate(x, factors, max_sweeps, cfg.tolerance, cfg.ridge, x_norm);
    if (sweeps) *sweeps += hist.size() - 1;
    const double err = hist.back();
    if (std::isfinite(err) && factors_finite(factors) && err < best_err) {
      best_err = err;
      best = CPDecomposition<T>{std::move(factors), {}};
    }
  }
  if (best.factors.empty()) throw SolverFailure("rank-1 fit: every restart produced non-finite factors");
  return best;
}

template <typename T>
void append_component(CPDecomposition<T>& d, const CPDecomposition<T>& rank1) {
  const std::size_t r = d.rank();
  for (std::size_t m = 0; m < d.order(); ++m) {
    FactorMatrix<T> grown = d.factors[m].resized_rank(r + 1);
    for (std::size_t i = 0; i < grown.rows(); ++i) grown(i, r) = rank1.factors[m](i, 0);
    d.factors[m] = std::move(grown);
  }
}

inline std::size_t unknown_count(const Shape& shape, std::size_t rank) {
  std::size_t n = 0;
  for (std::size_t s : shape) n += s * rank;
  return n;
}

// J^T J of the CP model with respect to all factor entries, stacked factor by
// factor in row-major order. Off-diagonal blocks:
//   d(m,i,r) . d(m',j,r') = A_m'(j,r) A_m(i,r') prod_{k != m,m'} G_k(r,r'),
// diagonal blocks: delta_ij prod_{k != m} G_k(r,r').
template <typename T>
RowMat<T> gauss_newton_matrix(const std::vector<FactorMatrix<T>>& factors) {
  const std::size_t order = factors.size();
  const std::size_t rank = factors.front().rank();
  std::vector<RowMat<T>> grams;
  for (const auto& f : factors) grams.push_back(gram(f));
  std::vector<std::size_t> offsets(order + 1, 0);
  for (std::size_t m = 0; m < order; ++m) offsets[m + 1] = offsets[m] + factors[m].rows() * rank;

  RowMat<T> jtj = RowMat<T>::Zero(offsets[order], offsets[order]);
  for (std::size_t m = 0; m < order; ++m) {
    for (std::size_t mp = m; mp < order; ++mp) {
      RowMat<T> g = RowMat<T>::Ones(rank, rank);
      for (std::size_t k = 0; k < order; ++k)
        if (k != m && k != mp) g = g.cwiseProduct(grams[k]);
      for (std::size_t i = 0; i < factors[m].rows(); ++i) {
        for (std::size_t j = 0; j < factors[mp].rows(); ++j) {
          if (m == mp && i != j) continue;
          for (std::size_t r = 0; r < rank; ++r) {
            for (std::size_t rp = 0; rp < rank; ++rp) {
              const T v = m == mp ? g(r, rp) : factors[mp](j, r) * factors[m](i, rp) * g(r, rp);
              const auto row = static_cast<Eigen::Index>(offsets[m] + i * rank + r);
              const auto col = static_cast<Eigen::Index>(offsets[mp] + j * rank + rp);
              jtj(row, col) = v;
              jtj(col, row) = v;
            }
          }
        }
      }
    }
  }
  return jtj;
}

// Gradient of 1/2 ||reconstruct - x||^2, stacked like gauss_newton_matrix.
template <typename T>
Eigen::Matrix<T, Eigen::Dynamic, 1> cp_gradient(const DenseTensor<T>& residual,
                                                const std::vector<FactorMatrix<T>>& factors) {
  const std::size_t rank = factors.front().rank();
  Eigen::Matrix<T, Eigen::Dynamic, 1> g(static_cast<Eigen::Index>(unknown_count(residual.shape(), rank)));
  Eigen::Index pos = 0;
  for (std::size_t m = 0; m < factors.size(); ++m) {
    const RowMat<T> gm = mttkrp(residual, factors, m);
    for (Eigen::Index i = 0; i < gm.rows(); ++i)
      for (Eigen::Index r = 0; r < gm.cols(); ++r) g(pos++) = gm(i, r);
  }
  return g;
}

template <typename T>
std::vector<FactorMatrix<T>> step_factors(const std::vector<FactorMatrix<T>>& factors,
                                          const Eigen::Matrix<T, Eigen::Dynamic, 1>& delta) {
  std::vector<FactorMatrix<T>> out = factors;
  Eigen::Index pos = 0;
  for (auto& f : out)
    for (auto& v : f.data()) v += delta(pos++);
  return out;
}

// Levenberg-Marquardt on the stacked factor entries. Damping is divided by 10
// after an accepted step and multiplied by 10 after a rejected one.
template <typename T>
std::vector<double> gauss_newton_iterate(const DenseTensor<T>& x, std::vector<FactorMatrix<T>>& factors,
                                         std::size_t max_iterations, double tolerance, double damping_init,
                                         T x_norm, std::size_t* iterations) {
  const T scale = x_norm > T{0} ? x_norm : T{1};
  auto residual_of = [&](const std::vector<FactorMatrix<T>>& f) {
    return reconstruct(CPDecomposition<T>{f, {}}) - x;
  };
  DenseTensor<T> residual = residual_of(factors);
  double err = static_cast<double>(frobenius_norm(residual) / scale);
  std::vector<double> history{err};
  if (!std::isfinite(err)) return history;

  double damping = -1;
  for (std::size_t it = 0; it < max_iterations; ++it) {
    if (iterations) ++*iterations;
    if (err == 0.0) break;
    RowMat<T> jtj = gauss_newton_matrix(factors);
    const auto grad = cp_gradient(residual, factors);
    if (damping < 0) damping = damping_init * std::max(static_cast<double>(jtj.diagonal().mean()), 1e-300);

    bool accepted = false;
    while (!accepted && damping < 1e300) {
      RowMat<T> lhs = jtj;
      lhs.diagonal().array() += static_cast<T>(damping);
      Eigen::LLT<RowMat<T>> llt(lhs);
      if (llt.info() != Eigen::Success) {
        damping *= 10;
        continue;
      }
      const Eigen::Matrix<T, Eigen::Dynamic, 1> delta = llt.solve(-grad);
      auto trial = step_factors(factors, delta);
      DenseTensor<T> trial_residual = residual_of(trial);
      const double trial_err = static_cast<double>(frobenius_norm(trial_residual) / scale);
      if (std::isfinite(trial_err) && trial_err < err) {
        const double change = err - trial_err;
        factors = std::move(trial);
        residual = std::move(trial_residual);
        err = trial_err;
        history.push_back(err);
        damping = std::max(damping / 10, 1e-300);
        accepted = true;
        if (change < tolerance) return history;
      } else {
        damping *= 10;
        // A rejected step still spends an iteration.
        if (++it >= max_iterations) return history;
        if (iterations) ++*iterations;
      }
    }
    if (!accepted) break;
  }
  return history;
}

}  // namespace detail

template <typename T>
CPDecomposition<T> cp_als(const DenseTensor<T>& x, std::size_t rank, const SolverConfig& cfg,
                          SolverTrace* trace = nullptr) {
  detail::check_problem(x, rank, cfg);
  const T x_norm = frobenius_norm(x);
  const std::size_t max_sweeps = cfg.max_iterations.value_or(500);

  std::optional<CPDecomposition<T>> best;
  SolverTrace best_trace;
  double best_err = std::numeric_limits<double>::infinity();
  std::size_t failed = 0;
  for (std::size_t k = 0; k < cfg.restarts; ++k) {
    auto rng = detail::restart_rng<T>(cfg.seed, k, 1);
    auto factors = detail::random_factors<T>(x.shape(), rank, x_norm, rng);
    auto hist = detail::als_iterate(x, factors, max_sweeps, cfg.tolerance, cfg.ridge, x_norm);
    const double err = hist.back();
    if (!std::isfinite(err) || !detail::factors_finite(factors)) {
      ++failed;
      continue;
    }
    if (err < best_err) {
      best_err = err;
      best = CPDecomposition<T>{std::move(factors), {}};
      best_trace.history = std::move(hist);
      best_trace.iterations = best_trace.history.size() - 1;
      best_trace.best_restart = k;
    }
  }
  if (!best) throw SolverFailure("cp_als: every restart produced a non-finite residual");
  auto result = normalize(std::move(*best));
  if (trace) {
    *trace = std::move(best_trace);
    trace->failed_restarts = failed;
    trace->rel_error = best_err;
  }
  return result;
}

// `start` seeds the solver: with the same rank it is used as given; with a
// lower rank and InitMethod::extend_previous_rank, each missing component is
// the best rank-1 fit of the current residual.
template <typename T>
CPDecomposition<T> cp_nls(const DenseTensor<T>& x, std::size_t rank, const SolverConfig& cfg,
                          const std::optional<CPDecomposition<std::type_identity_t<T>>>& start = std::nullopt,
                          SolverTrace* trace = nullptr) {
  detail::check_problem(x, rank, cfg);
  if (start) {
    start->validate();
    if (start->shape() != x.shape()) throw std::invalid_argument("cp_nls: start decomposition has the wrong shape");
    if (start->rank() > rank) throw std::invalid_argument("cp_nls: start decomposition has a higher rank");
    if (start->rank() < rank && cfg.init != InitMethod::extend_previous_rank) {
      throw std::invalid_argument("cp_nls: a lower-rank start needs InitMethod::extend_previous_rank");
    }
  } else if (cfg.init == InitMethod::extend_previous_rank) {
    throw std::invalid_argument("cp_nls: extend_previous_rank needs a start decomposition");
  }
  const T x_norm = frobenius_norm(x);
  const std::size_t max_iterations = cfg.max_iterations.value_or(200);

  std::optional<CPDecomposition<T>> best;
  SolverTrace best_trace;
  double best_err = std::numeric_limits<double>::infinity();
  std::size_t failed = 0;
  // An explicit full-rank start is deterministic; restarting it is pointless.
  const std::size_t restarts = start && start->rank() == rank ? 1 : cfg.restarts;
  for (std::size_t k = 0; k < restarts; ++k) {
    std::vector<FactorMatrix<T>> factors;
    std::size_t iterations = 0;
    try {
      if (start) {
        CPDecomposition<T> init = absorb_weights(*start);
        SolverConfig inner = cfg;
        inner.seed = cfg.seed + 0x9E3779B97F4A7C15ull * (k + 1);
        inner.restarts = 1;
        std::uint32_t stream = 100;
        while (init.rank() < rank) {
          const DenseTensor<T> res = x - reconstruct(init);
          detail::append_component(init, detail::best_rank1(res, inner, stream++, &iterations));
        }
        factors = std::move(init.factors);
      } else {
        auto rng = detail::restart_rng<T>(cfg.seed, k, 2);
        factors = detail::random_factors<T>(x.shape(), rank, x_norm, rng);
        if (cfg.init == InitMethod::als_warm_start && cfg.warm_start_sweeps > 0) {
          const auto warm = detail::als_iterate(x, factors, cfg.warm_start_sweeps, cfg.tolerance, cfg.ridge, x_norm);
          iterations += warm.size() - 1;
        }
      }
    } catch (const SolverFailure&) {
      ++failed;
      continue;
    }
    if (!detail::factors_finite(factors)) {
      ++failed;
      continue;
    }
    auto hist = detail::gauss_newton_iterate(x, factors, max_iterations, cfg.tolerance, cfg.damping_init, x_norm,
                                             &iterations);
    const double err = hist.back();
    if (!std::isfinite(err) || !detail::factors_finite(factors)) {
      ++failed;
      continue;
    }
    if (err < best_err) {
      best_err = err;
      best = CPDecomposition<T>{std::move(factors), {}};
      best_trace.history = std::move(hist);
      best_trace.iterations = iterations;
      best_trace.best_restart = k;
    }
  }
  if (!best) throw SolverFailure("cp_nls: every restart produced a non-finite residual");
  auto result = normalize(std::move(*best));
  if (trace) {
    *trace = std::move(best_trace);
    trace->failed_restarts = failed;
    trace->rel_error = best_err;
  }
  return result;
}

template <typename T>
CPDecomposition<T> cp_greedy(const DenseTensor<T>& x, std::size_t rank, const SolverConfig& cfg,
                             SolverTrace* trace = nullptr) {
  detail::check_problem(x, rank, cfg);
  const T x_norm = frobenius_norm(x);
  CPDecomposition<T> acc;
  DenseTensor<T> residual = x;
  SolverTrace local;
  local.history.push_back(x_norm > T{0} ? 1.0 : 0.0);
  for (std::size_t c = 0; c < rank; ++c) {
    auto comp = detail::best_rank1(residual, cfg, static_cast<std::uint32_t>(1000 + c), &local.iterations);
    residual -= reconstruct(comp);
    if (acc.factors.empty()) acc = std::move(comp);
    else detail::append_component(acc, comp);
    local.history.push_back(static_cast<double>(x_norm > T{0} ? frobenius_norm(residual) / x_norm
                                                              : frobenius_norm(residual)));
  }
  local.rel_error = local.history.back();
  if (trace) *trace = std::move(local);
  return normalize(std::move(acc));
}

template <typename T>
CPDecomposition<T> cp_decompose(const DenseTensor<T>& x, std::size_t rank, CpMethod method, const SolverConfig& cfg,
                                SolverTrace* trace = nullptr) {
  switch (method) {
    case CpMethod::nls: return cp_nls(x, rank, cfg, std::nullopt, trace);
    case CpMethod::als: return cp_als(x, rank, cfg, trace);
    case CpMethod::greedy: return cp_greedy(x, rank, cfg, trace);
  }
  throw std::invalid_argument("cp_decompose: unknown method");
}

}  // namespace cpconv
