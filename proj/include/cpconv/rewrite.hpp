#pragma once

// CP rewrite of a convolution layer. A d x d x S x T kernel
//   K(a, c, s, t) ~= sum_r Kx(a, r) Ky(c, r) Ks(s, r) Kt(t, r)
// is replaced by four convolutions:
//   L1  1x1, S -> R          (Ks)
//   L2  d x 1, R -> R, R groups  (Kx, first spatial axis)
//   L3  1 x d, R -> R, R groups  (Ky, second spatial axis)
//   L4  1x1, R -> T, + bias  (Kt)
// whose composition equals the convolution with the reconstructed kernel.

#include <array>
#include <cstddef>
#include <cstdio>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "cpconv/cp_decomposition.hpp"
#include "cpconv/layers.hpp"
#include "cpconv/network.hpp"
#include "cpconv/tensor.hpp"

namespace cpconv {

template <typename T>
struct ConvKernel {
  DenseTensor<T> tensor;
  std::optional<DenseTensor<T>> bias;

  std::size_t d() const { return tensor.dim(0); }
  std::size_t in_channels() const { return tensor.dim(2); }
  std::size_t out_channels() const { return tensor.dim(3); }

  void validate() const {
    if (tensor.ndim() != 4) throw std::invalid_argument("ConvKernel: kernel must be 4D d x d x S x T");
    if (tensor.dim(0) != tensor.dim(1)) {
      throw std::invalid_argument("ConvKernel: CP rewrite needs a square spatial kernel, got " +
                                  shape_string(tensor.shape()));
    }
    if (bias && bias->size() != out_channels()) throw std::invalid_argument("ConvKernel: bias length != T");
  }
};

template <typename T>
struct KernelCPFactors {
  FactorMatrix<T> kx;  // d x R
  FactorMatrix<T> ky;  // d x R
  FactorMatrix<T> ks;  // S x R
  FactorMatrix<T> kt;  // T x R
  // Relative kernel error of the fit, when known.
  std::optional<double> rel_error;

  std::size_t rank() const { return kx.rank(); }

  void validate() const {
    const std::size_t r = rank();
    if (ky.rank() != r || ks.rank() != r || kt.rank() != r) throw std::invalid_argument("KernelCPFactors: ranks differ");
    if (kx.rows() != ky.rows()) throw std::invalid_argument("KernelCPFactors: spatial factors differ in length");
  }

  CPDecomposition<T> as_decomposition() const { return {{kx, ky, ks, kt}, {}}; }

  static KernelCPFactors from_decomposition(const CPDecomposition<T>& d) {
    if (d.order() != 4) throw std::invalid_argument("KernelCPFactors: decomposition must have four factors");
    const auto a = absorb_weights(d);
    KernelCPFactors f{a.factors[0], a.factors[1], a.factors[2], a.factors[3], std::nullopt};
    f.validate();
    return f;
  }
};

template <typename T>
DenseTensor<T> reconstruct_kernel(const KernelCPFactors<T>& f) {
  return reconstruct(f.as_decomposition());
}

template <typename T>
struct ConvStack {
  std::array<ConvLayerSpec<T>, 4> layers;

  std::size_t rank() const { return layers[0].out_channels(); }
  std::size_t weight_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.kernel.size();
    return n;
  }
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.parameter_count();
    return n;
  }
};

template <typename T>
DenseTensor<T> stack_forward(const ConvStack<T>& stack, const DenseTensor<T>& input) {
  DenseTensor<T> x = conv_forward(stack.layers[0], input);
  for (std::size_t i = 1; i < 4; ++i) x = conv_forward(stack.layers[i], x);
  return x;
}

// Per-output-pixel multiply-adds equal parameter counts for all three schemes.
struct CostReport {
  std::size_t d = 0, s = 0, t = 0, rank = 0;
  std::size_t original = 0;    // S T d^2
  std::size_t jaderberg = 0;   // R d (S + T)
  std::size_t cp = 0;          // R (S + 2d + T)
  double original_over_cp = 0;
  double original_over_jaderberg = 0;
};

inline CostReport complexity(std::size_t d, std::size_t s, std::size_t t, std::size_t rank) {
  if (d == 0 || s == 0 || t == 0 || rank == 0) throw std::invalid_argument("complexity: all sizes must be positive");
  CostReport c{d, s, t, rank};
  c.original = s * t * d * d;
  c.jaderberg = rank * d * (s + t);
  c.cp = rank * (s + 2 * d + t);
  c.original_over_cp = static_cast<double>(c.original) / static_cast<double>(c.cp);
  c.original_over_jaderberg = static_cast<double>(c.original) / static_cast<double>(c.jaderberg);
  return c;
}

inline std::string format_cost_report(const CostReport& c) {
  std::string out;
  out += "d=" + std::to_string(c.d) + " S=" + std::to_string(c.s) + " T=" + std::to_string(c.t) +
         " R=" + std::to_string(c.rank) + "\n";
  char line[160];
  std::snprintf(line, sizeof line, "original  %zu  (params and madds per output pixel)\n", c.original);
  out += line;
  std::snprintf(line, sizeof line, "jaderberg %zu  ratio %.4g\n", c.jaderberg, c.original_over_jaderberg);
  out += line;
  std::snprintf(line, sizeof line, "cp        %zu  ratio %.4g\n", c.cp, c.original_over_cp);
  out += line;
  return out;
}

template <typename T>
KernelCPFactors<T> decompose_kernel(const ConvKernel<T>& k, std::size_t rank, CpMethod method, const SolverConfig& cfg,
                                    SolverTrace* trace = nullptr) {
  k.validate();
  SolverTrace local;
  auto d = cp_decompose(k.tensor, rank, method, cfg, &local);
  auto f = KernelCPFactors<T>::from_decomposition(d);
  f.rel_error = static_cast<double>(relative_error(reconstruct_kernel(f), k.tensor));
  if (trace) *trace = std::move(local);
  return f;
}

// Stride 1; `padding` is the padding of the layer being replaced.
template <typename T>
ConvStack<T> build_conv_stack(const KernelCPFactors<T>& f, const std::optional<DenseTensor<T>>& bias,
                              Padding padding = Padding::valid) {
  f.validate();
  const std::size_t r = f.rank(), d = f.kx.rows(), s = f.ks.rows(), t = f.kt.rows();
  if (bias && bias->size() != t) throw std::invalid_argument("build_conv_stack: bias length != T");
  ConvStack<T> stack;
  auto& l1 = stack.layers[0];
  l1 = {DenseTensor<T>({1, 1, s, r}), std::nullopt, 1, padding, false, true};
  for (std::size_t i = 0; i < s; ++i)
    for (std::size_t q = 0; q < r; ++q) l1.kernel(0, 0, i, q) = f.ks(i, q);
  auto& l2 = stack.layers[1];
  l2 = {DenseTensor<T>({d, 1, 1, r}), std::nullopt, r, padding, false, true};
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t q = 0; q < r; ++q) l2.kernel(a, 0, 0, q) = f.kx(a, q);
  auto& l3 = stack.layers[2];
  l3 = {DenseTensor<T>({1, d, 1, r}), std::nullopt, r, padding, false, true};
  for (std::size_t c = 0; c < d; ++c)
    for (std::size_t q = 0; q < r; ++q) l3.kernel(0, c, 0, q) = f.ky(c, q);
  auto& l4 = stack.layers[3];
  l4 = {DenseTensor<T>({1, 1, r, t}), bias, 1, padding, false, true};
  for (std::size_t q = 0; q < r; ++q)
    for (std::size_t j = 0; j < t; ++j) l4.kernel(0, 0, q, j) = f.kt(j, q);
  return stack;
}

template <typename T>
ConvStack<T> build_conv_stack(const KernelCPFactors<T>& f, std::nullopt_t, Padding padding = Padding::valid) {
  return build_conv_stack(f, std::optional<DenseTensor<T>>{}, padding);
}

// Inverse of build_conv_stack.
template <typename T>
KernelCPFactors<T> factors_from_stack(const ConvStack<T>& stack) {
  const std::size_t r = stack.rank(), d = stack.layers[1].kernel_h();
  const std::size_t s = stack.layers[0].in_channels(), t = stack.layers[3].out_channels();
  KernelCPFactors<T> f{FactorMatrix<T>(d, r), FactorMatrix<T>(d, r), FactorMatrix<T>(s, r), FactorMatrix<T>(t, r),
                       std::nullopt};
  for (std::size_t q = 0; q < r; ++q) {
    for (std::size_t i = 0; i < s; ++i) f.ks(i, q) = stack.layers[0].kernel(0, 0, i, q);
    for (std::size_t a = 0; a < d; ++a) f.kx(a, q) = stack.layers[1].kernel(a, 0, 0, q);
    for (std::size_t c = 0; c < d; ++c) f.ky(c, q) = stack.layers[2].kernel(0, c, 0, q);
    for (std::size_t j = 0; j < t; ++j) f.kt(j, q) = stack.layers[3].kernel(0, 0, q, j);
  }
  return f;
}

// Same layer shapes as build_conv_stack, weights drawn by make_conv_layer's
// fan-in/fan-out uniform scheme. The original bias is kept on L4.
template <typename T>
ConvStack<T> random_conv_stack(std::size_t d, std::size_t s, std::size_t t, std::size_t rank,
                               const std::optional<DenseTensor<T>>& bias, Padding padding, std::mt19937_64& rng) {
  ConvStack<T> stack{{make_conv_layer<T>(1, 1, s, rank, 1, padding, false, rng),
                      make_conv_layer<T>(d, 1, rank, rank, rank, padding, false, rng),
                      make_conv_layer<T>(1, d, rank, rank, rank, padding, false, rng),
                      make_conv_layer<T>(1, 1, rank, t, 1, padding, false, rng)}};
  stack.layers[3].bias = bias;
  for (auto& l : stack.layers) l.inserted = true;
  return stack;
}

inline constexpr std::array<const char*, 4> kStackSuffixes{".cp_s", ".cp_x", ".cp_y", ".cp_t"};

template <typename T>
ConvKernel<T> rewritable_kernel(const NetworkSpec<T>& net, const std::string& layer_name) {
  const auto& layer = net.layer(layer_name);
  if (!layer.is_conv()) throw std::invalid_argument("layer '" + layer_name + "' is not a convolution");
  const auto& conv = layer.conv();
  if (conv.groups != 1) throw std::invalid_argument("layer '" + layer_name + "' is grouped; only dense kernels are rewritten");
  ConvKernel<T> k{conv.kernel, conv.bias};
  k.validate();
  if (k.d() == 1) {
    throw std::invalid_argument("layer '" + layer_name + "' is 1x1; the four-layer stack would only add cost");
  }
  return k;
}

// New network with `layer_name` replaced by the stack; other layers are copied
// unchanged. The inserted layers carry the `inserted` flag.
template <typename T>
NetworkSpec<T> splice_stack(const NetworkSpec<T>& net, const std::string& layer_name, const ConvStack<T>& stack) {
  const std::size_t idx = net.index_of(layer_name);
  const ConvKernel<T> k = rewritable_kernel(net, layer_name);
  const auto& l1 = stack.layers[0];
  const auto& l4 = stack.layers[3];
  if (l1.in_channels() != k.in_channels() || l4.out_channels() != k.out_channels() ||
      stack.layers[1].kernel_h() != k.d()) {
    throw std::invalid_argument("splice_stack: stack dimensions do not match layer '" + layer_name + "'");
  }
  NetworkSpec<T> out{net.input_shape, {}};
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    if (i != idx) {
      out.layers.push_back(net.layers[i]);
      continue;
    }
    for (std::size_t j = 0; j < 4; ++j) {
      ConvLayerSpec<T> l = stack.layers[j];
      l.padding = net.layers[i].conv().padding;
      l.inserted = true;
      out.layers.push_back({layer_name + kStackSuffixes[j], std::move(l)});
    }
  }
  out.validate();
  return out;
}

template <typename T>
NetworkSpec<T> rewrite_network(const NetworkSpec<T>& net, const std::string& layer_name, const KernelCPFactors<T>& f) {
  const ConvKernel<T> k = rewritable_kernel(net, layer_name);
  if (f.kx.rows() != k.d() || f.ks.rows() != k.in_channels() || f.kt.rows() != k.out_channels()) {
    throw std::invalid_argument("rewrite_network: factor shapes do not match layer '" + layer_name + "'");
  }
  return splice_stack(net, layer_name, build_conv_stack(f, k.bias, net.layer(layer_name).conv().padding));
}

template <typename T>
NetworkSpec<T> rewrite_network(const NetworkSpec<T>& net, const std::string& layer_name, std::size_t rank,
                               CpMethod method, const SolverConfig& cfg, KernelCPFactors<T>* factors_out = nullptr) {
  const ConvKernel<T> k = rewritable_kernel(net, layer_name);
  auto f = decompose_kernel(k, rank, method, cfg);
  auto out = rewrite_network(net, layer_name, f);
  if (factors_out) *factors_out = std::move(f);
  return out;
}

// Copy of `net` whose named layer keeps its shape but uses `kernel`.
template <typename T>
NetworkSpec<T> with_kernel(const NetworkSpec<T>& net, const std::string& layer_name, const DenseTensor<T>& kernel) {
  NetworkSpec<T> out = net;
  auto& conv = out.layer(layer_name).conv();
  if (conv.kernel.shape() != kernel.shape()) throw std::invalid_argument("with_kernel: kernel shape mismatch");
  conv.kernel = kernel;
  return out;
}

}  // namespace cpconv
