#pragma once

// Layer kernels of the CNN runtime. Activations are B x C x H x W.
// Convolution kernels are kh x kw x (S / groups) x T and are applied
// cross-correlation style (no flip):
//   V(b, t, x, y) = bias(t) + sum_{a, c, s} K(a, c, s, t) U(b, g*Sg + s, x + a - pad_h, y + c - pad_w)
// with g = t / (T / groups).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "cpconv/tensor.hpp"

namespace cpconv {

enum class Padding { valid, same };

inline std::string to_string(Padding p) { return p == Padding::valid ? "valid" : "same"; }

inline Padding parse_padding(const std::string& s) {
  if (s == "valid") return Padding::valid;
  if (s == "same") return Padding::same;
  throw std::invalid_argument("unknown padding '" + s + "'");
}

// Leading pad for a kernel extent; the trailing pad takes the remainder, so
// even extents pad one more on the right/bottom.
inline std::size_t pad_before(Padding p, std::size_t extent) { return p == Padding::same ? (extent - 1) / 2 : 0; }
inline std::size_t pad_after(Padding p, std::size_t extent) {
  return p == Padding::same ? extent - 1 - (extent - 1) / 2 : 0;
}

template <typename T>
struct ConvLayerSpec {
  DenseTensor<T> kernel;
  std::optional<DenseTensor<T>> bias;
  std::size_t groups = 1;
  Padding padding = Padding::valid;
  bool frozen = false;
  // Set on layers produced by a CP rewrite.
  bool inserted = false;

  std::size_t kernel_h() const { return kernel.dim(0); }
  std::size_t kernel_w() const { return kernel.dim(1); }
  std::size_t in_channels() const { return kernel.dim(2) * groups; }
  std::size_t out_channels() const { return kernel.dim(3); }

  std::size_t parameter_count() const { return kernel.size() + (bias ? bias->size() : 0); }

  void validate() const {
    if (kernel.ndim() != 4) throw std::invalid_argument("conv layer: kernel must be 4D (kh x kw x S/groups x T)");
    if (groups == 0 || kernel.dim(3) % groups != 0) {
      throw std::invalid_argument("conv layer: groups must divide the output channel count");
    }
    if (bias && (bias->ndim() != 1 || bias->size() != out_channels())) {
      throw std::invalid_argument("conv layer: bias length must equal output channels");
    }
    if (!kernel.all_finite() || (bias && !bias->all_finite())) throw std::invalid_argument("conv layer: non-finite weights");
  }

  // C x H x W -> C' x H' x W'.
  Shape output_shape(const Shape& in) const {
    if (in.size() != 3 || in[0] != in_channels()) {
      throw std::invalid_argument("conv layer: input " + shape_string(in) + " does not have " +
                                  std::to_string(in_channels()) + " channels");
    }
    const std::size_t h = in[1] + pad_before(padding, kernel_h()) + pad_after(padding, kernel_h());
    const std::size_t w = in[2] + pad_before(padding, kernel_w()) + pad_after(padding, kernel_w());
    if (h < kernel_h() || w < kernel_w()) {
      throw std::invalid_argument("conv layer: kernel larger than input " + shape_string(in));
    }
    return {out_channels(), h - kernel_h() + 1, w - kernel_w() + 1};
  }

  template <typename U>
  ConvLayerSpec<U> cast() const {
    ConvLayerSpec<U> out{kernel.template cast<U>(), std::nullopt, groups, padding, frozen, inserted};
    if (bias) out.bias = bias->template cast<U>();
    return out;
  }
  friend bool operator==(const ConvLayerSpec&, const ConvLayerSpec&) = default;
};

// Zero-mean uniform weights scaled by fan-in + fan-out.
template <typename T>
ConvLayerSpec<T> make_conv_layer(std::size_t kh, std::size_t kw, std::size_t in_channels, std::size_t out_channels,
                                 std::size_t groups, Padding padding, bool with_bias, std::mt19937_64& rng) {
  if (groups == 0 || in_channels % groups != 0 || out_channels % groups != 0) {
    throw std::invalid_argument("make_conv_layer: groups must divide both channel counts");
  }
  const std::size_t sg = in_channels / groups;
  const double fan_in = static_cast<double>(kh * kw * sg);
  const double fan_out = static_cast<double>(kh * kw * (out_channels / groups));
  const double limit = std::sqrt(6.0 / (fan_in + fan_out));
  std::uniform_real_distribution<double> uni(-limit, limit);
  ConvLayerSpec<T> layer{DenseTensor<T>({kh, kw, sg, out_channels}), std::nullopt, groups, padding};
  for (auto& v : layer.kernel.data()) v = static_cast<T>(uni(rng));
  if (with_bias) layer.bias = DenseTensor<T>({out_channels});
  return layer;
}

namespace detail {

struct ConvGeometry {
  std::size_t batch, in_c, in_h, in_w, out_c, out_h, out_w, kh, kw, sg, tg, pad_h, pad_w;
};

template <typename T>
ConvGeometry conv_geometry(const ConvLayerSpec<T>& layer, const DenseTensor<T>& input) {
  if (input.ndim() != 4) throw std::invalid_argument("conv: input must be B x C x H x W");
  const Shape out = layer.output_shape({input.dim(1), input.dim(2), input.dim(3)});
  return {input.dim(0),
          input.dim(1),
          input.dim(2),
          input.dim(3),
          out[0],
          out[1],
          out[2],
          layer.kernel_h(),
          layer.kernel_w(),
          layer.kernel.dim(2),
          layer.out_channels() / layer.groups,
          pad_before(layer.padding, layer.kernel_h()),
          pad_before(layer.padding, layer.kernel_w())};
}

// Output rows/cols [lo, hi) for which input index out + k - pad is in range.
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t k, std::size_t pad, std::size_t in_extent,
                                                       std::size_t out_extent) {
  const std::size_t lo = pad > k ? pad - k : 0;
  const std::size_t limit = in_extent + pad;  // out + k < in_extent + pad
  const std::size_t hi = limit > k ? std::min(out_extent, limit - k) : 0;
  return {lo, std::max(lo, hi)};
}

}  // namespace detail

template <typename T>
DenseTensor<T> conv_forward(const ConvLayerSpec<T>& layer, const DenseTensor<T>& input) {
  const auto g = detail::conv_geometry(layer, input);
  DenseTensor<T> out({g.batch, g.out_c, g.out_h, g.out_w});
  const T* in = input.data().data();
  const T* k = layer.kernel.data().data();
  T* o = out.data().data();
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t t = 0; t < g.out_c; ++t) {
      T* plane = o + (b * g.out_c + t) * g.out_h * g.out_w;
      if (layer.bias) std::fill(plane, plane + g.out_h * g.out_w, (*layer.bias)[t]);
      const std::size_t first_in = (t / g.tg) * g.sg;
      for (std::size_t s = 0; s < g.sg; ++s) {
        const T* src = in + (b * g.in_c + first_in + s) * g.in_h * g.in_w;
        for (std::size_t a = 0; a < g.kh; ++a) {
          const auto [x0, x1] = detail::valid_range(a, g.pad_h, g.in_h, g.out_h);
          for (std::size_t c = 0; c < g.kw; ++c) {
            const T w = k[((a * g.kw + c) * g.sg + s) * g.out_c + t];
            const auto [y0, y1] = detail::valid_range(c, g.pad_w, g.in_w, g.out_w);
            for (std::size_t x = x0; x < x1; ++x) {
              const T* row = src + (x + a - g.pad_h) * g.in_w;
              T* dst = plane + x * g.out_w;
              for (std::size_t y = y0; y < y1; ++y) dst[y] += w * row[y + c - g.pad_w];
            }
          }
        }
      }
    }
  }
  return out;
}

template <typename T>
struct ConvGradients {
  DenseTensor<T> input;
  DenseTensor<T> kernel;
  std::optional<DenseTensor<T>> bias;
};

template <typename T>
ConvGradients<T> conv_backward(const ConvLayerSpec<T>& layer, const DenseTensor<T>& input,
                               const DenseTensor<T>& grad_out) {
  const auto g = detail::conv_geometry(layer, input);
  if (grad_out.shape() != Shape{g.batch, g.out_c, g.out_h, g.out_w}) {
    throw std::invalid_argument("conv_backward: grad_out shape " + shape_string(grad_out.shape()) +
                                " does not match the forward output");
  }
  ConvGradients<T> grads{DenseTensor<T>(input.shape()), DenseTensor<T>(layer.kernel.shape()), std::nullopt};
  const T* in = input.data().data();
  const T* k = layer.kernel.data().data();
  const T* go = grad_out.data().data();
  T* gi = grads.input.data().data();
  T* gk = grads.kernel.data().data();

  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t t = 0; t < g.out_c; ++t) {
      const T* plane = go + (b * g.out_c + t) * g.out_h * g.out_w;
      const std::size_t first_in = (t / g.tg) * g.sg;
      for (std::size_t s = 0; s < g.sg; ++s) {
        const std::size_t in_offset = (b * g.in_c + first_in + s) * g.in_h * g.in_w;
        for (std::size_t a = 0; a < g.kh; ++a) {
          const auto [x0, x1] = detail::valid_range(a, g.pad_h, g.in_h, g.out_h);
          for (std::size_t c = 0; c < g.kw; ++c) {
            const std::size_t widx = ((a * g.kw + c) * g.sg + s) * g.out_c + t;
            const T w = k[widx];
            const auto [y0, y1] = detail::valid_range(c, g.pad_w, g.in_w, g.out_w);
            T acc = 0;
            for (std::size_t x = x0; x < x1; ++x) {
              const std::size_t row = in_offset + (x + a - g.pad_h) * g.in_w;
              const T* src = in + row;
              T* dst = gi + row;
              const T* grow = plane + x * g.out_w;
              for (std::size_t y = y0; y < y1; ++y) {
                acc += grow[y] * src[y + c - g.pad_w];
                dst[y + c - g.pad_w] += w * grow[y];
              }
            }
            gk[widx] += acc;
          }
        }
      }
    }
  }
  if (layer.bias) {
    grads.bias = DenseTensor<T>({g.out_c});
    for (std::size_t b = 0; b < g.batch; ++b)
      for (std::size_t t = 0; t < g.out_c; ++t) {
        const T* plane = go + (b * g.out_c + t) * g.out_h * g.out_w;
        T acc = 0;
        for (std::size_t i = 0; i < g.out_h * g.out_w; ++i) acc += plane[i];
        (*grads.bias)[t] += acc;
      }
  }
  return grads;
}

struct MaxoutLayerSpec {
  std::size_t group_size = 1;

  Shape output_shape(const Shape& in) const {
    if (group_size == 0) throw std::invalid_argument("maxout: group_size must be >= 1");
    if (in.size() != 3 || in[0] % group_size != 0) {
      throw std::invalid_argument("maxout: " + std::to_string(in.empty() ? 0 : in[0]) +
                                  " channels not divisible by group size " + std::to_string(group_size));
    }
    return {in[0] / group_size, in[1], in[2]};
  }
};

// Max over consecutive channel groups; ties resolve to the lowest channel.
template <typename T>
DenseTensor<T> maxout_forward(const MaxoutLayerSpec& layer, const DenseTensor<T>& input) {
  if (input.ndim() != 4) throw std::invalid_argument("maxout: input must be B x C x H x W");
  const Shape os = layer.output_shape({input.dim(1), input.dim(2), input.dim(3)});
  const std::size_t batch = input.dim(0), plane = input.dim(2) * input.dim(3), k = layer.group_size;
  DenseTensor<T> out({batch, os[0], os[1], os[2]});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < os[0]; ++c)
      for (std::size_t p = 0; p < plane; ++p) {
        T best = input[((b * input.dim(1)) + c * k) * plane + p];
        for (std::size_t j = 1; j < k; ++j) best = std::max(best, input[((b * input.dim(1)) + c * k + j) * plane + p]);
        out[(b * os[0] + c) * plane + p] = best;
      }
  return out;
}

template <typename T>
DenseTensor<T> maxout_backward(const MaxoutLayerSpec& layer, const DenseTensor<T>& input,
                               const DenseTensor<T>& grad_out) {
  if (input.ndim() != 4) throw std::invalid_argument("maxout: input must be B x C x H x W");
  const Shape os = layer.output_shape({input.dim(1), input.dim(2), input.dim(3)});
  const std::size_t batch = input.dim(0), plane = input.dim(2) * input.dim(3), k = layer.group_size;
  if (grad_out.shape() != Shape{batch, os[0], os[1], os[2]}) {
    throw std::invalid_argument("maxout_backward: grad_out shape mismatch");
  }
  DenseTensor<T> grad_in(input.shape());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < os[0]; ++c)
      for (std::size_t p = 0; p < plane; ++p) {
        std::size_t arg = ((b * input.dim(1)) + c * k) * plane + p;
        for (std::size_t j = 1; j < k; ++j) {
          const std::size_t idx = ((b * input.dim(1)) + c * k + j) * plane + p;
          if (input[idx] > input[arg]) arg = idx;
        }
        grad_in[arg] += grad_out[(b * os[0] + c) * plane + p];
      }
  return grad_in;
}

// Terminal classifier: the incoming C x H x W map is flattened into
// num_classes logits.
struct SoftmaxLayerSpec {
  std::size_t num_classes = 0;

  Shape output_shape(const Shape& in) const {
    if (shape_size(in) != num_classes) {
      throw std::invalid_argument("softmax classifier: input " + shape_string(in) + " does not flatten to " +
                                  std::to_string(num_classes) + " logits");
    }
    return {num_classes};
  }
};

template <typename T>
struct LossAndGrad {
  T loss;
  DenseTensor<T> grad;
};

// Mean cross-entropy over a B x C logit batch; grad = (softmax - onehot) / B.
template <typename T>
LossAndGrad<T> softmax_cross_entropy(const DenseTensor<T>& logits, const std::vector<std::size_t>& labels) {
  if (logits.ndim() != 2) throw std::invalid_argument("softmax_cross_entropy: logits must be B x C");
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  if (labels.size() != batch) throw std::invalid_argument("softmax_cross_entropy: label count != batch size");
  LossAndGrad<T> out{T{0}, DenseTensor<T>(logits.shape())};
  for (std::size_t b = 0; b < batch; ++b) {
    if (labels[b] >= classes) {
      throw std::invalid_argument("softmax_cross_entropy: label " + std::to_string(labels[b]) + " out of range");
    }
    const T* row = logits.data().data() + b * classes;
    const T shift = *std::max_element(row, row + classes);
    T sum = 0;
    for (std::size_t c = 0; c < classes; ++c) sum += std::exp(row[c] - shift);
    const T log_sum = std::log(sum) + shift;
    out.loss += log_sum - row[labels[b]];
    for (std::size_t c = 0; c < classes; ++c) {
      const T p = std::exp(row[c] - log_sum);
      out.grad[b * classes + c] = (p - (c == labels[b] ? T{1} : T{0})) / static_cast<T>(batch);
    }
  }
  out.loss /= static_cast<T>(batch);
  return out;
}

template <typename T>
DenseTensor<T> softmax(const DenseTensor<T>& logits) {
  if (logits.ndim() != 2) throw std::invalid_argument("softmax: logits must be B x C");
  DenseTensor<T> p(logits.shape());
  const std::size_t classes = logits.dim(1);
  for (std::size_t b = 0; b < logits.dim(0); ++b) {
    const T* row = logits.data().data() + b * classes;
    const T shift = *std::max_element(row, row + classes);
    T sum = 0;
    for (std::size_t c = 0; c < classes; ++c) sum += std::exp(row[c] - shift);
    for (std::size_t c = 0; c < classes; ++c) p[b * classes + c] = std::exp(row[c] - shift) / sum;
  }
  return p;
}

// Index of the largest logit per row, lowest index on ties.
template <typename T>
std::vector<std::size_t> argmax_rows(const DenseTensor<T>& logits) {
  std::vector<std::size_t> out(logits.dim(0));
  const std::size_t classes = logits.dim(1);
  for (std::size_t b = 0; b < out.size(); ++b) {
    const T* row = logits.data().data() + b * classes;
    out[b] = static_cast<std::size_t>(std::max_element(row, row + classes) - row);
  }
  return out;
}

}  // namespace cpconv
