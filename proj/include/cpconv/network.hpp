#pragma once

// Sequential CNNs (conv / maxout / terminal softmax classifier), their
// forward and backward passes, and momentum-SGD training.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "cpconv/dataset.hpp"
#include "cpconv/layers.hpp"
#include "cpconv/tensor.hpp"

namespace cpconv {

template <typename T>
using LayerBody = std::variant<ConvLayerSpec<T>, MaxoutLayerSpec, SoftmaxLayerSpec>;

template <typename T>
struct Layer {
  std::string name;
  LayerBody<T> body;

  bool is_conv() const { return std::holds_alternative<ConvLayerSpec<T>>(body); }
  ConvLayerSpec<T>& conv() { return std::get<ConvLayerSpec<T>>(body); }
  const ConvLayerSpec<T>& conv() const { return std::get<ConvLayerSpec<T>>(body); }
};

template <typename T>
struct NetworkSpec {
  // C x H x W of one sample.
  Shape input_shape;
  std::vector<Layer<T>> layers;

  std::size_t index_of(const std::string& name) const {
    for (std::size_t i = 0; i < layers.size(); ++i)
      if (layers[i].name == name) return i;
    throw std::invalid_argument("no layer named '" + name + "'");
  }

  const Layer<T>& layer(const std::string& name) const { return layers[index_of(name)]; }
  Layer<T>& layer(const std::string& name) { return layers[index_of(name)]; }

  // Shape entering layer i (C x H x W); i == layers.size() gives the logits shape.
  Shape shape_before(std::size_t i) const {
    Shape s = input_shape;
    for (std::size_t j = 0; j < i; ++j)
      s = std::visit([&](const auto& l) { return l.output_shape(s); }, layers[j].body);
    return s;
  }

  std::size_t num_classes() const { return std::get<SoftmaxLayerSpec>(layers.back().body).num_classes; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers)
      if (l.is_conv()) n += l.conv().parameter_count();
    return n;
  }

  void validate() const {
    if (input_shape.size() != 3) throw std::invalid_argument("network: input shape must be C x H x W");
    if (layers.empty() || !std::holds_alternative<SoftmaxLayerSpec>(layers.back().body)) {
      throw std::invalid_argument("network: the last layer must be the softmax classifier");
    }
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (i + 1 < layers.size() && std::holds_alternative<SoftmaxLayerSpec>(layers[i].body)) {
        throw std::invalid_argument("network: softmax classifier must be the only terminal layer");
      }
      if (layers[i].name.empty()) throw std::invalid_argument("network: unnamed layer");
      for (std::size_t j = 0; j < i; ++j)
        if (layers[j].name == layers[i].name) throw std::invalid_argument("network: duplicate layer name " + layers[i].name);
      if (layers[i].is_conv()) layers[i].conv().validate();
    }
    shape_before(layers.size());
  }

  template <typename U>
  NetworkSpec<U> cast() const {
    NetworkSpec<U> out{input_shape, {}};
    for (const auto& l : layers) {
      std::visit(
          [&](const auto& body) {
            using B = std::decay_t<decltype(body)>;
            if constexpr (std::is_same_v<B, ConvLayerSpec<T>>) out.layers.push_back({l.name, body.template cast<U>()});
            else out.layers.push_back({l.name, body});
          },
          l.body);
    }
    return out;
  }
};

// Activations kept by a forward pass for the backward pass; activations[i]
// enters layer i, the last entry holds the B x K logits.
template <typename T>
struct ForwardCache {
  std::vector<DenseTensor<T>> activations;
  const DenseTensor<T>& logits() const { return activations.back(); }
};

template <typename T>
DenseTensor<T> layer_forward(const Layer<T>& layer, const DenseTensor<T>& input) {
  return std::visit(
      [&](const auto& body) -> DenseTensor<T> {
        using B = std::decay_t<decltype(body)>;
        if constexpr (std::is_same_v<B, ConvLayerSpec<T>>) {
          return conv_forward(body, input);
        } else if constexpr (std::is_same_v<B, MaxoutLayerSpec>) {
          return maxout_forward(body, input);
        } else {
          body.output_shape({input.dim(1), input.dim(2), input.dim(3)});
          return input.reshaped({input.dim(0), body.num_classes});
        }
      },
      layer.body);
}

template <typename T>
ForwardCache<T> forward_cached(const NetworkSpec<T>& net, const DenseTensor<T>& input) {
  if (input.ndim() != 4 || Shape{input.dim(1), input.dim(2), input.dim(3)} != net.input_shape) {
    throw std::invalid_argument("network forward: input " + shape_string(input.shape()) + " does not match " +
                                shape_string(net.input_shape));
  }
  ForwardCache<T> cache;
  cache.activations.reserve(net.layers.size() + 1);
  cache.activations.push_back(input);
  for (const auto& l : net.layers) cache.activations.push_back(layer_forward(l, cache.activations.back()));
  return cache;
}

// B x C x H x W input -> B x K logits.
template <typename T>
DenseTensor<T> forward(const NetworkSpec<T>& net, const DenseTensor<T>& input) {
  return forward_cached(net, input).activations.back();
}

template <typename T>
struct ParamGradient {
  DenseTensor<T> kernel;
  std::optional<DenseTensor<T>> bias;
};

// One entry per layer; non-conv layers have none.
template <typename T>
using NetworkGradients = std::vector<std::optional<ParamGradient<T>>>;

template <typename T>
NetworkGradients<T> backward(const NetworkSpec<T>& net, const ForwardCache<T>& cache, const DenseTensor<T>& grad_logits,
                             DenseTensor<T>* grad_input = nullptr) {
  NetworkGradients<T> grads(net.layers.size());
  DenseTensor<T> grad = grad_logits;
  for (std::size_t i = net.layers.size(); i-- > 0;) {
    const DenseTensor<T>& in = cache.activations[i];
    std::visit(
        [&](const auto& body) {
          using B = std::decay_t<decltype(body)>;
          if constexpr (std::is_same_v<B, ConvLayerSpec<T>>) {
            auto g = conv_backward(body, in, grad);
            grads[i] = ParamGradient<T>{std::move(g.kernel), std::move(g.bias)};
            grad = std::move(g.input);
          } else if constexpr (std::is_same_v<B, MaxoutLayerSpec>) {
            grad = maxout_backward(body, in, grad);
          } else {
            grad = grad.reshaped(in.shape());
          }
        },
        net.layers[i].body);
  }
  if (grad_input) *grad_input = std::move(grad);
  return grads;
}

struct EvalResult {
  double loss = 0;
  double accuracy = 0;
};

template <typename T>
EvalResult evaluate_full(const NetworkSpec<T>& net, const LabeledDataset<T>& data, std::size_t batch_size = 64) {
  data.validate();
  EvalResult r;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t end = std::min(data.size(), start + batch_size);
    std::vector<std::size_t> idx(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const DenseTensor<T> logits = forward(net, data.gather(idx));
    const std::vector<std::size_t> labels(data.labels.begin() + static_cast<std::ptrdiff_t>(start),
                                          data.labels.begin() + static_cast<std::ptrdiff_t>(end));
    r.loss += static_cast<double>(softmax_cross_entropy(logits, labels).loss) * static_cast<double>(idx.size());
    const auto pred = argmax_rows(logits);
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == labels[i];
  }
  r.loss /= static_cast<double>(data.size());
  r.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  return r;
}

// Fraction of samples whose largest logit (lowest index on ties) is the label.
template <typename T>
double evaluate(const NetworkSpec<T>& net, const LabeledDataset<T>& data) {
  return evaluate_full(net, data).accuracy;
}

struct TrainConfig {
  double learning_rate = 0.01;
  double momentum = 0.9;
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  // Ceiling on the global gradient norm over all trainable layers.
  std::optional<double> grad_clip_norm;
  // Keep layers produced by a CP rewrite fixed.
  bool freeze_inserted = false;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(learning_rate >= 0) || !std::isfinite(learning_rate)) {
      throw std::invalid_argument("TrainConfig: learning_rate must be finite and >= 0");
    }
    if (!(momentum >= 0 && momentum < 1)) throw std::invalid_argument("TrainConfig: momentum must lie in [0, 1)");
    if (batch_size == 0) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
    if (grad_clip_norm && !(*grad_clip_norm > 0)) throw std::invalid_argument("TrainConfig: grad_clip_norm must be > 0");
  }
};

struct EpochStats {
  std::size_t epoch = 0;
  // Loss and accuracy over the whole training set after the epoch's updates.
  double loss = 0;
  double train_acc = 0;
  std::optional<double> eval_acc;
};

template <typename T>
struct TrainResult {
  NetworkSpec<T> net;
  std::vector<EpochStats> history;
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(std::size_t epoch, std::size_t batch, double loss)
      : std::runtime_error("training diverged: non-finite loss " + std::to_string(loss) + " at epoch " +
                           std::to_string(epoch) + ", batch " + std::to_string(batch)),
        epoch_(epoch),
        batch_(batch) {}
  std::size_t epoch() const { return epoch_; }
  std::size_t batch() const { return batch_; }

 private:
  std::size_t epoch_;
  std::size_t batch_;
};

template <typename T>
double global_gradient_norm(const NetworkGradients<T>& grads, const std::vector<bool>& trainable) {
  double acc = 0;
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!grads[i] || !trainable[i]) continue;
    for (T v : grads[i]->kernel.data()) acc += static_cast<double>(v) * static_cast<double>(v);
    if (grads[i]->bias)
      for (T v : grads[i]->bias->data()) acc += static_cast<double>(v) * static_cast<double>(v);
  }
  return std::sqrt(acc);
}

// Momentum SGD: v <- mu v - lr g; w <- w + v. Frozen layers (and inserted
// layers when freeze_inserted is set) are never written.
template <typename T>
class SgdTrainer {
 public:
  SgdTrainer(NetworkSpec<T> net, const TrainConfig& cfg) : net_(std::move(net)), cfg_(cfg), rng_(cfg.seed) {
    cfg_.validate();
    net_.validate();
    for (const auto& l : net_.layers) {
      const bool conv = l.is_conv();
      trainable_.push_back(conv && !l.conv().frozen && !(cfg_.freeze_inserted && l.conv().inserted));
      if (conv) {
        velocity_.push_back(ParamGradient<T>{DenseTensor<T>(l.conv().kernel.shape()), std::nullopt});
        if (l.conv().bias) velocity_.back()->bias = DenseTensor<T>(l.conv().bias->shape());
      } else {
        velocity_.push_back(std::nullopt);
      }
    }
  }

  const NetworkSpec<T>& net() const { return net_; }
  NetworkSpec<T> release() && { return std::move(net_); }
  const std::vector<bool>& trainable() const { return trainable_; }

  // One update on a batch; returns the batch loss before the update.
  T step(const DenseTensor<T>& images, const std::vector<std::size_t>& labels, std::size_t epoch = 0,
         std::size_t batch_index = 0) {
    const ForwardCache<T> cache = forward_cached(net_, images);
    auto [loss, grad_logits] = softmax_cross_entropy(cache.logits(), labels);
    if (!std::isfinite(loss)) throw TrainingDiverged(epoch, batch_index, static_cast<double>(loss));
    NetworkGradients<T> grads = backward(net_, cache, grad_logits);
    T scale = 1;
    if (cfg_.grad_clip_norm) {
      const double norm = global_gradient_norm(grads, trainable_);
      last_grad_norm_ = norm;
      if (norm > *cfg_.grad_clip_norm) scale = static_cast<T>(*cfg_.grad_clip_norm / norm);
    }
    const T lr = static_cast<T>(cfg_.learning_rate);
    const T mu = static_cast<T>(cfg_.momentum);
    for (std::size_t i = 0; i < net_.layers.size(); ++i) {
      if (!trainable_[i] || !grads[i]) continue;
      auto& layer = net_.layers[i].conv();
      update(layer.kernel, velocity_[i]->kernel, grads[i]->kernel, lr, mu, scale);
      if (layer.bias) update(*layer.bias, *velocity_[i]->bias, *grads[i]->bias, lr, mu, scale);
    }
    return loss;
  }

  std::vector<EpochStats> run(const LabeledDataset<T>& data, const LabeledDataset<T>* eval = nullptr) {
    data.validate();
    std::vector<EpochStats> history;
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t epoch = 0; epoch < cfg_.epochs; ++epoch) {
      std::shuffle(order.begin(), order.end(), rng_);
      std::size_t batch_index = 0;
      for (std::size_t start = 0; start < order.size(); start += cfg_.batch_size, ++batch_index) {
        const std::size_t end = std::min(order.size(), start + cfg_.batch_size);
        const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                           order.begin() + static_cast<std::ptrdiff_t>(end));
        std::vector<std::size_t> labels;
        labels.reserve(idx.size());
        for (std::size_t i : idx) labels.push_back(data.labels[i]);
        step(data.gather(idx), labels, epoch, batch_index);
      }
      const EvalResult tr = evaluate_full(net_, data);
      EpochStats stats{epoch + 1, tr.loss, tr.accuracy, std::nullopt};
      if (eval) stats.eval_acc = evaluate(net_, *eval);
      history.push_back(stats);
    }
    return history;
  }

  double last_grad_norm() const { return last_grad_norm_; }

 private:
  static void update(DenseTensor<T>& w, DenseTensor<T>& v, const DenseTensor<T>& g, T lr, T mu, T scale) {
    for (std::size_t k = 0; k < w.size(); ++k) {
      v[k] = mu * v[k] - lr * (scale * g[k]);
      w[k] += v[k];
    }
  }

  NetworkSpec<T> net_;
  TrainConfig cfg_;
  std::mt19937_64 rng_;
  std::vector<bool> trainable_;
  std::vector<std::optional<ParamGradient<T>>> velocity_;
  double last_grad_norm_ = 0;
};

template <typename T>
TrainResult<T> train(NetworkSpec<T> net, const LabeledDataset<T>& data, const TrainConfig& cfg,
                     const LabeledDataset<T>* eval = nullptr) {
  SgdTrainer<T> trainer(std::move(net), cfg);
  auto history = trainer.run(data, eval);
  return {std::move(trainer).release(), std::move(history)};
}

struct ToyNetConfig {
  std::size_t image_size = 24;
  std::size_t num_classes = 5;
  std::size_t conv1_kernel = 5;
  std::size_t conv1_channels = 12;
  std::size_t maxout_group = 2;
  std::uint64_t seed = 0;
};

// conv1 (valid) -> maxout -> conv2 (valid, covers the remaining map) ->
// softmax over num_classes logits.
template <typename T>
NetworkSpec<T> make_toy_net(const ToyNetConfig& cfg) {
  std::mt19937_64 rng(cfg.seed);
  NetworkSpec<T> net{{1, cfg.image_size, cfg.image_size}, {}};
  const std::size_t map = cfg.image_size - cfg.conv1_kernel + 1;
  net.layers.push_back(
      {"conv1", make_conv_layer<T>(cfg.conv1_kernel, cfg.conv1_kernel, 1, cfg.conv1_channels, 1, Padding::valid, true, rng)});
  net.layers.push_back({"maxout1", MaxoutLayerSpec{cfg.maxout_group}});
  net.layers.push_back({"conv2", make_conv_layer<T>(map, map, cfg.conv1_channels / cfg.maxout_group, cfg.num_classes,
                                                    1, Padding::valid, true, rng)});
  net.layers.push_back({"softmax", SoftmaxLayerSpec{cfg.num_classes}});
  net.validate();
  return net;
}

}  // namespace cpconv
