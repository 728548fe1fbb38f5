#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "kda/keyed_stream.hpp"
#include "kda/tensor.hpp"

namespace kda::nn {

enum class LayerKind : std::uint8_t { kConv2d = 1, kDense = 2, kRelu = 3, kMaxPool2 = 4, kFlatten = 5, kSoftmax = 6 };

std::string to_string(LayerKind kind);

/// One layer of the stack. Convolutions are stride 1 with zero "same" padding.
/// params[0] is the weight (outC x inC x k x k, or out x in), params[1] the bias.
struct Layer {
  LayerKind kind = LayerKind::kRelu;
  std::vector<Tensor> params;

  static Layer conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel);
  static Layer dense(std::size_t in_features, std::size_t out_features);
  static Layer relu() { return {LayerKind::kRelu, {}}; }
  static Layer maxpool2() { return {LayerKind::kMaxPool2, {}}; }
  static Layer flatten() { return {LayerKind::kFlatten, {}}; }
  static Layer softmax() { return {LayerKind::kSoftmax, {}}; }

  /// Output shape (without the batch axis) for an input of shape `in`.
  Tensor::Shape output_shape(const Tensor::Shape& in) const;

  Tensor forward(const Tensor& in) const;
  /// Returns dL/d(in). When `param_grads` is non-null its entries are
  /// accumulated (they must already have the parameters' shapes).
  Tensor backward(const Tensor& in, const Tensor& out, const Tensor& grad_out,
                  std::vector<Tensor>* param_grads) const;

  friend bool operator==(const Layer&, const Layer&) = default;
};

/// Activations recorded by a forward pass; acts[0] is the input batch.
struct Trace {
  std::vector<Tensor> acts;
  const Tensor& output() const { return acts.back(); }
};

class Classifier {
 public:
  Classifier() = default;
  /// input_shape is C x H x W (or a flat feature count); validates the stack.
  Classifier(Tensor::Shape input_shape, std::vector<Layer> layers);

  const Tensor::Shape& input_shape() const noexcept { return input_shape_; }
  std::size_t class_count() const noexcept { return class_count_; }
  const std::vector<Layer>& layers() const noexcept { return layers_; }
  std::vector<Layer>& layers() noexcept { return layers_; }
  std::size_t parameter_count() const;

  /// Accepts N x input_shape, or a single un-batched input. Returns N x K.
  Tensor forward(const Tensor& batch) const;
  Trace forward_trace(const Tensor& batch) const;
  /// Back-propagates grad_out (N x K) through the recorded trace.
  Tensor backward(const Trace& trace, const Tensor& grad_out, std::vector<Tensor>* param_grads) const;

  /// Zero tensors shaped like every parameter, in layer order.
  std::vector<Tensor> zero_gradients() const;
  std::vector<Tensor*> parameters();

  friend bool operator==(const Classifier&, const Classifier&) = default;

 private:
  Tensor batched(const Tensor& batch) const;

  Tensor::Shape input_shape_;
  std::vector<Layer> layers_;
  std::size_t class_count_ = 0;
};

/// Reference desk-scale CNN:
/// conv(16,3x3)-relu-pool-conv(32,3x3)-relu-pool-flatten-dense(128)-relu-dense(K),
/// He-uniform initialised from `init_key`.
Classifier make_reference_cnn(std::size_t channels, std::size_t height, std::size_t width,
                              std::size_t classes, const SecretKey& init_key);

/// He-uniform initialisation of every weight; biases set to zero.
void he_uniform_init(Classifier& model, const SecretKey& init_key);

/// Row-wise softmax of an N x K tensor.
Tensor softmax(const Tensor& logits);

struct LossAndGrad {
  double loss = 0.0;
  std::vector<Tensor> grads;
};

/// Mean cross-entropy against one-hot labels and its parameter gradients.
LossAndGrad loss_and_grad(const Classifier& model, const Tensor& batch, const Tensor& one_hot);
double mean_cross_entropy(const Classifier& model, const Tensor& batch, const Tensor& one_hot);

Tensor one_hot(std::span<const int> labels, std::size_t classes);

/// Writes d(objective)/d(logits) into `grad` and returns the objective value.
using LogitObjective = std::function<double(std::span<const double> logits, std::span<double> grad)>;

/// d objective / d x for a single input x (un-batched shape).
Tensor input_gradient(const Classifier& model, const Tensor& x, const LogitObjective& objective);

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::uint64_t seed = 1;

  void validate() const;
};

struct TrainResult {
  Classifier model;
  std::vector<double> loss_history;  // mean training loss per epoch
};

/// Mini-batch SGD with momentum. inputs is N x input_shape.
TrainResult train(Classifier model, const Tensor& inputs, std::span<const int> labels, const TrainConfig& cfg);

std::vector<int> predict_labels(const Classifier& model, const Tensor& inputs, std::size_t chunk = 256);
double accuracy(const Classifier& model, const Tensor& inputs, std::span<const int> labels);

// Checkpoint: "KDAM", u16 version, manifest, then little-endian f32 parameters.
void save_checkpoint(const Classifier& model, std::ostream& out);
void save_checkpoint(const Classifier& model, const std::filesystem::path& path);
Classifier load_checkpoint(std::istream& in);
Classifier load_checkpoint(const std::filesystem::path& path);

/// Rounds every parameter through float32, as a checkpoint round-trip does.
void quantize_to_f32(Classifier& model);

}  // namespace kda::nn
