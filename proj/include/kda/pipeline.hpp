#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kda/dataset.hpp"
#include "kda/keyed_stream.hpp"
#include "kda/nn.hpp"
#include "kda/prefilter.hpp"
#include "kda/transform.hpp"

namespace kda {

/// Classifier i of channel j (both 1-based). Channel j owns one sub-band.
struct ChannelConfig {
  std::size_t channel = 1;
  std::size_t classifier = 1;
  Subband subband = Subband::kV;
  ChannelKey key;
  double flip_fraction = 1.0;

  SignFlipMask make_mask(std::size_t height, std::size_t width) const;
};

/// J channels mapped onto V, H, D in order, I classifiers each, keys derived
/// from `master`. Order is channel-major: (1,1), (1,2), ..., (J,I).
std::vector<ChannelConfig> derive_channels(const SecretKey& master, std::size_t channels,
                                           std::size_t classifiers_per_channel, double flip_fraction = 1.0);

struct SoftOutput {
  std::vector<double> probabilities;

  int argmax() const;  // ties go to the lowest class index
};

/// Mean of the per-classifier probability vectors.
SoftOutput aggregate(std::span<const SoftOutput> outputs);

struct KdaChannel {
  ChannelConfig config;
  SignFlipMask mask;
  nn::Classifier classifier;
};

struct KdaModel {
  std::vector<KdaChannel> channels;
  PrefilterConfig prefilter;
  std::size_t class_count = 0;
  std::string key_fingerprint;
  std::string architecture = "reference-cnn";
  /// Reject when the aggregated max-probability falls below this.
  std::optional<double> reject_threshold;

  const Tensor::Shape& input_shape() const;
  /// Model restricted to the listed channel positions.
  KdaModel with_channels(std::vector<std::size_t> indices) const;
  /// Channels whose (j, i) satisfy i <= classifiers_per_channel.
  KdaModel subset_for(std::size_t classifiers_per_channel) const;
};

struct Prediction {
  int label = 0;
  SoftOutput aggregated;
  bool rejected = false;
};

/// Builds the untrained classifier for a channel.
using ClassifierFactory = std::function<nn::Classifier(const ChannelConfig&)>;
/// Reference CNN initialised from the channel's own key.
ClassifierFactory reference_factory(std::size_t channels, std::size_t height, std::size_t width,
                                    std::size_t classes);

/// The transformed signal a channel classifies: mask pipeline over F(x).
Tensor channel_input(const ImageTensor& filtered, const SignFlipMask& mask);

/// Trains every channel independently on W^-1 P W F(x), up to `workers`
/// channels at a time (0 = one per hardware thread). The result does not
/// depend on the worker count.
KdaModel train_kda(const std::vector<ChannelConfig>& configs, const Dataset& train_set, const nn::TrainConfig& cfg,
                   const PrefilterConfig& prefilter, const ClassifierFactory& factory,
                   const std::string& key_fingerprint = {}, std::size_t workers = 0);

/// Per-classifier soft outputs, in channel order.
std::vector<SoftOutput> channel_outputs(const KdaModel& model, const ImageTensor& x);
Prediction predict(const KdaModel& model, const ImageTensor& x);
/// Aggregated probabilities for many images, N x K.
Tensor predict_probabilities(const KdaModel& model, std::span<const ImageTensor> images);

struct BatchPrediction {
  std::vector<int> labels;
  double error_rate = 0.0;
};

/// Throws std::invalid_argument for an empty set.
BatchPrediction predict_batch(const KdaModel& model, std::span<const ImageTensor> images, std::span<const int> truth);

/// Clean accuracy of one trained channel when its input is built with `mask`
/// (its own mask, or one derived from a different key).
double channel_accuracy(const KdaChannel& channel, const PrefilterConfig& prefilter, const SignFlipMask& mask,
                        const Dataset& data);

// Model bundle: manifest.txt (key=value), one KDAM checkpoint per channel.
void save_bundle(const KdaModel& model, const std::filesystem::path& dir);
/// Re-derives every mask from `master`; refuses a key whose fingerprint
/// differs from the manifest.
KdaModel load_bundle(const std::filesystem::path& dir, const SecretKey& master);

}  // namespace kda
