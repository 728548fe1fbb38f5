#include "kda/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "kda/keyvalue.hpp"
#include "kda/parallel.hpp"

namespace kda {

SignFlipMask ChannelConfig::make_mask(std::size_t height, std::size_t width) const {
  return make_sign_flip(key, subband, height, width, flip_fraction);
}

std::vector<ChannelConfig> derive_channels(const SecretKey& master, std::size_t channels,
                                           std::size_t classifiers_per_channel, double flip_fraction) {
  if (channels < 1 || channels > 3) {
    throw std::invalid_argument("J must be 1..3: only the V, H and D sub-bands are flipped (got " +
                                std::to_string(channels) + ")");
  }
  if (classifiers_per_channel < 1) throw std::invalid_argument("I must be >= 1");
  static constexpr Subband kOrder[3] = {Subband::kV, Subband::kH, Subband::kD};
  std::vector<ChannelConfig> out;
  for (std::size_t j = 1; j <= channels; ++j) {
    for (std::size_t i = 1; i <= classifiers_per_channel; ++i) {
      out.push_back({j, i, kOrder[j - 1], ChannelKey(master, j, i), flip_fraction});
    }
  }
  return out;
}

int SoftOutput::argmax() const {
  if (probabilities.empty()) throw std::logic_error("empty soft output");
  return static_cast<int>(std::max_element(probabilities.begin(), probabilities.end()) - probabilities.begin());
}

SoftOutput aggregate(std::span<const SoftOutput> outputs) {
  if (outputs.empty()) throw std::invalid_argument("nothing to aggregate");
  SoftOutput agg{std::vector<double>(outputs.front().probabilities.size(), 0.0)};
  for (const auto& o : outputs) {
    if (o.probabilities.size() != agg.probabilities.size()) throw ShapeError("soft outputs differ in length");
    for (std::size_t k = 0; k < o.probabilities.size(); ++k) agg.probabilities[k] += o.probabilities[k];
  }
  for (double& p : agg.probabilities) p /= static_cast<double>(outputs.size());
  return agg;
}

const Tensor::Shape& KdaModel::input_shape() const {
  if (channels.empty()) throw std::logic_error("model has no channels");
  return channels.front().classifier.input_shape();
}

KdaModel KdaModel::with_channels(std::vector<std::size_t> indices) const {
  KdaModel m = *this;
  m.channels.clear();
  for (auto i : indices) m.channels.push_back(channels.at(i));
  return m;
}

KdaModel KdaModel::subset_for(std::size_t classifiers_per_channel) const {
  std::vector<std::size_t> keep;
  for (std::size_t c = 0; c < channels.size(); ++c) {
    if (channels[c].config.classifier <= classifiers_per_channel) keep.push_back(c);
  }
  return with_channels(std::move(keep));
}

ClassifierFactory reference_factory(std::size_t channels, std::size_t height, std::size_t width,
                                    std::size_t classes) {
  return [=](const ChannelConfig& cfg) {
    return nn::make_reference_cnn(channels, height, width, classes, cfg.key.derived().derive("init"));
  };
}

Tensor channel_input(const ImageTensor& filtered, const SignFlipMask& mask) {
  return apply_pipeline(filtered, mask);
}

namespace {

std::vector<ImageTensor> filter_all(std::span<const ImageTensor> images, const PrefilterConfig& pf) {
  std::vector<ImageTensor> out;
  out.reserve(images.size());
  for (const auto& x : images) out.push_back(median_outlier_filter(x, pf));
  return out;
}

// Per image and plane DCT coefficients, so every channel reuses them.
struct Spectra {
  std::size_t c = 0, h = 0, w = 0;
  std::vector<Tensor> planes;  // image-major, then colour plane

  explicit Spectra(std::span<const ImageTensor> filtered) {
    if (filtered.empty()) return;
    c = filtered.front().channels();
    h = filtered.front().height();
    w = filtered.front().width();
    planes.reserve(filtered.size() * c);
    for (const auto& x : filtered) {
      for (std::size_t p = 0; p < c; ++p) {
        Tensor plane({h, w}, std::vector<double>(x.plane(p).begin(), x.plane(p).end()));
        planes.push_back(dct2(plane));
      }
    }
  }

  Tensor masked_batch(const SignFlipMask& mask) const {
    const std::size_t n = planes.size() / std::max<std::size_t>(c, 1);
    Tensor out({n, c, h, w});
    const std::size_t ps = h * w;
    for (std::size_t i = 0; i < planes.size(); ++i) {
      const Tensor back = idct2(apply_mask(planes[i], mask));
      std::copy_n(back.data(), ps, out.data() + i * ps);
    }
    return out;
  }
};

}  // namespace

KdaModel train_kda(const std::vector<ChannelConfig>& configs, const Dataset& train_set, const nn::TrainConfig& cfg,
                   const PrefilterConfig& prefilter, const ClassifierFactory& factory,
                   const std::string& key_fingerprint, std::size_t workers) {
  if (train_set.empty()) throw std::invalid_argument("cannot train on an empty dataset");
  if (configs.empty()) throw std::invalid_argument("no channels to train");
  prefilter.validate();
  const auto filtered = filter_all(train_set.images, prefilter);
  const Spectra spectra(filtered);
  KdaModel model;
  model.prefilter = prefilter;
  model.class_count = train_set.class_count;
  model.key_fingerprint = key_fingerprint;
  for (std::size_t a = 0; a < configs.size(); ++a) {
    for (std::size_t b = 0; b < a; ++b) {
      if (configs[a].channel == configs[b].channel && configs[a].classifier == configs[b].classifier) {
        throw std::invalid_argument("duplicate (j, i) channel configuration");
      }
    }
  }
  std::vector<std::optional<KdaChannel>> trained(configs.size());
  parallel_for(configs.size(), workers, [&](std::size_t idx) {
    const auto& c = configs[idx];
    SignFlipMask mask = c.make_mask(spectra.h, spectra.w);
    const Tensor inputs = spectra.masked_batch(mask);
    auto result = nn::train(factory(c), inputs, train_set.labels, cfg);
    nn::quantize_to_f32(result.model);
    if (result.model.class_count() != model.class_count) throw ShapeError("classifier class count mismatch");
    trained[idx] = KdaChannel{c, std::move(mask), std::move(result.model)};
  });
  for (auto& ch : trained) model.channels.push_back(std::move(*ch));
  return model;
}

std::vector<SoftOutput> channel_outputs(const KdaModel& model, const ImageTensor& x) {
  const ImageTensor filtered = median_outlier_filter(x, model.prefilter);
  const Spectra spectra(std::span(&filtered, 1));
  std::vector<SoftOutput> out;
  for (const auto& ch : model.channels) {
    const Tensor probs = nn::softmax(ch.classifier.forward(spectra.masked_batch(ch.mask)));
    out.push_back({std::vector<double>(probs.values().begin(), probs.values().end())});
  }
  return out;
}

Prediction predict(const KdaModel& model, const ImageTensor& x) {
  if (x.tensor().shape() != model.input_shape()) {
    throw ShapeError("image " + shape_string(x.tensor().shape()) + " does not match model input " +
                     shape_string(model.input_shape()));
  }
  const auto outs = channel_outputs(model, x);
  Prediction p;
  p.aggregated = aggregate(outs);
  p.label = p.aggregated.argmax();
  if (model.reject_threshold) {
    p.rejected = p.aggregated.probabilities[static_cast<std::size_t>(p.label)] < *model.reject_threshold;
  }
  return p;
}

Tensor predict_probabilities(const KdaModel& model, std::span<const ImageTensor> images) {
  const std::size_t k = model.class_count;
  Tensor agg({images.size(), k});
  if (images.empty()) return agg;
  for (const auto& x : images) {
    if (x.tensor().shape() != model.input_shape()) throw ShapeError("image does not match model input");
  }
  const auto filtered = filter_all(images, model.prefilter);
  const Spectra spectra(filtered);
  for (const auto& ch : model.channels) {
    const Tensor probs = nn::softmax(ch.classifier.forward(spectra.masked_batch(ch.mask)));
    for (std::size_t i = 0; i < agg.size(); ++i) agg[i] += probs[i];
  }
  for (double& v : agg.values()) v /= static_cast<double>(model.channels.size());
  return agg;
}

BatchPrediction predict_batch(const KdaModel& model, std::span<const ImageTensor> images, std::span<const int> truth) {
  if (images.empty()) throw std::invalid_argument("error rate is undefined for an empty set");
  if (truth.size() != images.size()) throw std::invalid_argument("labels and images differ in length");
  BatchPrediction out;
  std::size_t wrong = 0;
  constexpr std::size_t kChunk = 128;
  for (std::size_t start = 0; start < images.size(); start += kChunk) {
    const std::size_t m = std::min(kChunk, images.size() - start);
    const Tensor probs = predict_probabilities(model, images.subspan(start, m));
    const std::size_t k = probs.dim(1);
    for (std::size_t r = 0; r < m; ++r) {
      const double* p = probs.data() + r * k;
      const int label = static_cast<int>(std::max_element(p, p + k) - p);
      out.labels.push_back(label);
      wrong += label != truth[start + r];
    }
  }
  out.error_rate = static_cast<double>(wrong) / static_cast<double>(images.size());
  return out;
}

double channel_accuracy(const KdaChannel& channel, const PrefilterConfig& prefilter, const SignFlipMask& mask,
                        const Dataset& data) {
  if (data.empty()) throw std::invalid_argument("accuracy is undefined for an empty set");
  const auto filtered = filter_all(data.images, prefilter);
  const Spectra spectra(filtered);
  return nn::accuracy(channel.classifier, spectra.masked_batch(mask), data.labels);
}

namespace {

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

std::string checkpoint_name(const ChannelConfig& c) {
  return "channel_" + std::to_string(c.channel) + "_" + std::to_string(c.classifier) + ".kdam";
}

}  // namespace

void save_bundle(const KdaModel& model, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  KeyValueFile kv;
  kv.set("format", "kda-bundle");
  kv.set("version", "1");
  kv.set("key_fingerprint", model.key_fingerprint);
  kv.set("architecture", model.architecture);
  kv.set("class_count", std::to_string(model.class_count));
  kv.set("aggregation", "mean-probability");
  kv.set("prefilter.enabled", model.prefilter.enabled ? "1" : "0");
  kv.set("prefilter.threshold", format_double(model.prefilter.threshold));
  kv.set("prefilter.window", "3x3");
  kv.set("reject_threshold", model.reject_threshold ? format_double(*model.reject_threshold) : "none");
  kv.set("channels", std::to_string(model.channels.size()));
  for (std::size_t n = 0; n < model.channels.size(); ++n) {
    const auto& c = model.channels[n].config;
    const std::string p = "channel." + std::to_string(n) + ".";
    kv.set(p + "j", std::to_string(c.channel));
    kv.set(p + "i", std::to_string(c.classifier));
    kv.set(p + "subband", std::string(1, subband_tag(c.subband)));
    kv.set(p + "flip_fraction", format_double(c.flip_fraction));
    kv.set(p + "architecture", model.architecture);
    kv.set(p + "file", checkpoint_name(c));
    nn::save_checkpoint(model.channels[n].classifier, dir / checkpoint_name(c));
  }
  kv.save(dir / "manifest.txt");
}

KdaModel load_bundle(const std::filesystem::path& dir, const SecretKey& master) {
  const auto kv = KeyValueFile::load(dir / "manifest.txt");
  if (kv.require("format") != "kda-bundle") throw std::runtime_error("not a KDA bundle: " + dir.string());
  if (kv.require("version") != "1") throw std::runtime_error("unsupported bundle version");
  KdaModel model;
  model.key_fingerprint = kv.require("key_fingerprint");
  if (model.key_fingerprint != master.fingerprint()) {
    throw std::runtime_error("master key does not match the bundle's key fingerprint");
  }
  model.architecture = kv.require("architecture");
  model.class_count = std::stoul(kv.require("class_count"));
  model.prefilter.enabled = kv.require("prefilter.enabled") == "1";
  model.prefilter.threshold = std::stod(kv.require("prefilter.threshold"));
  const auto& rej = kv.require("reject_threshold");
  if (rej != "none") model.reject_threshold = std::stod(rej);
  const std::size_t n = std::stoul(kv.require("channels"));
  for (std::size_t c = 0; c < n; ++c) {
    const std::string p = "channel." + std::to_string(c) + ".";
    ChannelConfig cfg;
    cfg.channel = std::stoul(kv.require(p + "j"));
    cfg.classifier = std::stoul(kv.require(p + "i"));
    cfg.subband = parse_subband(kv.require(p + "subband").at(0));
    cfg.flip_fraction = std::stod(kv.require(p + "flip_fraction"));
    cfg.key = ChannelKey(master, cfg.channel, cfg.classifier);
    auto clf = nn::load_checkpoint(dir / kv.require(p + "file"));
    const auto& shape = clf.input_shape();
    if (shape.size() != 3) throw std::runtime_error("channel classifier is not an image model");
    SignFlipMask mask = cfg.make_mask(shape[1], shape[2]);
    model.channels.push_back({cfg, std::move(mask), std::move(clf)});
  }
  return model;
}

}  // namespace kda
