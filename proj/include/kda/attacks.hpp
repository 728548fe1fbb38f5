#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <memory>
#include <span>
#include <vector>

#include "kda/keyed_stream.hpp"
#include "kda/nn.hpp"
#include "kda/pipeline.hpp"
#include "kda/tensor.hpp"

namespace kda {

/// One forward evaluation of a differentiable model, kept so the input
/// gradient can be taken without a second pass.
class GradientPass {
 public:
  virtual ~GradientPass() = default;
  const std::vector<double>& logits() const noexcept { return logits_; }
  /// Gradient of sum_k weights[k] * logit_k with respect to the input.
  virtual Tensor gradient(std::span<const double> weights) const = 0;

 protected:
  std::vector<double> logits_;
};

/// Model handle exposing logits and their input gradients (gray-box access).
class GradientModel {
 public:
  virtual ~GradientModel() = default;
  virtual std::size_t class_count() const = 0;
  /// Forward pass over a single C x H x W input.
  virtual std::unique_ptr<GradientPass> forward(const Tensor& x) const = 0;
  virtual bool differentiable() const { return true; }
};

class ClassifierGradientModel final : public GradientModel {
 public:
  explicit ClassifierGradientModel(const nn::Classifier& model) : model_(&model) {}
  std::size_t class_count() const override { return model_->class_count(); }
  std::unique_ptr<GradientPass> forward(const Tensor& x) const override;

 private:
  const nn::Classifier* model_;
};

/// A KDA ensemble seen as one model whose logits are log aggregated
/// probabilities. Only differentiable when the pre-filter is disabled
/// (used to attack a surrogate-keyed copy, never the defended system).
class KdaGradientModel final : public GradientModel {
 public:
  explicit KdaGradientModel(const KdaModel& model) : model_(&model) {}
  std::size_t class_count() const override { return model_->class_count; }
  std::unique_ptr<GradientPass> forward(const Tensor& x) const override;
  bool differentiable() const override { return !model_->prefilter.enabled; }

 private:
  const KdaModel* model_;
};

/// Query-only access to a classifier: images in, probabilities out.
class BlackBox {
 public:
  using Query = std::function<Tensor(std::span<const ImageTensor>)>;

  explicit BlackBox(Query query) : query_(std::move(query)) {}

  /// N x K probabilities.
  Tensor probabilities(std::span<const ImageTensor> images);
  std::size_t queries() const noexcept { return queries_; }

 private:
  Query query_;
  std::size_t queries_ = 0;
};

BlackBox black_box(const nn::Classifier& model);
BlackBox black_box(const KdaModel& model);

struct CwConfig {
  double confidence = 0.0;
  std::size_t binary_search_steps = 6;
  std::size_t max_iterations = 500;
  double initial_const = 1e-2;
  double learning_rate = 5e-3;
  bool targeted = false;
  int target_label = -1;
  bool abort_early = true;

  void validate() const;
};

struct OnePixelConfig {
  std::size_t pixels = 1;
  std::size_t population = 400;
  std::size_t generations = 75;
  double scale = 0.5;
  double crossover = 0.9;
  std::uint64_t seed = 0;

  void validate() const;
};

struct AttackResult {
  ImageTensor adversarial;  // the clean image when the attack failed
  bool success = false;
  double norm = 0.0;        // L2 distance (C&W) or perturbed pixel count (OnePixel)
  std::size_t queries = 0;  // gradient iterations or black-box queries
  int true_label = 0;
  int adversarial_label = 0;
};

/// Carlini-Wagner L2: tanh change of variables, Adam on w, margin loss,
/// binary search over the trade-off constant. Throws std::invalid_argument
/// for a non-differentiable handle.
AttackResult cw_l2(const GradientModel& model, const ImageTensor& x, int true_label, const CwConfig& cfg);

struct DeConfig {
  std::size_t population = 400;
  std::size_t generations = 75;
  double scale = 0.5;
  double crossover = 0.9;
};

struct DeResult {
  std::vector<double> best;
  double best_fitness = 0.0;
  std::vector<double> history;  // best fitness after initialisation and after each generation
  std::size_t evaluations = 0;
  bool stopped_early = false;
};

/// Fitness of a batch of candidates (lower is better).
using BatchFitness = std::function<std::vector<double>(const std::vector<std::vector<double>>&)>;

/// DE/rand/1/bin over a box, with greedy one-to-one selection. Candidates
/// are clamped into [lower, upper] after mutation. `stop` is polled after
/// every batch evaluation.
DeResult differential_evolution(std::span<const double> lower, std::span<const double> upper,
                                const BatchFitness& fitness, const DeConfig& cfg, KeyedStream& rng,
                                const std::function<bool()>& stop = {});

/// Writes the encoded pixels (row, col, channel values...) into a copy of x.
ImageTensor apply_pixel_perturbation(const ImageTensor& x, std::span<const double> candidate, std::size_t pixels);

/// OnePixel: evolves p-pixel perturbations that minimise the true-class
/// probability reported by the black box; stops at the first misclassification.
AttackResult one_pixel(BlackBox& model, const ImageTensor& x, int true_label, const OnePixelConfig& cfg);

/// Fraction of adversarial images the defense labels incorrectly.
double evaluate_under_attack(const std::function<std::vector<int>(std::span<const ImageTensor>)>& defense,
                             std::span<const ImageTensor> adversarial, std::span<const int> truth);
double evaluate_under_attack(const KdaModel& defense, std::span<const AttackResult> results);
double evaluate_under_attack(const nn::Classifier& defense, std::span<const AttackResult> results);

// Adversarial set: "KDAA", u16 version, u32 count, u32 C/H/W, then per
// record u32 index, u8 success, f32 norm, C*H*W f32 pixels (little-endian).
struct AdversarialRecord {
  std::uint32_t index = 0;
  bool success = false;
  float norm = 0.0f;
  ImageTensor image;
};

void write_adversarial_set(std::ostream& out, std::span<const AdversarialRecord> records);
void write_adversarial_set(const std::filesystem::path& path, std::span<const AdversarialRecord> records);
std::vector<AdversarialRecord> read_adversarial_set(std::istream& in);
std::vector<AdversarialRecord> read_adversarial_set(const std::filesystem::path& path);

}  // namespace kda
