#include "kda/attacks.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>

namespace kda {
namespace {

int argmax(std::span<const double> v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

class ClassifierPass final : public GradientPass {
 public:
  ClassifierPass(const nn::Classifier& model, const Tensor& x)
      : model_(model), shape_(x.shape()), trace_(model.forward_trace(x)) {
    logits_.assign(trace_.output().values().begin(), trace_.output().values().end());
  }
  Tensor gradient(std::span<const double> weights) const override {
    Tensor g(trace_.output().shape(), std::vector<double>(weights.begin(), weights.end()));
    return model_.backward(trace_, g, nullptr).reshaped(shape_);
  }

 private:
  const nn::Classifier& model_;
  Tensor::Shape shape_;
  nn::Trace trace_;
};

class KdaPass final : public GradientPass {
 public:
  KdaPass(const KdaModel& model, const Tensor& x) : model_(model), shape_(x.shape()) {
    const std::size_t k = model.class_count;
    const double n = static_cast<double>(model.channels.size());
    agg_.assign(k, 0.0);
    for (const auto& ch : model.channels) {
      traces_.push_back(ch.classifier.forward_trace(apply_pipeline(x, ch.mask)));
      probs_.push_back(nn::softmax(traces_.back().output()));
      for (std::size_t c = 0; c < k; ++c) agg_[c] += probs_.back()[c] / n;
    }
    logits_.resize(k);
    for (std::size_t c = 0; c < k; ++c) logits_[c] = std::log(std::max(agg_[c], 1e-300));
  }

  Tensor gradient(std::span<const double> weights) const override {
    const std::size_t k = model_.class_count;
    const double n = static_cast<double>(model_.channels.size());
    Tensor grad(shape_);
    for (std::size_t m = 0; m < model_.channels.size(); ++m) {
      // d/dp of sum_c w_c log(agg_c) = w_c / (n agg_c), then through the softmax.
      std::vector<double> dp(k);
      double dot = 0.0;
      for (std::size_t c = 0; c < k; ++c) {
        dp[c] = weights[c] / (n * std::max(agg_[c], 1e-300));
        dot += probs_[m][c] * dp[c];
      }
      Tensor dz({1, k});
      for (std::size_t c = 0; c < k; ++c) dz[c] = probs_[m][c] * (dp[c] - dot);
      const Tensor gin = model_.channels[m].classifier.backward(traces_[m], dz, nullptr).reshaped(shape_);
      // The mask pipeline is symmetric, so it is its own adjoint.
      const Tensor back = apply_pipeline(gin, model_.channels[m].mask);
      for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += back[i];
    }
    return grad;
  }

 private:
  const KdaModel& model_;
  Tensor::Shape shape_;
  std::vector<nn::Trace> traces_;
  std::vector<Tensor> probs_;
  std::vector<double> agg_;
};

}  // namespace

std::unique_ptr<GradientPass> ClassifierGradientModel::forward(const Tensor& x) const {
  return std::make_unique<ClassifierPass>(*model_, x);
}

std::unique_ptr<GradientPass> KdaGradientModel::forward(const Tensor& x) const {
  if (!differentiable()) throw std::invalid_argument("KDA model with an active pre-filter is not differentiable");
  return std::make_unique<KdaPass>(*model_, x);
}

Tensor BlackBox::probabilities(std::span<const ImageTensor> images) {
  queries_ += images.size();
  return query_(images);
}

BlackBox black_box(const nn::Classifier& model) {
  return BlackBox([&model](std::span<const ImageTensor> images) { return nn::softmax(model.forward(stack(images))); });
}

BlackBox black_box(const KdaModel& model) {
  return BlackBox([&model](std::span<const ImageTensor> images) { return predict_probabilities(model, images); });
}

void CwConfig::validate() const {
  if (confidence < 0.0) throw std::invalid_argument("confidence must be >= 0");
  if (binary_search_steps == 0 || max_iterations == 0) throw std::invalid_argument("C&W step counts must be positive");
  if (!(initial_const > 0.0) || !(learning_rate > 0.0)) throw std::invalid_argument("C&W constants must be positive");
  if (targeted && target_label < 0) throw std::invalid_argument("targeted attack needs a target label");
}

AttackResult cw_l2(const GradientModel& model, const ImageTensor& x, int true_label, const CwConfig& cfg) {
  cfg.validate();
  if (!model.differentiable()) {
    throw std::invalid_argument("C&W L2 needs a differentiable model handle (gray-box access to gradients)");
  }
  const std::size_t k = model.class_count();
  if (true_label < 0 || static_cast<std::size_t>(true_label) >= k) throw std::invalid_argument("label out of range");
  const int aim = cfg.targeted ? cfg.target_label : true_label;

  AttackResult result;
  result.true_label = true_label;
  result.adversarial = x;
  result.adversarial_label = argmax(model.forward(x.tensor())->logits());
  if (!cfg.targeted && result.adversarial_label != true_label) {
    result.success = true;
    return result;
  }

  const Tensor& x0 = x.tensor();
  const std::size_t n = x0.size();
  std::vector<double> w0(n);
  for (std::size_t i = 0; i < n; ++i) w0[i] = std::atanh((2.0 * x0[i] - 1.0) * 0.999999);

  // Success test with the confidence margin folded in, as in the reference attack.
  auto succeeds = [&](std::vector<double> z) {
    if (cfg.targeted) {
      z[static_cast<std::size_t>(aim)] -= cfg.confidence;
      return argmax(z) == aim;
    }
    z[static_cast<std::size_t>(aim)] += cfg.confidence;
    return argmax(z) != aim;
  };

  double lower = 0.0, upper = 1e10, c = cfg.initial_const;
  double best_l2 = std::numeric_limits<double>::infinity();
  Tensor best = x0;
  std::vector<double> weights(k);
  Tensor xp(x0.shape());
  std::vector<double> grad_w(n);

  for (std::size_t step = 0; step < cfg.binary_search_steps; ++step) {
    std::vector<double> w = w0, m(n, 0.0), v(n, 0.0);
    double prev = std::numeric_limits<double>::infinity();
    bool found = false;
    const std::size_t check_every = std::max<std::size_t>(cfg.max_iterations / 10, 1);
    for (std::size_t it = 0; it < cfg.max_iterations; ++it) {
      for (std::size_t i = 0; i < n; ++i) xp[i] = std::tanh(w[i]) * 0.5 + 0.5;
      double l2 = 0.0;
      for (std::size_t i = 0; i < n; ++i) l2 += (xp[i] - x0[i]) * (xp[i] - x0[i]);

      // Margin term: untargeted max(Z_t - max_{j!=t} Z_j + kappa, 0).
      const auto pass = model.forward(xp);
      const std::vector<double>& logits = pass->logits();
      ++result.queries;
      double other = -std::numeric_limits<double>::infinity();
      std::size_t other_idx = 0;
      for (std::size_t j = 0; j < k; ++j) {
        if (static_cast<int>(j) == aim) continue;
        if (logits[j] > other) {
          other = logits[j];
          other_idx = j;
        }
      }
      const double real = logits[static_cast<std::size_t>(aim)];
      const double margin = cfg.targeted ? other - real + cfg.confidence : real - other + cfg.confidence;
      const double loss = l2 + c * std::max(margin, 0.0);

      if (succeeds(logits)) {
        found = true;
        if (l2 < best_l2) {
          best_l2 = l2;
          best = xp;
        }
      }

      if (cfg.abort_early && it % check_every == 0) {
        if (loss > prev * 0.9999) break;
        prev = loss;
      }

      std::fill(weights.begin(), weights.end(), 0.0);
      Tensor gz;
      if (margin > 0.0) {
        const double sgn = cfg.targeted ? -1.0 : 1.0;
        weights[static_cast<std::size_t>(aim)] = sgn * c;
        weights[other_idx] = -sgn * c;
        gz = pass->gradient(weights);
      }
      for (std::size_t i = 0; i < n; ++i) {
        const double dx = 2.0 * (xp[i] - x0[i]) + (gz.empty() ? 0.0 : gz[i]);
        const double t = std::tanh(w[i]);
        grad_w[i] = dx * 0.5 * (1.0 - t * t);
      }
      // Adam.
      constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
      const double tcount = static_cast<double>(it + 1);
      const double lr_t = cfg.learning_rate * std::sqrt(1.0 - std::pow(b2, tcount)) / (1.0 - std::pow(b1, tcount));
      for (std::size_t i = 0; i < n; ++i) {
        m[i] = b1 * m[i] + (1.0 - b1) * grad_w[i];
        v[i] = b2 * v[i] + (1.0 - b2) * grad_w[i] * grad_w[i];
        w[i] -= lr_t * m[i] / (std::sqrt(v[i]) + eps);
      }
    }
    if (found) {
      upper = std::min(upper, c);
      if (upper < 1e9) c = (lower + upper) / 2.0;
    } else {
      lower = std::max(lower, c);
      c = upper < 1e9 ? (lower + upper) / 2.0 : c * 10.0;
    }
  }

  if (std::isfinite(best_l2)) {
    result.success = true;
    result.adversarial = clamp_to_image(best);
    result.norm = sub(result.adversarial.tensor(), x0).l2_norm();
    result.adversarial_label = argmax(model.forward(result.adversarial.tensor())->logits());
  }
  return result;
}

DeResult differential_evolution(std::span<const double> lower, std::span<const double> upper,
                                const BatchFitness& fitness, const DeConfig& cfg, KeyedStream& rng,
                                const std::function<bool()>& stop) {
  if (cfg.population < 4) throw std::invalid_argument("DE population must be >= 4 (three distinct donors)");
  if (lower.size() != upper.size() || lower.empty()) throw std::invalid_argument("bad DE bounds");
  const std::size_t dim = lower.size();
  const std::size_t np = cfg.population;

  std::vector<std::vector<double>> pop(np, std::vector<double>(dim));
  for (auto& ind : pop) {
    for (std::size_t d = 0; d < dim; ++d) ind[d] = rng.uniform(lower[d], upper[d]);
  }
  std::vector<double> fit = fitness(pop);
  DeResult res;
  res.evaluations = np;
  auto best_index = [&] { return static_cast<std::size_t>(std::min_element(fit.begin(), fit.end()) - fit.begin()); };
  res.history.push_back(fit[best_index()]);
  if (stop && stop()) {
    res.stopped_early = true;
  }

  std::vector<std::vector<double>> trials(np, std::vector<double>(dim));
  for (std::size_t g = 0; g < cfg.generations && !res.stopped_early; ++g) {
    for (std::size_t i = 0; i < np; ++i) {
      std::size_t r[3];
      for (int t = 0; t < 3; ++t) {
        do {
          r[t] = rng.below(np);
        } while (r[t] == i || (t > 0 && r[t] == r[0]) || (t > 1 && r[t] == r[1]));
      }
      const std::size_t jrand = rng.below(dim);
      for (std::size_t d = 0; d < dim; ++d) {
        const bool cross = rng.uniform() < cfg.crossover || d == jrand;
        double v = cross ? pop[r[0]][d] + cfg.scale * (pop[r[1]][d] - pop[r[2]][d]) : pop[i][d];
        trials[i][d] = std::clamp(v, lower[d], upper[d]);
      }
    }
    const std::vector<double> tf = fitness(trials);
    res.evaluations += np;
    for (std::size_t i = 0; i < np; ++i) {
      if (tf[i] <= fit[i]) {
        pop[i] = trials[i];
        fit[i] = tf[i];
      }
    }
    res.history.push_back(fit[best_index()]);
    if (stop && stop()) res.stopped_early = true;
  }
  const std::size_t b = best_index();
  res.best = pop[b];
  res.best_fitness = fit[b];
  return res;
}

void OnePixelConfig::validate() const {
  if (pixels < 1) throw std::invalid_argument("OnePixel needs p >= 1");
  if (population < 4) throw std::invalid_argument("DE population must be >= 4 (three distinct donors)");
}

ImageTensor apply_pixel_perturbation(const ImageTensor& x, std::span<const double> candidate, std::size_t pixels) {
  const std::size_t stride = 2 + x.channels();
  if (candidate.size() != pixels * stride) throw std::invalid_argument("candidate length does not match pixel count");
  ImageTensor out = x;
  for (std::size_t p = 0; p < pixels; ++p) {
    const double* c = candidate.data() + p * stride;
    const auto row = static_cast<std::size_t>(std::clamp(std::lround(c[0]), 0L, static_cast<long>(x.height()) - 1));
    const auto col = static_cast<std::size_t>(std::clamp(std::lround(c[1]), 0L, static_cast<long>(x.width()) - 1));
    for (std::size_t ch = 0; ch < x.channels(); ++ch) out.set(ch, row, col, c[2 + ch]);
  }
  return out;
}

namespace {

std::size_t changed_pixels(const ImageTensor& a, const ImageTensor& b) {
  std::size_t n = 0;
  for (std::size_t r = 0; r < a.height(); ++r) {
    for (std::size_t c = 0; c < a.width(); ++c) {
      bool diff = false;
      for (std::size_t ch = 0; ch < a.channels(); ++ch) diff |= a.at(ch, r, c) != b.at(ch, r, c);
      n += diff;
    }
  }
  return n;
}

}  // namespace

AttackResult one_pixel(BlackBox& model, const ImageTensor& x, int true_label, const OnePixelConfig& cfg) {
  cfg.validate();
  std::vector<double> lo, hi;
  for (std::size_t p = 0; p < cfg.pixels; ++p) {
    lo.push_back(0.0);
    hi.push_back(static_cast<double>(x.height() - 1));
    lo.push_back(0.0);
    hi.push_back(static_cast<double>(x.width() - 1));
    for (std::size_t c = 0; c < x.channels(); ++c) {
      lo.push_back(0.0);
      hi.push_back(1.0);
    }
  }

  AttackResult result;
  result.true_label = true_label;
  result.adversarial = x;

  const std::size_t before = model.queries();
  const Tensor clean = model.probabilities(std::span(&x, 1));
  result.adversarial_label = argmax(clean.values());
  if (result.adversarial_label != true_label) {
    result.success = true;
    result.queries = model.queries() - before;
    return result;
  }

  bool hit = false;
  double hit_fitness = std::numeric_limits<double>::infinity();
  ImageTensor hit_image;
  int hit_label = true_label;
  auto fitness = [&](const std::vector<std::vector<double>>& cands) {
    std::vector<ImageTensor> imgs;
    imgs.reserve(cands.size());
    for (const auto& cnd : cands) imgs.push_back(apply_pixel_perturbation(x, cnd, cfg.pixels));
    const Tensor probs = model.probabilities(imgs);
    const std::size_t k = probs.dim(1);
    std::vector<double> f(cands.size());
    for (std::size_t i = 0; i < cands.size(); ++i) {
      const std::span<const double> row(probs.data() + i * k, k);
      f[i] = row[static_cast<std::size_t>(true_label)];
      const int label = argmax(row);
      if (label != true_label && f[i] < hit_fitness) {
        hit = true;
        hit_fitness = f[i];
        hit_image = imgs[i];
        hit_label = label;
      }
    }
    return f;
  };

  KeyedStream rng(SecretKey::from_seed(cfg.seed).derive("one-pixel"));
  const DeConfig de{cfg.population, cfg.generations, cfg.scale, cfg.crossover};
  differential_evolution(lo, hi, fitness, de, rng, [&] { return hit; });
  result.queries = model.queries() - before;
  if (hit) {
    result.success = true;
    result.adversarial = hit_image;
    result.adversarial_label = hit_label;
  }
  result.norm = static_cast<double>(changed_pixels(x, result.adversarial));
  return result;
}

double evaluate_under_attack(const std::function<std::vector<int>(std::span<const ImageTensor>)>& defense,
                             std::span<const ImageTensor> adversarial, std::span<const int> truth) {
  if (adversarial.size() != truth.size()) throw std::invalid_argument("adversarial set and labels differ in length");
  if (adversarial.empty()) throw std::invalid_argument("error rate is undefined for an empty set");
  const auto pred = defense(adversarial);
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) wrong += pred[i] != truth[i];
  return static_cast<double>(wrong) / static_cast<double>(truth.size());
}

namespace {

std::pair<std::vector<ImageTensor>, std::vector<int>> unpack(std::span<const AttackResult> results) {
  std::vector<ImageTensor> imgs;
  std::vector<int> labels;
  for (const auto& r : results) {
    imgs.push_back(r.adversarial);
    labels.push_back(r.true_label);
  }
  return {std::move(imgs), std::move(labels)};
}

}  // namespace

double evaluate_under_attack(const KdaModel& defense, std::span<const AttackResult> results) {
  auto [imgs, labels] = unpack(results);
  return evaluate_under_attack(
      [&](std::span<const ImageTensor> xs) { return predict_batch(defense, xs, std::span(labels)).labels; }, imgs,
      labels);
}

double evaluate_under_attack(const nn::Classifier& defense, std::span<const AttackResult> results) {
  auto [imgs, labels] = unpack(results);
  return evaluate_under_attack(
      [&](std::span<const ImageTensor> xs) { return nn::predict_labels(defense, stack(xs)); }, imgs, labels);
}

namespace {

constexpr char kAdvMagic[4] = {'K', 'D', 'A', 'A'};
constexpr std::uint16_t kAdvVersion = 1;

void put_u(std::ostream& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u(std::istream& in, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) {
    const int c = in.get();
    if (c == EOF) throw std::runtime_error("truncated adversarial set");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return v;
}

}  // namespace

void write_adversarial_set(std::ostream& out, std::span<const AdversarialRecord> records) {
  out.write(kAdvMagic, 4);
  put_u(out, kAdvVersion, 2);
  put_u(out, records.size(), 4);
  std::size_t c = 0, h = 0, w = 0;
  if (!records.empty()) {
    c = records.front().image.channels();
    h = records.front().image.height();
    w = records.front().image.width();
  }
  put_u(out, c, 4);
  put_u(out, h, 4);
  put_u(out, w, 4);
  for (const auto& r : records) {
    if (r.image.channels() != c || r.image.height() != h || r.image.width() != w) {
      throw ShapeError("adversarial records differ in shape");
    }
    put_u(out, r.index, 4);
    put_u(out, r.success ? 1 : 0, 1);
    put_u(out, std::bit_cast<std::uint32_t>(r.norm), 4);
    for (double v : r.image.tensor().values()) put_u(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)), 4);
  }
  if (!out) throw std::runtime_error("failed writing adversarial set");
}

void write_adversarial_set(const std::filesystem::path& path, std::span<const AdversarialRecord> records) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  write_adversarial_set(out, records);
}

std::vector<AdversarialRecord> read_adversarial_set(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kAdvMagic, 4) != 0) throw std::runtime_error("not a KDAA file");
  if (get_u(in, 2) != kAdvVersion) throw std::runtime_error("unsupported adversarial set version");
  const auto count = get_u(in, 4);
  const auto c = get_u(in, 4), h = get_u(in, 4), w = get_u(in, 4);
  std::vector<AdversarialRecord> out;
  out.reserve(count);
  for (std::uint64_t r = 0; r < count; ++r) {
    AdversarialRecord rec;
    rec.index = static_cast<std::uint32_t>(get_u(in, 4));
    rec.success = get_u(in, 1) != 0;
    rec.norm = std::bit_cast<float>(static_cast<std::uint32_t>(get_u(in, 4)));
    Tensor px({c, h, w});
    for (double& v : px.values()) {
      v = static_cast<double>(std::bit_cast<float>(static_cast<std::uint32_t>(get_u(in, 4))));
    }
    rec.image = ImageTensor(std::move(px));
    out.push_back(std::move(rec));
  }
  return out;
}

std::vector<AdversarialRecord> read_adversarial_set(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return read_adversarial_set(in);
}

}  // namespace kda
