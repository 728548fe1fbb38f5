#include <doctest.h>

#include <cmath>
#include <sstream>

#include "kda/attacks.hpp"

using namespace kda;

namespace {

double sphere(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x * x;
  return s;
}

BatchFitness batch_of(double (*f)(const std::vector<double>&)) {
  return [f](const std::vector<std::vector<double>>& pop) {
    std::vector<double> out;
    for (const auto& p : pop) out.push_back(f(p));
    return out;
  };
}

// Two classes over a 1x2x2 image: logits (0, w.x + b).
nn::Classifier linear_model(const double w[4], double b) {
  nn::Classifier m({1, 2, 2}, {nn::Layer::flatten(), nn::Layer::dense(4, 2)});
  auto& p = m.layers()[1].params;
  for (int i = 0; i < 4; ++i) p[0][4 + static_cast<std::size_t>(i)] = w[i];
  p[1][1] = b;
  return m;
}

ImageTensor image4(std::initializer_list<double> v) { return ImageTensor(Tensor({1, 2, 2}, std::vector<double>(v))); }

}  // namespace

TEST_CASE("DE minimises the sphere function") {
  const std::vector<double> lo(5, -5.0), hi(5, 5.0);
  KeyedStream rng(SecretKey::from_seed(1));
  const DeResult r = differential_evolution(lo, hi, batch_of(sphere), DeConfig{100, 60}, rng);
  CHECK(r.best_fitness < 1e-2);
  CHECK(r.history.size() == 61);
  CHECK(r.evaluations == 100 * 61);
  for (std::size_t g = 1; g < r.history.size(); ++g) CHECK(r.history[g] <= r.history[g - 1]);
  for (double v : r.best) CHECK(std::abs(v) <= 5.0);
}

TEST_CASE("DE keeps candidates in bounds and honours stop") {
  const std::vector<double> lo{0.0, -1.0}, hi{1.0, 0.0};
  KeyedStream rng(SecretKey::from_seed(2));
  std::size_t batches = 0;
  auto fit = [&](const std::vector<std::vector<double>>& pop) {
    ++batches;
    std::vector<double> out;
    for (const auto& p : pop) {
      CHECK((p[0] >= 0.0 && p[0] <= 1.0 && p[1] >= -1.0 && p[1] <= 0.0));
      out.push_back(-p[0] - p[1] * 10.0);
    }
    return out;
  };
  const DeResult r = differential_evolution(lo, hi, fit, DeConfig{10, 20, 2.0, 0.9}, rng, [&] { return batches >= 3; });
  CHECK(r.stopped_early);
  CHECK(batches == 3);
  KeyedStream again(SecretKey::from_seed(2));
  CHECK_THROWS_AS(differential_evolution(lo, hi, batch_of(sphere), DeConfig{3, 5}, again), std::invalid_argument);
}

TEST_CASE("DE is deterministic in its stream") {
  const std::vector<double> lo(3, -1.0), hi(3, 1.0);
  KeyedStream a(SecretKey::from_seed(3)), b(SecretKey::from_seed(3));
  CHECK(differential_evolution(lo, hi, batch_of(sphere), DeConfig{20, 10}, a).best ==
        differential_evolution(lo, hi, batch_of(sphere), DeConfig{20, 10}, b).best);
}

TEST_CASE("C&W on a linear model finds the hyperplane distance") {
  const double w[4] = {1.0, -2.0, 0.5, 1.5};
  const nn::Classifier m = linear_model(w, -0.3);
  const ClassifierGradientModel g(m);
  const ImageTensor x = image4({0.5, 0.6, 0.4, 0.3});
  // w.x + b = 0.5 - 1.2 + 0.2 + 0.45 - 0.3 = -0.35 < 0, so the label is 0.
  const double analytic = 0.35 / std::sqrt(1 + 4 + 0.25 + 2.25);
  const AttackResult r = cw_l2(g, x, 0, CwConfig{});
  REQUIRE(r.success);
  CHECK(r.adversarial_label == 1);
  CHECK(r.norm >= analytic * 0.999);
  CHECK(std::abs(r.norm - analytic) / analytic < 0.10);
  for (double v : r.adversarial.tensor().values()) CHECK((v >= 0.0 && v <= 1.0));
}

TEST_CASE("C&W edge cases") {
  const double w[4] = {1, 1, 1, 1};
  const nn::Classifier m = linear_model(w, -1.0);
  const ClassifierGradientModel g(m);
  const ImageTensor x = image4({0.9, 0.9, 0.9, 0.9});  // already class 1
  const AttackResult r = cw_l2(g, x, 0, CwConfig{});
  CHECK(r.success);
  CHECK(r.norm == 0.0);
  CHECK(r.adversarial == x);
  CHECK_THROWS_AS(cw_l2(g, x, 5, CwConfig{}), std::invalid_argument);

  KdaModel kda;
  kda.prefilter.enabled = true;
  CHECK_THROWS_AS(cw_l2(KdaGradientModel(kda), x, 0, CwConfig{}), std::invalid_argument);
}

TEST_CASE("KDA gradient handle without prefilter matches finite differences") {
  KdaModel kda;
  kda.prefilter.enabled = false;
  kda.class_count = 3;
  for (std::size_t j = 1; j <= 2; ++j) {
    ChannelConfig cfg;
    cfg.channel = j;
    cfg.subband = j == 1 ? Subband::kV : Subband::kD;
    cfg.key = ChannelKey(SecretKey::from_seed(9), j, 1);
    auto model = nn::make_reference_cnn(1, 4, 4, 3, cfg.key.derived());
    kda.channels.push_back({cfg, cfg.make_mask(4, 4), model});
  }
  const KdaGradientModel g(kda);
  KeyedStream s(SecretKey::from_seed(4));
  Tensor x({1, 4, 4});
  for (double& v : x.values()) v = s.uniform();
  const auto pass = g.forward(x);
  const std::vector<double> wts{0.3, -1.0, 0.7};
  const Tensor grad = pass->gradient(wts);
  auto value = [&](const Tensor& in) {
    const std::vector<double> z = g.forward(in)->logits();
    return wts[0] * z[0] + wts[1] * z[1] + wts[2] * z[2];
  };
  for (std::size_t i = 0; i < x.size(); ++i) {
    Tensor xp = x, xm = x;
    xp[i] += 1e-5;
    xm[i] -= 1e-5;
    const double num = (value(xp) - value(xm)) / 2e-5;
    CHECK(std::abs(grad[i] - num) <= 1e-4 * std::max({std::abs(num), std::abs(grad[i]), 1e-6}));
  }
  // Logits are log aggregated probabilities.
  const ImageTensor img(x);
  const Prediction p = predict(kda, img);
  for (std::size_t k = 0; k < 3; ++k) CHECK(std::exp(pass->logits()[k]) == doctest::Approx(p.aggregated.probabilities[k]));
}

TEST_CASE("OnePixel") {
  // Class 1 iff the top-left pixel is bright.
  nn::Classifier m({1, 2, 2}, {nn::Layer::flatten(), nn::Layer::dense(4, 2)});
  m.layers()[1].params[0][4] = 20.0;
  m.layers()[1].params[1][1] = -10.0;
  BlackBox box = black_box(m);
  const ImageTensor x = image4({0.1, 0.2, 0.3, 0.4});

  OnePixelConfig cfg;
  cfg.population = 20;
  cfg.generations = 10;
  const AttackResult r = one_pixel(box, x, 0, cfg);
  CHECK(r.success);
  CHECK(r.adversarial_label == 1);
  CHECK(r.norm <= 1.0);
  CHECK(r.queries == box.queries());
  CHECK(r.adversarial.at(0, 0, 0) > 0.5);

  cfg.population = 3;
  CHECK_THROWS_AS(one_pixel(box, x, 0, cfg), std::invalid_argument);

  // An unbreakable model: the attack fails and returns the clean image.
  nn::Classifier flat({1, 2, 2}, {nn::Layer::flatten(), nn::Layer::dense(4, 2)});
  flat.layers()[1].params[1][0] = 5.0;
  BlackBox fb = black_box(flat);
  OnePixelConfig small{3, 8, 4, 0.5, 0.9, 1};
  const AttackResult f = one_pixel(fb, x, 0, small);
  CHECK_FALSE(f.success);
  CHECK(f.adversarial == x);
  CHECK(f.queries == 1 + 8 * 5);
}

TEST_CASE("pixel perturbation changes at most p locations") {
  KeyedStream s(SecretKey::from_seed(6));
  ImageTensor x(3, 8, 8, 0.5);
  for (std::size_t p : {1, 3, 5}) {
    for (int t = 0; t < 20; ++t) {
      std::vector<double> cand;
      for (std::size_t i = 0; i < p; ++i) {
        cand.push_back(s.uniform(0, 7));
        cand.push_back(s.uniform(0, 7));
        for (int c = 0; c < 3; ++c) cand.push_back(s.uniform());
      }
      const ImageTensor y = apply_pixel_perturbation(x, cand, p);
      std::size_t changed = 0;
      for (std::size_t r = 0; r < 8; ++r)
        for (std::size_t c = 0; c < 8; ++c)
          changed += y.at(0, r, c) != 0.5 || y.at(1, r, c) != 0.5 || y.at(2, r, c) != 0.5;
      CHECK(changed <= p);
    }
  }
  CHECK_THROWS(apply_pixel_perturbation(x, std::vector<double>(4), 1));
}

TEST_CASE("evaluate_under_attack") {
  const double w[4] = {1, 1, 1, 1};
  const nn::Classifier m = linear_model(w, -2.0);
  std::vector<AttackResult> clean(2);
  clean[0].adversarial = image4({0.9, 0.9, 0.9, 0.9});
  clean[0].true_label = 1;
  clean[1].adversarial = image4({0.1, 0.1, 0.1, 0.9});
  clean[1].true_label = 1;
  CHECK(evaluate_under_attack(m, clean) == 0.5);
  auto always_zero = [](std::span<const ImageTensor> imgs) { return std::vector<int>(imgs.size(), 0); };
  const std::vector<ImageTensor> imgs{clean[0].adversarial};
  const std::vector<int> truth{0, 1};
  CHECK_THROWS_AS(evaluate_under_attack(always_zero, imgs, truth), std::invalid_argument);
}

TEST_CASE("adversarial set round trip") {
  std::vector<AdversarialRecord> recs;
  recs.push_back({3, true, 0.25f, ImageTensor(Tensor({1, 2, 2}, std::vector<double>{0.0, 0.5, 0.25, 1.0}))});
  recs.push_back({9, false, 0.0f, ImageTensor(1, 2, 2, 0.125)});
  std::stringstream buf;
  write_adversarial_set(buf, recs);
  CHECK(buf.str().substr(0, 4) == "KDAA");
  const auto back = read_adversarial_set(buf);
  REQUIRE(back.size() == 2);
  CHECK(back[0].index == 3);
  CHECK(back[0].success);
  CHECK(back[0].norm == 0.25f);
  CHECK(back[0].image == recs[0].image);
  CHECK_FALSE(back[1].success);
  std::stringstream cut(buf.str().substr(0, 30));
  CHECK_THROWS(read_adversarial_set(cut));
}
