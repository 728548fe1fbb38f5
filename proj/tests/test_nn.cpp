#include <doctest.h>

#include <cmath>
#include <sstream>

#include "gradcheck.hpp"
#include "kda/nn.hpp"

using namespace kda;
using namespace kda::nn;

namespace {

Classifier tiny_net(std::uint64_t seed) {
  Classifier m({1, 4, 4}, {Layer::conv2d(1, 2, 3), Layer::relu(), Layer::maxpool2(), Layer::flatten(),
                           Layer::dense(8, 5), Layer::relu(), Layer::dense(5, 3)});
  he_uniform_init(m, SecretKey::from_seed(seed));
  // Non-zero biases so the check covers them.
  KeyedStream s(SecretKey::from_seed(seed + 100));
  for (auto* p : m.parameters()) {
    if (p->rank() == 1) testing::fill_normal(*p, s, 0.1);
  }
  return m;
}

Tensor random_tensor(Tensor::Shape shape, std::uint64_t seed) {
  Tensor t(std::move(shape));
  KeyedStream s(SecretKey::from_seed(seed));
  testing::fill_normal(t, s);
  return t;
}

}  // namespace

TEST_CASE("every layer kind matches finite differences") {
  std::uint64_t seed = 0;
  for (const auto& c : testing::gradcheck_cases()) {
    CAPTURE(to_string(c.layer.kind));
    CAPTURE(shape_string(c.input));
    CHECK(testing::layer_gradcheck(c.layer, c.input, seed++) < 1e-4);
  }
}

TEST_CASE("zero dense model gives zero logits") {
  Classifier m({6}, {Layer::dense(6, 4)});
  const Tensor logits = m.forward(random_tensor({3, 6}, 1));
  for (double v : logits.values()) CHECK(v == 0.0);
}

TEST_CASE("hand-set affine model") {
  Classifier m({3}, {Layer::dense(3, 2)});
  m.layers()[0].params[0] = Tensor({2, 3}, {1, -2, 0.5, 0, 3, -1});
  m.layers()[0].params[1] = Tensor::from({0.25, -0.5});
  const Tensor z = m.forward(Tensor::from({2, 1, 4}));
  // Hand product: [2 - 2 + 2 + 0.25, 0 + 3 - 4 - 0.5]
  CHECK(z.shape() == Tensor::Shape{1, 2});
  CHECK(z[0] == doctest::Approx(2.25));
  CHECK(z[1] == doctest::Approx(-1.5));
}

TEST_CASE("softmax rows sum to one") {
  const Classifier m = tiny_net(3);
  const Tensor p = softmax(m.forward(random_tensor({5, 1, 4, 4}, 4)));
  for (std::size_t r = 0; r < 5; ++r) {
    double s = 0;
    for (std::size_t k = 0; k < 3; ++k) s += p[r * 3 + k];
    CHECK(std::abs(s - 1.0) < 1e-9);
  }
}

TEST_CASE("loss of uniform logits is ln K") {
  Classifier m({4}, {Layer::dense(4, 7)});
  const std::vector<int> labels{0, 3, 6};
  const double loss = mean_cross_entropy(m, random_tensor({3, 4}, 2), one_hot(labels, 7));
  CHECK(loss == doctest::Approx(std::log(7.0)).epsilon(1e-12));
}

TEST_CASE("loss rejects labels that are not one-hot") {
  Classifier m({4}, {Layer::dense(4, 3)});
  Tensor bad({2, 3}, {1, 0, 0, 0.5, 0.5, 0});
  CHECK_THROWS_AS(loss_and_grad(m, random_tensor({2, 4}, 1), bad), std::invalid_argument);
  Tensor two({1, 3}, {1, 1, 0});
  CHECK_THROWS_AS(loss_and_grad(m, random_tensor({1, 4}, 1), two), std::invalid_argument);
}

TEST_CASE("parameter gradients of a three-layer net match finite differences") {
  Classifier m = tiny_net(5);
  const Tensor x = random_tensor({4, 1, 4, 4}, 6);
  const std::vector<int> labels{0, 1, 2, 1};
  const Tensor y = one_hot(labels, 3);
  const LossAndGrad lg = loss_and_grad(m, x, y);
  CHECK(lg.loss >= 0.0);
  auto params = m.parameters();
  const double eps = 1e-5;
  double worst = 0.0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (std::size_t i = 0; i < params[p]->size(); ++i) {
      const double keep = (*params[p])[i];
      (*params[p])[i] = keep + eps;
      const double up = mean_cross_entropy(m, x, y);
      (*params[p])[i] = keep - eps;
      const double down = mean_cross_entropy(m, x, y);
      (*params[p])[i] = keep;
      worst = std::max(worst, testing::rel_error(lg.grads[p][i], (up - down) / (2 * eps)));
    }
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("duplicated sample contributes the same gradient") {
  const Classifier m = tiny_net(8);
  const Tensor one = random_tensor({1, 1, 4, 4}, 9);
  Tensor two({2, 1, 4, 4});
  std::copy(one.values().begin(), one.values().end(), two.values().begin());
  std::copy(one.values().begin(), one.values().end(), two.values().begin() + 16);
  const std::vector<int> l1{2}, l2{2, 2};
  const auto a = loss_and_grad(m, one, one_hot(l1, 3));
  const auto b = loss_and_grad(m, two, one_hot(l2, 3));
  CHECK(a.loss == doctest::Approx(b.loss).epsilon(1e-12));
  for (std::size_t p = 0; p < a.grads.size(); ++p) {
    for (std::size_t i = 0; i < a.grads[p].size(); ++i) {
      CHECK(a.grads[p][i] == doctest::Approx(b.grads[p][i]).epsilon(1e-10));
    }
  }
}

TEST_CASE("forward and backward leave parameters untouched") {
  const Classifier m = tiny_net(10);
  Classifier copy = m;
  const std::vector<int> labels{1};
  (void)loss_and_grad(copy, random_tensor({1, 1, 4, 4}, 11), one_hot(labels, 3));
  CHECK(copy == m);
}

TEST_CASE("input gradient") {
  SUBCASE("linear model gives the weight row") {
    Classifier m({3}, {Layer::dense(3, 2)});
    m.layers()[0].params[0] = Tensor({2, 3}, {1, 2, 3, -4, 5, -6});
    const Tensor g = input_gradient(m, Tensor::from({0.3, -0.1, 2}), [](auto, std::span<double> grad) {
      grad[1] = 1.0;
      return 0.0;
    });
    CHECK(g == Tensor::from({-4, 5, -6}));
  }
  SUBCASE("zero objective") {
    const Classifier m = tiny_net(12);
    const Tensor g = input_gradient(m, random_tensor({1, 4, 4}, 13), [](auto, auto) { return 0.0; });
    CHECK(g.max_abs() == 0.0);
  }
  SUBCASE("matches finite differences") {
    const Classifier m = tiny_net(14);
    const Tensor x = random_tensor({1, 4, 4}, 15);
    auto obj = [](std::span<const double> z, std::span<double> grad) {
      grad[0] = 2 * z[0];
      grad[2] = -1.0;
      return z[0] * z[0] - z[2];
    };
    auto value = [&](const Tensor& in) {
      const Tensor z = m.forward(in);
      std::vector<double> unused(3);
      return obj(z.values(), unused);
    };
    const Tensor g = input_gradient(m, x, obj);
    const double eps = 1e-5;
    for (std::size_t i = 0; i < x.size(); ++i) {
      Tensor xp = x, xm = x;
      xp[i] += eps;
      xm[i] -= eps;
      CHECK(testing::rel_error(g[i], (value(xp) - value(xm)) / (2 * eps)) < 1e-4);
    }
  }
}

namespace {

// Two Gaussian blobs on either side of the plane w.x = 0 with margin 0.5.
void separable_set(std::size_t n, Tensor& x, std::vector<int>& y) {
  KeyedStream s(SecretKey::from_seed(77));
  const double w[4] = {0.5, -0.5, 0.5, 0.5};
  x = Tensor({n, 4});
  y.assign(n, 0);
  for (std::size_t r = 0; r < n;) {
    double p[4], dot = 0;
    for (int k = 0; k < 4; ++k) dot += w[k] * (p[k] = s.normal());
    if (std::abs(dot) < 0.5) continue;
    std::copy(p, p + 4, x.data() + r * 4);
    y[r++] = dot > 0;
  }
}

}  // namespace

TEST_CASE("separable two-class set is learned exactly") {
  Tensor x;
  std::vector<int> y;
  separable_set(200, x, y);
  Classifier m({4}, {Layer::dense(4, 8), Layer::relu(), Layer::dense(8, 2)});
  he_uniform_init(m, SecretKey::from_seed(1));
  TrainConfig cfg;
  cfg.epochs = 50;
  cfg.batch_size = 16;
  const TrainResult r = train(m, x, y, cfg);
  CHECK(accuracy(r.model, x, y) == 1.0);
  CHECK(r.loss_history.size() == 50);
  CHECK(r.loss_history.back() < r.loss_history.front());
}

TEST_CASE("training edge cases") {
  Tensor x;
  std::vector<int> y;
  separable_set(40, x, y);
  Classifier m({4}, {Layer::dense(4, 2)});
  he_uniform_init(m, SecretKey::from_seed(2));

  TrainConfig cfg;
  cfg.epochs = 0;
  CHECK(train(m, x, y, cfg).model == m);

  cfg.epochs = 3;
  CHECK(train(m, x, y, cfg).model == train(m, x, y, cfg).model);
  TrainConfig other = cfg;
  other.seed = 2;
  CHECK_FALSE(train(m, x, y, cfg).model == train(m, x, y, other).model);

  CHECK_THROWS_AS(train(m, Tensor({0, 4}), {}, cfg), std::invalid_argument);
  cfg.momentum = 1.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("checkpoint round trip") {
  Classifier m = make_reference_cnn(3, 8, 8, 10, SecretKey::from_seed(4));
  quantize_to_f32(m);
  std::stringstream buf;
  save_checkpoint(m, buf);
  const Classifier back = load_checkpoint(buf);
  CHECK(back == m);
  CHECK(back.parameter_count() == m.parameter_count());

  std::stringstream bad("KDAX....");
  CHECK_THROWS(load_checkpoint(bad));
  std::stringstream cut(std::string(buf.str()).substr(0, 40));
  CHECK_THROWS(load_checkpoint(cut));
}

TEST_CASE("reference CNN shape") {
  const Classifier m = make_reference_cnn(3, 32, 32, 10, SecretKey::from_seed(1));
  CHECK(m.class_count() == 10);
  CHECK(m.forward(Tensor({3, 32, 32})).shape() == Tensor::Shape{1, 10});
  CHECK_THROWS_AS(m.forward(Tensor({1, 32, 32})), ShapeError);
}

TEST_CASE("cross-entropy is order invariant and non-negative") {
  const Classifier m = tiny_net(20);
  const Tensor x = random_tensor({6, 1, 4, 4}, 21);
  const std::vector<int> labels{0, 1, 2, 2, 1, 0};
  const std::size_t order[6] = {3, 0, 5, 1, 4, 2};
  Tensor xp(x.shape());
  std::vector<int> lp(6);
  for (std::size_t r = 0; r < 6; ++r) {
    std::copy_n(x.data() + order[r] * 16, 16, xp.data() + r * 16);
    lp[r] = labels[order[r]];
  }
  const double a = mean_cross_entropy(m, x, one_hot(labels, 3));
  CHECK(a > 0.0);
  CHECK(a == doctest::Approx(mean_cross_entropy(m, xp, one_hot(lp, 3))).epsilon(1e-12));

  // A model that is certain of the label has zero loss in the limit.
  Classifier sure({2}, {Layer::dense(2, 2)});
  sure.layers()[0].params[1] = Tensor::from({800, -800});
  const std::vector<int> zero{0};
  CHECK(mean_cross_entropy(sure, Tensor({1, 2}), one_hot(zero, 2)) == 0.0);
}
