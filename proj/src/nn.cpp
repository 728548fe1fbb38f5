#include "kda/nn.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace kda::nn {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

struct ConvGeom {
  std::size_t n, cin, h, w, cout, k, pad;
};

ConvGeom conv_geom(const Layer& l, const Tensor& in) {
  const auto& ws = l.params[0].shape();
  if (in.rank() != 4 || in.dim(1) != ws[1]) {
    throw ShapeError("conv2d expects N x " + std::to_string(ws[1]) + " x H x W, got " + shape_string(in.shape()));
  }
  return {in.dim(0), ws[1], in.dim(2), in.dim(3), ws[0], ws[2], ws[2] / 2};
}

// cols: (cin*k*k) x (h*w), row-major.
void im2col(const double* img, const ConvGeom& g, double* cols) {
  const auto hw = g.h * g.w;
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        double* row = cols + ((c * g.k + ky) * g.k + kx) * hw;
        const long dy = static_cast<long>(ky) - static_cast<long>(g.pad);
        const long dx = static_cast<long>(kx) - static_cast<long>(g.pad);
        for (std::size_t y = 0; y < g.h; ++y) {
          const long sy = static_cast<long>(y) + dy;
          double* dst = row + y * g.w;
          if (sy < 0 || sy >= static_cast<long>(g.h)) {
            std::fill_n(dst, g.w, 0.0);
            continue;
          }
          const double* src = img + (c * g.h + static_cast<std::size_t>(sy)) * g.w;
          for (std::size_t x = 0; x < g.w; ++x) {
            const long sx = static_cast<long>(x) + dx;
            dst[x] = (sx < 0 || sx >= static_cast<long>(g.w)) ? 0.0 : src[sx];
          }
        }
      }
    }
  }
}

void col2im(const double* cols, const ConvGeom& g, double* img) {
  const auto hw = g.h * g.w;
  std::fill_n(img, g.cin * hw, 0.0);
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const double* row = cols + ((c * g.k + ky) * g.k + kx) * hw;
        const long dy = static_cast<long>(ky) - static_cast<long>(g.pad);
        const long dx = static_cast<long>(kx) - static_cast<long>(g.pad);
        for (std::size_t y = 0; y < g.h; ++y) {
          const long sy = static_cast<long>(y) + dy;
          if (sy < 0 || sy >= static_cast<long>(g.h)) continue;
          double* dst = img + (c * g.h + static_cast<std::size_t>(sy)) * g.w;
          const double* src = row + y * g.w;
          for (std::size_t x = 0; x < g.w; ++x) {
            const long sx = static_cast<long>(x) + dx;
            if (sx >= 0 && sx < static_cast<long>(g.w)) dst[sx] += src[x];
          }
        }
      }
    }
  }
}

Tensor conv_forward(const Layer& l, const Tensor& in) {
  const ConvGeom g = conv_geom(l, in);
  const auto hw = g.h * g.w;
  const auto patch = g.cin * g.k * g.k;
  Tensor out({g.n, g.cout, g.h, g.w});
  std::vector<double> cols(patch * hw);
  ConstMatMap weight(l.params[0].data(), static_cast<long>(g.cout), static_cast<long>(patch));
  ConstVecMap bias(l.params[1].data(), static_cast<long>(g.cout));
  for (std::size_t n = 0; n < g.n; ++n) {
    im2col(in.data() + n * g.cin * hw, g, cols.data());
    ConstMatMap colm(cols.data(), static_cast<long>(patch), static_cast<long>(hw));
    MatMap o(out.data() + n * g.cout * hw, static_cast<long>(g.cout), static_cast<long>(hw));
    o.noalias() = weight * colm;
    o.colwise() += bias;
  }
  return out;
}

Tensor conv_backward(const Layer& l, const Tensor& in, const Tensor& grad_out, std::vector<Tensor>* pg) {
  const ConvGeom g = conv_geom(l, in);
  const auto hw = g.h * g.w;
  const auto patch = g.cin * g.k * g.k;
  Tensor grad_in(in.shape());
  std::vector<double> cols(patch * hw);
  std::vector<double> dcols(patch * hw);
  ConstMatMap weight(l.params[0].data(), static_cast<long>(g.cout), static_cast<long>(patch));
  for (std::size_t n = 0; n < g.n; ++n) {
    ConstMatMap go(grad_out.data() + n * g.cout * hw, static_cast<long>(g.cout), static_cast<long>(hw));
    if (pg) {
      im2col(in.data() + n * g.cin * hw, g, cols.data());
      ConstMatMap colm(cols.data(), static_cast<long>(patch), static_cast<long>(hw));
      MatMap dw((*pg)[0].data(), static_cast<long>(g.cout), static_cast<long>(patch));
      dw.noalias() += go * colm.transpose();
      VecMap db((*pg)[1].data(), static_cast<long>(g.cout));
      db += go.rowwise().sum();
    }
    MatMap dc(dcols.data(), static_cast<long>(patch), static_cast<long>(hw));
    dc.noalias() = weight.transpose() * go;
    col2im(dcols.data(), g, grad_in.data() + n * g.cin * hw);
  }
  return grad_in;
}

void check_dense_input(const Layer& l, const Tensor& in) {
  if (in.rank() != 2 || in.dim(1) != l.params[0].dim(1)) {
    throw ShapeError("dense expects N x " + std::to_string(l.params[0].dim(1)) + ", got " + shape_string(in.shape()));
  }
}

Tensor dense_forward(const Layer& l, const Tensor& in) {
  check_dense_input(l, in);
  const auto n = static_cast<long>(in.dim(0));
  const auto fin = static_cast<long>(l.params[0].dim(1));
  const auto fout = static_cast<long>(l.params[0].dim(0));
  Tensor out({in.dim(0), l.params[0].dim(0)});
  ConstMatMap x(in.data(), n, fin);
  ConstMatMap w(l.params[0].data(), fout, fin);
  ConstVecMap b(l.params[1].data(), fout);
  MatMap o(out.data(), n, fout);
  o.noalias() = x * w.transpose();
  o.rowwise() += b.transpose();
  return out;
}

Tensor dense_backward(const Layer& l, const Tensor& in, const Tensor& grad_out, std::vector<Tensor>* pg) {
  const auto n = static_cast<long>(in.dim(0));
  const auto fin = static_cast<long>(l.params[0].dim(1));
  const auto fout = static_cast<long>(l.params[0].dim(0));
  ConstMatMap x(in.data(), n, fin);
  ConstMatMap w(l.params[0].data(), fout, fin);
  ConstMatMap go(grad_out.data(), n, fout);
  if (pg) {
    MatMap dw((*pg)[0].data(), fout, fin);
    dw.noalias() += go.transpose() * x;
    VecMap db((*pg)[1].data(), fout);
    db += go.colwise().sum().transpose();
  }
  Tensor grad_in(in.shape());
  MatMap gi(grad_in.data(), n, fin);
  gi.noalias() = go * w;
  return grad_in;
}

Tensor maxpool_forward(const Tensor& in) {
  if (in.rank() != 4) throw ShapeError("maxpool2 expects N x C x H x W");
  const auto n = in.dim(0), c = in.dim(1), h = in.dim(2), w = in.dim(3);
  const auto oh = h / 2, ow = w / 2;
  Tensor out({n, c, oh, ow});
  for (std::size_t p = 0; p < n * c; ++p) {
    const double* src = in.data() + p * h * w;
    double* dst = out.data() + p * oh * ow;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        const double* s = src + 2 * y * w + 2 * x;
        dst[y * ow + x] = std::max(std::max(s[0], s[1]), std::max(s[w], s[w + 1]));
      }
    }
  }
  return out;
}

Tensor maxpool_backward(const Tensor& in, const Tensor& grad_out) {
  const auto n = in.dim(0), c = in.dim(1), h = in.dim(2), w = in.dim(3);
  const auto oh = h / 2, ow = w / 2;
  Tensor grad_in(in.shape());
  for (std::size_t p = 0; p < n * c; ++p) {
    const double* src = in.data() + p * h * w;
    const double* go = grad_out.data() + p * oh * ow;
    double* gi = grad_in.data() + p * h * w;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        const std::size_t base = 2 * y * w + 2 * x;
        const std::size_t cand[4] = {base, base + 1, base + w, base + w + 1};
        std::size_t best = cand[0];
        for (auto idx : cand) {
          if (src[idx] > src[best]) best = idx;
        }
        gi[best] += go[y * ow + x];
      }
    }
  }
  return grad_in;
}

Tensor softmax_backward(const Tensor& out, const Tensor& grad_out) {
  const auto n = out.dim(0), k = out.dim(1);
  Tensor grad_in(out.shape());
  for (std::size_t r = 0; r < n; ++r) {
    const double* p = out.data() + r * k;
    const double* g = grad_out.data() + r * k;
    double dot = 0.0;
    for (std::size_t i = 0; i < k; ++i) dot += p[i] * g[i];
    for (std::size_t i = 0; i < k; ++i) grad_in[r * k + i] = p[i] * (g[i] - dot);
  }
  return grad_in;
}

}  // namespace

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::kConv2d: return "conv2d";
    case LayerKind::kDense: return "dense";
    case LayerKind::kRelu: return "relu";
    case LayerKind::kMaxPool2: return "maxpool2x2";
    case LayerKind::kFlatten: return "flatten";
    case LayerKind::kSoftmax: return "softmax";
  }
  return "unknown";
}

Layer Layer::conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel) {
  if (kernel % 2 == 0) throw std::invalid_argument("conv2d kernel must be odd for same padding");
  return {LayerKind::kConv2d, {Tensor({out_channels, in_channels, kernel, kernel}), Tensor({out_channels})}};
}

Layer Layer::dense(std::size_t in_features, std::size_t out_features) {
  return {LayerKind::kDense, {Tensor({out_features, in_features}), Tensor({out_features})}};
}

Tensor::Shape Layer::output_shape(const Tensor::Shape& in) const {
  switch (kind) {
    case LayerKind::kConv2d:
      if (in.size() != 3 || in[0] != params[0].dim(1)) throw ShapeError("conv2d input mismatch " + shape_string(in));
      return {params[0].dim(0), in[1], in[2]};
    case LayerKind::kDense:
      if (in.size() != 1 || in[0] != params[0].dim(1)) throw ShapeError("dense input mismatch " + shape_string(in));
      return {params[0].dim(0)};
    case LayerKind::kMaxPool2:
      if (in.size() != 3) throw ShapeError("maxpool2 input mismatch " + shape_string(in));
      return {in[0], in[1] / 2, in[2] / 2};
    case LayerKind::kFlatten:
      return {element_count(in)};
    case LayerKind::kRelu:
    case LayerKind::kSoftmax:
      return in;
  }
  throw std::logic_error("bad layer kind");
}

Tensor Layer::forward(const Tensor& in) const {
  switch (kind) {
    case LayerKind::kConv2d: return conv_forward(*this, in);
    case LayerKind::kDense: return dense_forward(*this, in);
    case LayerKind::kRelu: {
      Tensor out = in;
      for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
      return out;
    }
    case LayerKind::kMaxPool2: return maxpool_forward(in);
    case LayerKind::kFlatten: return in.reshaped({in.dim(0), in.size() / in.dim(0)});
    case LayerKind::kSoftmax: return nn::softmax(in);
  }
  throw std::logic_error("bad layer kind");
}

Tensor Layer::backward(const Tensor& in, const Tensor& out, const Tensor& grad_out,
                       std::vector<Tensor>* param_grads) const {
  switch (kind) {
    case LayerKind::kConv2d: return conv_backward(*this, in, grad_out, param_grads);
    case LayerKind::kDense: return dense_backward(*this, in, grad_out, param_grads);
    case LayerKind::kRelu: {
      Tensor g = grad_out;
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (in[i] <= 0.0) g[i] = 0.0;
      }
      return g;
    }
    case LayerKind::kMaxPool2: return maxpool_backward(in, grad_out);
    case LayerKind::kFlatten: return grad_out.reshaped(in.shape());
    case LayerKind::kSoftmax: return softmax_backward(out, grad_out);
  }
  throw std::logic_error("bad layer kind");
}

Classifier::Classifier(Tensor::Shape input_shape, std::vector<Layer> layers)
    : input_shape_(std::move(input_shape)), layers_(std::move(layers)) {
  if (layers_.empty()) throw std::invalid_argument("classifier needs at least one layer");
  Tensor::Shape s = input_shape_;
  for (const auto& l : layers_) s = l.output_shape(s);
  if (s.size() != 1) throw ShapeError("classifier output must be a flat vector, got " + shape_string(s));
  class_count_ = s[0];
}

std::size_t Classifier::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers_) {
    for (const auto& p : l.params) n += p.size();
  }
  return n;
}

Tensor Classifier::batched(const Tensor& batch) const {
  if (batch.shape() == input_shape_) {
    Tensor::Shape s{1};
    s.insert(s.end(), input_shape_.begin(), input_shape_.end());
    return batch.reshaped(std::move(s));
  }
  if (batch.rank() != input_shape_.size() + 1 ||
      !std::equal(input_shape_.begin(), input_shape_.end(), batch.shape().begin() + 1)) {
    throw ShapeError("batch shape " + shape_string(batch.shape()) + " does not match model input " +
                     shape_string(input_shape_));
  }
  return batch;
}

Tensor Classifier::forward(const Tensor& batch) const {
  Tensor x = batched(batch);
  for (const auto& l : layers_) x = l.forward(x);
  return x;
}

Trace Classifier::forward_trace(const Tensor& batch) const {
  Trace t;
  t.acts.reserve(layers_.size() + 1);
  t.acts.push_back(batched(batch));
  for (const auto& l : layers_) t.acts.push_back(l.forward(t.acts.back()));
  return t;
}

Tensor Classifier::backward(const Trace& trace, const Tensor& grad_out, std::vector<Tensor>* param_grads) const {
  if (grad_out.shape() != trace.output().shape()) throw ShapeError("gradient shape does not match output");
  Tensor g = grad_out;
  std::size_t offset = 0;
  if (param_grads) {
    for (const auto& l : layers_) offset += l.params.size();
  }
  for (std::size_t li = layers_.size(); li-- > 0;) {
    const Layer& l = layers_[li];
    std::vector<Tensor>* lg = nullptr;
    std::vector<Tensor> local;
    if (param_grads && !l.params.empty()) {
      offset -= l.params.size();
      local.assign(std::make_move_iterator(param_grads->begin() + static_cast<long>(offset)),
                   std::make_move_iterator(param_grads->begin() + static_cast<long>(offset + l.params.size())));
      lg = &local;
    }
    g = l.backward(trace.acts[li], trace.acts[li + 1], g, lg);
    if (lg) {
      std::move(local.begin(), local.end(), param_grads->begin() + static_cast<long>(offset));
    }
  }
  return g;
}

std::vector<Tensor> Classifier::zero_gradients() const {
  std::vector<Tensor> g;
  for (const auto& l : layers_) {
    for (const auto& p : l.params) g.emplace_back(p.shape());
  }
  return g;
}

std::vector<Tensor*> Classifier::parameters() {
  std::vector<Tensor*> ps;
  for (auto& l : layers_) {
    for (auto& p : l.params) ps.push_back(&p);
  }
  return ps;
}

void he_uniform_init(Classifier& model, const SecretKey& init_key) {
  KeyedStream stream(init_key.derive("he-uniform"));
  for (auto& l : model.layers()) {
    if (l.params.empty()) continue;
    Tensor& w = l.params[0];
    const double fan_in = static_cast<double>(w.size() / w.dim(0));
    const double limit = std::sqrt(6.0 / fan_in);
    for (double& v : w.values()) v = stream.uniform(-limit, limit);
    for (double& v : l.params[1].values()) v = 0.0;
  }
}

Classifier make_reference_cnn(std::size_t channels, std::size_t height, std::size_t width, std::size_t classes,
                              const SecretKey& init_key) {
  if (height % 4 || width % 4) throw ShapeError("reference CNN needs sides divisible by 4");
  std::vector<Layer> layers{
      Layer::conv2d(channels, 16, 3), Layer::relu(),  Layer::maxpool2(),
      Layer::conv2d(16, 32, 3),       Layer::relu(),  Layer::maxpool2(),
      Layer::flatten(),               Layer::dense(32 * (height / 4) * (width / 4), 128),
      Layer::relu(),                  Layer::dense(128, classes)};
  Classifier model({channels, height, width}, std::move(layers));
  he_uniform_init(model, init_key);
  return model;
}

Tensor softmax(const Tensor& logits) {
  if (logits.rank() != 2) throw ShapeError("softmax expects N x K");
  const auto n = logits.dim(0), k = logits.dim(1);
  Tensor out(logits.shape());
  for (std::size_t r = 0; r < n; ++r) {
    const double* z = logits.data() + r * k;
    const double m = *std::max_element(z, z + k);
    double sum = 0.0;
    for (std::size_t i = 0; i < k; ++i) sum += (out[r * k + i] = std::exp(z[i] - m));
    for (std::size_t i = 0; i < k; ++i) out[r * k + i] /= sum;
  }
  return out;
}

namespace {

void check_one_hot(const Tensor& one_hot, std::size_t n, std::size_t k) {
  if (one_hot.rank() != 2 || one_hot.dim(0) != n || one_hot.dim(1) != k) {
    throw ShapeError("labels must be " + std::to_string(n) + " x " + std::to_string(k) + " one-hot");
  }
  for (std::size_t r = 0; r < n; ++r) {
    int ones = 0;
    for (std::size_t i = 0; i < k; ++i) {
      const double v = one_hot[r * k + i];
      if (v == 1.0) {
        ++ones;
      } else if (v != 0.0) {
        throw std::invalid_argument("labels are not one-hot");
      }
    }
    if (ones != 1) throw std::invalid_argument("labels are not one-hot");
  }
}

// Mean cross-entropy of logits; writes dL/dlogits when grad is non-null.
double cross_entropy(const Tensor& logits, const Tensor& one_hot, Tensor* grad) {
  const auto n = logits.dim(0), k = logits.dim(1);
  check_one_hot(one_hot, n, k);
  const Tensor p = softmax(logits);
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const double* z = logits.data() + r * k;
    const double m = *std::max_element(z, z + k);
    double lse = 0.0;
    for (std::size_t i = 0; i < k; ++i) lse += std::exp(z[i] - m);
    lse = m + std::log(lse);
    for (std::size_t i = 0; i < k; ++i) {
      if (one_hot[r * k + i] == 1.0) loss += lse - z[i];
    }
  }
  if (grad) {
    *grad = Tensor(logits.shape());
    for (std::size_t i = 0; i < p.size(); ++i) (*grad)[i] = (p[i] - one_hot[i]) / static_cast<double>(n);
  }
  return loss / static_cast<double>(n);
}

}  // namespace

LossAndGrad loss_and_grad(const Classifier& model, const Tensor& batch, const Tensor& one_hot) {
  const Trace trace = model.forward_trace(batch);
  Tensor dlogits;
  LossAndGrad out;
  out.loss = cross_entropy(trace.output(), one_hot, &dlogits);
  out.grads = model.zero_gradients();
  model.backward(trace, dlogits, &out.grads);
  return out;
}

double mean_cross_entropy(const Classifier& model, const Tensor& batch, const Tensor& one_hot) {
  return cross_entropy(model.forward(batch), one_hot, nullptr);
}

Tensor one_hot(std::span<const int> labels, std::size_t classes) {
  Tensor out({labels.size(), classes});
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= classes) {
      throw std::invalid_argument("label " + std::to_string(labels[r]) + " out of range");
    }
    out[r * classes + static_cast<std::size_t>(labels[r])] = 1.0;
  }
  return out;
}

Tensor input_gradient(const Classifier& model, const Tensor& x, const LogitObjective& objective) {
  const Trace trace = model.forward_trace(x);
  Tensor dlogits(trace.output().shape());
  objective(trace.output().values(), dlogits.values());
  Tensor g = model.backward(trace, dlogits, nullptr);
  return g.reshaped(x.shape());
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw std::invalid_argument("momentum must be in [0,1)");
  if (weight_decay < 0.0) throw std::invalid_argument("weight_decay must be non-negative");
}

TrainResult train(Classifier model, const Tensor& inputs, std::span<const int> labels, const TrainConfig& cfg) {
  cfg.validate();
  if (inputs.empty() || labels.empty()) throw std::invalid_argument("cannot train on an empty dataset");
  const std::size_t n = inputs.dim(0);
  if (labels.size() != n) throw std::invalid_argument("inputs and labels differ in length");
  const std::size_t per = inputs.size() / n;
  const std::size_t k = model.class_count();
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= k) throw std::invalid_argument("label out of range");
  }

  TrainResult result;
  std::vector<Tensor> velocity = model.zero_gradients();
  const SecretKey shuffle_key = SecretKey::from_seed(cfg.seed).derive("shuffle");
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const std::uint64_t idx = epoch;
    KeyedStream stream(shuffle_key.derive("epoch", std::span(&idx, 1)));
    const auto order = keyed_permutation(stream, n);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t m = std::min(cfg.batch_size, n - start);
      Tensor::Shape bs = inputs.shape();
      bs[0] = m;
      Tensor batch(bs);
      std::vector<int> by(m);
      for (std::size_t b = 0; b < m; ++b) {
        const std::size_t src = order[start + b];
        std::copy_n(inputs.data() + src * per, per, batch.data() + b * per);
        by[b] = labels[src];
      }
      auto lg = loss_and_grad(model, batch, one_hot(by, k));
      loss_sum += lg.loss * static_cast<double>(m);
      auto params = model.parameters();
      for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor& w = *params[p];
        Tensor& v = velocity[p];
        const Tensor& g = lg.grads[p];
        const double wd = w.rank() > 1 ? cfg.weight_decay : 0.0;
        for (std::size_t i = 0; i < w.size(); ++i) {
          v[i] = cfg.momentum * v[i] - cfg.learning_rate * (g[i] + wd * w[i]);
          w[i] += v[i];
        }
      }
    }
    result.loss_history.push_back(loss_sum / static_cast<double>(n));
  }
  result.model = std::move(model);
  return result;
}

std::vector<int> predict_labels(const Classifier& model, const Tensor& inputs, std::size_t chunk) {
  const std::size_t n = inputs.dim(0);
  const std::size_t per = inputs.size() / std::max<std::size_t>(n, 1);
  std::vector<int> out;
  out.reserve(n);
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t m = std::min(chunk, n - start);
    Tensor::Shape bs = inputs.shape();
    bs[0] = m;
    Tensor batch(bs, std::vector<double>(inputs.data() + start * per, inputs.data() + (start + m) * per));
    const Tensor logits = model.forward(batch);
    const std::size_t k = logits.dim(1);
    for (std::size_t r = 0; r < m; ++r) {
      const double* z = logits.data() + r * k;
      out.push_back(static_cast<int>(std::max_element(z, z + k) - z));
    }
  }
  return out;
}

double accuracy(const Classifier& model, const Tensor& inputs, std::span<const int> labels) {
  const auto pred = predict_labels(model, inputs);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == labels[i];
  return pred.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(pred.size());
}

namespace {

constexpr char kMagic[4] = {'K', 'D', 'A', 'M'};
constexpr std::uint16_t kVersion = 1;

template <typename T>
void put(std::ostream& out, T v) {
  static_assert(std::is_integral_v<T> || std::is_same_v<T, float>);
  unsigned char buf[sizeof(T)];
  if constexpr (std::is_same_v<T, float>) {
    const auto bits = std::bit_cast<std::uint32_t>(v);
    for (std::size_t i = 0; i < 4; ++i) buf[i] = static_cast<unsigned char>(bits >> (8 * i));
  } else {
    using U = std::make_unsigned_t<T>;
    const auto u = static_cast<U>(v);
    for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>(u >> (8 * i));
  }
  out.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  unsigned char buf[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(buf), sizeof(T))) throw std::runtime_error("truncated checkpoint");
  if constexpr (std::is_same_v<T, float>) {
    std::uint32_t bits = 0;
    for (std::size_t i = 0; i < 4; ++i) bits |= std::uint32_t{buf[i]} << (8 * i);
    return std::bit_cast<float>(bits);
  } else {
    std::make_unsigned_t<T> u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) u |= static_cast<std::make_unsigned_t<T>>(buf[i]) << (8 * i);
    return static_cast<T>(u);
  }
}

}  // namespace

void save_checkpoint(const Classifier& model, std::ostream& out) {
  out.write(kMagic, 4);
  put<std::uint16_t>(out, kVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(model.input_shape().size()));
  for (auto d : model.input_shape()) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(model.layers().size()));
  for (const auto& l : model.layers()) {
    put<std::uint8_t>(out, static_cast<std::uint8_t>(l.kind));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(l.params.size()));
    for (const auto& p : l.params) {
      put<std::uint32_t>(out, static_cast<std::uint32_t>(p.rank()));
      for (auto d : p.shape()) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    }
  }
  for (const auto& l : model.layers()) {
    for (const auto& p : l.params) {
      for (double v : p.values()) put<float>(out, static_cast<float>(v));
    }
  }
  if (!out) throw std::runtime_error("failed writing checkpoint");
}

void save_checkpoint(const Classifier& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  save_checkpoint(model, out);
}

Classifier load_checkpoint(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw std::runtime_error("not a KDAM checkpoint");
  const auto version = get<std::uint16_t>(in);
  if (version != kVersion) throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  const auto rank = get<std::uint32_t>(in);
  if (rank == 0 || rank > 8) throw std::runtime_error("corrupt checkpoint input rank");
  Tensor::Shape input(rank);
  for (auto& d : input) d = get<std::uint32_t>(in);
  const auto nlayers = get<std::uint32_t>(in);
  if (nlayers > 4096) throw std::runtime_error("corrupt checkpoint layer count");
  std::vector<Layer> layers(nlayers);
  for (auto& l : layers) {
    const auto kind = get<std::uint8_t>(in);
    if (kind < 1 || kind > 6) throw std::runtime_error("unknown layer kind in checkpoint");
    l.kind = static_cast<LayerKind>(kind);
    const auto np = get<std::uint32_t>(in);
    const bool parametric = l.kind == LayerKind::kConv2d || l.kind == LayerKind::kDense;
    if (np != (parametric ? 2u : 0u)) throw std::runtime_error("unexpected parameter count in checkpoint");
    for (std::uint32_t p = 0; p < np; ++p) {
      const auto prank = get<std::uint32_t>(in);
      if (prank == 0 || prank > 4) throw std::runtime_error("corrupt parameter rank");
      Tensor::Shape s(prank);
      for (auto& d : s) d = get<std::uint32_t>(in);
      l.params.emplace_back(s);
    }
  }
  for (auto& l : layers) {
    for (auto& p : l.params) {
      for (double& v : p.values()) v = static_cast<double>(get<float>(in));
    }
  }
  return Classifier(std::move(input), std::move(layers));
}

Classifier load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  return load_checkpoint(in);
}

void quantize_to_f32(Classifier& model) {
  for (auto* p : model.parameters()) {
    for (double& v : p->values()) v = static_cast<double>(static_cast<float>(v));
  }
}

}  // namespace kda::nn
