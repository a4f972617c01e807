#pragma once

// Minimal layer library: CHW tensors as flat double arrays, parameters kept
// outside the layers in a single flat vector so optimisers and checkpoints
// only ever see one contiguous array.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cfkd/error.hpp"

namespace cfkd::nn {

struct Dims {
  int c = 0;
  int h = 1;
  int w = 1;
  std::size_t size() const { return static_cast<std::size_t>(c) * h * w; }
  bool operator==(const Dims&) const = default;
};

using Rng = std::mt19937_64;

class Layer {
 public:
  virtual ~Layer() = default;
  virtual Dims output_dims(Dims in) const = 0;
  virtual std::size_t num_params(Dims /*in*/) const { return 0; }
  virtual void init_params(Dims /*in*/, std::span<double> /*p*/,
                           Rng& /*rng*/) const {}
  virtual void forward(Dims in, std::span<const double> p, const double* x,
                       double* y) const = 0;
  // gx may be null (input gradient not wanted); gp may be empty (parameter
  // gradient not wanted). Parameter gradients are accumulated, gx is
  // overwritten.
  virtual void backward(Dims in, std::span<const double> p, const double* x,
                        const double* y, const double* gy, double* gx,
                        std::span<double> gp) const = 0;
  virtual nlohmann::json describe() const = 0;
};

// Square kernel, stride 1, zero "same" padding.
class Conv2d final : public Layer {
 public:
  enum class Init { he, zero };

  Conv2d(int in_channels, int out_channels, int kernel = 3,
         Init init = Init::he)
      : in_(in_channels), out_(out_channels), k_(kernel), init_(init) {
    if (kernel % 2 == 0) throw ConfigError("conv kernel must be odd");
  }

  Dims output_dims(Dims in) const override {
    check(in);
    return {out_, in.h, in.w};
  }
  std::size_t num_params(Dims) const override {
    return static_cast<std::size_t>(out_) * in_ * k_ * k_ + out_;
  }
  void init_params(Dims, std::span<double> p, Rng& rng) const override {
    std::fill(p.begin(), p.end(), 0.0);
    if (init_ == Init::zero) return;
    std::normal_distribution<double> n(0.0,
                                       std::sqrt(2.0 / (in_ * k_ * k_)));
    const std::size_t nw = static_cast<std::size_t>(out_) * in_ * k_ * k_;
    for (std::size_t i = 0; i < nw; ++i) p[i] = n(rng);
  }

  void forward(Dims in, std::span<const double> p, const double* x,
               double* y) const override {
    const int H = in.h, W = in.w, pad = k_ / 2;
    const std::size_t hw = static_cast<std::size_t>(H) * W;
    const double* wts = p.data();
    const double* bias = wts + static_cast<std::size_t>(out_) * in_ * k_ * k_;
    for (int o = 0; o < out_; ++o) {
      double* yo = y + o * hw;
      std::fill(yo, yo + hw, bias[o]);
      for (int i = 0; i < in_; ++i) {
        const double* xi = x + i * hw;
        for (int ky = 0; ky < k_; ++ky)
          for (int kx = 0; kx < k_; ++kx) {
            const double wv = wts[((o * in_ + i) * k_ + ky) * k_ + kx];
            const int dy = ky - pad, dx = kx - pad;
            const int y0 = std::max(0, -dy), y1 = std::min(H, H - dy);
            const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
            for (int r = y0; r < y1; ++r) {
              double* yrow = yo + r * W;
              const double* xrow = xi + (r + dy) * W + dx;
              for (int c = x0; c < x1; ++c) yrow[c] += wv * xrow[c];
            }
          }
      }
    }
  }

  void backward(Dims in, std::span<const double> p, const double* x,
                const double*, const double* gy, double* gx,
                std::span<double> gp) const override {
    const int H = in.h, W = in.w, pad = k_ / 2;
    const std::size_t hw = static_cast<std::size_t>(H) * W;
    const std::size_t nw = static_cast<std::size_t>(out_) * in_ * k_ * k_;
    const double* wts = p.data();
    const bool want_p = !gp.empty();
    if (gx) std::fill(gx, gx + in_ * hw, 0.0);
    for (int o = 0; o < out_; ++o) {
      const double* go = gy + o * hw;
      if (want_p) {
        double s = 0.0;
        for (std::size_t j = 0; j < hw; ++j) s += go[j];
        gp[nw + o] += s;
      }
      for (int i = 0; i < in_; ++i) {
        const double* xi = x + i * hw;
        double* gxi = gx ? gx + i * hw : nullptr;
        for (int ky = 0; ky < k_; ++ky)
          for (int kx = 0; kx < k_; ++kx) {
            const std::size_t widx = ((o * in_ + i) * k_ + ky) * k_ + kx;
            const double wv = wts[widx];
            const int dy = ky - pad, dx = kx - pad;
            const int y0 = std::max(0, -dy), y1 = std::min(H, H - dy);
            const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
            double acc = 0.0;
            for (int r = y0; r < y1; ++r) {
              const double* grow = go + r * W;
              const double* xrow = xi + (r + dy) * W + dx;
              if (want_p)
                for (int c = x0; c < x1; ++c) acc += grow[c] * xrow[c];
              if (gxi) {
                double* gxrow = gxi + (r + dy) * W + dx;
                for (int c = x0; c < x1; ++c) gxrow[c] += wv * grow[c];
              }
            }
            if (want_p) gp[widx] += acc;
          }
      }
    }
  }

  nlohmann::json describe() const override {
    return {{"type", "conv2d"},
            {"in", in_},
            {"out", out_},
            {"kernel", k_},
            {"init", init_ == Init::zero ? "zero" : "he"}};
  }

 private:
  void check(Dims in) const {
    if (in.c != in_)
      throw InputError("conv2d expects " + std::to_string(in_) +
                       " channels, got " + std::to_string(in.c));
  }
  int in_, out_, k_;
  Init init_;
};

// Fully connected layer on the flattened input; output dims {out,1,1}.
class Linear final : public Layer {
 public:
  enum class Init { he, xavier, zero };

  Linear(int in_features, int out_features, Init init = Init::xavier)
      : in_(in_features), out_(out_features), init_(init) {}

  Dims output_dims(Dims in) const override {
    if (static_cast<int>(in.size()) != in_)
      throw InputError("linear expects " + std::to_string(in_) +
                       " inputs, got " + std::to_string(in.size()));
    return {out_, 1, 1};
  }
  std::size_t num_params(Dims) const override {
    return static_cast<std::size_t>(out_) * in_ + out_;
  }
  void init_params(Dims, std::span<double> p, Rng& rng) const override {
    std::fill(p.begin(), p.end(), 0.0);
    if (init_ == Init::zero) return;
    const double sd = init_ == Init::he ? std::sqrt(2.0 / in_)
                                        : std::sqrt(1.0 / in_);
    std::normal_distribution<double> n(0.0, sd);
    for (std::size_t i = 0; i < static_cast<std::size_t>(out_) * in_; ++i)
      p[i] = n(rng);
  }
  void forward(Dims, std::span<const double> p, const double* x,
               double* y) const override {
    const double* b = p.data() + static_cast<std::size_t>(out_) * in_;
    for (int o = 0; o < out_; ++o) {
      const double* row = p.data() + static_cast<std::size_t>(o) * in_;
      double s = b[o];
      for (int i = 0; i < in_; ++i) s += row[i] * x[i];
      y[o] = s;
    }
  }
  void backward(Dims, std::span<const double> p, const double* x,
                const double*, const double* gy, double* gx,
                std::span<double> gp) const override {
    if (gx) std::fill(gx, gx + in_, 0.0);
    const std::size_t nw = static_cast<std::size_t>(out_) * in_;
    for (int o = 0; o < out_; ++o) {
      const double g = gy[o];
      const double* row = p.data() + static_cast<std::size_t>(o) * in_;
      if (!gp.empty()) {
        double* grow = gp.data() + static_cast<std::size_t>(o) * in_;
        for (int i = 0; i < in_; ++i) grow[i] += g * x[i];
        gp[nw + o] += g;
      }
      if (gx)
        for (int i = 0; i < in_; ++i) gx[i] += g * row[i];
    }
  }
  nlohmann::json describe() const override {
    const char* init = init_ == Init::he       ? "he"
                       : init_ == Init::zero ? "zero"
                                             : "xavier";
    return {{"type", "linear"}, {"in", in_}, {"out", out_}, {"init", init}};
  }

 private:
  int in_, out_;
  Init init_;
};

class ReLU final : public Layer {
 public:
  Dims output_dims(Dims in) const override { return in; }
  void forward(Dims in, std::span<const double>, const double* x,
               double* y) const override {
    for (std::size_t i = 0; i < in.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
  }
  void backward(Dims in, std::span<const double>, const double* x,
                const double*, const double* gy, double* gx,
                std::span<double>) const override {
    if (!gx) return;
    for (std::size_t i = 0; i < in.size(); ++i)
      gx[i] = x[i] > 0.0 ? gy[i] : 0.0;
  }
  nlohmann::json describe() const override { return {{"type", "relu"}}; }
};

// 2x2 average pooling, stride 2. Odd trailing rows/columns are dropped.
class AvgPool2 final : public Layer {
 public:
  Dims output_dims(Dims in) const override {
    if (in.h < 2 || in.w < 2) throw InputError("avgpool2 needs h,w >= 2");
    return {in.c, in.h / 2, in.w / 2};
  }
  void forward(Dims in, std::span<const double>, const double* x,
               double* y) const override {
    const Dims o = output_dims(in);
    for (int c = 0; c < in.c; ++c)
      for (int r = 0; r < o.h; ++r)
        for (int q = 0; q < o.w; ++q) {
          const double* a = x + (static_cast<std::size_t>(c) * in.h + 2 * r) *
                                    in.w + 2 * q;
          y[(static_cast<std::size_t>(c) * o.h + r) * o.w + q] =
              0.25 * (a[0] + a[1] + a[in.w] + a[in.w + 1]);
        }
  }
  void backward(Dims in, std::span<const double>, const double*,
                const double*, const double* gy, double* gx,
                std::span<double>) const override {
    if (!gx) return;
    const Dims o = output_dims(in);
    std::fill(gx, gx + in.size(), 0.0);
    for (int c = 0; c < in.c; ++c)
      for (int r = 0; r < o.h; ++r)
        for (int q = 0; q < o.w; ++q) {
          const double g =
              0.25 * gy[(static_cast<std::size_t>(c) * o.h + r) * o.w + q];
          double* a = gx + (static_cast<std::size_t>(c) * in.h + 2 * r) *
                               in.w + 2 * q;
          a[0] += g;
          a[1] += g;
          a[in.w] += g;
          a[in.w + 1] += g;
        }
  }
  nlohmann::json describe() const override { return {{"type", "avgpool2"}}; }
};

inline std::shared_ptr<const Layer> layer_from_json(const nlohmann::json& j) {
  const std::string t = j.at("type");
  if (t == "conv2d") {
    const auto init = j.value("init", std::string("he")) == "zero"
                          ? Conv2d::Init::zero
                          : Conv2d::Init::he;
    return std::make_shared<Conv2d>(j.at("in"), j.at("out"), j.at("kernel"),
                                    init);
  }
  if (t == "linear") {
    const std::string s = j.value("init", std::string("xavier"));
    const auto init = s == "he"     ? Linear::Init::he
                      : s == "zero" ? Linear::Init::zero
                                    : Linear::Init::xavier;
    return std::make_shared<Linear>(j.at("in"), j.at("out"), init);
  }
  if (t == "relu") return std::make_shared<ReLU>();
  if (t == "avgpool2") return std::make_shared<AvgPool2>();
  throw ConfigError("unknown layer type '" + t + "'");
}

// A feed-forward stack. Immutable once built; parameters are passed in.
class Network {
 public:
  // Activations of one forward pass, acts[0] is the input.
  struct Trace {
    std::vector<std::vector<double>> acts;
    std::span<const double> output() const { return acts.back(); }
  };

  Network() = default;
  Network(Dims input, std::vector<std::shared_ptr<const Layer>> layers)
      : input_(input), layers_(std::move(layers)) {
    Dims d = input_;
    std::size_t off = 0;
    for (const auto& l : layers_) {
      dims_.push_back(d);
      offsets_.push_back(off);
      off += l->num_params(d);
      d = l->output_dims(d);
    }
    dims_.push_back(d);
    offsets_.push_back(off);
    num_params_ = off;
  }

  Dims input_dims() const { return input_; }
  Dims output_dims() const { return dims_.back(); }
  std::size_t num_params() const { return num_params_; }
  std::size_t num_layers() const { return layers_.size(); }

  std::vector<double> init_params(std::uint64_t seed) const {
    std::vector<double> p(num_params_, 0.0);
    Rng rng(seed);
    for (std::size_t i = 0; i < layers_.size(); ++i)
      layers_[i]->init_params(dims_[i], slice(p, i), rng);
    return p;
  }

  void forward(std::span<const double> params, std::span<const double> x,
               Trace& t) const {
    if (x.size() != input_.size())
      throw InputError("network input has " + std::to_string(x.size()) +
                       " values, expected " + std::to_string(input_.size()));
    t.acts.resize(layers_.size() + 1);
    t.acts[0].assign(x.begin(), x.end());
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      t.acts[i + 1].resize(dims_[i + 1].size());
      layers_[i]->forward(dims_[i], slice(params, i), t.acts[i].data(),
                          t.acts[i + 1].data());
    }
  }

  std::vector<double> forward(std::span<const double> params,
                              std::span<const double> x) const {
    Trace t;
    forward(params, x, t);
    return std::move(t.acts.back());
  }

  // Backpropagate gy (gradient w.r.t. the output). Parameter gradients are
  // accumulated into gparams when non-empty; gx receives the input gradient
  // when non-empty.
  void backward(std::span<const double> params, const Trace& t,
                std::span<const double> gy, std::span<double> gparams,
                std::span<double> gx) const {
    std::vector<double> g(gy.begin(), gy.end());
    std::vector<double> gprev;
    for (std::size_t i = layers_.size(); i-- > 0;) {
      const bool need_input = i > 0 || !gx.empty();
      gprev.resize(need_input ? dims_[i].size() : 0);
      layers_[i]->backward(
          dims_[i], slice(params, i), t.acts[i].data(), t.acts[i + 1].data(),
          g.data(), need_input ? gprev.data() : nullptr,
          gparams.empty() ? std::span<double>{} : slice(gparams, i));
      std::swap(g, gprev);
    }
    if (!gx.empty()) std::copy(g.begin(), g.end(), gx.begin());
  }

  nlohmann::json describe() const {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : layers_) layers.push_back(l->describe());
    return {{"input", {input_.c, input_.h, input_.w}}, {"layers", layers}};
  }

  static Network from_json(const nlohmann::json& j) {
    const auto& in = j.at("input");
    std::vector<std::shared_ptr<const Layer>> layers;
    for (const auto& l : j.at("layers")) layers.push_back(layer_from_json(l));
    return Network(Dims{in.at(0), in.at(1), in.at(2)}, std::move(layers));
  }

 private:
  std::span<double> slice(std::span<double> p, std::size_t i) const {
    return p.subspan(offsets_[i], offsets_[i + 1] - offsets_[i]);
  }
  std::span<const double> slice(std::span<const double> p,
                                std::size_t i) const {
    return p.subspan(offsets_[i], offsets_[i + 1] - offsets_[i]);
  }
  std::span<double> slice(std::vector<double>& p, std::size_t i) const {
    return std::span<double>(p).subspan(offsets_[i],
                                        offsets_[i + 1] - offsets_[i]);
  }

  Dims input_;
  std::vector<std::shared_ptr<const Layer>> layers_;
  std::vector<Dims> dims_;
  std::vector<std::size_t> offsets_;
  std::size_t num_params_ = 0;
};

// SGD with classical momentum.
class SgdMomentum {
 public:
  SgdMomentum(std::size_t n, double lr, double momentum,
              double weight_decay = 0.0)
      : lr_(lr), mu_(momentum), wd_(weight_decay), v_(n, 0.0) {}
  void step(std::span<double> params, std::span<const double> grad) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      v_[i] = mu_ * v_[i] + grad[i] + wd_ * params[i];
      params[i] -= lr_ * v_[i];
    }
  }

 private:
  double lr_, mu_, wd_;
  std::vector<double> v_;
};

class Adam {
 public:
  Adam(std::size_t n, double lr, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps), m_(n, 0.0), v_(n, 0.0) {}
  void step(std::span<double> params, std::span<const double> grad) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, t_);
    const double c2 = 1.0 - std::pow(b2_, t_);
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = b1_ * m_[i] + (1.0 - b1_) * grad[i];
      v_[i] = b2_ * v_[i] + (1.0 - b2_) * grad[i] * grad[i];
      params[i] -= lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
    }
  }

 private:
  double lr_, b1_, b2_, eps_;
  long t_ = 0;
  std::vector<double> m_, v_;
};

}  // namespace cfkd::nn
