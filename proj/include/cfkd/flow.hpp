#pragma once

// Affine-coupling normalizing flow g: Z -> X over images.
//
// encode: x (HWC) -> [optional logit margin transform] -> coupling_0 ... ->
// coupling_{L-1} -> z (HWC-ordered latent). decode runs the exact inverse.
// Coupling l keeps the checkerboard cells of parity (l % 2) fixed and
// transforms the rest:  z = x * exp(s(x_m)) + t(x_m),  s = scale * tanh(.)
// where the conditioner is conv3x3 -> relu -> conv3x3 with a zero-initialised
// last layer, so a fresh flow is exactly the identity.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cfkd/checkpoint.hpp"
#include "cfkd/error.hpp"
#include "cfkd/image.hpp"
#include "cfkd/labeled_dataset.hpp"
#include "cfkd/nn.hpp"

namespace cfkd {

struct FlowConfig {
  int num_coupling_layers = 4;
  int hidden_width = 16;
  int epochs = 5;
  int batch_size = 32;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  bool logit_preprocess = true;
  double logit_eps = 1e-3;

  void validate() const {
    if (num_coupling_layers < 2)
      throw ConfigError("num_coupling_layers must be >= 2",
                        "num_coupling_layers");
    if (hidden_width < 1)
      throw ConfigError("hidden_width must be >= 1", "hidden_width");
    if (epochs < 0) throw ConfigError("epochs must be >= 0", "epochs");
    if (batch_size < 1)
      throw ConfigError("batch_size must be >= 1", "batch_size");
    if (!(learning_rate > 0.0))
      throw ConfigError("learning_rate must be > 0", "learning_rate");
    if (!(logit_eps > 0.0 && logit_eps < 0.5))
      throw ConfigError("logit_eps must be in (0, 0.5)", "logit_eps");
  }

  nlohmann::json to_json() const {
    return {{"num_coupling_layers", num_coupling_layers},
            {"hidden_width", hidden_width},
            {"epochs", epochs},
            {"batch_size", batch_size},
            {"learning_rate", learning_rate},
            {"seed", seed},
            {"logit_preprocess", logit_preprocess},
            {"logit_eps", logit_eps}};
  }
  static FlowConfig from_json(const nlohmann::json& j) {
    FlowConfig c;
    c.num_coupling_layers = j.value("num_coupling_layers", c.num_coupling_layers);
    c.hidden_width = j.value("hidden_width", c.hidden_width);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.seed = j.value("seed", c.seed);
    c.logit_preprocess = j.value("logit_preprocess", c.logit_preprocess);
    c.logit_eps = j.value("logit_eps", c.logit_eps);
    return c;
  }
};

namespace detail {

// One affine coupling over a CHW tensor. Parameter block layout:
// [conditioner network params..., per-channel scale (C values)].
class AffineCoupling {
 public:
  AffineCoupling(ImageShape shape, int hidden, int parity)
      : shape_(shape), parity_(parity) {
    using namespace nn;
    const Dims in{shape.channels, shape.height, shape.width};
    net_ = Network(in, {std::make_shared<Conv2d>(shape.channels, hidden, 3),
                        std::make_shared<ReLU>(),
                        std::make_shared<Conv2d>(hidden, 2 * shape.channels, 3,
                                                 Conv2d::Init::zero)});
    const std::size_t hw = static_cast<std::size_t>(shape.height) * shape.width;
    mask_.resize(hw);
    for (int y = 0; y < shape.height; ++y)
      for (int x = 0; x < shape.width; ++x)
        mask_[y * shape.width + x] = ((y + x) % 2 == parity) ? 1.0 : 0.0;
  }

  std::size_t num_params() const { return net_.num_params() + shape_.channels; }

  void init(std::span<double> p, std::uint64_t seed) const {
    auto np = net_.init_params(seed);
    std::copy(np.begin(), np.end(), p.begin());
    std::fill(p.begin() + np.size(), p.end(), 1.0);
  }

  // Conditioner outputs for masked input; fills s (after scale*tanh), the
  // raw tanh values and t. All CHW of size D.
  void conditioner(std::span<const double> p, std::span<const double> x,
                   nn::Network::Trace& tr, std::vector<double>& s,
                   std::vector<double>& th, std::vector<double>& t) const {
    const std::size_t D = shape_.size(), hw = mask_.size();
    std::vector<double> xm(D);
    for (std::size_t c = 0, k = 0; c < static_cast<std::size_t>(shape_.channels); ++c)
      for (std::size_t j = 0; j < hw; ++j, ++k) xm[k] = x[k] * mask_[j];
    net_.forward(p.first(net_.num_params()), xm, tr);
    const auto out = tr.output();
    const double* scale = p.data() + net_.num_params();
    s.resize(D);
    th.resize(D);
    t.resize(D);
    for (std::size_t c = 0, k = 0; c < static_cast<std::size_t>(shape_.channels); ++c)
      for (std::size_t j = 0; j < hw; ++j, ++k) {
        th[k] = std::tanh(out[k]);
        s[k] = scale[c] * th[k];
        t[k] = out[D + k];
      }
  }

  // x -> z, returns log|det J|.
  double forward(std::span<const double> p, std::span<const double> x,
                 std::vector<double>& z) const {
    nn::Network::Trace tr;
    std::vector<double> s, th, t;
    conditioner(p, x, tr, s, th, t);
    const std::size_t hw = mask_.size();
    z.resize(x.size());
    double logdet = 0.0;
    for (std::size_t k = 0; k < x.size(); ++k) {
      if (mask_[k % hw] > 0.5) {
        z[k] = x[k];
      } else {
        z[k] = x[k] * std::exp(s[k]) + t[k];
        logdet += s[k];
      }
    }
    return logdet;
  }

  // z -> x.
  void inverse(std::span<const double> p, std::span<const double> z,
               std::vector<double>& x) const {
    nn::Network::Trace tr;
    std::vector<double> s, th, t;
    conditioner(p, z, tr, s, th, t);
    const std::size_t hw = mask_.size();
    x.resize(z.size());
    for (std::size_t k = 0; k < z.size(); ++k)
      x[k] = mask_[k % hw] > 0.5 ? z[k] : (z[k] - t[k]) * std::exp(-s[k]);
  }

  // Training backward of the encode direction. gz: dL/dz, glogdet: dL/d
  // logdet. Accumulates parameter gradients into gp and writes dL/dx.
  void forward_backward(std::span<const double> p, std::span<const double> x,
                        std::span<const double> gz, double glogdet,
                        std::span<double> gp, std::vector<double>& gx) const {
    nn::Network::Trace tr;
    std::vector<double> s, th, t;
    conditioner(p, x, tr, s, th, t);
    const std::size_t D = x.size(), hw = mask_.size();
    const double* scale = p.data() + net_.num_params();
    double* gscale = gp.data() + net_.num_params();
    std::vector<double> gout(2 * D, 0.0);
    gx.assign(D, 0.0);
    for (std::size_t k = 0; k < D; ++k) {
      if (mask_[k % hw] > 0.5) {
        gx[k] = gz[k];
        continue;
      }
      const double es = std::exp(s[k]);
      gx[k] = gz[k] * es;
      const double gs = gz[k] * x[k] * es + glogdet;
      const std::size_t c = k / hw;
      gscale[c] += gs * th[k];
      gout[k] = gs * scale[c] * (1.0 - th[k] * th[k]);
      gout[D + k] = gz[k];
    }
    std::vector<double> gin(D);
    net_.backward(p.first(net_.num_params()), tr, gout,
                  gp.first(net_.num_params()), gin);
    for (std::size_t k = 0; k < D; ++k) gx[k] += gin[k] * mask_[k % hw];
  }

  // Vector-Jacobian product of the inverse map at z: given dObj/dx returns
  // dObj/dz.
  void inverse_vjp(std::span<const double> p, std::span<const double> z,
                   std::span<const double> gx, std::vector<double>& gz) const {
    nn::Network::Trace tr;
    std::vector<double> s, th, t;
    conditioner(p, z, tr, s, th, t);
    const std::size_t D = z.size(), hw = mask_.size();
    const double* scale = p.data() + net_.num_params();
    std::vector<double> gout(2 * D, 0.0);
    gz.assign(D, 0.0);
    for (std::size_t k = 0; k < D; ++k) {
      if (mask_[k % hw] > 0.5) {
        gz[k] = gx[k];
        continue;
      }
      const double ens = std::exp(-s[k]);
      const double xk = (z[k] - t[k]) * ens;
      gz[k] = gx[k] * ens;
      const double gs = -gx[k] * xk;
      const std::size_t c = k / hw;
      gout[k] = gs * scale[c] * (1.0 - th[k] * th[k]);
      gout[D + k] = -gx[k] * ens;
    }
    std::vector<double> gin(D);
    net_.backward(p.first(net_.num_params()), tr, gout, {}, gin);
    for (std::size_t k = 0; k < D; ++k) gz[k] += gin[k] * mask_[k % hw];
  }

 private:
  ImageShape shape_;
  int parity_;
  nn::Network net_;
  std::vector<double> mask_;
};

}  // namespace detail

struct EncodeTrace {
  std::vector<double> z;              // HWC latent
  std::vector<double> layer_logdets;  // logit stage (if any) first
};

class InvertibleGenerator {
 public:
  InvertibleGenerator() = default;
  // Couplings start as the identity transform.
  InvertibleGenerator(ImageShape shape, FlowConfig config)
      : shape_(shape), config_(config) {
    config_.validate();
    std::size_t off = 0;
    for (int l = 0; l < config_.num_coupling_layers; ++l) {
      layers_.emplace_back(shape_, config_.hidden_width, l % 2);
      offsets_.push_back(off);
      off += layers_.back().num_params();
    }
    offsets_.push_back(off);
    params_.assign(off, 0.0);
    for (std::size_t l = 0; l < layers_.size(); ++l)
      layers_[l].init(block(l), config_.seed + 7919 * (l + 1));
  }

  // Pure coupling stack without the logit stage: encode(x) == flatten(x).
  static InvertibleGenerator identity(ImageShape shape, int layers = 2,
                                      int hidden = 4) {
    FlowConfig c;
    c.num_coupling_layers = layers;
    c.hidden_width = hidden;
    c.logit_preprocess = false;
    c.epochs = 0;
    return InvertibleGenerator(shape, c);
  }

  const ImageShape& shape() const { return shape_; }
  const FlowConfig& config() const { return config_; }
  std::size_t latent_dim() const { return shape_.size(); }
  std::size_t num_coupling_layers() const { return layers_.size(); }
  const std::vector<double>& parameters() const { return params_; }
  std::vector<double>& mutable_parameters() { return params_; }
  std::span<double> layer_parameters(std::size_t l) { return block(l); }

  // Perturb every parameter with N(0, sd); used to build non-trivial flows
  // for testing.
  void randomize(std::uint64_t seed, double sd) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, sd);
    for (double& p : params_) p += n(rng);
  }

  EncodeTrace encode_trace(const ImageTensor& x) const {
    check_shape(x.shape());
    if (!x.all_finite()) throw NumericalError("encode: non-finite input");
    std::vector<double> cur = hwc_to_chw(x.values(), shape_);
    EncodeTrace tr;
    if (config_.logit_preprocess) tr.layer_logdets.push_back(logit_forward(cur));
    std::vector<double> next;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      tr.layer_logdets.push_back(layers_[l].forward(block(l), cur, next));
      std::swap(cur, next);
    }
    tr.z = chw_to_hwc(cur, shape_);
    check_finite(tr.z, "encode");
    return tr;
  }

  std::vector<double> encode(const ImageTensor& x) const {
    return encode_trace(x).z;
  }

  ImageTensor decode(std::span<const double> z) const {
    if (z.size() != latent_dim())
      throw InputError("latent has " + std::to_string(z.size()) +
                       " values, expected " + std::to_string(latent_dim()));
    std::vector<double> cur = hwc_to_chw(z, shape_);
    std::vector<double> next;
    for (std::size_t l = layers_.size(); l-- > 0;) {
      layers_[l].inverse(block(l), cur, next);
      std::swap(cur, next);
    }
    if (config_.logit_preprocess) logit_inverse(cur);
    auto x = chw_to_hwc(cur, shape_);
    check_finite(x, "decode");
    return ImageTensor(shape_, std::move(x));
  }

  // Given dObj/dx at x = decode(z), returns dObj/dz (HWC latent order).
  std::vector<double> decode_vjp(std::span<const double> z,
                                 std::span<const double> gx_hwc) const {
    if (z.size() != latent_dim() || gx_hwc.size() != latent_dim())
      throw InputError("decode_vjp: size mismatch");
    // Intermediates of the inverse pass: inputs[l] is the input to inverse
    // of coupling l.
    std::vector<std::vector<double>> inputs(layers_.size());
    std::vector<double> cur = hwc_to_chw(z, shape_);
    for (std::size_t l = layers_.size(); l-- > 0;) {
      inputs[l] = cur;
      std::vector<double> next;
      layers_[l].inverse(block(l), cur, next);
      cur = std::move(next);
    }
    std::vector<double> g = hwc_to_chw(gx_hwc, shape_);
    if (config_.logit_preprocess) {
      // cur holds the pre-sigmoid values y; x = (sigmoid(y) - eps)/(1-2eps).
      const double scale = 1.0 / (1.0 - 2.0 * config_.logit_eps);
      for (std::size_t k = 0; k < g.size(); ++k) {
        const double sg = sigmoid(cur[k]);
        g[k] *= sg * (1.0 - sg) * scale;
      }
    }
    std::vector<double> gnext;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      layers_[l].inverse_vjp(block(l), inputs[l], g, gnext);
      std::swap(g, gnext);
    }
    auto out = chw_to_hwc(g, shape_);
    check_finite(out, "decode_vjp");
    return out;
  }

  // log N(z; 0, I) + sum of layer log-determinants.
  double log_likelihood(const ImageTensor& x) const {
    const auto tr = encode_trace(x);
    double ll = standard_normal_log_density(tr.z);
    for (double ld : tr.layer_logdets) ll += ld;
    if (!std::isfinite(ll)) throw NumericalError("non-finite log-likelihood");
    return ll;
  }

  double mean_log_likelihood(const LabeledDataset& d, Split split) const {
    const auto idx = d.indices(split);
    if (idx.empty()) throw ConfigError("split is empty", "split");
    double s = 0.0;
    for (std::size_t i : idx) s += log_likelihood(d[i].image);
    return s / static_cast<double>(idx.size());
  }

  // Accumulates d(-log p(x))/d params into grad; returns -log p(x).
  double accumulate_nll_gradient(const ImageTensor& x,
                                 std::span<double> grad) const {
    std::vector<std::vector<double>> ins(layers_.size());
    std::vector<double> cur = hwc_to_chw(x.values(), shape_);
    double ll = 0.0;
    if (config_.logit_preprocess) ll += logit_forward(cur);
    std::vector<double> next;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      ins[l] = cur;
      ll += layers_[l].forward(block(l), cur, next);
      std::swap(cur, next);
    }
    ll += standard_normal_log_density(cur);
    // d(-ll)/dz = z; d(-ll)/d logdet = -1.
    std::vector<double> g = cur, gprev;
    for (std::size_t l = layers_.size(); l-- > 0;) {
      layers_[l].forward_backward(block(l), ins[l], g, -1.0,
                                  grad.subspan(offsets_[l],
                                               offsets_[l + 1] - offsets_[l]),
                                  gprev);
      std::swap(g, gprev);
    }
    return -ll;
  }

  void save(const std::filesystem::path& path) const {
    Checkpoint ck;
    ck.header = {{"kind", "flow"},
                 {"shape", {shape_.height, shape_.width, shape_.channels}},
                 {"config", config_.to_json()}};
    ck.arrays.emplace_back("parameters", params_);
    write_checkpoint(path, ck);
  }

  static InvertibleGenerator load(const std::filesystem::path& path) {
    const Checkpoint ck = read_checkpoint(path);
    if (ck.header.value("kind", std::string()) != "flow")
      throw ConfigError(path.string() + " is not a flow checkpoint");
    const auto& s = ck.header.at("shape");
    InvertibleGenerator g(ImageShape{s.at(0), s.at(1), s.at(2)},
                          FlowConfig::from_json(ck.header.at("config")));
    const auto& p = ck.array("parameters");
    if (p.size() != g.params_.size())
      throw ConfigError("flow checkpoint parameter count mismatch");
    g.params_ = p;
    return g;
  }

  bool operator==(const InvertibleGenerator& o) const {
    return shape_ == o.shape_ && config_.to_json() == o.config_.to_json() &&
           params_ == o.params_;
  }

  static double standard_normal_log_density(std::span<const double> z) {
    double sq = 0.0;
    for (double v : z) sq += v * v;
    return -0.5 * sq -
           0.5 * static_cast<double>(z.size()) *
               std::log(2.0 * std::numbers::pi);
  }

 private:
  static double sigmoid(double y) { return 1.0 / (1.0 + std::exp(-y)); }

  // x -> logit(eps + (1 - 2 eps) x), in place; returns log|det J|.
  double logit_forward(std::vector<double>& v) const {
    const double e = config_.logit_eps, a = 1.0 - 2.0 * e;
    double logdet = 0.0;
    for (double& x : v) {
      const double q = e + a * x;
      if (!(q > 0.0 && q < 1.0))
        throw NumericalError("logit stage: value outside the flow's domain");
      logdet += std::log(a) - std::log(q) - std::log1p(-q);
      x = std::log(q) - std::log1p(-q);
    }
    return logdet;
  }

  void logit_inverse(std::vector<double>& v) const {
    const double e = config_.logit_eps, a = 1.0 - 2.0 * e;
    for (double& y : v) y = (sigmoid(y) - e) / a;
  }

  std::span<double> block(std::size_t l) {
    return std::span<double>(params_).subspan(offsets_[l],
                                              offsets_[l + 1] - offsets_[l]);
  }
  std::span<const double> block(std::size_t l) const {
    return std::span<const double>(params_).subspan(
        offsets_[l], offsets_[l + 1] - offsets_[l]);
  }

  void check_shape(const ImageShape& s) const {
    if (!(s == shape_))
      throw InputError("flow expects " + shape_.str() + ", got " + s.str());
  }
  static void check_finite(std::span<const double> v, const char* where) {
    for (std::size_t i = 0; i < v.size(); ++i)
      if (!std::isfinite(v[i]))
        throw NumericalError(std::string(where) +
                             ": non-finite value at index " + std::to_string(i));
  }

  ImageShape shape_;
  FlowConfig config_;
  std::vector<detail::AffineCoupling> layers_;
  std::vector<std::size_t> offsets_;
  std::vector<double> params_;
};

struct TrainFlowResult {
  InvertibleGenerator generator;
  double mean_log_likelihood = 0.0;  // on the training split
  double roundtrip_max_error = 0.0;  // over up to 64 training images
};

// Maximum-likelihood training with Adam. Deterministic given config.seed.
inline TrainFlowResult train_generator(const LabeledDataset& dataset,
                                       Split split, const FlowConfig& config) {
  config.validate();
  const auto idx = dataset.indices(split);
  if (idx.empty())
    throw ConfigError("split '" + to_string(split) + "' is empty", "split");
  InvertibleGenerator g(dataset.shape(), config);
  nn::Adam opt(g.parameters().size(), config.learning_rate);
  std::mt19937_64 rng(config.seed ^ 0xA5A5A5A5ULL);
  std::vector<std::size_t> order = idx;
  std::vector<double> grad(g.parameters().size());
  const double inv_dim = 1.0 / static_cast<double>(g.latent_dim());
  std::size_t batch_index = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size();
         start += config.batch_size, ++batch_index) {
      const std::size_t end = std::min(
          order.size(), start + static_cast<std::size_t>(config.batch_size));
      std::fill(grad.begin(), grad.end(), 0.0);
      double loss = 0.0;
      for (std::size_t k = start; k < end; ++k)
        loss += g.accumulate_nll_gradient(dataset[order[k]].image, grad);
      const double scale = inv_dim / static_cast<double>(end - start);
      bool finite = std::isfinite(loss);
      for (double& v : grad) {
        v *= scale;
        finite = finite && std::isfinite(v);
      }
      if (!finite)
        throw NumericalError("non-finite flow loss at batch " +
                             std::to_string(batch_index) + " (epoch " +
                             std::to_string(epoch) + ")");
      opt.step(g.mutable_parameters(), grad);
    }
  }
  TrainFlowResult r{g, 0.0, 0.0};
  r.mean_log_likelihood = g.mean_log_likelihood(dataset, split);
  for (std::size_t k = 0; k < std::min<std::size_t>(64, idx.size()); ++k) {
    const auto& x = dataset[idx[k]].image;
    const auto back = g.decode(g.encode(x));
    for (std::size_t i = 0; i < x.size(); ++i)
      r.roundtrip_max_error = std::max(
          r.roundtrip_max_error, std::abs(back.values()[i] - x.values()[i]));
  }
  return r;
}

}  // namespace cfkd
