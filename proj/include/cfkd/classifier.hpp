#pragma once

// The image classifier shared by student and oracle: a small CNN (or a
// linear-softmax model for toy problems) with input gradients, mini-batch
// SGD training and checkpointing.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <optional>
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

struct ArchSpec {
  std::string kind = "cnn";  // "cnn" or "linear"
  ImageShape input{16, 16, 3};
  int num_classes = 2;
  std::vector<int> conv_channels{8, 16};
  // Linear head initialisation; "zero" gives a constant-output model.
  std::string head_init = "xavier";
  // Subtracted from every input value before the first layer.
  double input_center = 0.5;

  nlohmann::json to_json() const {
    return {{"kind", kind},
            {"input_center", input_center},
            {"input", {input.height, input.width, input.channels}},
            {"num_classes", num_classes},
            {"conv_channels", conv_channels},
            {"head_init", head_init}};
  }
  static ArchSpec from_json(const nlohmann::json& j) {
    ArchSpec a;
    a.kind = j.at("kind");
    const auto& in = j.at("input");
    a.input = {in.at(0), in.at(1), in.at(2)};
    a.num_classes = j.at("num_classes");
    a.conv_channels = j.at("conv_channels").get<std::vector<int>>();
    a.head_init = j.value("head_init", std::string("xavier"));
    a.input_center = j.value("input_center", 0.5);
    return a;
  }
};

struct TrainConfig {
  int epochs = 20;
  int batch_size = 32;
  double learning_rate = 0.02;
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  // Continue from `init` parameters instead of reinitialising.
  bool fine_tune = true;

  void validate() const {
    if (epochs < 0) throw ConfigError("epochs must be >= 0", "epochs");
    if (batch_size < 1)
      throw ConfigError("batch_size must be >= 1", "batch_size");
    if (!(learning_rate > 0.0))
      throw ConfigError("learning_rate must be > 0", "learning_rate");
  }
};

inline nn::Network build_network(const ArchSpec& a) {
  using namespace nn;
  if (a.num_classes < 2) throw ConfigError("num_classes must be >= 2");
  const Dims in{a.input.channels, a.input.height, a.input.width};
  std::vector<std::shared_ptr<const Layer>> layers;
  const auto head_init = a.head_init == "zero" ? Linear::Init::zero
                         : a.head_init == "he" ? Linear::Init::he
                                               : Linear::Init::xavier;
  if (a.kind == "linear") {
    layers.push_back(
        std::make_shared<Linear>(static_cast<int>(in.size()), a.num_classes,
                                 head_init));
  } else if (a.kind == "cnn") {
    if (a.conv_channels.empty() || a.conv_channels.size() > 3)
      throw ConfigError("cnn needs 1-3 conv blocks", "conv_channels");
    Dims d = in;
    for (int ch : a.conv_channels) {
      layers.push_back(std::make_shared<Conv2d>(d.c, ch, 3));
      layers.push_back(std::make_shared<ReLU>());
      layers.push_back(std::make_shared<AvgPool2>());
      d = {ch, d.h / 2, d.w / 2};
    }
    layers.push_back(std::make_shared<Linear>(static_cast<int>(d.size()),
                                              a.num_classes, head_init));
  } else {
    throw ConfigError("unknown architecture '" + a.kind + "'", "kind");
  }
  return Network(in, std::move(layers));
}

inline std::vector<double> softmax(std::span<const double> logits) {
  const double m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += p[i] = std::exp(logits[i] - m);
  for (double& v : p) v /= s;
  return p;
}

inline int argmax(std::span<const double> v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

// Probabilities together with d log p_target / dx.
struct LogProbGradient {
  std::vector<double> probabilities;
  std::vector<double> gradient;  // HWC, same layout as the image
};

class Classifier {
 public:
  Classifier() = default;
  explicit Classifier(ArchSpec arch, std::uint64_t seed = 0)
      : arch_(std::move(arch)), seed_(seed),
        net_(std::make_shared<const nn::Network>(build_network(arch_))),
        params_(net_->init_params(seed)) {}

  const ArchSpec& arch() const { return arch_; }
  ImageShape input_shape() const { return arch_.input; }
  int num_classes() const { return arch_.num_classes; }
  std::uint64_t seed() const { return seed_; }
  const std::vector<double>& parameters() const { return params_; }
  std::vector<double>& mutable_parameters() { return params_; }
  const nn::Network& network() const { return *net_; }

  std::vector<double> logits(const ImageTensor& x) const {
    check_shape(x);
    return net_->forward(params_, net_input(x));
  }

  std::vector<double> predict(const ImageTensor& x) const {
    return softmax(logits(x));
  }

  std::vector<std::vector<double>> predict(
      std::span<const ImageTensor> batch) const {
    std::vector<std::vector<double>> out;
    out.reserve(batch.size());
    for (const auto& x : batch) out.push_back(predict(x));
    return out;
  }

  int predict_class(const ImageTensor& x) const { return argmax(predict(x)); }

  LogProbGradient log_prob_gradient(const ImageTensor& x,
                                    int target_class) const {
    check_shape(x);
    if (target_class < 0 || target_class >= num_classes())
      throw InputError("target class " + std::to_string(target_class) +
                       " out of range");
    nn::Network::Trace t;
    net_->forward(params_, net_input(x), t);
    LogProbGradient r;
    r.probabilities = softmax(t.output());
    std::vector<double> gl(num_classes());
    for (int c = 0; c < num_classes(); ++c)
      gl[c] = (c == target_class ? 1.0 : 0.0) - r.probabilities[c];
    std::vector<double> gx(net_->input_dims().size());
    net_->backward(params_, t, gl, {}, gx);
    r.gradient = chw_to_hwc(gx, x.shape());
    return r;
  }

  // Cross-entropy of one example; accumulates d loss / d params into grad.
  double accumulate_loss_gradient(const ImageTensor& x, int label,
                                  std::span<double> grad,
                                  nn::Network::Trace& t) const {
    net_->forward(params_, net_input(x), t);
    auto p = softmax(t.output());
    std::vector<double> gl(p);
    gl[label] -= 1.0;
    net_->backward(params_, t, gl, grad, {});
    return -std::log(std::max(p[label], 1e-300));
  }

  void save(const std::filesystem::path& path) const {
    Checkpoint ck;
    ck.header = {{"kind", "classifier"},
                 {"arch", arch_.to_json()},
                 {"network", net_->describe()},
                 {"seed", seed_},
                 {"num_classes", num_classes()}};
    ck.arrays.emplace_back("parameters", params_);
    write_checkpoint(path, ck);
  }

  static Classifier load(const std::filesystem::path& path) {
    const Checkpoint ck = read_checkpoint(path);
    if (ck.header.value("kind", std::string()) != "classifier")
      throw ConfigError(path.string() + " is not a classifier checkpoint");
    Classifier c(ArchSpec::from_json(ck.header.at("arch")),
                 ck.header.at("seed").get<std::uint64_t>());
    const auto& p = ck.array("parameters");
    if (p.size() != c.params_.size())
      throw ConfigError("checkpoint parameter count mismatch");
    c.params_ = p;
    return c;
  }

  bool operator==(const Classifier& o) const {
    return arch_.to_json() == o.arch_.to_json() && params_ == o.params_;
  }

 private:
  std::vector<double> net_input(const ImageTensor& x) const {
    auto v = hwc_to_chw(x.values(), x.shape());
    if (arch_.input_center != 0.0)
      for (double& a : v) a -= arch_.input_center;
    return v;
  }

  void check_shape(const ImageTensor& x) const {
    if (!(x.shape() == arch_.input))
      throw InputError("classifier expects " + arch_.input.str() +
                       " input, got " + x.shape().str());
  }

  ArchSpec arch_;
  std::uint64_t seed_ = 0;
  std::shared_ptr<const nn::Network> net_;
  std::vector<double> params_;
};

// d log f(x)_target / dx; throws NumericalError if anything is non-finite.
inline std::vector<double> input_gradient(const Classifier& f,
                                          const ImageTensor& x,
                                          int target_class) {
  auto r = f.log_prob_gradient(x, target_class);
  for (std::size_t i = 0; i < r.gradient.size(); ++i)
    if (!std::isfinite(r.gradient[i]))
      throw NumericalError("non-finite input gradient at flat index " +
                           std::to_string(i) + " for target class " +
                           std::to_string(target_class));
  return std::move(r.gradient);
}

// Reference to an example used for training; does not own the image.
struct ExampleRef {
  const ImageTensor* image;
  int label;
};

struct TrainResult {
  Classifier classifier;
  double train_accuracy = 0.0;
  double final_epoch_loss = 0.0;
};

inline double accuracy_on(const Classifier& f,
                          std::span<const ExampleRef> examples) {
  if (examples.empty()) throw ConfigError("accuracy over an empty set");
  std::size_t correct = 0;
  for (const auto& e : examples)
    correct += f.predict_class(*e.image) == e.label ? 1 : 0;
  return static_cast<double>(correct) / examples.size();
}

inline TrainResult train_on(std::span<const ExampleRef> examples,
                            const ArchSpec& arch, const TrainConfig& config,
                            const Classifier* init = nullptr) {
  config.validate();
  if (examples.empty()) throw ConfigError("training set is empty", "split");
  {
    std::vector<bool> seen(arch.num_classes, false);
    for (const auto& e : examples) {
      if (e.label < 0 || e.label >= arch.num_classes)
        throw InputError("label out of range");
      seen[e.label] = true;
    }
    if (std::count(seen.begin(), seen.end(), true) < 2)
      throw ConfigError("training set covers fewer than 2 classes", "split");
  }

  Classifier model = (init && config.fine_tune) ? *init
                                                 : Classifier(arch, config.seed);
  TrainResult result{model, 0.0, 0.0};
  if (config.epochs == 0) {
    result.train_accuracy = accuracy_on(model, examples);
    return result;
  }

  std::mt19937_64 rng(config.seed ^ 0x9E3779B97F4A7C15ULL);
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), 0);
  nn::SgdMomentum opt(model.parameters().size(), config.learning_rate,
                      config.momentum, config.weight_decay);
  std::vector<double> grad(model.parameters().size());
  nn::Network::Trace trace;
  double epoch_loss = 0.0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size();
         start += config.batch_size) {
      const std::size_t end =
          std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      std::fill(grad.begin(), grad.end(), 0.0);
      double batch_loss = 0.0;
      for (std::size_t k = start; k < end; ++k) {
        const auto& e = examples[order[k]];
        batch_loss += model.accumulate_loss_gradient(*e.image, e.label, grad,
                                                     trace);
      }
      const double inv = 1.0 / static_cast<double>(end - start);
      for (double& g : grad) g *= inv;
      if (!std::isfinite(batch_loss))
        throw NumericalError("non-finite training loss in epoch " +
                             std::to_string(epoch) + ", batch starting at " +
                             std::to_string(start));
      opt.step(model.mutable_parameters(), grad);
      epoch_loss += batch_loss;
    }
    epoch_loss /= static_cast<double>(order.size());
  }
  result.classifier = std::move(model);
  result.final_epoch_loss = epoch_loss;
  result.train_accuracy = accuracy_on(result.classifier, examples);
  return result;
}

inline std::vector<ExampleRef> examples_of(const LabeledDataset& d,
                                           Split split) {
  std::vector<ExampleRef> out;
  for (std::size_t i : d.indices(split))
    out.push_back({&d[i].image, d[i].label});
  return out;
}

inline TrainResult train_classifier(const LabeledDataset& dataset, Split split,
                                    const TrainConfig& config,
                                    const ArchSpec& arch,
                                    const Classifier* init = nullptr) {
  const auto ex = examples_of(dataset, split);
  if (ex.empty())
    throw ConfigError("split '" + to_string(split) + "' is empty", "split");
  return train_on(ex, arch, config, init);
}

inline double accuracy(const Classifier& f, const LabeledDataset& dataset,
                       Split split) {
  const auto ex = examples_of(dataset, split);
  if (ex.empty())
    throw ConfigError("split '" + to_string(split) + "' is empty", "split");
  return accuracy_on(f, ex);
}

}  // namespace cfkd
