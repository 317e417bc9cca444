#include "mce/models.hpp"

#include <cmath>

#include "mce/errors.hpp"

namespace mce {

Tensor glorot_uniform(std::vector<int> shape, int fan_in, int fan_out, Rng& rng) {
  Tensor t(std::move(shape));
  const double limit = std::sqrt(6.0 / (fan_in + fan_out));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-limit, limit);
  return t;
}

namespace {

constexpr int kImageChannels = 3;
constexpr int kImageSide = 28;
constexpr int kHidden = 128;
constexpr int kConvFilters = 8;
constexpr int kConvKernel = 7;

class ConvModel final : public Model {
 public:
  ConvModel(int num_classes, double dropout_rate, Rng& rng)
      : num_classes_(num_classes), dropout_rate_(dropout_rate) {
    const int side_out = kImageSide - kConvKernel + 1;
    const int flat = kConvFilters * side_out * side_out;
    const int patch = kImageChannels * kConvKernel * kConvKernel;
    store_.add("conv.kernel",
               glorot_uniform({kConvFilters, kImageChannels, kConvKernel, kConvKernel}, patch,
                              kConvFilters * kConvKernel * kConvKernel, rng));
    store_.add("conv.bias", Tensor({kConvFilters}));
    store_.add("fc1.weight", glorot_uniform({flat, kHidden}, flat, kHidden, rng));
    store_.add("fc1.bias", Tensor({kHidden}));
    store_.add("out.weight", glorot_uniform({kHidden, num_classes}, kHidden, num_classes, rng));
    store_.add("out.bias", Tensor({num_classes}));
  }

  Graph::NodeId forward(Graph& g, const Tensor& x, bool train_mode, Rng& rng) override {
    auto h = conv2d(g, g.input(x), g.param(store_, "conv.kernel"), g.param(store_, "conv.bias"));
    h = flatten(g, relu(g, h));
    h = relu(g, dense(g, h, g.param(store_, "fc1.weight"), g.param(store_, "fc1.bias")));
    h = dropout(g, h, dropout_rate_, train_mode, rng);
    return dense(g, h, g.param(store_, "out.weight"), g.param(store_, "out.bias"));
  }

  std::string arch() const override { return "convnet"; }
  int num_classes() const override { return num_classes_; }

 private:
  int num_classes_;
  double dropout_rate_;
};

class MlpModel final : public Model {
 public:
  MlpModel(int num_classes, double dropout_rate, Rng& rng)
      : num_classes_(num_classes), dropout_rate_(dropout_rate) {
    const int flat = kImageChannels * kImageSide * kImageSide;
    store_.add("fc1.weight", glorot_uniform({flat, kHidden}, flat, kHidden, rng));
    store_.add("fc1.bias", Tensor({kHidden}));
    store_.add("out.weight", glorot_uniform({kHidden, num_classes}, kHidden, num_classes, rng));
    store_.add("out.bias", Tensor({num_classes}));
  }

  Graph::NodeId forward(Graph& g, const Tensor& x, bool train_mode, Rng& rng) override {
    auto h = flatten(g, g.input(x));
    h = relu(g, dense(g, h, g.param(store_, "fc1.weight"), g.param(store_, "fc1.bias")));
    h = dropout(g, h, dropout_rate_, train_mode, rng);
    return dense(g, h, g.param(store_, "out.weight"), g.param(store_, "out.bias"));
  }

  std::string arch() const override { return "mlpnet"; }
  int num_classes() const override { return num_classes_; }

 private:
  int num_classes_;
  double dropout_rate_;
};

}  // namespace

std::unique_ptr<Model> make_model(Arch arch, int num_classes, double dropout_rate, Rng& init_rng) {
  if (num_classes < 2) throw ConfigError("model needs at least two classes");
  switch (arch) {
    case Arch::ConvNet:
      return std::make_unique<ConvModel>(num_classes, dropout_rate, init_rng);
    case Arch::MlpNet:
      return std::make_unique<MlpModel>(num_classes, dropout_rate, init_rng);
  }
  throw ConfigError("unknown architecture");
}

}  // namespace mce
