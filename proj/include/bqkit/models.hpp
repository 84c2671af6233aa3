#pragma once

// Reference architectures used by the CLI and the test suites.

#include <cmath>
#include <string>

#include "bqkit/common.hpp"
#include "bqkit/tensor_store.hpp"

namespace bqkit {

class ModelBuilder {
 public:
  explicit ModelBuilder(Shape input_shape) { model_.manifest.input_shape = std::move(input_shape); }

  ModelBuilder& dense(const std::string& name, std::size_t in, std::size_t out, bool bias = true) {
    LayerDesc l;
    l.name = name;
    l.kind = LayerKind::Dense;
    l.weight_ref = name + ".weight";
    model_.tensors.push_back(
        TensorRecord::f32(*l.weight_ref, {in, out}, std::vector<float>(in * out, 0.0f)));
    if (bias) {
      l.bias_ref = name + ".bias";
      model_.tensors.push_back(TensorRecord::f32(*l.bias_ref, {out}, std::vector<float>(out, 0.0f)));
    }
    model_.manifest.layers.push_back(std::move(l));
    return *this;
  }

  ModelBuilder& conv(const std::string& name, std::size_t c_in, std::size_t c_out, std::size_t k,
                     std::size_t stride = 1, std::size_t padding = 0, bool bias = true) {
    LayerDesc l;
    l.name = name;
    l.kind = LayerKind::Conv2D;
    l.conv = ConvMeta{k, c_in, c_out, stride, padding};
    l.pointwise = k == 1;
    l.weight_ref = name + ".weight";
    model_.tensors.push_back(TensorRecord::f32(*l.weight_ref, {c_out, c_in, k, k},
                                               std::vector<float>(c_out * c_in * k * k, 0.0f)));
    if (bias) {
      l.bias_ref = name + ".bias";
      model_.tensors.push_back(
          TensorRecord::f32(*l.bias_ref, {c_out}, std::vector<float>(c_out, 0.0f)));
    }
    model_.manifest.layers.push_back(std::move(l));
    return *this;
  }

  ModelBuilder& op(const std::string& name, LayerKind kind) {
    LayerDesc l;
    l.name = name;
    l.kind = kind;
    model_.manifest.layers.push_back(std::move(l));
    return *this;
  }
  ModelBuilder& relu(const std::string& name) { return op(name, LayerKind::ReLU); }
  ModelBuilder& maxpool(const std::string& name) { return op(name, LayerKind::MaxPool2x2); }
  ModelBuilder& flatten(const std::string& name) { return op(name, LayerKind::Flatten); }
  ModelBuilder& softmax(const std::string& name) { return op(name, LayerKind::Softmax); }

  Model build(std::size_t num_classes) {
    model_.manifest.num_classes = num_classes;
    validate_model(model_);
    return model_;
  }

 private:
  Model model_;
};

// Uniform fan-in initialisation U(-sqrt(6/fan_in), +sqrt(6/fan_in)); biases zero.
inline void init_params(Model& model, std::uint64_t seed) {
  std::size_t index = 0;
  for (const auto& l : model.manifest.layers) {
    if (!l.weight_ref) continue;
    auto& w = model.at(*l.weight_ref);
    const std::size_t fan_in = l.kind == LayerKind::Conv2D ? l.conv->c_in * l.conv->k * l.conv->k
                                                           : w.shape[0];
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    Rng rng = make_rng(seed, "init", index++);
    w = TensorRecord::f32(w.name, w.shape, std::vector<float>(w.size()));
    for (auto& v : w.values) v = static_cast<float>((2.0 * uniform01(rng) - 1.0) * bound);
    if (l.bias_ref) {
      auto& b = model.at(*l.bias_ref);
      b = TensorRecord::f32(b.name, b.shape, std::vector<float>(b.size(), 0.0f));
    }
  }
}

// Three-layer perceptron over flat inputs.
inline Model make_mlp(std::size_t in, std::size_t hidden, std::size_t classes, std::uint64_t seed) {
  Model m = ModelBuilder({in})
                .dense("fc1", in, hidden)
                .relu("relu1")
                .dense("fc2", hidden, hidden)
                .relu("relu2")
                .dense("fc3", hidden, classes)
                .softmax("softmax")
                .build(classes);
  init_params(m, seed);
  return m;
}

// Four weight layers: two 3x3 convs, a point-wise conv and a dense head.
inline Model make_cnn(std::size_t side, std::size_t classes, std::uint64_t seed) {
  const std::size_t pooled = side / 2;
  Model m = ModelBuilder({1, side, side})
                .conv("conv1", 1, 8, 3, 1, 1)
                .relu("relu1")
                .conv("conv2", 8, 16, 3, 1, 1)
                .relu("relu2")
                .maxpool("pool")
                .conv("pw3", 16, 16, 1)
                .relu("relu3")
                .flatten("flatten")
                .dense("fc", 16 * pooled * pooled, classes)
                .softmax("softmax")
                .build(classes);
  init_params(m, seed);
  return m;
}

// Two 3x3 convs and a dense head.
inline Model make_two_conv(std::size_t side, std::size_t classes, std::uint64_t seed) {
  const std::size_t pooled = side / 2;
  Model m = ModelBuilder({1, side, side})
                .conv("conv1", 1, 8, 3, 1, 1)
                .relu("relu1")
                .conv("conv2", 8, 16, 3, 1, 1)
                .relu("relu2")
                .maxpool("pool")
                .flatten("flatten")
                .dense("fc", 16 * pooled * pooled, classes)
                .softmax("softmax")
                .build(classes);
  init_params(m, seed);
  return m;
}

}  // namespace bqkit
