#pragma once

// Reference forward/backward engine for small dense and convolutional
// classifiers, with SGD training, accuracy evaluation and |gradient|
// accumulation. Parameters are held in double precision while a Network is
// alive and exported back to float32 tensors.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "bqkit/common.hpp"
#include "bqkit/data.hpp"
#include "bqkit/qat.hpp"
#include "bqkit/tensor_store.hpp"

namespace bqkit {

struct TrainConfig {
  double learning_rate = 0.05;
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  double momentum = 0.9;

  void validate() const {
    if (!(learning_rate > 0.0)) throw Error("train: learning_rate must be positive");
    if (batch_size == 0) throw Error("train: batch_size must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw Error("train: momentum must be in [0,1)");
  }
};

// Sum of |gradient| per tensor over the batches of one epoch.
struct GradientStats {
  std::map<std::string, std::vector<double>> abs_sum;
  std::size_t batch_count = 0;

  void add(const std::map<std::string, std::vector<double>>& grads) {
    for (const auto& [name, g] : grads) {
      auto& acc = abs_sum[name];
      if (acc.empty()) acc.assign(g.size(), 0.0);
      for (std::size_t i = 0; i < g.size(); ++i) acc[i] += std::abs(g[i]);
    }
    ++batch_count;
  }
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double loss = 0.0;
  double train_accuracy = 0.0;
};

class TrainingDiverged : public Error {
 public:
  TrainingDiverged(std::size_t epoch, std::size_t batch, double loss)
      : Error("training diverged: non-finite loss (" + format_double(loss) + ") at epoch " +
              std::to_string(epoch) + ", batch " + std::to_string(batch)),
        epoch(epoch),
        batch(batch) {}
  TrainingDiverged(std::size_t epoch, std::size_t batch, const std::string& param)
      : Error("training diverged: non-finite parameter " + param + " at epoch " + std::to_string(epoch) +
              ", batch " + std::to_string(batch)),
        epoch(epoch),
        batch(batch) {}
  std::size_t epoch, batch;
};

struct ParamTensor {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct LossAndGrads {
  double loss = 0.0;
  std::size_t correct = 0;
  std::map<std::string, std::vector<double>> grads;  // per parameter tensor
  std::vector<double> input_grad;                     // [B, input dims]
};

class Network {
 public:
  explicit Network(const Model& model) : manifest_(model.manifest) {
    validate_model(model);
    const auto shapes = infer_shapes(model.manifest, model.tensors);
    Shape in = model.manifest.input_shape;
    for (std::size_t i = 0; i < manifest_.layers.size(); ++i) {
      const auto& l = manifest_.layers[i];
      Step s;
      s.kind = l.kind;
      s.name = l.name;
      s.in = in;
      s.out = shapes[i];
      if (l.conv) s.conv = *l.conv;
      if (l.weight_ref) s.w = add_param(model.at(*l.weight_ref));
      if (l.bias_ref) s.b = add_param(model.at(*l.bias_ref));
      if (l.kind == LayerKind::ReLU && manifest_.act_quant) {
        auto it = manifest_.act_quant->clip_high.find(l.name);
        if (it != manifest_.act_quant->clip_high.end())
          s.act_grid.emplace(manifest_.act_quant->bits, 0.0, it->second);
      }
      steps_.push_back(std::move(s));
      in = shapes[i];
    }
    final_softmax_ = !steps_.empty() && steps_.back().kind == LayerKind::Softmax;
    weight_grid_.resize(params_.size());
  }

  const ModelManifest& manifest() const { return manifest_; }
  std::size_t input_size() const { return product(manifest_.input_shape); }
  std::size_t num_classes() const { return manifest_.num_classes; }

  std::vector<ParamTensor>& params() { return params_; }
  const std::vector<ParamTensor>& params() const { return params_; }
  ParamTensor& param(std::string_view name) { return params_.at(param_index(name)); }
  const ParamTensor& param(std::string_view name) const { return params_.at(param_index(name)); }

  // Weight fake quantization for QAT. Layers absent from qat.weight_clip keep
  // float weights.
  void enable_qat(const QatConfig& qat) {
    qat.validate();
    qat_ = qat;
    std::fill(weight_grid_.begin(), weight_grid_.end(), std::nullopt);
    for (const auto& s : steps_) {
      if (s.w < 0) continue;
      auto it = qat.weight_clip.find(s.name);
      if (it != qat.weight_clip.end())
        weight_grid_[static_cast<std::size_t>(s.w)].emplace(qat.weight_bits, it->second.low,
                                                            it->second.high);
    }
  }
  void disable_qat() {
    qat_.reset();
    std::fill(weight_grid_.begin(), weight_grid_.end(), std::nullopt);
  }

  // Class scores [B, num_classes].
  std::vector<double> forward(std::span<const float> inputs, std::size_t batch) const {
    Tape tape;
    run_forward(to_double(inputs, batch), batch, tape);
    return std::move(tape.acts.back());
  }

  // Mean cross-entropy over the batch and its gradients.
  LossAndGrads backward(std::span<const float> inputs, std::span<const int> labels) const {
    return backward(to_double(inputs, labels.size()), labels);
  }

  LossAndGrads backward(std::vector<double> x, std::span<const int> labels) const {
    const std::size_t batch = labels.size();
    if (x.size() != batch * input_size()) throw Error("backward: input shape mismatch");
    Tape tape;
    run_forward(std::move(x), batch, tape);
    LossAndGrads r;
    const std::size_t C = num_classes();
    // Logits are the output of the last layer, or its input when that layer is
    // a softmax; the loss is computed in log-sum-exp form from the logits.
    const auto& logits = final_softmax_ ? tape.acts[tape.acts.size() - 2] : tape.acts.back();
    std::vector<double> dz(batch * C);
    for (std::size_t b = 0; b < batch; ++b) {
      const double* z = &logits[b * C];
      const int y = labels[b];
      if (y < 0 || static_cast<std::size_t>(y) >= C) throw Error("backward: label out of range");
      const double zmax = *std::max_element(z, z + C);
      double sum = 0.0;
      for (std::size_t c = 0; c < C; ++c) sum += std::exp(z[c] - zmax);
      r.loss += (std::log(sum) + zmax - z[y]) / static_cast<double>(batch);
      std::size_t best = 0;
      for (std::size_t c = 0; c < C; ++c) {
        const double p = std::exp(z[c] - zmax) / sum;
        dz[b * C + c] = (p - (static_cast<int>(c) == y ? 1.0 : 0.0)) / static_cast<double>(batch);
        if (z[c] > z[best]) best = c;
      }
      if (static_cast<int>(best) == y) ++r.correct;
    }
    for (const auto& p : params_) r.grads[p.name].assign(p.values.size(), 0.0);

    std::vector<double> grad = std::move(dz);
    const std::size_t last = final_softmax_ ? steps_.size() - 1 : steps_.size();
    for (std::size_t i = last; i-- > 0;) grad = backward_step(i, tape, batch, std::move(grad), r);
    r.input_grad = std::move(grad);
    return r;
  }

  // Exports parameters back into float32 tensors of `model`.
  Model export_model(const Model& like) const {
    Model out = like;
    out.manifest = manifest_;
    for (const auto& p : params_) {
      auto& t = out.at(p.name);
      std::vector<float> v(p.values.begin(), p.values.end());
      t = TensorRecord::f32(p.name, p.shape, std::move(v));
    }
    return out;
  }

  // Weights as seen by the forward pass (fake-quantized when QAT is on).
  std::vector<double> effective_weights(std::size_t param) const {
    const auto& grid = weight_grid_[param];
    if (!grid) return params_[param].values;
    std::vector<double> v(params_[param].values.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = (*grid)(params_[param].values[i]);
    return v;
  }

  // Post-ReLU activations (before activation quantization) for every ReLU
  // layer, flattened over the batch.
  std::map<std::string, std::vector<double>> relu_outputs(std::span<const float> inputs,
                                                          std::size_t batch) const {
    Tape tape;
    run_forward(to_double(inputs, batch), batch, tape);
    std::map<std::string, std::vector<double>> out;
    for (std::size_t i = 0; i < steps_.size(); ++i)
      if (steps_[i].kind == LayerKind::ReLU)
        out[steps_[i].name] = steps_[i].act_grid ? tape.pre_quant[i] : tape.acts[i + 1];
    return out;
  }

 private:
  struct Step {
    LayerKind kind = LayerKind::ReLU;
    std::string name;
    Shape in, out;
    ConvMeta conv;
    int w = -1, b = -1;
    std::optional<UniformGrid> act_grid;
  };

  struct Tape {
    std::vector<std::vector<double>> acts;
    std::vector<std::vector<double>> pre_quant;     // ReLU output before act quant
    std::vector<std::vector<std::size_t>> argmax;   // MaxPool winners
    std::vector<std::vector<double>> weights;       // effective weights per param
  };

  int add_param(const TensorRecord& t) {
    for (std::size_t i = 0; i < params_.size(); ++i)
      if (params_[i].name == t.name) return static_cast<int>(i);
    const auto v = t.to_float();
    params_.push_back({t.name, t.shape, std::vector<double>(v.begin(), v.end())});
    return static_cast<int>(params_.size() - 1);
  }

  std::size_t param_index(std::string_view name) const {
    for (std::size_t i = 0; i < params_.size(); ++i)
      if (params_[i].name == name) return i;
    throw Error("no parameter named " + std::string(name));
  }

  std::vector<double> to_double(std::span<const float> inputs, std::size_t batch) const {
    if (inputs.size() != batch * input_size()) throw Error("forward: input shape mismatch");
    return {inputs.begin(), inputs.end()};
  }

  void run_forward(std::vector<double> x, std::size_t batch, Tape& tape) const {
    tape.weights.resize(params_.size());
    for (std::size_t p = 0; p < params_.size(); ++p) tape.weights[p] = effective_weights(p);
    tape.acts.clear();
    tape.acts.reserve(steps_.size() + 1);
    tape.acts.push_back(std::move(x));
    tape.pre_quant.assign(steps_.size(), {});
    tape.argmax.assign(steps_.size(), {});
    for (std::size_t i = 0; i < steps_.size(); ++i)
      tape.acts.push_back(forward_step(i, tape, batch));
  }

  std::vector<double> forward_step(std::size_t i, Tape& tape, std::size_t batch) const {
    const Step& s = steps_[i];
    const std::vector<double>& x = tape.acts[i];
    const std::size_t n_in = product(s.in), n_out = product(s.out);
    std::vector<double> y(batch * n_out, 0.0);
    switch (s.kind) {
      case LayerKind::Dense: {
        const auto& W = tape.weights[static_cast<std::size_t>(s.w)];
        for (std::size_t b = 0; b < batch; ++b) {
          double* yb = &y[b * n_out];
          if (s.b >= 0) {
            const auto& bias = tape.weights[static_cast<std::size_t>(s.b)];
            std::copy(bias.begin(), bias.end(), yb);
          }
          for (std::size_t k = 0; k < n_in; ++k) {
            const double xk = x[b * n_in + k];
            if (xk == 0.0) continue;
            const double* wk = &W[k * n_out];
            for (std::size_t j = 0; j < n_out; ++j) yb[j] += xk * wk[j];
          }
        }
        break;
      }
      case LayerKind::Conv2D: {
        const auto& W = tape.weights[static_cast<std::size_t>(s.w)];
        const auto& c = s.conv;
        const std::size_t H = s.in[1], Wd = s.in[2], OH = s.out[1], OW = s.out[2];
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t co = 0; co < c.c_out; ++co) {
            double* yo = &y[b * n_out + co * OH * OW];
            if (s.b >= 0) std::fill(yo, yo + OH * OW, tape.weights[static_cast<std::size_t>(s.b)][co]);
            for (std::size_t ci = 0; ci < c.c_in; ++ci) {
              const double* xi = &x[b * n_in + ci * H * Wd];
              for (std::size_t kh = 0; kh < c.k; ++kh)
                for (std::size_t kw = 0; kw < c.k; ++kw) {
                  const double w = W[((co * c.c_in + ci) * c.k + kh) * c.k + kw];
                  for (std::size_t oy = 0; oy < OH; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * c.stride + kh) -
                                    static_cast<std::ptrdiff_t>(c.padding);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                    for (std::size_t ox = 0; ox < OW; ++ox) {
                      const auto ix = static_cast<std::ptrdiff_t>(ox * c.stride + kw) -
                                      static_cast<std::ptrdiff_t>(c.padding);
                      if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(Wd)) continue;
                      yo[oy * OW + ox] += w * xi[static_cast<std::size_t>(iy) * Wd +
                                                 static_cast<std::size_t>(ix)];
                    }
                  }
                }
            }
          }
        break;
      }
      case LayerKind::ReLU: {
        for (std::size_t j = 0; j < y.size(); ++j) y[j] = x[j] > 0.0 ? x[j] : 0.0;
        if (s.act_grid) {
          tape.pre_quant[i] = y;
          for (auto& v : y) v = (*s.act_grid)(v);
        }
        break;
      }
      case LayerKind::MaxPool2x2: {
        const std::size_t C = s.in[0], H = s.in[1], Wd = s.in[2], OH = s.out[1], OW = s.out[2];
        auto& arg = tape.argmax[i];
        arg.resize(y.size());
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t ch = 0; ch < C; ++ch)
            for (std::size_t oy = 0; oy < OH; ++oy)
              for (std::size_t ox = 0; ox < OW; ++ox) {
                std::size_t best = b * n_in + ch * H * Wd + 2 * oy * Wd + 2 * ox;
                for (std::size_t dy = 0; dy < 2; ++dy)
                  for (std::size_t dx = 0; dx < 2; ++dx) {
                    const std::size_t idx = b * n_in + ch * H * Wd + (2 * oy + dy) * Wd + 2 * ox + dx;
                    if (x[idx] > x[best]) best = idx;
                  }
                const std::size_t o = b * n_out + ch * OH * OW + oy * OW + ox;
                y[o] = x[best];
                arg[o] = best;
              }
        break;
      }
      case LayerKind::Flatten:
        y = x;
        break;
      case LayerKind::Softmax: {
        for (std::size_t b = 0; b < batch; ++b) {
          const double* z = &x[b * n_in];
          const double zmax = *std::max_element(z, z + n_in);
          double sum = 0.0;
          for (std::size_t j = 0; j < n_in; ++j) sum += (y[b * n_out + j] = std::exp(z[j] - zmax));
          for (std::size_t j = 0; j < n_in; ++j) y[b * n_out + j] /= sum;
        }
        break;
      }
    }
    return y;
  }

  // Gradient of a parameter w.r.t. its latent value, given the gradient w.r.t.
  // the value used in the forward pass.
  void accumulate_param_grad(int param, const std::vector<double>& g_eff, LossAndGrads& r) const {
    const auto p = static_cast<std::size_t>(param);
    auto& out = r.grads[params_[p].name];
    const auto& grid = weight_grid_[p];
    if (!grid || !qat_ || qat_->estimator == GradientEstimator::STE) {
      for (std::size_t i = 0; i < out.size(); ++i) out[i] += g_eff[i];
      return;
    }
    // Discretizer error is measured against the clipped latent value so
    // saturated weights receive a bounded scale.
    const double lo = grid->low, hi = grid->high();
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double x = std::clamp(params_[p].values[i], lo, hi);
      out[i] += ewgs_scale(g_eff[i], x, (*grid)(x), qat_->delta);
    }
  }

  std::vector<double> backward_step(std::size_t i, const Tape& tape, std::size_t batch,
                                    std::vector<double> dy, LossAndGrads& r) const {
    const Step& s = steps_[i];
    const std::vector<double>& x = tape.acts[i];
    const std::size_t n_in = product(s.in), n_out = product(s.out);
    std::vector<double> dx(batch * n_in, 0.0);
    switch (s.kind) {
      case LayerKind::Dense: {
        const auto& W = tape.weights[static_cast<std::size_t>(s.w)];
        std::vector<double> dW(W.size(), 0.0);
        for (std::size_t b = 0; b < batch; ++b) {
          const double* g = &dy[b * n_out];
          for (std::size_t k = 0; k < n_in; ++k) {
            const double xk = x[b * n_in + k];
            const double* wk = &W[k * n_out];
            double* dwk = &dW[k * n_out];
            double acc = 0.0;
            for (std::size_t j = 0; j < n_out; ++j) {
              dwk[j] += xk * g[j];
              acc += wk[j] * g[j];
            }
            dx[b * n_in + k] = acc;
          }
        }
        accumulate_param_grad(s.w, dW, r);
        if (s.b >= 0) {
          std::vector<double> db(n_out, 0.0);
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t j = 0; j < n_out; ++j) db[j] += dy[b * n_out + j];
          accumulate_param_grad(s.b, db, r);
        }
        break;
      }
      case LayerKind::Conv2D: {
        const auto& W = tape.weights[static_cast<std::size_t>(s.w)];
        const auto& c = s.conv;
        const std::size_t H = s.in[1], Wd = s.in[2], OH = s.out[1], OW = s.out[2];
        std::vector<double> dW(W.size(), 0.0);
        std::vector<double> db(c.c_out, 0.0);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t co = 0; co < c.c_out; ++co) {
            const double* go = &dy[b * n_out + co * OH * OW];
            for (std::size_t o = 0; o < OH * OW; ++o) db[co] += go[o];
            for (std::size_t ci = 0; ci < c.c_in; ++ci) {
              const double* xi = &x[b * n_in + ci * H * Wd];
              double* dxi = &dx[b * n_in + ci * H * Wd];
              for (std::size_t kh = 0; kh < c.k; ++kh)
                for (std::size_t kw = 0; kw < c.k; ++kw) {
                  const std::size_t widx = ((co * c.c_in + ci) * c.k + kh) * c.k + kw;
                  const double w = W[widx];
                  double acc = 0.0;
                  for (std::size_t oy = 0; oy < OH; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * c.stride + kh) -
                                    static_cast<std::ptrdiff_t>(c.padding);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                    for (std::size_t ox = 0; ox < OW; ++ox) {
                      const auto ix = static_cast<std::ptrdiff_t>(ox * c.stride + kw) -
                                      static_cast<std::ptrdiff_t>(c.padding);
                      if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(Wd)) continue;
                      const std::size_t xidx =
                          static_cast<std::size_t>(iy) * Wd + static_cast<std::size_t>(ix);
                      const double g = go[oy * OW + ox];
                      acc += g * xi[xidx];
                      dxi[xidx] += g * w;
                    }
                  }
                  dW[widx] += acc;
                }
            }
          }
        accumulate_param_grad(s.w, dW, r);
        if (s.b >= 0) accumulate_param_grad(s.b, db, r);
        break;
      }
      case LayerKind::ReLU: {
        const double delta = qat_ ? (qat_->estimator == GradientEstimator::STE ? 0.0 : qat_->delta)
                                  : 0.0;
        for (std::size_t j = 0; j < dx.size(); ++j) {
          if (!(x[j] > 0.0)) continue;
          if (s.act_grid) {
            const double a = tape.pre_quant[i][j];
            if (a > s.act_grid->high()) continue;  // saturated
            dx[j] = ewgs_scale(dy[j], a, tape.acts[i + 1][j], delta);
          } else {
            dx[j] = dy[j];
          }
        }
        break;
      }
      case LayerKind::MaxPool2x2: {
        const auto& arg = tape.argmax[i];
        for (std::size_t o = 0; o < dy.size(); ++o) dx[arg[o]] += dy[o];
        break;
      }
      case LayerKind::Flatten:
        dx = std::move(dy);
        break;
      case LayerKind::Softmax: {
        const auto& y = tape.acts[i + 1];
        for (std::size_t b = 0; b < batch; ++b) {
          double dot = 0.0;
          for (std::size_t j = 0; j < n_out; ++j) dot += y[b * n_out + j] * dy[b * n_out + j];
          for (std::size_t j = 0; j < n_out; ++j)
            dx[b * n_in + j] = y[b * n_out + j] * (dy[b * n_out + j] - dot);
        }
        break;
      }
    }
    return dx;
  }

  ModelManifest manifest_;
  std::vector<Step> steps_;
  std::vector<ParamTensor> params_;
  std::vector<std::optional<UniformGrid>> weight_grid_;
  std::optional<QatConfig> qat_;
  bool final_softmax_ = false;
};

// ---------------------------------------------------------------------------
// Model-level entry points

inline std::vector<double> forward(const Model& model, std::span<const float> batch_inputs,
                                   std::size_t batch) {
  return Network(model).forward(batch_inputs, batch);
}

inline LossAndGrads backward(const Model& model, std::span<const float> batch_inputs,
                             std::span<const int> labels) {
  return Network(model).backward(batch_inputs, labels);
}

inline std::size_t argmax_row(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < row.size(); ++c)
    if (row[c] > row[best]) best = c;
  return best;
}

inline void check_compatible(const Network& net, const Dataset& data) {
  data.validate();
  if (data.sample_shape != net.manifest().input_shape)
    throw Error("dataset sample shape does not match the model input shape");
  if (data.num_classes != net.num_classes())
    throw Error("dataset class count does not match the model");
}

inline double evaluate(const Network& net, const Dataset& data) {
  check_compatible(net, data);
  constexpr std::size_t chunk = 256;
  std::size_t correct = 0;
  const std::size_t C = net.num_classes();
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    const std::size_t n = std::min(chunk, data.size() - start);
    const auto scores = net.forward(
        std::span(data.inputs).subspan(start * data.sample_size(), n * data.sample_size()), n);
    for (std::size_t b = 0; b < n; ++b)
      if (static_cast<int>(argmax_row(std::span(scores).subspan(b * C, C))) ==
          data.labels[start + b])
        ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

inline double evaluate(const Model& model, const Dataset& data) {
  return evaluate(Network(model), data);
}

// One optimiser state bound to a Network; GWK drives it epoch by epoch.
class Trainer {
 public:
  Trainer(const Model& model, const TrainConfig& cfg,
          const std::optional<QatConfig>& qat = std::nullopt)
      : net_(model), cfg_(cfg) {
    cfg_.validate();
    if (qat) net_.enable_qat(*qat);
    for (const auto& p : net_.params()) velocity_[p.name].assign(p.values.size(), 0.0);
  }

  Network& network() { return net_; }
  const Network& network() const { return net_; }

  // One pass over `data` in a seed-determined order. Returns epoch metrics and
  // the |gradient| sums of this epoch.
  std::pair<EpochMetrics, GradientStats> run_epoch(const Dataset& data, std::size_t epoch) {
    check_compatible(net_, data);
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng = make_rng(cfg_.seed, "train/shuffle", epoch);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);

    EpochMetrics m;
    m.epoch = epoch;
    GradientStats stats;
    std::size_t correct = 0;
    const std::size_t sz = data.sample_size();
    std::vector<float> xb;
    std::vector<int> yb;
    for (std::size_t start = 0, batch_idx = 0; start < order.size(); start += cfg_.batch_size, ++batch_idx) {
      const std::size_t n = std::min(cfg_.batch_size, order.size() - start);
      xb.resize(n * sz);
      yb.resize(n);
      for (std::size_t b = 0; b < n; ++b) {
        const auto s = data.sample(order[start + b]);
        std::copy(s.begin(), s.end(), xb.begin() + static_cast<std::ptrdiff_t>(b * sz));
        yb[b] = data.labels[order[start + b]];
      }
      LossAndGrads r = net_.backward(xb, yb);
      if (!std::isfinite(r.loss)) throw TrainingDiverged(epoch, batch_idx, r.loss);
      m.loss += r.loss * static_cast<double>(n);
      correct += r.correct;
      stats.add(r.grads);
      for (auto& p : net_.params()) {
        auto& v = velocity_[p.name];
        const auto& g = r.grads.at(p.name);
        for (std::size_t i = 0; i < v.size(); ++i) {
          v[i] = cfg_.momentum * v[i] - cfg_.learning_rate * g[i];
          p.values[i] += v[i];
          if (!std::isfinite(p.values[i])) throw TrainingDiverged(epoch, batch_idx, p.name);
        }
      }
    }
    m.loss /= static_cast<double>(data.size());
    m.train_accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
    return {m, std::move(stats)};
  }

 private:
  Network net_;
  TrainConfig cfg_;
  std::map<std::string, std::vector<double>> velocity_;
};

struct TrainResult {
  Model model;
  GradientStats grad_stats;  // final epoch only
  std::vector<EpochMetrics> metrics;
};

inline TrainResult train(const Model& model, const Dataset& data, const TrainConfig& cfg,
                         const std::optional<QatConfig>& qat = std::nullopt) {
  if (data.split != Split::Train) throw Error("train: dataset split must be Train");
  Trainer trainer(model, cfg, qat);
  TrainResult r;
  r.model = model;
  if (cfg.epochs == 0) return r;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    auto [m, stats] = trainer.run_epoch(data, e);
    r.metrics.push_back(m);
    r.grad_stats = std::move(stats);
  }
  r.model = trainer.network().export_model(model);
  return r;
}

// Sum of |gradient| over one pass of `data` without updating the weights.
inline GradientStats collect_gradients(const Model& model, const Dataset& data,
                                       std::size_t batch_size = 32) {
  Network net(model);
  check_compatible(net, data);
  GradientStats stats;
  const std::size_t sz = data.sample_size();
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, data.size() - start);
    const auto r = net.backward(std::span(data.inputs).subspan(start * sz, n * sz),
                                std::span(data.labels).subspan(start, n));
    stats.add(r.grads);
  }
  return stats;
}

// Clip high for every ReLU: the given percentile of its (non-negative)
// activations over `data`.
inline std::map<std::string, double> calibrate_activation_clips(const Model& model,
                                                                const Dataset& data,
                                                                double pct = 99.0,
                                                                std::size_t max_samples = 512) {
  Model plain = model;
  plain.manifest.act_quant.reset();
  const Network net(plain);
  const Dataset d = data.head(max_samples);
  check_compatible(net, d);
  std::map<std::string, double> clips;
  for (auto& [name, acts] : net.relu_outputs(d.inputs, d.size())) {
    double c = percentile(std::move(acts), pct);
    clips[name] = c > 1e-6 ? c : 1e-6;
  }
  return clips;
}

}  // namespace bqkit
