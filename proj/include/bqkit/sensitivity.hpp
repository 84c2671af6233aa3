#pragma once

// Perturbation experiments ranking layers and bins by their accuracy impact.
// Every row evaluates its own perturbed copy of the model; the input model is
// never modified.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "bqkit/common.hpp"
#include "bqkit/data.hpp"
#include "bqkit/net.hpp"
#include "bqkit/tensor_store.hpp"

namespace bqkit {

enum class PerturbKind { GaussianLayer, RelMagnitudeBin, RelMagnitudeLayerU8, GradientTopK, RandomK };

inline const char* to_string(PerturbKind k) {
  switch (k) {
    case PerturbKind::GaussianLayer: return "GaussianLayer";
    case PerturbKind::RelMagnitudeBin: return "RelMagnitudeBin";
    case PerturbKind::RelMagnitudeLayerU8: return "RelMagnitudeLayerU8";
    case PerturbKind::GradientTopK: return "GradientTopK";
    case PerturbKind::RandomK: return "RandomK";
  }
  return "?";
}

// Only the fields relevant to `kind` are set.
struct PerturbSpec {
  PerturbKind kind = PerturbKind::GaussianLayer;
  std::optional<double> std;
  std::optional<double> rel;
  std::optional<double> fraction;
  std::uint64_t seed = 0;

  static PerturbSpec gaussian(double sd, std::uint64_t seed) {
    return {PerturbKind::GaussianLayer, sd, {}, {}, seed};
  }
  static PerturbSpec bin(double rel, std::uint64_t seed) {
    return {PerturbKind::RelMagnitudeBin, {}, rel, {}, seed};
  }
  static PerturbSpec layer_rel(double rel, std::uint64_t seed) {
    return {PerturbKind::RelMagnitudeLayerU8, {}, rel, {}, seed};
  }
  static PerturbSpec top_k(double sd, double fraction, std::uint64_t seed) {
    return {PerturbKind::GradientTopK, sd, {}, fraction, seed};
  }
  static PerturbSpec random_k(double sd, double fraction, std::uint64_t seed) {
    return {PerturbKind::RandomK, sd, {}, fraction, seed};
  }
};

struct SensitivityRow {
  std::string layer;
  std::optional<std::size_t> bin;
  PerturbSpec spec;
  double baseline = 0.0;
  double perturbed = 0.0;
  double delta = 0.0;  // baseline - perturbed
};

struct SensitivityReport {
  std::vector<SensitivityRow> rows;

  void append(const SensitivityReport& other) {
    rows.insert(rows.end(), other.rows.begin(), other.rows.end());
  }

  std::string to_csv() const {
    std::ostringstream os;
    os << "layer,bin,kind,std,rel,fraction,seed,baseline,perturbed,delta\n";
    auto opt = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string(); };
    for (const auto& r : rows) {
      os << r.layer << ',' << (r.bin ? std::to_string(*r.bin) : std::string()) << ','
         << to_string(r.spec.kind) << ',' << opt(r.spec.std) << ',' << opt(r.spec.rel) << ','
         << opt(r.spec.fraction) << ',' << r.spec.seed << ',' << format_double(r.baseline) << ','
         << format_double(r.perturbed) << ',' << format_double(r.delta) << '\n';
    }
    return os.str();
  }
};

// Bin index of v for strictly increasing edges, bins half-open [e_i, e_{i+1}).
// Values below the first edge map to bin 0, values at or above the last to the
// last bin.
inline std::size_t bin_of(std::span<const double> edges, double v) {
  const std::size_t bins = edges.size() - 1;
  const auto it = std::upper_bound(edges.begin(), edges.end(), v);
  const auto pos = static_cast<std::size_t>(it - edges.begin());
  if (pos == 0) return 0;
  return std::min(pos - 1, bins - 1);
}

// Value of a weight as used for binning: the stored level for u8 tensors, the
// float value otherwise.
inline std::vector<double> binning_values(const TensorRecord& t) {
  if (t.dtype == DType::U8) return {t.levels.begin(), t.levels.end()};
  return {t.values.begin(), t.values.end()};
}

// Layers carrying weights, by descending parameter count (ties keep manifest order).
inline std::vector<std::string> layers_by_param_count(const Model& model) {
  std::vector<const LayerDesc*> layers = model.weight_layers();
  std::stable_sort(layers.begin(), layers.end(), [&](const LayerDesc* a, const LayerDesc* b) {
    return model.at(*a->weight_ref).size() > model.at(*b->weight_ref).size();
  });
  std::vector<std::string> names;
  for (const auto* l : layers) names.push_back(l->name);
  return names;
}

namespace detail {

// Copy of `model` with the weights of `layer` replaced by edit(real values).
template <class Edit>
Model perturbed_copy(const Model& model, const std::string& layer, Edit&& edit) {
  Model copy = model;
  auto& t = copy.weights_of(layer);
  std::vector<float> v = t.to_float();
  edit(v);
  t = TensorRecord::f32(t.name, t.shape, std::move(v));
  return copy;
}

inline void require_layer(const Model& model, const std::string& layer) {
  const auto* l = model.manifest.find_layer(layer);
  if (!l) throw Error("unknown layer: " + layer);
  if (!l->weight_ref) throw Error("layer " + layer + " has no weights to perturb");
}

}  // namespace detail

inline SensitivityReport gaussian_layer_sweep(const Model& model, const Dataset& data,
                                              const std::vector<std::string>& layers, double noise_std,
                                              std::uint64_t seed) {
  if (!(noise_std >= 0.0)) throw Error("gaussian_layer_sweep: std must be >= 0");
  for (const auto& l : layers) detail::require_layer(model, l);
  const double baseline = evaluate(model, data);
  SensitivityReport report;
  report.rows.resize(layers.size());
  parallel_for(layers.size(), [&](std::size_t i) {
    Rng rng = make_rng(seed, "sens/gaussian/" + layers[i]);
    const Model p = detail::perturbed_copy(model, layers[i], [&](std::vector<float>& w) {
      for (auto& x : w) x = static_cast<float>(x + noise_std * standard_normal(rng));
    });
    const double acc = noise_std == 0.0 ? baseline : evaluate(p, data);
    report.rows[i] = {layers[i], {}, PerturbSpec::gaussian(noise_std, seed), baseline, acc, baseline - acc};
  });
  return report;
}

// Multiplies every weight of each layer by (1 +/- rel), sign drawn per element.
inline SensitivityReport layer_magnitude_sweep(const Model& model, const Dataset& data,
                                               const std::vector<std::string>& layers, double rel,
                                               std::uint64_t seed) {
  for (const auto& l : layers) detail::require_layer(model, l);
  const double baseline = evaluate(model, data);
  SensitivityReport report;
  report.rows.resize(layers.size());
  parallel_for(layers.size(), [&](std::size_t i) {
    Rng rng = make_rng(seed, "sens/layer-rel/" + layers[i]);
    const Model p = detail::perturbed_copy(model, layers[i], [&](std::vector<float>& w) {
      for (auto& x : w) x = static_cast<float>(x * (1.0 + (uniform01(rng) < 0.5 ? -rel : rel)));
    });
    const double acc = rel == 0.0 ? baseline : evaluate(p, data);
    report.rows[i] = {layers[i], {}, PerturbSpec::layer_rel(rel, seed), baseline, acc, baseline - acc};
  });
  return report;
}

// One row per bin: weights whose binning value lies in the bin are multiplied
// by (1 +/- rel) with a per-element random sign.
inline SensitivityReport bin_magnitude_sweep(const Model& model, const Dataset& data,
                                             const std::string& layer,
                                             const std::vector<double>& edges, double rel,
                                             std::uint64_t seed,
                                             std::optional<double> baseline_acc = std::nullopt) {
  detail::require_layer(model, layer);
  if (edges.size() < 2) throw Error("bin_magnitude_sweep: need at least one bin");
  for (std::size_t i = 1; i < edges.size(); ++i)
    if (!(edges[i - 1] < edges[i])) throw Error("bin_magnitude_sweep: edges must increase strictly");
  if (!(rel >= 0.0)) throw Error("bin_magnitude_sweep: rel must be >= 0");
  const TensorRecord& t = model.weights_of(layer);
  if (t.size() == 0) throw Error("bin_magnitude_sweep: empty layer");
  const auto values = binning_values(t);
  std::vector<std::size_t> label(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) label[i] = bin_of(edges, values[i]);

  const double baseline = baseline_acc ? *baseline_acc : evaluate(model, data);
  const std::size_t bins = edges.size() - 1;
  SensitivityReport report;
  report.rows.resize(bins);
  parallel_for(bins, [&](std::size_t b) {
    Rng rng = make_rng(seed, "sens/bin/" + layer, b);
    bool touched = false;
    const Model p = detail::perturbed_copy(model, layer, [&](std::vector<float>& w) {
      for (std::size_t i = 0; i < w.size(); ++i) {
        if (label[i] != b) continue;
        touched = true;
        w[i] = static_cast<float>(w[i] * (1.0 + (uniform01(rng) < 0.5 ? -rel : rel)));
      }
    });
    const double acc = (!touched || rel == 0.0) ? baseline : evaluate(p, data);
    report.rows[b] = {layer, b, PerturbSpec::bin(rel, seed), baseline, acc, baseline - acc};
  });
  return report;
}

// Indices of the `k` largest entries of `score`, ties toward lower index.
inline std::vector<std::size_t> top_k_indices(std::span<const double> score, std::size_t k) {
  std::vector<std::size_t> idx(score.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
  idx.resize(std::min(k, idx.size()));
  return idx;
}

inline std::vector<std::size_t> random_k_indices(std::size_t n, std::size_t k, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  k = std::min(k, n);
  for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + uniform_index(rng, n - i)]);
  idx.resize(k);
  return idx;
}

// Per layer two rows: RandomK (uniformly chosen fraction of the weights gets
// N(0, std) noise) and GradientTopK (the fraction with largest accumulated
// |gradient| gets noise of the same std from an independent stream).
inline SensitivityReport gradient_vs_random(const Model& model, const Dataset& data,
                                            const GradientStats& grads,
                                            const std::vector<std::string>& layers,
                                            double noise_std = 0.05, double fraction = 0.5,
                                            std::uint64_t seed = 0) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw Error("gradient_vs_random: fraction must be in (0,1]");
  if (!(noise_std >= 0.0)) throw Error("gradient_vs_random: std must be >= 0");
  for (const auto& l : layers) {
    detail::require_layer(model, l);
    const auto& name = *model.layer(l).weight_ref;
    auto it = grads.abs_sum.find(name);
    if (it == grads.abs_sum.end() || it->second.size() != model.at(name).size())
      throw Error("gradient_vs_random: missing gradients for " + name);
  }
  const double baseline = evaluate(model, data);
  SensitivityReport report;
  report.rows.resize(2 * layers.size());
  parallel_for(2 * layers.size(), [&](std::size_t job) {
    const std::string& layer = layers[job / 2];
    const bool by_gradient = job % 2 == 1;
    const auto& g = grads.abs_sum.at(*model.layer(layer).weight_ref);
    const auto k = static_cast<std::size_t>(
        std::max(1.0, std::round(fraction * static_cast<double>(g.size()))));
    std::vector<std::size_t> chosen;
    if (by_gradient) {
      chosen = top_k_indices(g, k);
    } else {
      Rng select = make_rng(seed, "sens/random-select/" + layer);
      chosen = random_k_indices(g.size(), k, select);
    }
    Rng noise = make_rng(seed, by_gradient ? "sens/noise-grad/" + layer : "sens/noise-random/" + layer);
    const Model p = detail::perturbed_copy(model, layer, [&](std::vector<float>& w) {
      for (auto i : chosen) w[i] = static_cast<float>(w[i] + noise_std * standard_normal(noise));
    });
    const double acc = noise_std == 0.0 ? baseline : evaluate(p, data);
    const PerturbSpec spec = by_gradient ? PerturbSpec::top_k(noise_std, fraction, seed)
                                         : PerturbSpec::random_k(noise_std, fraction, seed);
    report.rows[job] = {layer, {}, spec, baseline, acc, baseline - acc};
  });
  return report;
}

}  // namespace bqkit
