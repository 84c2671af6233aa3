#pragma once

// Bin & Quant: sensitivity-guided binning of a layer's weights into a small
// codebook of representative values, gated per layer by the accuracy drop it
// causes. Works on float32 layers and on affine uint8 layers (binned on their
// stored levels).

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "bqkit/common.hpp"
#include "bqkit/data.hpp"
#include "bqkit/net.hpp"
#include "bqkit/sensitivity.hpp"
#include "bqkit/tensor_store.hpp"

namespace bqkit {

// Inverse standard normal CDF (Wichura, AS241 PPND16; relative error ~1e-16).
inline double inverse_normal_cdf(double p) {
  if (!(p > 0.0 && p < 1.0)) {
    if (p == 0.0) return -std::numeric_limits<double>::infinity();
    if (p == 1.0) return std::numeric_limits<double>::infinity();
    throw Error("inverse_normal_cdf: p outside [0,1]");
  }
  const double q = p - 0.5;
  if (std::abs(q) <= 0.425) {
    const double r = 0.180625 - q * q;
    return q *
           (((((((2509.0809287301226727 * r + 33430.575583588128105) * r + 67265.770927008700853) * r +
                45921.953931549871457) * r + 13731.693765509461125) * r + 1971.5909503065514427) * r +
             133.14166789178437745) * r + 3.387132872796366608) /
           (((((((5226.495278852545925 * r + 28729.085735721942674) * r + 39307.89580009271061) * r +
                21213.794301586595867) * r + 5394.1960214247511077) * r + 687.1870074920579083) * r +
             42.313330701600911252) * r + 1.0);
  }
  double r = q < 0.0 ? p : 1.0 - p;
  r = std::sqrt(-std::log(r));
  double x;
  if (r <= 5.0) {
    r -= 1.6;
    x = (((((((7.7454501427834140764e-4 * r + 0.0227238449892691845833) * r + 0.24178072517745061177) * r +
            1.27045825245236838258) * r + 3.64784832476320460504) * r + 5.7694972214606914055) * r +
          4.6303378461565452959) * r + 1.42343711074968357734) /
        (((((((1.05075007164441684324e-9 * r + 5.475938084995344946e-4) * r + 0.0151986665636164571966) * r +
             0.14810397642748007459) * r + 0.68976733498510000455) * r + 1.6763848301838038494) * r +
          2.05319162663775882187) * r + 1.0);
  } else {
    r -= 5.0;
    x = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r + 0.0012426609473880784386) * r +
            0.026532189526576123093) * r + 0.29656057182850489123) * r + 1.7848265399172913358) * r +
          5.4637849111641143699) * r + 6.6579046435011037772) /
        (((((((2.04426310338993978564e-15 * r + 1.4215117583164458887e-7) * r + 1.8463183175100546818e-5) * r +
             7.868691311456132591e-4) * r + 0.0148753612908506148525) * r + 0.13692988092273580531) * r +
          0.59983220655588793769) * r + 1.0);
  }
  return q < 0.0 ? -x : x;
}

struct BinSpec {
  std::vector<double> edges;            // strictly increasing, size b+1
  std::vector<double> representatives;  // size b once assigned
  std::vector<std::size_t> member_counts;

  std::size_t bins() const { return edges.empty() ? 0 : edges.size() - 1; }
  bool operator==(const BinSpec&) const = default;

  void validate_edges() const {
    if (edges.size() < 2) throw Error("bin spec needs at least one bin");
    for (std::size_t i = 1; i < edges.size(); ++i)
      if (!(edges[i - 1] < edges[i])) throw Error("bin edges must be strictly increasing");
  }
};

constexpr double kInf = std::numeric_limits<double>::infinity();

// Interior edges at mean + std * Phi^-1(k/b), outer edges +/- infinity.
inline BinSpec initial_bins_invcdf(double mean, double std_dev, std::size_t b = 8) {
  if (!(std_dev > 0.0)) throw Error("initial_bins_invcdf: std must be > 0");
  if (b < 2) throw Error("initial_bins_invcdf: need at least 2 bins");
  BinSpec s;
  s.edges.push_back(-kInf);
  for (std::size_t k = 1; k < b; ++k)
    s.edges.push_back(mean + std_dev * inverse_normal_cdf(static_cast<double>(k) / b));
  s.edges.push_back(kInf);
  return s;
}

struct U8InitialBins {
  BinSpec spec;
  bool degenerate = false;  // constant buffer, single bin
};

inline std::pair<double, double> mean_std(std::span<const double> v) {
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  return {mean, std::sqrt(var / static_cast<double>(v.size()))};
}

// Initial bins for uint8 levels from their mean and std; interior edges are
// clamped to [0, 255] and deduplicated.
inline U8InitialBins initial_bins_u8(std::span<const std::uint8_t> levels, std::size_t b = 8) {
  if (levels.empty()) throw Error("initial_bins_u8: empty buffer");
  if (b < 2) throw Error("initial_bins_u8: need at least 2 bins");
  const std::vector<double> v(levels.begin(), levels.end());
  const auto [mean, sd] = mean_std(v);
  U8InitialBins r;
  r.spec.edges.push_back(-kInf);
  if (sd == 0.0) {
    r.degenerate = true;
  } else {
    for (std::size_t k = 1; k < b; ++k) {
      const double e = std::clamp(mean + sd * inverse_normal_cdf(static_cast<double>(k) / b), 0.0, 255.0);
      if (e > r.spec.edges.back()) r.spec.edges.push_back(e);
    }
  }
  r.spec.edges.push_back(kInf);
  return r;
}

struct Assignment {
  BinSpec spec;
  std::vector<std::uint32_t> labels;
};

// Labels by half-open interval membership. Non-empty bins are represented by
// their member mean (rounded half away from zero when `integer_levels`), empty
// bins by a point inside the bin.
inline Assignment assign_and_represent(std::span<const double> values, std::vector<double> edges,
                                       bool integer_levels = false) {
  Assignment a;
  a.spec.edges = std::move(edges);
  a.spec.validate_edges();
  const std::size_t b = a.spec.bins();
  a.labels.resize(values.size());
  std::vector<double> sums(b, 0.0);
  a.spec.member_counts.assign(b, 0);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto l = bin_of(a.spec.edges, values[i]);
    a.labels[i] = static_cast<std::uint32_t>(l);
    sums[l] += values[i];
    ++a.spec.member_counts[l];
  }
  a.spec.representatives.resize(b);
  const auto& e = a.spec.edges;
  for (std::size_t i = 0; i < b; ++i) {
    if (a.spec.member_counts[i] > 0) {
      const double mean = sums[i] / static_cast<double>(a.spec.member_counts[i]);
      a.spec.representatives[i] = integer_levels ? std::round(mean) : mean;
    } else if (std::isfinite(e[i]) && std::isfinite(e[i + 1])) {
      a.spec.representatives[i] = 0.5 * (e[i] + e[i + 1]);
    } else if (std::isfinite(e[i])) {
      a.spec.representatives[i] = e[i];
    } else if (std::isfinite(e[i + 1])) {
      const double width = (i + 2 < e.size() && std::isfinite(e[i + 2])) ? e[i + 2] - e[i + 1] : 1.0;
      a.spec.representatives[i] = e[i + 1] - width;
    } else {
      a.spec.representatives[i] = 0.0;
    }
  }
  return a;
}

// Merges empty bins into a neighbour until every bin has members (or one bin
// remains). Outer +/- infinity edges are kept.
inline std::vector<double> drop_empty_bins(std::span<const double> values, std::vector<double> edges) {
  for (;;) {
    const std::size_t b = edges.size() - 1;
    if (b <= 1) return edges;
    std::vector<std::size_t> counts(b, 0);
    for (double v : values) ++counts[bin_of(edges, v)];
    const auto it = std::find(counts.begin(), counts.end(), std::size_t{0});
    if (it == counts.end()) return edges;
    const auto i = static_cast<std::size_t>(it - counts.begin());
    edges.erase(edges.begin() + static_cast<std::ptrdiff_t>(i + 1 < b ? i + 1 : i));
  }
}

// Sum over bins of squared deviations from the representative.
inline double reconstruction_error(std::span<const double> values, const Assignment& a) {
  double err = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double d = values[i] - a.spec.representatives[a.labels[i]];
    err += d * d;
  }
  return err;
}

// Splits the bin with the largest accuracy delta (ties toward the lower index)
// into two. Bounded bins split at their midpoint; unbounded bins, and bounded
// bins whose midpoint would leave one half empty, split at the midpoint of
// their observed member range. Bins with fewer than two distinct members cannot
// split; if no bin can, the spec is returned unchanged.
inline BinSpec split_most_sensitive(const BinSpec& spec, const SensitivityReport& report,
                                    std::span<const double> values) {
  spec.validate_edges();
  const std::size_t b = spec.bins();
  std::vector<double> delta(b, -kInf);
  std::vector<bool> seen(b, false);
  for (const auto& row : report.rows) {
    if (!row.bin || *row.bin >= b) throw Error("split_most_sensitive: report row outside the bin range");
    delta[*row.bin] = row.delta;
    seen[*row.bin] = true;
  }
  if (std::find(seen.begin(), seen.end(), false) != seen.end())
    throw Error("split_most_sensitive: report must have one row per bin");

  std::vector<double> lo(b, kInf), hi(b, -kInf);
  for (double v : values) {
    const auto l = bin_of(spec.edges, v);
    lo[l] = std::min(lo[l], v);
    hi[l] = std::max(hi[l], v);
  }
  std::optional<std::size_t> chosen;
  for (std::size_t i = 0; i < b; ++i) {
    if (!(lo[i] < hi[i])) continue;  // empty or a single distinct value
    if (!chosen || delta[i] > delta[*chosen]) chosen = i;
  }
  if (!chosen) return spec;
  const std::size_t i = *chosen;
  const double a = spec.edges[i], c = spec.edges[i + 1];
  double cut = 0.5 * (lo[i] + hi[i]);
  if (std::isfinite(a) && std::isfinite(c)) {
    const double mid = 0.5 * (a + c);
    if (lo[i] < mid && mid <= hi[i]) cut = mid;
  }
  // `cut` lies in (lo, hi], so both halves keep at least one member.
  if (!(cut > lo[i])) cut = hi[i];
  BinSpec out;
  out.edges = spec.edges;
  out.edges.insert(out.edges.begin() + static_cast<std::ptrdiff_t>(i + 1), cut);
  return out;
}

// ---------------------------------------------------------------------------
// Layer and model compression

enum class BinInitKind { InvCdf, MeanStdU8 };

struct BqConfig {
  std::size_t max_bins = 16;
  std::size_t initial_bins = 8;
  double per_bin_drop_limit = 0.02;
  double layer_drop_limit = 0.01;
  BinInitKind init = BinInitKind::InvCdf;
  std::optional<double> init_mean;  // InvCdf: fitted from the layer when unset
  std::optional<double> init_std;
  std::size_t eval_samples = 1000;
  std::size_t layers_to_try = 1;
  std::optional<double> rel;  // per-bin perturbation; 0.5 for f32, 0.03 for u8
  std::uint64_t seed = 0;
  bool share_bins = false;    // reuse the first accepted layer's bins

  void validate() const {
    if (max_bins < 2 || max_bins > 65536) throw Error("bq: max_bins must be in [2, 65536]");
    if (initial_bins < 1) throw Error("bq: initial_bins must be positive");
    if (eval_samples == 0) throw Error("bq: eval_samples must be positive");
    if (init_std && !(*init_std > 0.0)) throw Error("bq: init std must be > 0");
  }
  double rel_for(DType d) const { return rel ? *rel : (d == DType::U8 ? 0.03 : 0.5); }
};

struct BqIteration {
  std::size_t bins = 0;
  double max_delta = 0.0;
  std::size_t split_bin = 0;
};

struct BqLayerResult {
  std::string layer;
  DType dtype = DType::F32;
  BinSpec bin_spec;
  std::vector<std::uint32_t> labels;
  double accuracy_before = 0.0;
  double accuracy_after = 0.0;
  bool accepted = false;
  bool degenerate = false;
  bool shared = false;
  std::size_t evaluations = 0;
  std::vector<BqIteration> trace;

  double drop() const { return accuracy_before - accuracy_after; }
};

// Copy of `model` with `layer`'s weights replaced by bin representatives.
inline Model substitute_bins(const Model& model, const std::string& layer, const BinSpec& spec,
                             std::span<const std::uint32_t> labels) {
  Model out = model;
  auto& t = out.weights_of(layer);
  if (labels.size() != t.size()) throw Error("substitute_bins: label count mismatch");
  if (t.dtype == DType::U8) {
    for (std::size_t i = 0; i < labels.size(); ++i)
      t.levels[i] = static_cast<std::uint8_t>(std::clamp(spec.representatives[labels[i]], 0.0, 255.0));
  } else {
    for (std::size_t i = 0; i < labels.size(); ++i)
      t.values[i] = static_cast<float>(spec.representatives[labels[i]]);
  }
  return out;
}

namespace detail {

inline bool all_equal(std::span<const double> v) {
  return std::adjacent_find(v.begin(), v.end(), std::not_equal_to<>()) == v.end();
}

inline void finish_layer(const Model& model, const Dataset& eval, const BqConfig& cfg,
                         BqLayerResult& r) {
  r.accuracy_after = evaluate(substitute_bins(model, r.layer, r.bin_spec, r.labels), eval);
  ++r.evaluations;
  r.accepted = r.degenerate || r.drop() <= cfg.layer_drop_limit;
}

}  // namespace detail

inline BqLayerResult compress_layer(const Model& model, const Dataset& data, const std::string& layer,
                                    const BqConfig& cfg,
                                    std::optional<double> baseline_acc = std::nullopt) {
  cfg.validate();
  const TensorRecord& t = model.weights_of(layer);
  const Dataset eval = data.head(cfg.eval_samples);
  const auto values = binning_values(t);
  const bool integer_levels = t.dtype == DType::U8;

  BqLayerResult r;
  r.layer = layer;
  r.dtype = t.dtype;
  r.accuracy_before = baseline_acc ? *baseline_acc : evaluate(model, eval);

  std::vector<double> edges;
  const std::size_t b0 = std::max<std::size_t>(2, std::min(cfg.initial_bins, cfg.max_bins));
  if (detail::all_equal(values)) {
    r.degenerate = true;
    edges = {-kInf, kInf};
  } else if (t.dtype == DType::U8) {
    edges = initial_bins_u8(t.levels, b0).spec.edges;
  } else if (cfg.init == BinInitKind::MeanStdU8) {
    throw Error("compress_layer: MeanStdU8 init needs a u8 layer");
  } else {
    const auto [mean, sd] = mean_std(values);
    edges = initial_bins_invcdf(cfg.init_mean.value_or(mean), cfg.init_std.value_or(sd), b0).edges;
  }

  const double rel = cfg.rel_for(t.dtype);
  for (std::size_t iter = 0;; ++iter) {
    edges = drop_empty_bins(values, std::move(edges));
    if (r.degenerate || edges.size() - 1 >= cfg.max_bins) break;
    const auto report = bin_magnitude_sweep(model, eval, layer, edges, rel,
                                            derive_seed(cfg.seed, "bq/" + layer, iter),
                                            r.accuracy_before);
    r.evaluations += report.rows.size();
    double max_delta = -kInf;
    for (const auto& row : report.rows) max_delta = std::max(max_delta, row.delta);
    BqIteration it{edges.size() - 1, max_delta, 0};
    if (max_delta < cfg.per_bin_drop_limit) {
      r.trace.push_back(it);
      break;
    }
    BinSpec current;
    current.edges = edges;
    BinSpec next = split_most_sensitive(current, report, values);
    if (next.edges == edges) {
      r.trace.push_back(it);
      break;
    }
    while (next.edges[it.split_bin + 1] == edges[it.split_bin + 1]) ++it.split_bin;
    r.trace.push_back(it);
    edges = std::move(next.edges);
  }

  Assignment a = assign_and_represent(values, std::move(edges), integer_levels);
  r.bin_spec = std::move(a.spec);
  r.labels = std::move(a.labels);
  detail::finish_layer(model, eval, cfg, r);
  return r;
}

// Gate check of `layer` binned with a donor's edges and representatives.
inline BqLayerResult apply_shared_bins(const Model& model, const Dataset& data, const std::string& layer,
                                       const BinSpec& donor, const BqConfig& cfg,
                                       std::optional<double> baseline_acc = std::nullopt) {
  cfg.validate();
  const TensorRecord& t = model.weights_of(layer);
  const Dataset eval = data.head(cfg.eval_samples);
  const auto values = binning_values(t);
  BqLayerResult r;
  r.layer = layer;
  r.dtype = t.dtype;
  r.shared = true;
  r.accuracy_before = baseline_acc ? *baseline_acc : evaluate(model, eval);
  r.bin_spec = donor;
  r.bin_spec.member_counts.assign(donor.bins(), 0);
  r.labels.resize(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto l = bin_of(donor.edges, values[i]);
    r.labels[i] = static_cast<std::uint32_t>(l);
    ++r.bin_spec.member_counts[l];
  }
  detail::finish_layer(model, eval, cfg, r);
  return r;
}

struct BqModelResult {
  std::vector<BqLayerResult> layers;  // visit order
  Model compressed;
  double baseline_accuracy = 0.0;
  double final_accuracy = 0.0;

  std::vector<const BqLayerResult*> accepted() const {
    std::vector<const BqLayerResult*> out;
    for (const auto& l : layers)
      if (l.accepted) out.push_back(&l);
    return out;
  }
};

// Visits layers by descending parameter count (up to cfg.layers_to_try);
// accepted layers are substituted before the next layer is tried, so each
// gate is measured against the model compressed so far.
inline BqModelResult compress_model(const Model& model, const Dataset& data, const BqConfig& cfg) {
  cfg.validate();
  const Dataset eval = data.head(cfg.eval_samples);
  BqModelResult out;
  out.compressed = model;
  out.baseline_accuracy = evaluate(model, eval);
  double current = out.baseline_accuracy;
  const auto order = layers_by_param_count(model);
  const std::size_t n = std::min(cfg.layers_to_try, order.size());
  std::optional<BinSpec> donor;
  std::optional<DType> donor_dtype;
  for (std::size_t i = 0; i < n; ++i) {
    const std::string& layer = order[i];
    const DType dt = out.compressed.weights_of(layer).dtype;
    BqLayerResult r = (cfg.share_bins && donor && donor_dtype == dt)
                          ? apply_shared_bins(out.compressed, data, layer, *donor, cfg, current)
                          : compress_layer(out.compressed, data, layer, cfg, current);
    if (r.accepted) {
      out.compressed = substitute_bins(out.compressed, layer, r.bin_spec, r.labels);
      current = evaluate(out.compressed, eval);
      if (!donor) {
        donor = r.bin_spec;
        donor_dtype = dt;
      }
    }
    out.layers.push_back(std::move(r));
  }
  out.final_accuracy = current;
  return out;
}

// Quantizes every f32 weight tensor to affine uint8 with min/max parameters;
// biases stay float.
inline Model quantize_weights_u8(const Model& model) {
  Model out = model;
  for (const auto* l : model.weight_layers()) {
    auto& t = out.at(*l->weight_ref);
    if (t.dtype == DType::F32) t = quantize_affine(t, choose_quant_params(t.values));
  }
  return out;
}

}  // namespace bqkit
