#pragma once

// Gradient-weighted k-means (GWK) over product-quantized weight blocks, and the
// training loop that alternates EWGS-quantized epochs with re-clustering.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "bqkit/common.hpp"
#include "bqkit/data.hpp"
#include "bqkit/net.hpp"
#include "bqkit/qat.hpp"
#include "bqkit/tensor_store.hpp"

namespace bqkit {

struct PQConfig {
  std::size_t d_conv = 4;    // block size for regular conv and dense layers
  std::size_t d_pw = 2;      // block size for point-wise conv layers
  std::size_t n_clusters = 16;
  std::size_t epochs_between_cluster = 1;
  bool uniform_weights = false;   // ablation: plain k-means means instead of gradient weighting
  bool exempt_first_last = false;
  std::size_t max_iter = 100;
  double tol = 1e-6;

  void validate() const {
    if (d_conv == 0 || d_pw == 0) throw Error("pq: block sizes must be positive");
    if (n_clusters == 0) throw Error("pq: n_clusters must be positive");
    if (epochs_between_cluster == 0) throw Error("pq: epochs_between_cluster must be positive");
  }
  std::size_t block_size(const LayerDesc& l) const { return l.pointwise ? d_pw : d_conv; }
};

// d x n_blocks matrix stored block-major: block j occupies [j*d, (j+1)*d).
struct BlockMatrix {
  std::size_t d = 1;
  std::size_t n_blocks = 0;
  std::vector<double> data;
  std::size_t pad = 0;            // zero elements appended to the last block
  std::string layer;
  Shape original_shape;
  std::string layout;             // how the tensor was flattened before blocking

  std::size_t weight_count() const { return d * n_blocks - pad; }
  std::span<const double> block(std::size_t j) const { return std::span(data).subspan(j * d, d); }
};

inline const char* block_layout(LayerKind kind) {
  // A [C_out, C_in, k, k] conv tensor flattened row-major is the column-major
  // flattening of its (C_in*k*k) x C_out matrix, so both kinds block the flat
  // buffer directly.
  return kind == LayerKind::Conv2D ? "conv:(cin*k*k)xcout:column-major" : "dense:row-major";
}

inline BlockMatrix pq_reshape(std::span<const double> weights, const Shape& shape, LayerKind kind,
                              std::size_t d, std::string layer = {}) {
  if (d == 0) throw Error("pq_reshape: d must be >= 1");
  if (weights.size() != product(shape)) throw Error("pq_reshape: shape mismatch");
  BlockMatrix m;
  m.d = d;
  m.n_blocks = (weights.size() + d - 1) / d;
  m.pad = m.n_blocks * d - weights.size();
  m.data.assign(weights.begin(), weights.end());
  m.data.resize(m.n_blocks * d, 0.0);
  m.layer = std::move(layer);
  m.original_shape = shape;
  m.layout = block_layout(kind);
  return m;
}

inline BlockMatrix pq_reshape(const TensorRecord& t, LayerKind kind, std::size_t d) {
  const auto f = t.to_float();
  return pq_reshape(std::vector<double>(f.begin(), f.end()), t.shape, kind, d, t.name);
}

// Inverse of pq_reshape: the flat weight buffer in the original layout.
inline std::vector<double> pq_unreshape(const BlockMatrix& m) {
  return {m.data.begin(), m.data.begin() + static_cast<std::ptrdiff_t>(m.weight_count())};
}

struct BlockWeights {
  std::vector<double> g;  // one per block, sums to 1
  bool uniform_fallback = false;
};

// Per-block mean of accumulated |gradient| (pad positions excluded), floored at
// 1e-12 * max and L1-normalised. All-zero gradients give uniform weights.
inline BlockWeights reduce_gradients(std::span<const double> abs_grad, const BlockMatrix& layout) {
  if (abs_grad.size() != layout.weight_count()) throw Error("reduce_gradients: shape mismatch");
  BlockWeights w;
  w.g.assign(layout.n_blocks, 0.0);
  for (std::size_t j = 0; j < layout.n_blocks; ++j) {
    const std::size_t begin = j * layout.d;
    const std::size_t end = std::min(begin + layout.d, abs_grad.size());
    double sum = 0.0;
    for (std::size_t i = begin; i < end; ++i) sum += std::abs(abs_grad[i]);
    w.g[j] = sum / static_cast<double>(end - begin);
  }
  const double gmax = w.g.empty() ? 0.0 : *std::max_element(w.g.begin(), w.g.end());
  if (!(gmax > 0.0) || !std::isfinite(gmax)) {
    w.uniform_fallback = true;
    std::fill(w.g.begin(), w.g.end(), 1.0);
  } else {
    const double floor = 1e-12 * gmax;
    for (auto& v : w.g) v = std::max(v, floor);
  }
  double total = 0.0;
  for (double v : w.g) total += v;
  for (auto& v : w.g) v /= total;
  return w;
}

inline BlockWeights uniform_block_weights(std::size_t n_blocks) {
  BlockWeights w;
  w.g.assign(n_blocks, 1.0 / static_cast<double>(n_blocks));
  return w;
}

// d x b centroids stored centroid-major (centroid j at [j*d, (j+1)*d)).
struct PQCodebook {
  std::size_t d = 1;
  std::size_t b = 0;
  std::vector<double> centroids;
  std::vector<std::uint32_t> labels;  // one per block

  std::span<const double> centroid(std::size_t j) const {
    return std::span(centroids).subspan(j * d, d);
  }
};

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

// Sum_i g_i * ||w_i - c_{label(i)}||^2.
inline double weighted_objective(const BlockMatrix& blocks, std::span<const double> g,
                                 const PQCodebook& cb) {
  double s = 0.0;
  for (std::size_t i = 0; i < blocks.n_blocks; ++i)
    s += g[i] * squared_distance(blocks.block(i), cb.centroid(cb.labels[i]));
  return s;
}

// Nearest centroid by unweighted Euclidean distance, ties toward the lower index.
inline void assign_blocks(const BlockMatrix& blocks, PQCodebook& cb) {
  cb.labels.resize(blocks.n_blocks);
  for (std::size_t i = 0; i < blocks.n_blocks; ++i) {
    std::size_t best = 0;
    double best_d = squared_distance(blocks.block(i), cb.centroid(0));
    for (std::size_t j = 1; j < cb.b; ++j) {
      const double dj = squared_distance(blocks.block(i), cb.centroid(j));
      if (dj < best_d) {
        best_d = dj;
        best = j;
      }
    }
    cb.labels[i] = static_cast<std::uint32_t>(best);
  }
}

// Weighted k-means++: first centre drawn with probability proportional to g,
// later ones proportional to g * D^2. When every remaining block is already
// covered, the lowest-index unchosen block is taken.
inline std::vector<double> weighted_kmeanspp(const BlockMatrix& blocks, std::span<const double> g,
                                             std::size_t b, Rng& rng) {
  const std::size_t n = blocks.n_blocks, d = blocks.d;
  std::vector<double> centroids;
  centroids.reserve(b * d);
  std::vector<bool> chosen(n, false);
  std::vector<double> dist(n, std::numeric_limits<double>::infinity());
  auto pick = [&](const std::vector<double>& score) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      if (!chosen[i]) total += score[i];
    std::size_t pick_i = n;
    if (total > 0.0) {
      const double target = uniform01(rng) * total;
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (chosen[i] || score[i] <= 0.0) continue;
        acc += score[i];
        pick_i = i;
        if (acc > target) break;
      }
    }
    if (pick_i == n)
      for (std::size_t i = 0; i < n; ++i)
        if (!chosen[i]) {
          pick_i = i;
          break;
        }
    chosen[pick_i] = true;
    const auto blk = blocks.block(pick_i);
    centroids.insert(centroids.end(), blk.begin(), blk.end());
    for (std::size_t i = 0; i < n; ++i) dist[i] = std::min(dist[i], squared_distance(blocks.block(i), blk));
  };
  pick(std::vector<double>(g.begin(), g.end()));
  std::vector<double> score(n);
  while (centroids.size() < b * d) {
    for (std::size_t i = 0; i < n; ++i) score[i] = g[i] * dist[i];
    pick(score);
  }
  return centroids;
}

struct KMeansResult {
  PQCodebook codebook;
  double objective = 0.0;
  std::vector<double> objective_trace;  // after each assignment step
  std::size_t iterations = 0;
  std::size_t reseeded = 0;
};

struct KMeansOptions {
  std::uint64_t seed = 0;
  std::size_t max_iter = 100;
  double tol = 1e-6;                                 // relative objective improvement
  std::optional<std::vector<double>> init_centroids;  // warm start, d*b values
};

// Lloyd iterations with the centroid update c_j = sum(g_i w_i) / sum(g_i) over
// the members of cluster j. The weighted objective never increases; this is
// checked every iteration.
inline KMeansResult weighted_kmeans(const BlockMatrix& blocks, const BlockWeights& weights,
                                    std::size_t b, const KMeansOptions& opt = {}) {
  const std::size_t n = blocks.n_blocks, d = blocks.d;
  if (b == 0) throw Error("weighted_kmeans: b must be positive");
  if (b > n) throw Error("weighted_kmeans: more clusters than blocks");
  if (weights.g.size() != n) throw Error("weighted_kmeans: weight count mismatch");
  const auto& g = weights.g;
  // The update is invariant to scaling g; normalising by the maximum keeps
  // uniform weights exactly 1.
  const double gmax = *std::max_element(g.begin(), g.end());
  if (!(gmax > 0.0)) throw Error("weighted_kmeans: weights must be positive");
  std::vector<double> gs(n);
  for (std::size_t i = 0; i < n; ++i) gs[i] = g[i] / gmax;

  KMeansResult r;
  PQCodebook& cb = r.codebook;
  cb.d = d;
  cb.b = b;
  if (opt.init_centroids) {
    if (opt.init_centroids->size() != b * d) throw Error("weighted_kmeans: bad initial centroids");
    cb.centroids = *opt.init_centroids;
  } else {
    Rng rng = make_rng(opt.seed, "kmeans++");
    cb.centroids = weighted_kmeanspp(blocks, g, b, rng);
  }
  assign_blocks(blocks, cb);
  double obj = weighted_objective(blocks, g, cb);
  r.objective_trace.push_back(obj);

  std::vector<double> num(b * d);
  std::vector<double> den(b);
  std::vector<std::size_t> count(b), first(b);
  std::vector<bool> identical(b);
  for (std::size_t it = 0; it < opt.max_iter && obj > 0.0; ++it) {
    std::fill(num.begin(), num.end(), 0.0);
    std::fill(den.begin(), den.end(), 0.0);
    std::fill(count.begin(), count.end(), 0);
    std::fill(identical.begin(), identical.end(), true);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t j = cb.labels[i];
      const auto w = blocks.block(i);
      if (count[j] == 0) {
        first[j] = i;
      } else if (identical[j]) {
        identical[j] = std::equal(w.begin(), w.end(), blocks.block(first[j]).begin());
      }
      ++count[j];
      den[j] += gs[i];
      for (std::size_t k = 0; k < d; ++k) num[j * d + k] += gs[i] * w[k];
    }
    std::vector<double> cost(n);
    for (std::size_t j = 0; j < b; ++j) {
      if (count[j] == 0) continue;
      if (identical[j]) {
        const auto w = blocks.block(first[j]);
        std::copy(w.begin(), w.end(), cb.centroids.begin() + static_cast<std::ptrdiff_t>(j * d));
      } else {
        for (std::size_t k = 0; k < d; ++k) cb.centroids[j * d + k] = num[j * d + k] / den[j];
      }
    }
    // Empty clusters move onto the block with the largest weighted distance.
    bool any_empty = std::find(count.begin(), count.end(), std::size_t{0}) != count.end();
    if (any_empty) {
      for (std::size_t i = 0; i < n; ++i)
        cost[i] = g[i] * squared_distance(blocks.block(i), cb.centroid(cb.labels[i]));
      for (std::size_t j = 0; j < b; ++j) {
        if (count[j] != 0) continue;
        std::size_t far = 0;
        for (std::size_t i = 1; i < n; ++i)
          if (cost[i] > cost[far]) far = i;
        const auto w = blocks.block(far);
        std::copy(w.begin(), w.end(), cb.centroids.begin() + static_cast<std::ptrdiff_t>(j * d));
        cost[far] = 0.0;
        ++r.reseeded;
      }
    }
    assign_blocks(blocks, cb);
    const double next = weighted_objective(blocks, g, cb);
    if (next > obj * (1.0 + 1e-12) + 1e-300)
      throw Error("weighted_kmeans: objective increased (" + format_double(obj) + " -> " +
                  format_double(next) + ")");
    r.objective_trace.push_back(next);
    ++r.iterations;
    const double improvement = obj - next;
    obj = next;
    if (improvement <= opt.tol * obj) break;
  }
  r.objective = obj;
  return r;
}

// Blocks rebuilt from centroids and labels.
inline BlockMatrix reconstruct(const BlockMatrix& layout, const PQCodebook& cb) {
  BlockMatrix out = layout;
  for (std::size_t i = 0; i < layout.n_blocks; ++i) {
    const auto c = cb.centroid(cb.labels[i]);
    std::copy(c.begin(), c.end(), out.data.begin() + static_cast<std::ptrdiff_t>(i * layout.d));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Bits-per-weight accounting

inline std::size_t bits_for(std::size_t b) {
  std::size_t bits = 0;
  while ((std::size_t{1} << bits) < b) ++bits;
  return bits;
}

struct LayerStorage {
  std::string layer;
  std::size_t weight_count = 0;
  std::size_t native_bits = 32;      // for layers stored uncompressed
  std::optional<std::size_t> d;      // set for PQ-compressed layers
  std::size_t n_blocks = 0;
  std::size_t b = 0;
  std::size_t codebook_bits = 32;
};

struct BpwReport {
  struct Layer {
    std::string layer;
    double bpw = 0.0;
    double label_bpw = 0.0;
  };
  std::vector<Layer> layers;
  double bpw = 0.0;        // labels + codebooks + uncompressed layers
  double label_bpw = 0.0;  // labels only, over compressed layers
};

// (sum n_blocks*ceil(log2 b) + sum d*b*32 + native bits of uncompressed layers)
// divided by the total weight count.
inline BpwReport bits_per_weight(const std::vector<LayerStorage>& layers) {
  BpwReport r;
  double total_bits = 0.0, total_weights = 0.0, label_bits = 0.0, compressed_weights = 0.0;
  bool any_compressed = false;
  for (const auto& l : layers) {
    BpwReport::Layer row{l.layer, 0.0, 0.0};
    const auto n = static_cast<double>(l.weight_count);
    if (l.d) {
      any_compressed = true;
      const double lb = static_cast<double>(l.n_blocks * bits_for(l.b));
      const double cb = static_cast<double>(*l.d * l.b * l.codebook_bits);
      row.bpw = (lb + cb) / n;
      row.label_bpw = lb / n;
      total_bits += lb + cb;
      label_bits += lb;
      compressed_weights += n;
    } else {
      row.bpw = static_cast<double>(l.native_bits);
      row.label_bpw = row.bpw;
      total_bits += n * static_cast<double>(l.native_bits);
    }
    total_weights += n;
    r.layers.push_back(row);
  }
  if (!any_compressed) throw Error("bits_per_weight: no compressed layer");
  r.bpw = total_bits / total_weights;
  r.label_bpw = label_bits / compressed_weights;
  return r;
}

// ---------------------------------------------------------------------------
// GWK training

struct GwkEpoch {
  std::size_t epoch = 0;
  double loss = 0.0;
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  bool clustered = false;
  bool warm_start = false;
  std::map<std::string, double> objective;  // weighted objective per layer
  std::vector<std::string> warnings;
};

struct GwkLayer {
  BlockMatrix layout;  // shape metadata; data holds the final reconstruction
  PQCodebook codebook;
};

struct GwkResult {
  Model compressed;                       // reconstructed, on the weight grid, act quant set
  std::map<std::string, GwkLayer> layers; // clustered layers by layer name
  std::vector<GwkEpoch> trace;
  double final_accuracy = 0.0;

  std::string trace_csv() const {
    std::ostringstream os;
    os << "epoch,loss,train_accuracy,test_accuracy,clustered,warm_start,layer,objective\n";
    for (const auto& e : trace) {
      auto head = [&] {
        os << e.epoch << ',' << format_double(e.loss) << ',' << format_double(e.train_accuracy) << ','
           << format_double(e.test_accuracy) << ',' << e.clustered << ',' << e.warm_start << ',';
      };
      if (e.objective.empty()) {
        head();
        os << ",\n";
      }
      for (const auto& [layer, obj] : e.objective) {
        head();
        os << layer << ',' << format_double(obj) << '\n';
      }
    }
    return os.str();
  }

  std::vector<LayerStorage> storage() const {
    std::vector<LayerStorage> out;
    for (const auto* l : compressed.weight_layers()) {
      LayerStorage s;
      s.layer = l->name;
      s.weight_count = compressed.at(*l->weight_ref).size();
      if (auto it = layers.find(l->name); it != layers.end()) {
        s.d = it->second.codebook.d;
        s.n_blocks = it->second.layout.n_blocks;
        s.b = it->second.codebook.b;
      }
      out.push_back(s);
    }
    return out;
  }
};

class GwkDiverged : public Error {
 public:
  GwkDiverged(const std::string& what, Model last_good)
      : Error(what), last_good(std::move(last_good)) {}
  Model last_good;
};

namespace detail {

inline Model export_on_grid(const Network& net, const Model& like, const QatConfig& qat) {
  Model out = net.export_model(like);
  for (const auto& [layer, clip] : qat.weight_clip) {
    auto& t = out.weights_of(layer);
    const UniformGrid grid(qat.weight_bits, clip.low, clip.high);
    for (auto& v : t.values) v = static_cast<float>(grid(v));
  }
  return out;
}

inline GwkResult quantized_training(const Model& pretrained, const Dataset& train_data,
                                    const Dataset& test_data, const PQConfig& pq, QatConfig qat,
                                    const TrainConfig& cfg, bool cluster) {
  pq.validate();
  Model model = pretrained;
  for (auto& t : model.tensors)
    if (t.dtype == DType::U8) t = dequantize_affine(t);

  const auto weight_layers = model.weight_layers();
  std::vector<const LayerDesc*> clustered;
  for (std::size_t i = 0; i < weight_layers.size(); ++i) {
    const auto* l = weight_layers[i];
    if (!qat.weight_clip.count(l->name))
      qat.weight_clip[l->name] = percentile_clip(model.at(*l->weight_ref).values);
    const bool edge = i == 0 || i + 1 == weight_layers.size();
    if (!(pq.exempt_first_last && edge)) clustered.push_back(l);
  }
  qat.validate();
  model.manifest.act_quant = ActivationQuant{qat.act_bits, calibrate_activation_clips(model, train_data)};

  Trainer trainer(model, cfg, qat);
  Network& net = trainer.network();
  GwkResult result;
  std::map<std::string, std::vector<double>> prev_centroids;
  Model last_good = detail::export_on_grid(net, model, qat);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    GwkEpoch row;
    row.epoch = epoch;
    GradientStats stats;
    try {
      auto [m, s] = trainer.run_epoch(train_data, epoch);
      row.loss = m.loss;
      row.train_accuracy = m.train_accuracy;
      stats = std::move(s);
    } catch (const TrainingDiverged& e) {
      throw GwkDiverged(e.what(), last_good);
    }
    const bool last = epoch + 1 == cfg.epochs;
    if (cluster && ((epoch + 1) % pq.epochs_between_cluster == 0 || last)) {
      row.clustered = true;
      for (const auto* l : clustered) {
        auto& p = net.param(*l->weight_ref);
        const BlockMatrix blocks = pq_reshape(p.values, p.shape, l->kind, pq.block_size(*l), l->name);
        const BlockWeights g = pq.uniform_weights
                                   ? uniform_block_weights(blocks.n_blocks)
                                   : reduce_gradients(stats.abs_sum.at(*l->weight_ref), blocks);
        if (g.uniform_fallback)
          row.warnings.push_back("layer " + l->name + ": all-zero gradients, uniform block weights used");
        KMeansOptions opt;
        opt.seed = derive_seed(cfg.seed, "gwk/" + l->name, epoch);
        opt.max_iter = pq.max_iter;
        opt.tol = pq.tol;
        const std::size_t b = std::min(pq.n_clusters, blocks.n_blocks);
        if (auto it = prev_centroids.find(l->name); it != prev_centroids.end()) {
          opt.init_centroids = it->second;
          row.warm_start = true;
        }
        KMeansResult km = weighted_kmeans(blocks, g, b, opt);
        row.objective[l->name] = km.objective;
        prev_centroids[l->name] = km.codebook.centroids;
        const BlockMatrix rebuilt = reconstruct(blocks, km.codebook);
        p.values = pq_unreshape(rebuilt);
        result.layers[l->name] = GwkLayer{rebuilt, std::move(km.codebook)};
      }
    }
    row.test_accuracy = evaluate(net, test_data);
    result.trace.push_back(std::move(row));
    last_good = detail::export_on_grid(net, model, qat);
  }

  // Freeze: centroids move onto the weight grid so the stored model needs no
  // weight fake quantization at inference time.
  for (auto& [name, layer] : result.layers) {
    const auto& clip = qat.weight_clip.at(name);
    const UniformGrid grid(qat.weight_bits, clip.low, clip.high);
    for (auto& c : layer.codebook.centroids) c = static_cast<float>(grid(c));
    layer.layout = reconstruct(layer.layout, layer.codebook);
  }
  result.compressed = detail::export_on_grid(net, model, qat);
  for (const auto& [name, layer] : result.layers) {
    auto& t = result.compressed.weights_of(name);
    const auto w = pq_unreshape(layer.layout);
    for (std::size_t i = 0; i < w.size(); ++i) t.values[i] = static_cast<float>(w[i]);
  }
  result.final_accuracy = evaluate(result.compressed, test_data);
  return result;
}

}  // namespace detail

// EWGS-trained epochs, each followed by gradient-weighted re-clustering of
// every clustered layer; training continues from the reconstructed weights.
inline GwkResult gwk_train(const Model& pretrained, const Dataset& train_data, const Dataset& test_data,
                           const PQConfig& pq, const QatConfig& qat, const TrainConfig& cfg) {
  return detail::quantized_training(pretrained, train_data, test_data, pq, qat, cfg, true);
}

// The same quantization-aware training without clustering.
inline GwkResult ewgs_train(const Model& pretrained, const Dataset& train_data, const Dataset& test_data,
                            const QatConfig& qat, const TrainConfig& cfg) {
  return detail::quantized_training(pretrained, train_data, test_data, PQConfig{}, qat, cfg, false);
}

}  // namespace bqkit
