#pragma once

// Uniform fake quantization and element-wise gradient scaling (EWGS).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "bqkit/common.hpp"

namespace bqkit {

struct ClipRange {
  double low = -1.0;
  double high = 1.0;
  bool operator==(const ClipRange&) const = default;
};

enum class GradientEstimator { EWGS, STE };

struct QatConfig {
  int weight_bits = 8;
  int act_bits = 8;
  double delta = 0.2;
  GradientEstimator estimator = GradientEstimator::EWGS;
  std::map<std::string, ClipRange> weight_clip;  // keyed by layer name

  void validate() const {
    if (weight_bits < 1 || weight_bits > 16 || act_bits < 1 || act_bits > 16)
      throw Error("qat: bit widths must be in [1,16]");
    if (!std::isfinite(delta) || delta < 0.0) throw Error("qat: delta must be finite and >= 0");
    for (const auto& [name, c] : weight_clip)
      if (!(c.low < c.high)) throw Error("qat: invalid clip range for " + name);
  }
};

// Uniform grid of 2^bits levels spanning [low, high].
struct UniformGrid {
  double low = 0.0;
  double step = 1.0;
  std::uint32_t max_level = 1;

  UniformGrid(int bits, double clip_low, double clip_high) {
    if (bits < 1 || bits > 31) throw Error("fake_quantize: bits must be in [1,31]");
    if (!(clip_low < clip_high) || !std::isfinite(clip_low) || !std::isfinite(clip_high))
      throw Error("fake_quantize: invalid clip range");
    low = clip_low;
    max_level = (1u << bits) - 1u;
    step = (clip_high - clip_low) / max_level;
  }
  double high() const { return low + step * max_level; }

  std::uint32_t level(double x) const {
    const double t = std::round((x - low) / step);
    return static_cast<std::uint32_t>(std::clamp(t, 0.0, static_cast<double>(max_level)));
  }
  double value(std::uint32_t level) const { return low + step * level; }
  double operator()(double x) const { return value(level(x)); }
};

struct FakeQuantResult {
  std::vector<double> values;
  std::vector<std::uint32_t> levels;
};

inline FakeQuantResult fake_quantize(std::span<const double> x, int bits, double clip_low,
                                     double clip_high) {
  const UniformGrid grid(bits, clip_low, clip_high);
  FakeQuantResult r;
  r.values.resize(x.size());
  r.levels.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    r.levels[i] = grid.level(x[i]);
    r.values[i] = grid.value(r.levels[i]);
  }
  return r;
}

// g_x = g_q * (1 + delta * sign(g_q) * (x - x_q)); delta == 0 is the
// straight-through estimator.
inline double ewgs_scale(double g_q, double x, double x_q, double delta) {
  const double sign = (g_q > 0.0) - (g_q < 0.0);
  return g_q * (1.0 + delta * sign * (x - x_q));
}

inline std::vector<double> ewgs_scale_gradients(std::span<const double> g_q,
                                                std::span<const double> x,
                                                std::span<const double> x_q, double delta) {
  if (g_q.size() != x.size() || x.size() != x_q.size())
    throw Error("ewgs_scale_gradients: shape mismatch");
  std::vector<double> out(g_q.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ewgs_scale(g_q[i], x[i], x_q[i], delta);
  return out;
}

// Linear-interpolated percentile, p in [0, 100].
inline double percentile(std::vector<double> v, double p) {
  if (v.empty()) throw Error("percentile of empty buffer");
  std::sort(v.begin(), v.end());
  const double pos = std::clamp(p, 0.0, 100.0) / 100.0 * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

// [p1, p99] clip for a weight buffer, widened when the buffer is (nearly) constant.
inline ClipRange percentile_clip(std::span<const float> w, double p_low = 1.0,
                                 double p_high = 99.0) {
  std::vector<double> v(w.begin(), w.end());
  ClipRange c{percentile(v, p_low), percentile(v, p_high)};
  if (!(c.low < c.high)) {
    const double pad = std::max(1e-6, 1e-6 * std::abs(c.low));
    c.low -= pad;
    c.high += pad;
  }
  return c;
}

}  // namespace bqkit
