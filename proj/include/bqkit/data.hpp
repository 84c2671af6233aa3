#pragma once

// Classification datasets: in-memory container, synthetic generators and the
// ".nnd" file format ("NND1" | u32 header_len | JSON | f32 inputs | i32 labels).

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "bqkit/common.hpp"
#include "bqkit/tensor_store.hpp"

namespace bqkit {

enum class Split { Train, Test };

inline const char* to_string(Split s) { return s == Split::Train ? "train" : "test"; }

struct Dataset {
  Shape sample_shape;
  std::vector<float> inputs;   // [N, sample_shape...] row-major
  std::vector<int> labels;
  std::size_t num_classes = 0;
  Split split = Split::Train;

  std::size_t size() const { return labels.size(); }
  std::size_t sample_size() const { return product(sample_shape); }
  std::span<const float> sample(std::size_t i) const {
    return std::span(inputs).subspan(i * sample_size(), sample_size());
  }

  void validate() const {
    if (labels.empty()) throw Error("dataset is empty");
    if (inputs.size() != labels.size() * sample_size())
      throw Error("dataset: inputs/labels size mismatch");
    for (int l : labels)
      if (l < 0 || static_cast<std::size_t>(l) >= num_classes)
        throw Error("dataset: label out of range");
  }

  // First n samples (or all, if n is 0 or exceeds the size).
  Dataset head(std::size_t n) const {
    if (n == 0 || n >= size()) return *this;
    Dataset d = *this;
    d.labels.resize(n);
    d.inputs.resize(n * sample_size());
    return d;
  }
};

// Gaussian blobs: one isotropic cluster per class. Class centres come from
// `task_seed` so train and test splits share a distribution.
inline Dataset make_blobs(std::size_t n, std::size_t num_classes, std::size_t dims,
                          double spread, std::uint64_t seed, Split split,
                          std::uint64_t task_seed = 0) {
  if (n == 0 || num_classes < 2 || dims == 0) throw Error("make_blobs: bad parameters");
  Rng centres_rng = make_rng(task_seed, "blobs/centres");
  std::vector<double> centres(num_classes * dims);
  for (auto& c : centres) c = 2.0 * standard_normal(centres_rng);
  Rng rng = make_rng(seed, "blobs/samples", static_cast<std::uint64_t>(split));
  Dataset d;
  d.sample_shape = {dims};
  d.num_classes = num_classes;
  d.split = split;
  d.inputs.resize(n * dims);
  d.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = static_cast<int>(i % num_classes);
    d.labels[i] = c;
    for (std::size_t k = 0; k < dims; ++k)
      d.inputs[i * dims + k] =
          static_cast<float>(centres[c * dims + k] + spread * standard_normal(rng));
  }
  return d;
}

// 8x8 single-channel two-class textures: class 0 carries horizontal stripes,
// class 1 vertical stripes, each with random frequency, phase and contrast plus
// additive pixel noise.
inline Dataset make_textures(std::size_t n, std::uint64_t seed, Split split,
                             double noise = 0.9, std::size_t side = 8) {
  if (n == 0 || side < 4) throw Error("make_textures: bad parameters");
  Rng rng = make_rng(seed, "textures", static_cast<std::uint64_t>(split));
  Dataset d;
  d.sample_shape = {1, side, side};
  d.num_classes = 2;
  d.split = split;
  d.inputs.resize(n * side * side);
  d.labels.resize(n);
  constexpr double two_pi = 6.283185307179586;
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(uniform01(rng) < 0.5 ? 0 : 1);
    const double freq = (1.0 + std::floor(uniform01(rng) * 3.0)) / static_cast<double>(side);
    const double phase = two_pi * uniform01(rng);
    const double contrast = 0.4 + 0.6 * uniform01(rng);
    d.labels[i] = label;
    for (std::size_t y = 0; y < side; ++y)
      for (std::size_t x = 0; x < side; ++x) {
        const double coord = static_cast<double>(label == 0 ? y : x);
        const double v = contrast * std::sin(two_pi * freq * coord + phase) +
                         noise * standard_normal(rng);
        d.inputs[i * side * side + y * side + x] = static_cast<float>(v);
      }
  }
  return d;
}

inline Bytes serialize_dataset(const Dataset& d) {
  d.validate();
  Bytes payload;
  for (float v : d.inputs) put_le<float>(payload, v);
  for (int l : d.labels) put_le<std::int32_t>(payload, l);
  const Json header = {{"split", to_string(d.split)},   {"num_classes", d.num_classes},
                       {"sample_shape", d.sample_shape}, {"count", d.size()},
                       {"inputs_offset", 0},            {"labels_offset", 4 * d.inputs.size()}};
  return frame("NND1", header, payload);
}

inline Dataset deserialize_dataset(std::span<const std::uint8_t> bytes) {
  const Framed f = unframe("NND1", bytes);
  Dataset d;
  try {
    d.split = f.header.at("split").get<std::string>() == "train" ? Split::Train : Split::Test;
    d.num_classes = f.header.at("num_classes").get<std::size_t>();
    d.sample_shape = f.header.at("sample_shape").get<Shape>();
    const auto count = f.header.at("count").get<std::size_t>();
    const auto in_off = f.header.at("inputs_offset").get<std::size_t>();
    const auto lab_off = f.header.at("labels_offset").get<std::size_t>();
    const std::size_t n_in = count * product(d.sample_shape);
    if (in_off + 4 * n_in > f.payload.size() || lab_off + 4 * count > f.payload.size())
      throw Error("dataset: truncated payload");
    d.inputs.resize(n_in);
    std::memcpy(d.inputs.data(), f.payload.data() + in_off, 4 * n_in);
    d.labels.resize(count);
    for (std::size_t i = 0; i < count; ++i)
      d.labels[i] = get_le<std::int32_t>(f.payload, lab_off + 4 * i);
  } catch (const Json::exception& e) {
    throw Error(std::string("malformed dataset header: ") + e.what());
  }
  d.validate();
  return d;
}

inline void save_dataset(const Dataset& d, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_dataset(d));
}

inline Dataset load_dataset(const std::filesystem::path& path) {
  return deserialize_dataset(read_file(path));
}

}  // namespace bqkit
