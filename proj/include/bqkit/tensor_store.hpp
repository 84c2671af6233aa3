#pragma once

// Model container: named tensors, layer manifest, affine uint8 parameters and
// the ".nnmod" file format.
//
// File layout (all integers little-endian):
//   "NNM1" | u32 header_len | header_len bytes of UTF-8 JSON | payload
// The JSON header holds the manifest and a tensor table whose offsets are
// relative to the first payload byte. Payloads are raw row-major f32 or u8.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "bqkit/common.hpp"

namespace bqkit {

using Json = nlohmann::json;
using Shape = std::vector<std::size_t>;

enum class DType { F32, U8 };

inline const char* to_string(DType d) { return d == DType::F32 ? "f32" : "u8"; }

inline DType parse_dtype(const std::string& s) {
  if (s == "f32") return DType::F32;
  if (s == "u8") return DType::U8;
  throw Error("unknown dtype: " + s);
}

struct QuantParams {
  double scale = 1.0;
  int zero_point = 0;

  void validate() const {
    if (!(scale > 0.0) || !std::isfinite(scale)) throw Error("quant scale must be > 0");
    if (zero_point < 0 || zero_point > 255) throw Error("zero_point must be in [0,255]");
  }
  bool operator==(const QuantParams&) const = default;
};

struct TensorRecord {
  std::string name;
  DType dtype = DType::F32;
  Shape shape;
  std::vector<float> values;          // dtype == F32
  std::vector<std::uint8_t> levels;   // dtype == U8
  std::optional<QuantParams> quant;

  static TensorRecord f32(std::string name, Shape shape, std::vector<float> values) {
    TensorRecord t{std::move(name), DType::F32, std::move(shape), std::move(values), {}, {}};
    t.validate();
    return t;
  }
  static TensorRecord u8(std::string name, Shape shape, std::vector<std::uint8_t> levels,
                         QuantParams q) {
    TensorRecord t{std::move(name), DType::U8, std::move(shape), {}, std::move(levels), q};
    t.validate();
    return t;
  }

  std::size_t size() const { return product(shape); }
  std::size_t byte_size() const { return dtype == DType::F32 ? 4 * size() : size(); }

  void validate() const {
    for (auto d : shape)
      if (d == 0) throw Error("tensor " + name + ": zero-sized dimension");
    const std::size_t have = dtype == DType::F32 ? values.size() : levels.size();
    if (have != size()) throw Error("tensor " + name + ": shape/data length mismatch");
    if (dtype == DType::U8) {
      if (!quant) throw Error("tensor " + name + ": u8 tensor without quant params");
      quant->validate();
    }
  }

  // Real-valued view; u8 tensors are dequantized.
  std::vector<float> to_float() const {
    if (dtype == DType::F32) return values;
    std::vector<float> out(levels.size());
    for (std::size_t i = 0; i < levels.size(); ++i)
      out[i] = static_cast<float>(quant->scale * (static_cast<int>(levels[i]) - quant->zero_point));
    return out;
  }

  bool operator==(const TensorRecord&) const = default;
};

// ---------------------------------------------------------------------------
// Affine uint8 quantization. Rounding is half away from zero (std::round).

inline std::uint8_t quantize_value(double x, const QuantParams& q) {
  const double r = std::round(x / q.scale) + q.zero_point;
  return static_cast<std::uint8_t>(std::clamp(r, 0.0, 255.0));
}

inline TensorRecord quantize_affine(const TensorRecord& t, const QuantParams& q) {
  if (t.dtype != DType::F32) throw Error("quantize_affine expects an f32 tensor");
  q.validate();
  std::vector<std::uint8_t> levels(t.values.size());
  for (std::size_t i = 0; i < levels.size(); ++i) levels[i] = quantize_value(t.values[i], q);
  return TensorRecord::u8(t.name, t.shape, std::move(levels), q);
}

inline TensorRecord dequantize_affine(const TensorRecord& t) {
  if (t.dtype != DType::U8 || !t.quant) throw Error("dequantize_affine: missing quant params");
  return TensorRecord::f32(t.name, t.shape, t.to_float());
}

// Asymmetric min/max parameters covering [min(x,0), max(x,0)].
inline QuantParams choose_quant_params(std::span<const float> values) {
  double lo = 0.0, hi = 0.0;
  for (float v : values) {
    lo = std::min<double>(lo, v);
    hi = std::max<double>(hi, v);
  }
  if (hi - lo <= 0.0) return QuantParams{1.0, 0};
  QuantParams q;
  q.scale = (hi - lo) / 255.0;
  q.zero_point = static_cast<int>(std::clamp(std::round(-lo / q.scale), 0.0, 255.0));
  return q;
}

// ---------------------------------------------------------------------------
// Manifest

enum class LayerKind { Dense, Conv2D, ReLU, MaxPool2x2, Flatten, Softmax };

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::Dense: return "Dense";
    case LayerKind::Conv2D: return "Conv2D";
    case LayerKind::ReLU: return "ReLU";
    case LayerKind::MaxPool2x2: return "MaxPool2x2";
    case LayerKind::Flatten: return "Flatten";
    case LayerKind::Softmax: return "Softmax";
  }
  return "?";
}

inline LayerKind parse_layer_kind(const std::string& s) {
  if (s == "Dense") return LayerKind::Dense;
  if (s == "Conv2D") return LayerKind::Conv2D;
  if (s == "ReLU") return LayerKind::ReLU;
  if (s == "MaxPool2x2") return LayerKind::MaxPool2x2;
  if (s == "Flatten") return LayerKind::Flatten;
  if (s == "Softmax") return LayerKind::Softmax;
  throw Error("unsupported layer kind: " + s);
}

struct ConvMeta {
  std::size_t k = 3, c_in = 1, c_out = 1, stride = 1, padding = 0;
  bool operator==(const ConvMeta&) const = default;
};

struct LayerDesc {
  std::string name;
  LayerKind kind = LayerKind::ReLU;
  std::optional<std::string> weight_ref;
  std::optional<std::string> bias_ref;
  std::optional<ConvMeta> conv;
  bool pointwise = false;

  bool has_weights() const { return kind == LayerKind::Dense || kind == LayerKind::Conv2D; }
  bool operator==(const LayerDesc&) const = default;
};

// Post-ReLU activation fake quantization, clip range [0, clip_high] per ReLU.
struct ActivationQuant {
  int bits = 8;
  std::map<std::string, double> clip_high;
  bool operator==(const ActivationQuant&) const = default;
};

struct ModelManifest {
  std::vector<LayerDesc> layers;
  Shape input_shape;
  std::size_t num_classes = 0;
  std::optional<ActivationQuant> act_quant;
  bool operator==(const ModelManifest&) const = default;

  const LayerDesc* find_layer(std::string_view name) const {
    for (const auto& l : layers)
      if (l.name == name) return &l;
    return nullptr;
  }
};

struct Model {
  ModelManifest manifest;
  std::vector<TensorRecord> tensors;

  const TensorRecord* find(std::string_view name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
  TensorRecord* find(std::string_view name) {
    for (auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
  const TensorRecord& at(std::string_view name) const {
    if (auto* t = find(name)) return *t;
    throw Error("no tensor named " + std::string(name));
  }
  TensorRecord& at(std::string_view name) {
    if (auto* t = find(name)) return *t;
    throw Error("no tensor named " + std::string(name));
  }

  // Layers carrying a weight tensor, in manifest order.
  std::vector<const LayerDesc*> weight_layers() const {
    std::vector<const LayerDesc*> out;
    for (const auto& l : manifest.layers)
      if (l.weight_ref) out.push_back(&l);
    return out;
  }
  const LayerDesc& layer(std::string_view name) const {
    if (auto* l = manifest.find_layer(name)) return *l;
    throw Error("unknown layer: " + std::string(name));
  }
  const TensorRecord& weights_of(std::string_view layer_name) const {
    const auto& l = layer(layer_name);
    if (!l.weight_ref) throw Error("layer " + l.name + " has no weights");
    return at(*l.weight_ref);
  }
  TensorRecord& weights_of(std::string_view layer_name) {
    const auto& l = layer(layer_name);
    if (!l.weight_ref) throw Error("layer " + l.name + " has no weights");
    return at(*l.weight_ref);
  }

  bool operator==(const Model&) const = default;
};

// Per-layer output shapes; validates that the layer chain composes and that
// every referenced tensor exists with the expected shape.
inline std::vector<Shape> infer_shapes(const ModelManifest& m,
                                       const std::vector<TensorRecord>& tensors) {
  if (m.input_shape.empty()) throw Error("manifest: empty input shape");
  if (m.num_classes == 0) throw Error("manifest: num_classes must be positive");
  std::map<std::string, const TensorRecord*> by_name;
  for (const auto& t : tensors)
    if (!by_name.emplace(t.name, &t).second) throw Error("duplicate tensor name: " + t.name);

  auto tensor_shape = [&](const std::optional<std::string>& ref, const std::string& layer) {
    if (!ref) throw Error("layer " + layer + " is missing a tensor reference");
    auto it = by_name.find(*ref);
    if (it == by_name.end()) throw Error("layer " + layer + " references missing tensor " + *ref);
    return it->second->shape;
  };

  std::set<std::string> layer_names;
  std::vector<Shape> out;
  Shape cur = m.input_shape;
  for (const auto& l : m.layers) {
    if (!layer_names.insert(l.name).second) throw Error("duplicate layer name: " + l.name);
    const bool wants_weights = l.kind == LayerKind::Dense || l.kind == LayerKind::Conv2D;
    if (!wants_weights && (l.weight_ref || l.bias_ref))
      throw Error("layer " + l.name + " of kind " + to_string(l.kind) + " cannot carry tensors");
    if (l.pointwise != (l.kind == LayerKind::Conv2D && l.conv && l.conv->k == 1))
      throw Error("layer " + l.name + ": pointwise flag inconsistent with kernel size");
    switch (l.kind) {
      case LayerKind::Dense: {
        if (cur.size() != 1) throw Error("Dense layer " + l.name + " needs a flat input");
        const Shape w = tensor_shape(l.weight_ref, l.name);
        if (w.size() != 2 || w[0] != cur[0])
          throw Error("Dense layer " + l.name + ": weight shape does not match input");
        if (l.bias_ref && tensor_shape(l.bias_ref, l.name) != Shape{w[1]})
          throw Error("Dense layer " + l.name + ": bias shape mismatch");
        cur = {w[1]};
        break;
      }
      case LayerKind::Conv2D: {
        if (!l.conv) throw Error("Conv2D layer " + l.name + " missing conv metadata");
        const auto& c = *l.conv;
        if (cur.size() != 3 || cur[0] != c.c_in)
          throw Error("Conv2D layer " + l.name + ": input channels mismatch");
        if (c.k == 0 || c.stride == 0) throw Error("Conv2D layer " + l.name + ": bad kernel/stride");
        const Shape w = tensor_shape(l.weight_ref, l.name);
        if (w != Shape{c.c_out, c.c_in, c.k, c.k})
          throw Error("Conv2D layer " + l.name + ": weight shape mismatch");
        if (l.bias_ref && tensor_shape(l.bias_ref, l.name) != Shape{c.c_out})
          throw Error("Conv2D layer " + l.name + ": bias shape mismatch");
        if (cur[1] + 2 * c.padding < c.k || cur[2] + 2 * c.padding < c.k)
          throw Error("Conv2D layer " + l.name + ": kernel larger than padded input");
        cur = {c.c_out, (cur[1] + 2 * c.padding - c.k) / c.stride + 1,
               (cur[2] + 2 * c.padding - c.k) / c.stride + 1};
        break;
      }
      case LayerKind::ReLU:
        break;
      case LayerKind::MaxPool2x2:
        if (cur.size() != 3 || cur[1] < 2 || cur[2] < 2)
          throw Error("MaxPool2x2 layer " + l.name + " needs a [C,H,W] input of at least 2x2");
        cur = {cur[0], cur[1] / 2, cur[2] / 2};
        break;
      case LayerKind::Flatten:
        cur = {product(cur)};
        break;
      case LayerKind::Softmax:
        if (cur.size() != 1) throw Error("Softmax layer " + l.name + " needs a flat input");
        break;
    }
    out.push_back(cur);
  }
  if (product(cur) != m.num_classes)
    throw Error("manifest: network output size does not equal num_classes");
  if (m.act_quant) {
    if (m.act_quant->bits < 1 || m.act_quant->bits > 16)
      throw Error("activation quantization bits out of range");
    for (const auto& [name, clip] : m.act_quant->clip_high) {
      const auto* l = m.find_layer(name);
      if (!l || l->kind != LayerKind::ReLU)
        throw Error("activation clip refers to non-ReLU layer " + name);
      if (!(clip > 0.0)) throw Error("activation clip must be positive");
    }
  }
  return out;
}

inline void validate_model(const Model& model) {
  for (const auto& t : model.tensors) t.validate();
  infer_shapes(model.manifest, model.tensors);
}

// ---------------------------------------------------------------------------
// JSON mapping

inline Json to_json(const ConvMeta& c) {
  return {{"k", c.k}, {"c_in", c.c_in}, {"c_out", c.c_out}, {"stride", c.stride},
          {"padding", c.padding}};
}

inline Json to_json(const ModelManifest& m) {
  Json layers = Json::array();
  for (const auto& l : m.layers) {
    Json j = {{"name", l.name}, {"kind", to_string(l.kind)}, {"pointwise", l.pointwise}};
    if (l.weight_ref) j["weight"] = *l.weight_ref;
    if (l.bias_ref) j["bias"] = *l.bias_ref;
    if (l.conv) j["conv"] = to_json(*l.conv);
    layers.push_back(std::move(j));
  }
  Json j = {{"layers", layers}, {"input_shape", m.input_shape}, {"num_classes", m.num_classes}};
  if (m.act_quant) {
    Json clips = Json::object();
    for (const auto& [name, v] : m.act_quant->clip_high) clips[name] = v;
    j["act_quant"] = {{"bits", m.act_quant->bits}, {"clip_high", clips}};
  }
  return j;
}

inline ModelManifest manifest_from_json(const Json& j) {
  ModelManifest m;
  m.input_shape = j.at("input_shape").get<Shape>();
  m.num_classes = j.at("num_classes").get<std::size_t>();
  for (const auto& jl : j.at("layers")) {
    LayerDesc l;
    l.name = jl.at("name").get<std::string>();
    l.kind = parse_layer_kind(jl.at("kind").get<std::string>());
    l.pointwise = jl.value("pointwise", false);
    if (jl.contains("weight")) l.weight_ref = jl["weight"].get<std::string>();
    if (jl.contains("bias")) l.bias_ref = jl["bias"].get<std::string>();
    if (jl.contains("conv")) {
      const auto& c = jl["conv"];
      l.conv = ConvMeta{c.at("k").get<std::size_t>(), c.at("c_in").get<std::size_t>(),
                        c.at("c_out").get<std::size_t>(), c.at("stride").get<std::size_t>(),
                        c.at("padding").get<std::size_t>()};
    }
    m.layers.push_back(std::move(l));
  }
  if (j.contains("act_quant")) {
    ActivationQuant a;
    a.bits = j["act_quant"].at("bits").get<int>();
    for (const auto& [name, v] : j["act_quant"].at("clip_high").items())
      a.clip_high[name] = v.get<double>();
    m.act_quant = std::move(a);
  }
  return m;
}

inline Json quant_to_json(const QuantParams& q) {
  return {{"scale", q.scale}, {"zero_point", q.zero_point}};
}

inline QuantParams quant_from_json(const Json& j) {
  return {j.at("scale").get<double>(), j.at("zero_point").get<int>()};
}

// ---------------------------------------------------------------------------
// ".nnmod" framing, shared with the dataset format.

inline Bytes frame(std::string_view magic, const Json& header, const Bytes& payload) {
  const std::string text = header.dump();
  Bytes out(magic.begin(), magic.end());
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

struct Framed {
  Json header;
  std::span<const std::uint8_t> payload;
};

inline Framed unframe(std::string_view magic, std::span<const std::uint8_t> bytes) {
  if (bytes.size() < magic.size() + 4 ||
      !std::equal(magic.begin(), magic.end(), bytes.begin()))
    throw Error("bad magic, expected " + std::string(magic));
  const auto len = get_le<std::uint32_t>(bytes, magic.size());
  const std::size_t start = magic.size() + 4;
  if (start + len > bytes.size()) throw Error("truncated header");
  Framed f;
  try {
    f.header = Json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(start),
                           bytes.begin() + static_cast<std::ptrdiff_t>(start + len));
  } catch (const Json::exception& e) {
    throw Error(std::string("malformed header: ") + e.what());
  }
  f.payload = bytes.subspan(start + len);
  return f;
}

inline void append_tensor_payload(Bytes& payload, const TensorRecord& t) {
  if (t.dtype == DType::F32) {
    for (float v : t.values) put_le<float>(payload, v);
  } else {
    payload.insert(payload.end(), t.levels.begin(), t.levels.end());
  }
}

inline Json tensor_entry(const TensorRecord& t, std::size_t offset) {
  Json j = {{"name", t.name}, {"dtype", to_string(t.dtype)}, {"shape", t.shape},
            {"offset", offset}, {"length", t.byte_size()}};
  if (t.quant) j["quant"] = quant_to_json(*t.quant);
  return j;
}

inline TensorRecord tensor_from_entry(const Json& e, std::span<const std::uint8_t> payload) {
  TensorRecord t;
  t.name = e.at("name").get<std::string>();
  t.dtype = parse_dtype(e.at("dtype").get<std::string>());
  t.shape = e.at("shape").get<Shape>();
  const auto offset = e.at("offset").get<std::size_t>();
  const auto length = e.at("length").get<std::size_t>();
  if (length != t.byte_size()) throw Error("tensor " + t.name + ": length/shape mismatch");
  if (offset + length > payload.size()) throw Error("tensor " + t.name + ": truncated payload");
  if (e.contains("quant")) t.quant = quant_from_json(e["quant"]);
  if (t.dtype == DType::F32) {
    t.values.resize(t.size());
    std::memcpy(t.values.data(), payload.data() + offset, length);
  } else {
    t.levels.assign(payload.begin() + static_cast<std::ptrdiff_t>(offset),
                    payload.begin() + static_cast<std::ptrdiff_t>(offset + length));
  }
  t.validate();
  return t;
}

inline Bytes serialize_model(const Model& model) {
  validate_model(model);
  Bytes payload;
  Json table = Json::array();
  for (const auto& t : model.tensors) {
    table.push_back(tensor_entry(t, payload.size()));
    append_tensor_payload(payload, t);
  }
  const Json header = {{"manifest", to_json(model.manifest)}, {"tensors", table}};
  return frame("NNM1", header, payload);
}

inline Model deserialize_model(std::span<const std::uint8_t> bytes) {
  const Framed f = unframe("NNM1", bytes);
  Model m;
  try {
    m.manifest = manifest_from_json(f.header.at("manifest"));
    for (const auto& e : f.header.at("tensors")) m.tensors.push_back(tensor_from_entry(e, f.payload));
  } catch (const Json::exception& e) {
    throw Error(std::string("malformed model header: ") + e.what());
  }
  validate_model(m);
  return m;
}

// Returns the number of bytes written.
inline std::size_t save_model(const Model& model, const std::filesystem::path& path) {
  const Bytes bytes = serialize_model(model);
  write_file_atomic(path, bytes);
  return bytes.size();
}

inline Model load_model(const std::filesystem::path& path) {
  return deserialize_model(read_file(path));
}

// Bytes the weights would occupy as raw float32.
inline std::size_t float32_bytes(const Model& model) {
  std::size_t n = 0;
  for (const auto& t : model.tensors) n += 4 * t.size();
  return n;
}

}  // namespace bqkit
