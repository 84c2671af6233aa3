#pragma once

// Bit-exact storage of compressed models: LSB-first label packing, canonical
// Huffman label coding and the ".bqz" container.

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <numeric>
#include <optional>
#include <queue>
#include <string>
#include <vector>

#include "bqkit/binquant.hpp"
#include "bqkit/common.hpp"
#include "bqkit/gwk.hpp"
#include "bqkit/tensor_store.hpp"

namespace bqkit {

// ---------------------------------------------------------------------------
// Bit streams

class BitWriter {
 public:
  void put(std::uint64_t value, unsigned nbits) {
    for (unsigned i = 0; i < nbits; ++i) put_bit((value >> i) & 1u);
  }
  void put_bit(unsigned bit) {
    if (bits_ % 8 == 0) bytes_.push_back(0);
    if (bit) bytes_.back() |= static_cast<std::uint8_t>(1u << (bits_ % 8));
    ++bits_;
  }
  std::size_t bit_count() const { return bits_; }
  Bytes take() { return std::move(bytes_); }

 private:
  Bytes bytes_;
  std::size_t bits_ = 0;
};

class BitReader {
 public:
  BitReader(std::span<const std::uint8_t> bytes, std::size_t bit_count)
      : bytes_(bytes), limit_(bit_count) {
    if (bit_count > bytes.size() * 8) throw Error("bit stream: truncated payload");
  }
  unsigned get_bit() {
    if (pos_ >= limit_) throw Error("bit stream: read past end");
    const unsigned bit = (bytes_[pos_ / 8] >> (pos_ % 8)) & 1u;
    ++pos_;
    return bit;
  }
  std::uint64_t get(unsigned nbits) {
    std::uint64_t v = 0;
    for (unsigned i = 0; i < nbits; ++i) v |= static_cast<std::uint64_t>(get_bit()) << i;
    return v;
  }
  std::size_t position() const { return pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t limit_;
  std::size_t pos_ = 0;
};

struct PackedStream {
  unsigned bits_per_symbol = 1;
  std::size_t symbol_count = 0;
  Bytes payload;
};

inline void check_bits(unsigned bits) {
  if (bits < 1 || bits > 16) throw Error("bits_per_symbol must be in [1,16]");
}

inline PackedStream pack_labels(std::span<const std::uint32_t> labels, unsigned bits) {
  check_bits(bits);
  BitWriter w;
  for (std::uint32_t l : labels) {
    if (l >> bits) throw Error("pack_labels: label " + std::to_string(l) + " overflows " +
                               std::to_string(bits) + " bits");
    w.put(l, bits);
  }
  return {bits, labels.size(), w.take()};
}

inline std::vector<std::uint32_t> unpack_labels(const PackedStream& s) {
  check_bits(s.bits_per_symbol);
  if (s.payload.size() != (s.symbol_count * s.bits_per_symbol + 7) / 8)
    throw Error("unpack_labels: payload length mismatch");
  BitReader r(s.payload, s.symbol_count * s.bits_per_symbol);
  std::vector<std::uint32_t> out(s.symbol_count);
  for (auto& l : out) l = static_cast<std::uint32_t>(r.get(s.bits_per_symbol));
  return out;
}

// ---------------------------------------------------------------------------
// Canonical Huffman

struct HuffmanTable {
  std::vector<std::uint8_t> lengths;  // per symbol; 0 = symbol absent

  std::size_t alphabet_size() const { return lengths.size(); }
  bool operator==(const HuffmanTable&) const = default;
};

constexpr unsigned kMaxCodeLength = 64;

// Throws unless sum 2^-len <= 1 over present symbols.
inline void check_kraft(const HuffmanTable& t) {
  std::vector<std::size_t> count(kMaxCodeLength + 1, 0);
  bool any = false;
  for (auto len : t.lengths) {
    if (len > kMaxCodeLength) throw Error("huffman: code length exceeds 64");
    if (len) {
      ++count[len];
      any = true;
    }
  }
  if (!any) throw Error("huffman: empty code");
  // Free codewords at each depth; saturates well above any alphabet size.
  std::uint64_t available = 1;
  for (unsigned len = 1; len <= kMaxCodeLength; ++len) {
    available = std::min<std::uint64_t>(available * 2, std::uint64_t{1} << 40);
    if (count[len] > available) throw Error("huffman: Kraft inequality violated");
    available -= count[len];
  }
}

// Code lengths from symbol frequencies. Nodes merge in (frequency, lowest
// symbol) order; a lone symbol gets length 1.
inline HuffmanTable huffman_lengths(std::span<const std::uint64_t> freq) {
  HuffmanTable t;
  t.lengths.assign(freq.size(), 0);
  struct Node {
    std::uint64_t freq;
    std::size_t symbol;  // smallest symbol in the subtree
    std::size_t id;
  };
  auto later = [](const Node& a, const Node& b) {
    return a.freq != b.freq ? a.freq > b.freq : a.symbol > b.symbol;
  };
  std::priority_queue<Node, std::vector<Node>, decltype(later)> heap(later);
  std::vector<std::size_t> parent;
  std::vector<std::size_t> leaf_node(freq.size(), SIZE_MAX);
  for (std::size_t s = 0; s < freq.size(); ++s) {
    if (!freq[s]) continue;
    leaf_node[s] = parent.size();
    heap.push({freq[s], s, parent.size()});
    parent.push_back(SIZE_MAX);
  }
  if (heap.empty()) throw Error("huffman: no symbols");
  if (heap.size() == 1) {
    t.lengths[heap.top().symbol] = 1;
    return t;
  }
  while (heap.size() > 1) {
    const Node a = heap.top();
    heap.pop();
    const Node b = heap.top();
    heap.pop();
    const std::size_t id = parent.size();
    parent.push_back(SIZE_MAX);
    parent[a.id] = id;
    parent[b.id] = id;
    heap.push({a.freq + b.freq, std::min(a.symbol, b.symbol), id});
  }
  for (std::size_t s = 0; s < freq.size(); ++s) {
    if (leaf_node[s] == SIZE_MAX) continue;
    std::size_t depth = 0;
    for (std::size_t n = leaf_node[s]; parent[n] != SIZE_MAX; n = parent[n]) ++depth;
    if (depth > kMaxCodeLength) throw Error("huffman: code length exceeds 64");
    t.lengths[s] = static_cast<std::uint8_t>(depth);
  }
  return t;
}

// Canonical codes: symbols ordered by (length, symbol) receive consecutive codes.
inline std::vector<std::uint64_t> canonical_codes(const HuffmanTable& t) {
  check_kraft(t);
  std::vector<std::size_t> order;
  for (std::size_t s = 0; s < t.lengths.size(); ++s)
    if (t.lengths[s]) order.push_back(s);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return t.lengths[a] < t.lengths[b]; });
  std::vector<std::uint64_t> codes(t.lengths.size(), 0);
  std::uint64_t code = 0;
  unsigned prev = t.lengths[order.front()];
  for (std::size_t i = 0; i < order.size(); ++i) {
    const unsigned len = t.lengths[order[i]];
    if (i > 0) code = (code + 1) << (len - prev);
    codes[order[i]] = code;
    prev = len;
  }
  return codes;
}

struct HuffmanEncoded {
  HuffmanTable table;
  Bytes payload;
  std::size_t bit_count = 0;
  std::size_t symbol_count = 0;
};

inline HuffmanEncoded huffman_encode(std::span<const std::uint32_t> labels,
                                     std::size_t alphabet_size = 0) {
  if (labels.empty()) throw Error("huffman_encode: empty input");
  const std::size_t top = *std::max_element(labels.begin(), labels.end());
  alphabet_size = std::max(alphabet_size, top + 1);
  std::vector<std::uint64_t> freq(alphabet_size, 0);
  for (auto l : labels) ++freq[l];
  HuffmanEncoded e;
  e.table = huffman_lengths(freq);
  const auto codes = canonical_codes(e.table);
  BitWriter w;
  for (auto l : labels) {
    const unsigned len = e.table.lengths[l];
    for (unsigned i = len; i-- > 0;) w.put_bit((codes[l] >> i) & 1u);  // code MSB first
  }
  e.bit_count = w.bit_count();
  e.symbol_count = labels.size();
  e.payload = w.take();
  return e;
}

inline std::vector<std::uint32_t> huffman_decode(const HuffmanTable& table,
                                                 std::span<const std::uint8_t> payload,
                                                 std::size_t bit_count, std::size_t symbol_count) {
  const auto codes = canonical_codes(table);
  // Per length: first code and the symbols with that length in canonical order.
  std::vector<std::uint64_t> first(kMaxCodeLength + 1, 0);
  std::vector<std::vector<std::uint32_t>> symbols(kMaxCodeLength + 1);
  for (std::size_t s = 0; s < table.lengths.size(); ++s) {
    const unsigned len = table.lengths[s];
    if (!len) continue;
    if (symbols[len].empty()) first[len] = codes[s];
    symbols[len].push_back(static_cast<std::uint32_t>(s));
  }
  if (payload.size() != (bit_count + 7) / 8) throw Error("huffman_decode: payload length mismatch");
  BitReader r(payload, bit_count);
  std::vector<std::uint32_t> out;
  out.reserve(symbol_count);
  while (out.size() < symbol_count) {
    std::uint64_t code = 0;
    unsigned len = 0;
    for (;;) {
      code = (code << 1) | r.get_bit();
      if (++len > kMaxCodeLength) throw Error("huffman_decode: invalid code");
      const auto& syms = symbols[len];
      if (!syms.empty() && code >= first[len] && code - first[len] < syms.size()) {
        out.push_back(syms[code - first[len]]);
        break;
      }
    }
  }
  if (r.position() != bit_count) throw Error("huffman_decode: trailing bits");
  return out;
}

// ---------------------------------------------------------------------------
// Ratio accounting

// Storage reduction of an n x m float32 layer coded with b shared values:
// 32nm / (log2(b) nm + 32b).
inline double compression_ratio(double n, double m, double b) {
  if (n < 1 || m < 1) throw Error("compression_ratio: n and m must be >= 1");
  if (b < 2) throw Error("compression_ratio: b must be >= 2");
  return 32.0 * n * m / (std::log2(b) * n * m + 32.0 * b);
}

inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  return static_cast<std::uint32_t>(
      ::crc32(::crc32(0L, Z_NULL, 0), bytes.data(), static_cast<uInt>(bytes.size())));
}

// ---------------------------------------------------------------------------
// ".bqz" container

constexpr std::uint16_t kBqzVersion = 1;

enum class CodingMode { Raw, Bins, PQ };

inline const char* to_string(CodingMode m) {
  switch (m) {
    case CodingMode::Raw: return "raw";
    case CodingMode::Bins: return "bins";
    case CodingMode::PQ: return "pq";
  }
  return "?";
}

inline CodingMode parse_coding_mode(const std::string& s) {
  if (s == "raw") return CodingMode::Raw;
  if (s == "bins") return CodingMode::Bins;
  if (s == "pq") return CodingMode::PQ;
  throw Error("unknown coding mode: " + s);
}

// Codebook plus labels for one weight tensor. Bins use d = 1.
struct LayerCoding {
  std::string tensor;
  CodingMode mode = CodingMode::Bins;
  std::size_t d = 1;
  std::vector<double> codebook;  // d * b values, centroid-major
  std::vector<std::uint32_t> labels;

  std::size_t b() const { return codebook.size() / d; }
};

struct BqzOptions {
  bool huffman = false;  // use Huffman labels where smaller than fixed-width packing
  Json metrics = Json::object();
};

inline std::vector<LayerCoding> codings_from(const BqModelResult& r) {
  std::vector<LayerCoding> out;
  for (const auto& l : r.layers) {
    if (!l.accepted) continue;
    out.push_back({r.compressed.weights_of(l.layer).name, CodingMode::Bins, 1,
                   l.bin_spec.representatives, l.labels});
  }
  return out;
}

inline std::vector<LayerCoding> codings_from(const GwkResult& r) {
  std::vector<LayerCoding> out;
  for (const auto& [layer, g] : r.layers)
    out.push_back({r.compressed.weights_of(layer).name, CodingMode::PQ, g.codebook.d,
                   g.codebook.centroids, g.codebook.labels});
  return out;
}

namespace detail {

struct SectionWriter {
  Bytes payload;
  Json add(std::span<const std::uint8_t> bytes) {
    Json s = {{"offset", payload.size()}, {"length", bytes.size()}, {"crc32", crc32_of(bytes)}};
    payload.insert(payload.end(), bytes.begin(), bytes.end());
    return s;
  }
};

inline std::span<const std::uint8_t> section(const Json& s, std::span<const std::uint8_t> payload,
                                             const std::string& what) {
  const auto offset = s.at("offset").get<std::size_t>();
  const auto length = s.at("length").get<std::size_t>();
  if (offset > payload.size() || length > payload.size() - offset)
    throw Error("bqz: truncated payload in " + what);
  const auto bytes = payload.subspan(offset, length);
  if (crc32_of(bytes) != s.at("crc32").get<std::uint32_t>())
    throw Error("bqz: checksum mismatch in " + what);
  return bytes;
}

inline Bytes codebook_bytes(const TensorRecord& t, const std::vector<double>& codebook) {
  Bytes out;
  if (t.dtype == DType::U8) {
    for (double v : codebook) {
      if (v != std::round(v) || v < 0 || v > 255)
        throw Error("bqz: u8 codebook entry out of range in " + t.name);
      out.push_back(static_cast<std::uint8_t>(v));
    }
  } else {
    for (double v : codebook) put_le<float>(out, static_cast<float>(v));
  }
  return out;
}

// Rebuilds the flat tensor from codebook and labels.
inline void reconstruct_into(TensorRecord& t, std::size_t d, std::span<const double> codebook,
                             std::span<const std::uint32_t> labels) {
  const std::size_t n = t.size();
  const std::size_t b = codebook.size() / d;
  if (labels.size() != (n + d - 1) / d) throw Error("bqz: label count mismatch for " + t.name);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= b) throw Error("bqz: label out of range for " + t.name);
    for (std::size_t k = 0; k < d && i * d + k < n; ++k) {
      const double v = codebook[labels[i] * d + k];
      if (t.dtype == DType::U8)
        t.levels[i * d + k] = static_cast<std::uint8_t>(v);
      else
        t.values[i * d + k] = static_cast<float>(v);
    }
  }
}

}  // namespace detail

struct BqzLayerInfo {
  std::string tensor;
  CodingMode mode = CodingMode::Raw;
  std::size_t weight_count = 0;
  std::size_t d = 1;
  std::size_t b = 0;
  std::size_t n_blocks = 0;
  unsigned bits = 0;
  bool huffman = false;
  std::size_t label_bytes = 0;
  std::size_t codebook_bytes = 0;
};

inline Bytes encode_bqz(const Model& model, const std::vector<LayerCoding>& codings,
                        const BqzOptions& opt = {}) {
  validate_model(model);
  std::map<std::string, const LayerCoding*> by_tensor;
  for (const auto& c : codings) {
    if (!model.find(c.tensor)) throw Error("bqz: unknown tensor " + c.tensor);
    if (!by_tensor.emplace(c.tensor, &c).second) throw Error("bqz: duplicate coding for " + c.tensor);
  }
  detail::SectionWriter sw;
  Json tensors = Json::array();
  for (const auto& t : model.tensors) {
    Json e = {{"name", t.name}, {"dtype", to_string(t.dtype)}, {"shape", t.shape},
              {"weight_count", t.size()}};
    if (t.quant) e["quant"] = quant_to_json(*t.quant);
    auto it = by_tensor.find(t.name);
    if (it == by_tensor.end()) {
      Bytes raw;
      append_tensor_payload(raw, t);
      e["mode"] = "raw";
      e["data"] = sw.add(raw);
      tensors.push_back(std::move(e));
      continue;
    }
    const LayerCoding& c = *it->second;
    if (c.d == 0 || c.codebook.empty() || c.codebook.size() % c.d != 0)
      throw Error("bqz: malformed codebook for " + t.name);
    if (c.mode == CodingMode::Bins && c.d != 1) throw Error("bqz: bins coding needs d = 1");
    const std::size_t b = c.b();
    const unsigned bits = static_cast<unsigned>(bits_for(b));
    if (bits > 16) throw Error("bqz: more than 65536 codebook entries in " + t.name);
    // The coding must reproduce the stored tensor exactly.
    TensorRecord check = t;
    const Bytes cb = detail::codebook_bytes(t, c.codebook);
    detail::reconstruct_into(check, c.d, c.codebook, c.labels);
    if (check.values != t.values || check.levels != t.levels)
      throw Error("bqz: coding does not reproduce tensor " + t.name);

    e["mode"] = to_string(c.mode);
    e["d"] = c.d;
    e["b"] = b;
    e["bits"] = bits;
    e["n_blocks"] = c.labels.size();
    e["pad"] = c.labels.size() * c.d - t.size();
    e["codebook"] = sw.add(cb);
    Bytes labels;
    std::string coding = "packed";
    if (bits > 0) {
      PackedStream packed = pack_labels(c.labels, bits);
      labels = std::move(packed.payload);
      if (opt.huffman) {
        HuffmanEncoded h = huffman_encode(c.labels, b);
        if (h.payload.size() < labels.size()) {
          coding = "huffman";
          labels = std::move(h.payload);
          e["huffman_lengths"] = h.table.lengths;
          e["label_bits"] = h.bit_count;
        }
      }
    }
    e["label_coding"] = coding;
    e["labels"] = sw.add(labels);
    tensors.push_back(std::move(e));
  }

  const Json header = {{"format", "bqz"},
                       {"version", kBqzVersion},
                       {"model", to_json(model.manifest)},
                       {"tensors", std::move(tensors)},
                       {"metrics", opt.metrics}};
  const std::string text = header.dump();
  Bytes out{'B', 'Q', 'Z', '1'};
  put_le<std::uint16_t>(out, kBqzVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  put_le<std::uint32_t>(out, crc32_of(std::span(reinterpret_cast<const std::uint8_t*>(text.data()),
                                                text.size())));
  out.insert(out.end(), sw.payload.begin(), sw.payload.end());
  return out;
}

struct BqzFile {
  Model model;
  Json header;
  std::vector<BqzLayerInfo> layers;  // coded (non-raw) tensors
  std::size_t header_bytes = 0;      // magic, version, length, JSON and its checksum
  std::size_t payload_bytes = 0;

  Json metrics() const { return header.value("metrics", Json::object()); }
};

inline BqzFile decode_bqz(std::span<const std::uint8_t> bytes) {
  constexpr std::size_t fixed = 4 + 2 + 4;
  if (bytes.size() < fixed || std::memcmp(bytes.data(), "BQZ1", 4) != 0)
    throw Error("bqz: bad magic");
  const auto version = get_le<std::uint16_t>(bytes, 4);
  if (version != kBqzVersion) throw Error("bqz: unsupported version " + std::to_string(version));
  const auto len = get_le<std::uint32_t>(bytes, 6);
  if (bytes.size() < fixed + len + 4) throw Error("bqz: truncated header");
  const auto text = bytes.subspan(fixed, len);
  if (crc32_of(text) != get_le<std::uint32_t>(bytes, fixed + len))
    throw Error("bqz: header checksum mismatch");

  BqzFile f;
  f.header_bytes = fixed + len + 4;
  const auto payload = bytes.subspan(f.header_bytes);
  f.payload_bytes = payload.size();
  try {
    f.header = Json::parse(text.begin(), text.end());
    f.model.manifest = manifest_from_json(f.header.at("model"));
    for (const auto& e : f.header.at("tensors")) {
      TensorRecord t;
      t.name = e.at("name").get<std::string>();
      t.dtype = parse_dtype(e.at("dtype").get<std::string>());
      t.shape = e.at("shape").get<Shape>();
      if (e.contains("quant")) t.quant = quant_from_json(e["quant"]);
      const CodingMode mode = parse_coding_mode(e.at("mode").get<std::string>());
      if (mode == CodingMode::Raw) {
        const auto data = detail::section(e.at("data"), payload, t.name);
        Json entry = e;
        entry["offset"] = 0;
        entry["length"] = data.size();
        f.model.tensors.push_back(tensor_from_entry(entry, data));
        continue;
      }
      BqzLayerInfo info;
      info.tensor = t.name;
      info.mode = mode;
      info.weight_count = product(t.shape);
      info.d = e.at("d").get<std::size_t>();
      info.b = e.at("b").get<std::size_t>();
      info.bits = e.at("bits").get<unsigned>();
      info.n_blocks = e.at("n_blocks").get<std::size_t>();
      if (info.d == 0 || info.b == 0 || info.bits != bits_for(info.b) ||
          info.n_blocks != (info.weight_count + info.d - 1) / info.d)
        throw Error("bqz: inconsistent coding fields for " + t.name);
      const auto cb = detail::section(e.at("codebook"), payload, t.name + " codebook");
      const auto lb = detail::section(e.at("labels"), payload, t.name + " labels");
      info.codebook_bytes = cb.size();
      info.label_bytes = lb.size();
      std::vector<double> codebook(info.d * info.b);
      if (cb.size() != codebook.size() * (t.dtype == DType::U8 ? 1 : 4))
        throw Error("bqz: codebook length mismatch for " + t.name);
      for (std::size_t i = 0; i < codebook.size(); ++i)
        codebook[i] = t.dtype == DType::U8 ? cb[i] : get_le<float>(cb, 4 * i);
      std::vector<std::uint32_t> labels;
      const std::string coding = e.at("label_coding").get<std::string>();
      if (info.bits == 0) {
        if (!lb.empty()) throw Error("bqz: unexpected labels for " + t.name);
        labels.assign(info.n_blocks, 0);
      } else if (coding == "huffman") {
        info.huffman = true;
        HuffmanTable table{e.at("huffman_lengths").get<std::vector<std::uint8_t>>()};
        labels = huffman_decode(table, lb, e.at("label_bits").get<std::size_t>(), info.n_blocks);
      } else if (coding == "packed") {
        labels = unpack_labels({info.bits, info.n_blocks, Bytes(lb.begin(), lb.end())});
      } else {
        throw Error("bqz: unknown label coding " + coding);
      }
      if (t.dtype == DType::U8)
        t.levels.assign(info.weight_count, 0);
      else
        t.values.assign(info.weight_count, 0.0f);
      detail::reconstruct_into(t, info.d, codebook, labels);
      t.validate();
      f.model.tensors.push_back(std::move(t));
      f.layers.push_back(info);
    }
  } catch (const Json::exception& e) {
    throw Error(std::string("bqz: malformed manifest: ") + e.what());
  }
  validate_model(f.model);
  return f;
}

inline std::size_t write_bqz(const std::filesystem::path& path, const Model& model,
                             const std::vector<LayerCoding>& codings, const BqzOptions& opt = {}) {
  const Bytes bytes = encode_bqz(model, codings, opt);
  write_file_atomic(path, bytes);
  return bytes.size();
}

inline BqzFile read_bqz(const std::filesystem::path& path) { return decode_bqz(read_file(path)); }

// Bits per weight recomputed from a container's coding fields; raw weight
// tensors count at their stored width, biases are excluded.
inline BpwReport bits_per_weight(const BqzFile& f) {
  std::vector<LayerStorage> layers;
  for (const auto* l : f.model.weight_layers()) {
    const auto& t = f.model.at(*l->weight_ref);
    LayerStorage s;
    s.layer = l->name;
    s.weight_count = t.size();
    s.native_bits = t.dtype == DType::U8 ? 8 : 32;
    for (const auto& info : f.layers)
      if (info.tensor == t.name) {
        s.d = info.d;
        s.n_blocks = info.n_blocks;
        s.b = info.b;
        s.codebook_bits = t.dtype == DType::U8 ? 8 : 32;
      }
    layers.push_back(s);
  }
  return bits_per_weight(layers);
}

}  // namespace bqkit
