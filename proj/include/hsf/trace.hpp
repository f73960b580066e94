#pragma once

// Activation traces: per-input hidden-state vectors tapped after every block's
// attention and MLP sublayer, plus the .hsft binary container.
//
// Layout (little-endian):
//   "HSFT" | u16 format_version | u32 header_len | header (JSON, UTF-8)
//   | u64 record_count | records... | u32 crc32(records)
// Each record: u64 record_id | i8 label | for each header layer: dim x f32.

#include <cmath>
#include <compare>
#include <cstdint>
#include <istream>
#include <iterator>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "hsf/bytes.hpp"
#include "hsf/error.hpp"

namespace hsf {

enum class LayerKind : std::uint8_t { Attention = 0, Mlp = 1 };

inline const char* to_string(LayerKind kind) {
  return kind == LayerKind::Attention ? "attention" : "mlp";
}

inline LayerKind parse_layer_kind(const std::string& text) {
  if (text == "attention" || text == "attn") return LayerKind::Attention;
  if (text == "mlp") return LayerKind::Mlp;
  throw ValidationError("unknown layer kind '" + text + "'");
}

/// A tap point. Ordered by (kind, block): all attention taps first.
struct LayerId {
  std::uint32_t block = 0;
  LayerKind kind = LayerKind::Attention;

  friend bool operator==(const LayerId&, const LayerId&) = default;
  friend std::strong_ordering operator<=>(const LayerId& a, const LayerId& b) {
    if (auto c = a.kind <=> b.kind; c != 0) return c;
    return a.block <=> b.block;
  }
};

inline std::string to_string(LayerId id) {
  return std::string("(") + std::to_string(id.block) + "," + to_string(id.kind) + ")";
}

enum class Aggregation : std::uint8_t { LastToken, MeanPool };

inline const char* to_string(Aggregation a) {
  return a == Aggregation::LastToken ? "last_token" : "mean_pool";
}

inline Aggregation parse_aggregation(const std::string& text) {
  if (text == "last_token") return Aggregation::LastToken;
  if (text == "mean_pool") return Aggregation::MeanPool;
  throw ValidationError("unknown aggregation '" + text + "'");
}

enum class Label : std::int8_t { Unlabeled = -1, Normal = 0, Abnormal = 1 };

struct LayerSpec {
  LayerId id;
  std::uint32_t dim = 0;
  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

inline constexpr std::uint16_t kTraceFormatVersion = 1;

struct TraceHeader {
  std::uint16_t format_version = kTraceFormatVersion;
  std::string model_id;
  std::uint32_t num_blocks = 0;
  std::vector<LayerSpec> layers;  // sorted by (kind, block), 2 * num_blocks entries
  Aggregation aggregation = Aggregation::LastToken;

  friend bool operator==(const TraceHeader&, const TraceHeader&) = default;

  /// Header where every tap has the same width.
  static TraceHeader uniform(std::string model_id, std::uint32_t num_blocks, std::uint32_t dim,
                             Aggregation aggregation = Aggregation::LastToken) {
    TraceHeader h;
    h.model_id = std::move(model_id);
    h.num_blocks = num_blocks;
    h.aggregation = aggregation;
    for (LayerKind kind : {LayerKind::Attention, LayerKind::Mlp}) {
      for (std::uint32_t b = 0; b < num_blocks; ++b) h.layers.push_back({{b, kind}, dim});
    }
    return h;
  }

  std::optional<std::uint32_t> dim_of(LayerId id) const {
    for (const auto& l : layers) {
      if (l.id == id) return l.dim;
    }
    return std::nullopt;
  }

  std::vector<LayerId> layer_ids() const {
    std::vector<LayerId> ids;
    ids.reserve(layers.size());
    for (const auto& l : layers) ids.push_back(l.id);
    return ids;
  }

  /// Number of f32 values per record.
  std::uint64_t values_per_record() const {
    std::uint64_t n = 0;
    for (const auto& l : layers) n += l.dim;
    return n;
  }
};

struct SampleRecord {
  std::uint64_t record_id = 0;
  Label label = Label::Unlabeled;
  std::map<LayerId, std::vector<float>> activations;

  friend bool operator==(const SampleRecord&, const SampleRecord&) = default;

  const std::vector<float>& at(LayerId id) const {
    auto it = activations.find(id);
    if (it == activations.end()) {
      throw ValidationError("record " + std::to_string(record_id) + " has no layer " +
                            to_string(id));
    }
    return it->second;
  }
};

struct ActivationTrace {
  TraceHeader header;
  std::vector<SampleRecord> records;
};

/// Equality is bitwise on activation values, so NaN payloads and signed zeros
/// must match exactly.
inline bool bitwise_equal(const ActivationTrace& a, const ActivationTrace& b) {
  if (!(a.header == b.header) || a.records.size() != b.records.size()) return false;
  for (std::size_t r = 0; r < a.records.size(); ++r) {
    const auto& x = a.records[r];
    const auto& y = b.records[r];
    if (x.record_id != y.record_id || x.label != y.label ||
        x.activations.size() != y.activations.size())
      return false;
    for (auto it = x.activations.begin(), jt = y.activations.begin(); it != x.activations.end();
         ++it, ++jt) {
      if (it->first != jt->first || it->second.size() != jt->second.size()) return false;
      for (std::size_t i = 0; i < it->second.size(); ++i) {
        if (std::bit_cast<std::uint32_t>(it->second[i]) !=
            std::bit_cast<std::uint32_t>(jt->second[i]))
          return false;
      }
    }
  }
  return true;
}

// ---------------------------------------------------------------------------
// Validation

struct Violation {
  std::optional<std::uint64_t> record_id;
  std::optional<LayerId> layer;
  std::string message;
};

inline std::string to_string(const Violation& v) {
  std::string s;
  if (v.record_id) s += "record " + std::to_string(*v.record_id) + ": ";
  if (v.layer) s += "layer " + to_string(*v.layer) + ": ";
  return s + v.message;
}

inline std::vector<Violation> validate_header(const TraceHeader& h) {
  std::vector<Violation> out;
  auto add = [&](std::optional<LayerId> layer, std::string msg) {
    out.push_back({std::nullopt, layer, std::move(msg)});
  };
  if (h.num_blocks == 0) add(std::nullopt, "num_blocks must be positive");
  if (h.layers.size() != 2ull * h.num_blocks) {
    add(std::nullopt, "layer table has " + std::to_string(h.layers.size()) + " entries, expected " +
                          std::to_string(2ull * h.num_blocks));
  }
  std::map<LayerId, int> seen;
  for (std::size_t i = 0; i < h.layers.size(); ++i) {
    const auto& l = h.layers[i];
    if (l.id.kind != LayerKind::Attention && l.id.kind != LayerKind::Mlp)
      add(std::nullopt, "invalid layer kind in layer table");
    if (l.id.block >= h.num_blocks) add(l.id, "block index out of range");
    if (l.dim == 0) add(l.id, "dimension must be positive");
    if (++seen[l.id] == 2) add(l.id, "duplicate layer");
    if (i > 0 && !(h.layers[i - 1].id < l.id)) add(l.id, "layer table not sorted by (kind, block)");
  }
  for (std::uint32_t b = 0; b < h.num_blocks && h.num_blocks <= (1u << 20); ++b) {
    for (LayerKind k : {LayerKind::Attention, LayerKind::Mlp}) {
      if (!seen.count({b, k})) add(LayerId{b, k}, "missing from layer table");
    }
  }
  return out;
}

/// Every violated invariant, with record and layer context. Empty means valid.
inline std::vector<Violation> validate_trace(const ActivationTrace& trace) {
  std::vector<Violation> out = validate_header(trace.header);
  std::optional<std::uint64_t> prev_id;
  for (const auto& rec : trace.records) {
    auto add = [&](std::optional<LayerId> layer, std::string msg) {
      out.push_back({rec.record_id, layer, std::move(msg)});
    };
    if (prev_id && rec.record_id <= *prev_id) {
      add(std::nullopt, "record_id not strictly increasing (previous " + std::to_string(*prev_id) +
                            ")");
    }
    prev_id = rec.record_id;
    const auto lab = static_cast<int>(rec.label);
    if (lab < -1 || lab > 1) add(std::nullopt, "label must be -1, 0 or 1");
    for (const auto& spec : trace.header.layers) {
      auto it = rec.activations.find(spec.id);
      if (it == rec.activations.end()) {
        add(spec.id, "missing activations");
        continue;
      }
      if (it->second.size() != spec.dim) {
        add(spec.id, "vector length " + std::to_string(it->second.size()) + " != declared dim " +
                         std::to_string(spec.dim));
      }
      for (std::size_t j = 0; j < it->second.size(); ++j) {
        if (!std::isfinite(it->second[j])) {
          add(spec.id, "non-finite value at index " + std::to_string(j));
          break;
        }
      }
    }
    for (const auto& [id, _] : rec.activations) {
      if (!trace.header.dim_of(id)) add(id, "layer not declared in header");
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Container I/O

namespace detail {

inline nlohmann::json header_to_json(const TraceHeader& h) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : h.layers) {
    layers.push_back({{"block", l.id.block}, {"kind", to_string(l.id.kind)}, {"dim", l.dim}});
  }
  return {{"model_id", h.model_id},
          {"num_blocks", h.num_blocks},
          {"aggregation", to_string(h.aggregation)},
          {"value_dtype", "f32"},
          {"layers", layers}};
}

inline TraceHeader header_from_json(const nlohmann::json& j, std::uint16_t version) {
  TraceHeader h;
  h.format_version = version;
  try {
    h.model_id = j.at("model_id").get<std::string>();
    h.num_blocks = j.at("num_blocks").get<std::uint32_t>();
    h.aggregation = parse_aggregation(j.at("aggregation").get<std::string>());
    if (j.at("value_dtype").get<std::string>() != "f32") {
      throw FormatError("unsupported value_dtype");
    }
    for (const auto& l : j.at("layers")) {
      h.layers.push_back({{l.at("block").get<std::uint32_t>(),
                           parse_layer_kind(l.at("kind").get<std::string>())},
                          l.at("dim").get<std::uint32_t>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed trace header: ") + e.what());
  } catch (const ValidationError& e) {
    throw FormatError(std::string("malformed trace header: ") + e.what());
  }
  return h;
}

inline std::vector<std::uint8_t> slurp(std::istream& in) {
  std::vector<std::uint8_t> data{std::istreambuf_iterator<char>(in),
                                 std::istreambuf_iterator<char>()};
  if (in.bad()) throw IoError("failed reading input stream");
  return data;
}

inline void throw_if_invalid(const std::vector<Violation>& report, const char* what) {
  if (report.empty()) return;
  std::string msg = std::string(what) + ": " + to_string(report.front());
  if (report.size() > 1) msg += " (+" + std::to_string(report.size() - 1) + " more)";
  throw ValidationError(msg);
}

}  // namespace detail

/// Serializes a valid trace into an in-memory .hsft image.
inline std::vector<std::uint8_t> encode_trace(const ActivationTrace& trace) {
  detail::throw_if_invalid(validate_trace(trace), "invalid trace");
  bytes::Writer w;
  w.raw("HSFT");
  w.u16(kTraceFormatVersion);
  const std::string header = detail::header_to_json(trace.header).dump();
  w.u32(static_cast<std::uint32_t>(header.size()));
  w.raw(header);
  w.u64(trace.records.size());
  const std::size_t region_start = w.size();
  for (const auto& rec : trace.records) {
    w.u64(rec.record_id);
    w.i8(static_cast<std::int8_t>(rec.label));
    for (const auto& spec : trace.header.layers) {
      for (float v : rec.activations.at(spec.id)) w.f32(v);
    }
  }
  const auto& buf = w.buffer();
  const std::uint32_t crc =
      bytes::crc32(std::span(buf).subspan(region_start, buf.size() - region_start));
  w.u32(crc);
  return std::move(w.buffer());
}

/// Writes the .hsft layout; returns the number of bytes written. Invalid traces
/// are rejected before anything reaches the sink.
inline std::uint64_t write_trace(const ActivationTrace& trace, std::ostream& out) {
  const auto image = encode_trace(trace);
  const auto start = out.tellp();
  out.write(reinterpret_cast<const char*>(image.data()),
            static_cast<std::streamsize>(image.size()));
  out.flush();
  if (!out) {
    const auto now = out.tellp();
    const std::uint64_t written =
        (start >= 0 && now >= start) ? static_cast<std::uint64_t>(now - start) : 0;
    throw IoError("trace sink failed after " + std::to_string(written) + " bytes", written);
  }
  return image.size();
}

inline ActivationTrace decode_trace(std::span<const std::uint8_t> data) {
  bytes::Reader r(data);
  ActivationTrace trace;
  std::uint64_t count = 0;
  try {
    if (r.str(4) != "HSFT") throw FormatError("bad magic: not an .hsft trace");
    const std::uint16_t version = r.u16();
    if (version != kTraceFormatVersion) {
      throw VersionError("unsupported .hsft format_version " + std::to_string(version) +
                         " (supported: " + std::to_string(kTraceFormatVersion) + ")");
    }
    const std::uint32_t header_len = r.u32();
    const std::string header_text = r.str(header_len);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(header_text);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("trace header is not valid JSON: ") + e.what());
    }
    trace.header = detail::header_from_json(j, version);
    count = r.u64();
  } catch (const TruncationError&) {
    throw TruncationError("trace truncated inside the file header", 0);
  }
  if (auto hv = validate_header(trace.header); !hv.empty()) {
    throw FormatError("invalid trace header: " + to_string(hv.front()));
  }

  const std::uint64_t record_size = 8 + 1 + 4 * trace.header.values_per_record();
  const std::uint64_t available = r.remaining();
  if (count > available / record_size) {
    const std::uint64_t complete = available / record_size;
    throw TruncationError("trace truncated at record index " + std::to_string(complete) + " of " +
                              std::to_string(count),
                          complete);
  }
  const std::uint64_t region_size = count * record_size;
  if (available < region_size + 4) {
    throw TruncationError("trace truncated: trailing checksum missing", count);
  }
  if (available > region_size + 4) {
    throw FormatError("unexpected " + std::to_string(available - region_size - 4) +
                      " trailing bytes after checksum");
  }
  const auto region = r.take(region_size);
  const std::uint32_t stored = r.u32();
  if (bytes::crc32(region) != stored) {
    throw CorruptionError("trace checksum mismatch: record region is corrupted");
  }

  bytes::Reader rr(region);
  trace.records.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    SampleRecord rec;
    rec.record_id = rr.u64();
    rec.label = static_cast<Label>(rr.i8());
    for (const auto& spec : trace.header.layers) {
      std::vector<float> v(spec.dim);
      for (auto& x : v) x = rr.f32();
      rec.activations.emplace(spec.id, std::move(v));
    }
    trace.records.push_back(std::move(rec));
  }
  // Checksum passed, so any remaining violation was written that way.
  if (auto report = validate_trace(trace); !report.empty()) {
    throw FormatError("trace content violates invariants: " + to_string(report.front()));
  }
  return trace;
}

inline ActivationTrace read_trace(std::istream& in) {
  const auto data = detail::slurp(in);
  return decode_trace(data);
}

}  // namespace hsf
