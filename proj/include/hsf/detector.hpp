#pragma once

// Detection pipeline: critical-layer analysis on normal vs abnormal traces,
// feature extraction over the selected layers + classifier training, then
// per-record detection with the frozen artifact.
//
// .hsfa container (little-endian):
//   "HSFA" | u16 format_version | u32 meta_len | metadata (JSON)
//   | u64 blob_len | blob | u32 crc32(everything between magic and crc)
// Blob: standardization mean[n], std[n], then per dense layer weights
// (column-major, in x out) and biases, all f64.

#include <iomanip>
#include <istream>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "hsf/bytes.hpp"
#include "hsf/error.hpp"
#include "hsf/features.hpp"
#include "hsf/layer_analysis.hpp"
#include "hsf/mlp.hpp"
#include "hsf/trace.hpp"

namespace hsf {

struct PipelineConfig {
  FeatureKind feature_kind = FeatureKind::Ane;
  ActivationThreshold theta{0.2};
  SelectionRatios ratios{0.25, 0.25};
  TrainConfig train;
  std::array<std::size_t, 3> hidden{256, 128, 64};
  std::string behavior = "abnormal";  // one artifact per abnormality type

  void validate() const {
    train.validate();
    for (auto h : hidden) {
      if (h == 0) throw ValidationError("hidden layer widths must be positive");
    }
    if (ratios.alpha == 0.0 && ratios.beta == 0.0) {
      throw ValidationError("alpha and beta are both 0: no layers would be selected");
    }
  }
};

struct HeaderFingerprint {
  std::string model_id;
  std::uint32_t num_blocks = 0;
  std::uint64_t layer_table_hash = 0;
  Aggregation aggregation = Aggregation::LastToken;
  friend bool operator==(const HeaderFingerprint&, const HeaderFingerprint&) = default;
};

inline HeaderFingerprint fingerprint_of(const TraceHeader& h) {
  std::string table;
  for (const auto& l : h.layers) {
    table += std::to_string(l.id.block) + ":" + to_string(l.id.kind) + ":" + std::to_string(l.dim) + ";";
  }
  return {h.model_id, h.num_blocks, bytes::fnv1a64(table), h.aggregation};
}

/// Throws naming the first differing field.
inline void check_fingerprint(const HeaderFingerprint& expected, const TraceHeader& header) {
  const auto got = fingerprint_of(header);
  if (got.model_id != expected.model_id) {
    throw ValidationError("fingerprint mismatch: model_id '" + got.model_id + "' != '" +
                          expected.model_id + "'");
  }
  if (got.num_blocks != expected.num_blocks) {
    throw ValidationError("fingerprint mismatch: num_blocks " + std::to_string(got.num_blocks) +
                          " != " + std::to_string(expected.num_blocks));
  }
  if (got.layer_table_hash != expected.layer_table_hash) {
    throw ValidationError("fingerprint mismatch: layer table differs");
  }
  if (got.aggregation != expected.aggregation) {
    throw ValidationError(std::string("fingerprint mismatch: aggregation ") +
                          to_string(got.aggregation) + " != " + to_string(expected.aggregation));
  }
}

struct DetectorArtifact {
  HeaderFingerprint fingerprint;
  CriticalLayerReport report;
  StandardizationStats standardization;
  MlpModel classifier;
  PipelineConfig config;
  std::string created;  // free-form creation metadata; empty in deterministic runs
};

/// Classifier input width implied by the feature kind and selected layers.
inline std::size_t feature_width(FeatureKind kind, const TraceHeader& header,
                                 std::span<const LayerId> layers) {
  if (kind == FeatureKind::Ane) return layers.size();
  std::size_t n = 0;
  for (auto id : layers) {
    auto d = header.dim_of(id);
    if (!d) throw ValidationError("selected layer " + to_string(id) + " not in header");
    n += *d;
  }
  return n;
}

struct PipelineBuild {
  DetectorArtifact artifact;
  TrainHistory history;
  bool imbalance_warning = false;
};

namespace detail {

inline void check_role_labels(const ActivationTrace& t, Label role, const char* name) {
  for (const auto& r : t.records) {
    if (r.label != role && r.label != Label::Unlabeled) {
      throw ValidationError(std::string(name) + " trace record " + std::to_string(r.record_id) +
                            " carries a conflicting label");
    }
  }
}

}  // namespace detail

inline PipelineBuild build_pipeline(const ActivationTrace& normal, const ActivationTrace& abnormal,
                                    const PipelineConfig& config) {
  config.validate();
  if (!(normal.header.layers == abnormal.header.layers) ||
      normal.header.num_blocks != abnormal.header.num_blocks ||
      normal.header.model_id != abnormal.header.model_id ||
      normal.header.aggregation != abnormal.header.aggregation) {
    throw ValidationError("header mismatch between normal and abnormal traces");
  }
  if (normal.records.empty() || abnormal.records.empty()) {
    throw ValidationError("normal and abnormal traces must both be non-empty");
  }
  detail::check_role_labels(normal, Label::Normal, "normal");
  detail::check_role_labels(abnormal, Label::Abnormal, "abnormal");

  PipelineBuild out;
  auto& art = out.artifact;
  art.config = config;
  art.fingerprint = fingerprint_of(normal.header);
  art.report = critical_layer_analysis(normal, abnormal, config.feature_kind, config.theta, config.ratios);

  std::vector<InputFeatureVector> features;
  std::vector<int> labels;
  features.reserve(normal.records.size() + abnormal.records.size());
  for (const auto* t : {&normal, &abnormal}) {
    for (const auto& rec : t->records) {
      features.push_back(extract_features(rec, art.report.selected, config.feature_kind, config.theta));
      labels.push_back(t == &abnormal ? 1 : 0);
    }
  }
  art.standardization = fit_standardizer(features);

  std::vector<std::vector<double>> rows;
  rows.reserve(features.size());
  for (auto& f : features) rows.push_back(apply_standardizer(art.standardization, std::move(f)).values);
  const auto batch = Batch::from_rows(rows, labels);

  const std::size_t width = feature_width(config.feature_kind, normal.header, art.report.selected);
  const MlpDims dims{width, config.hidden[0], config.hidden[1], config.hidden[2], 2};
  auto trained = train(init_mlp(dims, derive_seed(config.train.seed, 1)), batch, config.train);
  art.classifier = std::move(trained.model);
  out.history = std::move(trained.history);
  out.imbalance_warning = trained.imbalance_warning;
  return out;
}

/// Verdict for one record. Stateless.
inline Verdict detect(const DetectorArtifact& art, const TraceHeader& header,
                      const SampleRecord& record) {
  check_fingerprint(art.fingerprint, header);
  auto f = extract_features(record, art.report.selected, art.config.feature_kind, art.config.theta);
  standardize_in_place(art.standardization, f.values);
  return predict(art.classifier, f.values);
}

inline std::vector<Verdict> detect_all(const DetectorArtifact& art, const ActivationTrace& trace) {
  check_fingerprint(art.fingerprint, trace.header);
  std::vector<Verdict> out;
  out.reserve(trace.records.size());
  for (const auto& rec : trace.records) out.push_back(detect(art, trace.header, rec));
  return out;
}

struct EvalMetrics {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;

  std::size_t total() const { return tp + fp + tn + fn; }
};

/// Abnormal (1) is the positive class; 0/0 ratios are reported as 0.
inline EvalMetrics compute_metrics(std::span<const int> truth, std::span<const int> predicted) {
  if (truth.size() != predicted.size()) throw ValidationError("label/prediction count mismatch");
  if (truth.empty()) throw ValidationError("cannot compute metrics over zero records");
  EvalMetrics m;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const bool t = truth[i] == 1, p = predicted[i] == 1;
    if (t && p) ++m.tp;
    else if (!t && p) ++m.fp;
    else if (!t && !p) ++m.tn;
    else ++m.fn;
  }
  auto ratio = [](std::size_t a, std::size_t b) { return b == 0 ? 0.0 : static_cast<double>(a) / static_cast<double>(b); };
  m.accuracy = ratio(m.tp + m.tn, m.total());
  m.precision = ratio(m.tp, m.tp + m.fp);
  m.recall = ratio(m.tp, m.tp + m.fn);
  m.f1 = (m.precision + m.recall) == 0.0 ? 0.0 : 2.0 * m.precision * m.recall / (m.precision + m.recall);
  return m;
}

inline EvalMetrics evaluate(const DetectorArtifact& art, const ActivationTrace& labeled) {
  if (labeled.records.empty()) throw ValidationError("evaluation trace has no records");
  std::vector<int> truth;
  truth.reserve(labeled.records.size());
  for (const auto& r : labeled.records) {
    if (r.label == Label::Unlabeled) {
      throw ValidationError("record " + std::to_string(r.record_id) + " is unlabeled; evaluation needs labels");
    }
    truth.push_back(static_cast<int>(r.label));
  }
  std::vector<int> predicted;
  predicted.reserve(truth.size());
  for (const auto& v : detect_all(art, labeled)) predicted.push_back(v.label);
  return compute_metrics(truth, predicted);
}

// ---------------------------------------------------------------------------
// Artifact container

inline constexpr std::uint16_t kArtifactFormatVersion = 1;

namespace detail {

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

inline nlohmann::json artifact_metadata(const DetectorArtifact& a) {
  const auto& c = a.config;
  return {
      {"behavior", c.behavior},
      {"created", a.created},
      {"fingerprint",
       {{"model_id", a.fingerprint.model_id},
        {"num_blocks", a.fingerprint.num_blocks},
        {"layer_table_hash", hex64(a.fingerprint.layer_table_hash)},
        {"aggregation", to_string(a.fingerprint.aggregation)}}},
      {"config",
       {{"feature_kind", to_string(c.feature_kind)},
        {"theta", c.theta.value},
        {"alpha", c.ratios.alpha},
        {"beta", c.ratios.beta},
        {"hidden", c.hidden},
        {"train",
         {{"learning_rate", c.train.learning_rate},
          {"momentum", c.train.momentum},
          {"decay_factor", c.train.decay_factor},
          {"decay_every", c.train.decay_every},
          {"epochs", c.train.epochs},
          {"batch_size", c.train.batch_size},
          {"seed", c.train.seed}}}}},
      {"report", to_json(a.report)},
      {"classifier_dims", a.classifier.dims},
      {"standardization_dim", a.standardization.dim()},
  };
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_artifact(const DetectorArtifact& a) {
  if (a.config.feature_kind == FeatureKind::Ane && a.classifier.input_dim() != a.report.selected.size()) {
    throw ValidationError("ANE artifact classifier input must equal the number of selected layers");
  }
  if (a.standardization.dim() != a.classifier.input_dim() ||
      a.standardization.std.size() != a.standardization.mean.size()) {
    throw ValidationError("artifact standardization and classifier dimensions disagree");
  }
  bytes::Writer blob;
  for (double v : a.standardization.mean) blob.f64(v);
  for (double v : a.standardization.std) blob.f64(v);
  a.classifier.params.for_each([&](const double& v) { blob.f64(v); });

  bytes::Writer w;
  w.raw("HSFA");
  w.u16(kArtifactFormatVersion);
  const std::string meta = detail::artifact_metadata(a).dump(2);
  w.u32(static_cast<std::uint32_t>(meta.size()));
  w.raw(meta);
  w.u64(blob.size());
  w.buffer().insert(w.buffer().end(), blob.buffer().begin(), blob.buffer().end());
  const auto& buf = w.buffer();
  w.u32(bytes::crc32(std::span(buf).subspan(4)));
  return std::move(w.buffer());
}

inline void save_artifact(const DetectorArtifact& a, std::ostream& out) {
  const auto image = encode_artifact(a);
  out.write(reinterpret_cast<const char*>(image.data()), static_cast<std::streamsize>(image.size()));
  out.flush();
  if (!out) throw IoError("artifact sink failed");
}

inline DetectorArtifact decode_artifact(std::span<const std::uint8_t> data) {
  bytes::Reader r(data);
  DetectorArtifact a;
  try {
    if (r.str(4) != "HSFA") throw FormatError("bad magic: not an .hsfa artifact");
    const auto version = r.u16();
    if (version != kArtifactFormatVersion) {
      throw VersionError("unsupported .hsfa format_version " + std::to_string(version) +
                         " (supported: " + std::to_string(kArtifactFormatVersion) + ")");
    }
    const auto meta_len = r.u32();
    r.take(meta_len);
    const auto blob_len = r.u64();
    if (blob_len > r.remaining()) throw TruncationError("", 0);
    r.take(blob_len);
    const auto stored = r.u32();
    if (r.remaining() != 0) throw FormatError("trailing bytes after artifact checksum");
    if (bytes::crc32(data.subspan(4, data.size() - 8)) != stored) {
      throw CorruptionError("artifact checksum mismatch");
    }
  } catch (const TruncationError&) {
    throw TruncationError("artifact file is truncated", 0);
  }

  bytes::Reader p(data.subspan(6));
  const auto meta_len = p.u32();
  const std::string meta_text = p.str(meta_len);
  const auto blob_len = p.u64();
  bytes::Reader blob(p.take(blob_len));
  try {
    const auto j = nlohmann::json::parse(meta_text);
    a.created = j.at("created").get<std::string>();
    const auto& fp = j.at("fingerprint");
    a.fingerprint.model_id = fp.at("model_id").get<std::string>();
    a.fingerprint.num_blocks = fp.at("num_blocks").get<std::uint32_t>();
    a.fingerprint.layer_table_hash =
        std::stoull(fp.at("layer_table_hash").get<std::string>(), nullptr, 16);
    a.fingerprint.aggregation = parse_aggregation(fp.at("aggregation").get<std::string>());
    const auto& c = j.at("config");
    a.config.behavior = j.at("behavior").get<std::string>();
    a.config.feature_kind = parse_feature_kind(c.at("feature_kind").get<std::string>());
    a.config.theta = ActivationThreshold(c.at("theta").get<double>());
    a.config.ratios = SelectionRatios(c.at("alpha").get<double>(), c.at("beta").get<double>());
    a.config.hidden = c.at("hidden").get<std::array<std::size_t, 3>>();
    const auto& t = c.at("train");
    a.config.train.learning_rate = t.at("learning_rate").get<double>();
    a.config.train.momentum = t.at("momentum").get<double>();
    a.config.train.decay_factor = t.at("decay_factor").get<double>();
    a.config.train.decay_every = t.at("decay_every").get<std::size_t>();
    a.config.train.epochs = t.at("epochs").get<std::size_t>();
    a.config.train.batch_size = t.at("batch_size").get<std::size_t>();
    a.config.train.seed = t.at("seed").get<std::uint64_t>();
    a.report = report_from_json(j.at("report"));
    const auto dims = j.at("classifier_dims").get<std::vector<std::size_t>>();
    const auto n = j.at("standardization_dim").get<std::size_t>();

    a.standardization.mean.resize(n);
    a.standardization.std.resize(n);
    for (auto& v : a.standardization.mean) v = blob.f64();
    for (auto& v : a.standardization.std) v = blob.f64();
    a.classifier = init_mlp(dims, 0);
    a.classifier.params.for_each([&](double& v) { v = blob.f64(); });
    if (blob.remaining() != 0) throw FormatError("artifact parameter blob has unexpected size");
    if (n != a.classifier.input_dim()) throw FormatError("standardization/classifier dimension mismatch");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed artifact metadata: ") + e.what());
  } catch (const ValidationError& e) {
    throw FormatError(std::string("malformed artifact metadata: ") + e.what());
  } catch (const TruncationError&) {
    throw FormatError("artifact parameter blob shorter than declared dimensions");
  }
  return a;
}

inline DetectorArtifact load_artifact(std::istream& in) {
  const auto data = detail::slurp(in);
  return decode_artifact(data);
}

}  // namespace hsf
