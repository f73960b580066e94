#pragma once

// Feature extraction over tapped hidden states.
//
// Two families:
//   NAS (neuron activation score): raw activation values.
//   ANE (active neuron engagement): neurons whose activation is strictly above
//       a threshold theta.
// Each has a dataset-level form (per-neuron mean / per-neuron activation
// frequency over a set of records, used for layer ranking) and an input-level
// form (concatenated activations / one active-neuron count per layer, used by
// the classifier).

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "hsf/error.hpp"
#include "hsf/numeric.hpp"
#include "hsf/trace.hpp"

namespace hsf {

enum class FeatureKind : std::uint8_t { Nas, Ane };

inline const char* to_string(FeatureKind kind) { return kind == FeatureKind::Nas ? "nas" : "ane"; }

inline FeatureKind parse_feature_kind(const std::string& text) {
  if (text == "nas" || text == "NAS" || text == "full") return FeatureKind::Nas;
  if (text == "ane" || text == "ANE" || text == "lite") return FeatureKind::Ane;
  throw ValidationError("unknown feature kind '" + text + "' (expected nas or ane)");
}

/// Activation threshold for ANE; any finite value.
struct ActivationThreshold {
  double value = 0.2;

  explicit ActivationThreshold(double v = 0.2) : value(v) {
    if (!std::isfinite(v)) throw ValidationError("activation threshold must be finite");
  }
  bool active(double activation) const { return activation > value; }
};

struct DatasetFeatureVector {
  LayerId layer;
  FeatureKind kind = FeatureKind::Nas;
  std::vector<double> values;
  std::size_t sample_count = 0;
};

struct LayerSpan {
  LayerId layer;
  std::size_t length = 0;
  friend bool operator==(const LayerSpan&, const LayerSpan&) = default;
};

struct InputFeatureVector {
  std::vector<double> values;
  std::vector<LayerSpan> layout;
};

inline std::size_t layout_width(std::span<const LayerSpan> layout) {
  std::size_t n = 0;
  for (const auto& s : layout) n += s.length;
  return n;
}

/// Canonical (kind, block) order; duplicates are rejected.
inline std::vector<LayerId> canonical_layers(std::span<const LayerId> layers) {
  std::vector<LayerId> sorted(layers.begin(), layers.end());
  std::sort(sorted.begin(), sorted.end());
  if (auto dup = std::adjacent_find(sorted.begin(), sorted.end()); dup != sorted.end()) {
    throw ValidationError("layer " + to_string(*dup) + " requested twice");
  }
  return sorted;
}

inline InputFeatureVector extract_nas(const SampleRecord& record, std::span<const LayerId> layers) {
  InputFeatureVector out;
  for (LayerId id : canonical_layers(layers)) {
    const auto& act = record.at(id);
    out.values.insert(out.values.end(), act.begin(), act.end());
    out.layout.push_back({id, act.size()});
  }
  return out;
}

/// Number of entries strictly above theta.
inline std::size_t count_active(std::span<const float> activations, ActivationThreshold theta) {
  return static_cast<std::size_t>(std::count_if(activations.begin(), activations.end(),
                                                [&](float a) { return theta.active(a); }));
}

inline InputFeatureVector extract_ane(const SampleRecord& record, std::span<const LayerId> layers,
                                      ActivationThreshold theta) {
  InputFeatureVector out;
  for (LayerId id : canonical_layers(layers)) {
    out.values.push_back(static_cast<double>(count_active(record.at(id), theta)));
    out.layout.push_back({id, 1});
  }
  return out;
}

inline InputFeatureVector extract_features(const SampleRecord& record,
                                           std::span<const LayerId> layers, FeatureKind kind,
                                           ActivationThreshold theta) {
  return kind == FeatureKind::Nas ? extract_nas(record, layers)
                                  : extract_ane(record, layers, theta);
}

using RecordFilter = std::function<bool(const SampleRecord&)>;

inline RecordFilter all_records() {
  return [](const SampleRecord&) { return true; };
}

inline RecordFilter with_label(Label label) {
  return [label](const SampleRecord& r) { return r.label == label; };
}

/// NAS: per-neuron mean activation. ANE: per-neuron fraction of records whose
/// activation exceeds theta. Independent of record order.
inline DatasetFeatureVector dataset_feature(const ActivationTrace& trace, const RecordFilter& subset,
                                            LayerId layer, FeatureKind kind,
                                            ActivationThreshold theta) {
  const auto dim = trace.header.dim_of(layer);
  if (!dim) throw ValidationError("layer " + to_string(layer) + " not in trace header");

  std::vector<CompensatedSum> sums(*dim);
  std::vector<std::size_t> active(*dim, 0);
  std::size_t n = 0;
  for (const auto& rec : trace.records) {
    if (!subset(rec)) continue;
    const auto& act = rec.at(layer);
    if (act.size() != *dim) {
      throw ValidationError("record " + std::to_string(rec.record_id) + " layer " +
                            to_string(layer) + " has wrong length");
    }
    ++n;
    for (std::size_t j = 0; j < act.size(); ++j) {
      if (kind == FeatureKind::Nas) {
        sums[j].add(act[j]);
      } else if (theta.active(act[j])) {
        ++active[j];
      }
    }
  }
  if (n == 0) throw ValidationError("dataset feature over an empty record subset");

  DatasetFeatureVector out{layer, kind, std::vector<double>(*dim), n};
  for (std::size_t j = 0; j < *dim; ++j) {
    out.values[j] = kind == FeatureKind::Nas ? sums[j].value() / static_cast<double>(n)
                                             : static_cast<double>(active[j]) / static_cast<double>(n);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Standardization (z-score fitted on training features)

inline constexpr double kStdFloor = 1e-8;

struct StandardizationStats {
  std::vector<double> mean;
  std::vector<double> std;

  std::size_t dim() const { return mean.size(); }
};

inline StandardizationStats fit_standardizer(std::span<const InputFeatureVector> vectors) {
  if (vectors.size() < 2) throw ValidationError("standardizer needs at least two vectors");
  const auto& layout = vectors.front().layout;
  const std::size_t dim = vectors.front().values.size();
  for (const auto& v : vectors) {
    if (v.layout != layout || v.values.size() != dim) {
      throw ValidationError("standardizer inputs have mismatched layouts");
    }
  }
  const double n = static_cast<double>(vectors.size());
  StandardizationStats stats{std::vector<double>(dim), std::vector<double>(dim)};
  for (std::size_t j = 0; j < dim; ++j) {
    CompensatedSum s;
    for (const auto& v : vectors) s.add(v.values[j]);
    const double mean = s.value() / n;
    CompensatedSum sq;
    for (const auto& v : vectors) {
      const double d = v.values[j] - mean;
      sq.add(d * d);
    }
    stats.mean[j] = mean;
    stats.std[j] = std::max(std::sqrt(sq.value() / n), kStdFloor);
  }
  return stats;
}

inline void standardize_in_place(const StandardizationStats& stats, std::span<double> values) {
  if (values.size() != stats.dim()) {
    throw ValidationError("feature dimension " + std::to_string(values.size()) +
                          " does not match standardizer dimension " + std::to_string(stats.dim()));
  }
  for (std::size_t j = 0; j < values.size(); ++j) {
    values[j] = (values[j] - stats.mean[j]) / stats.std[j];
  }
}

inline InputFeatureVector apply_standardizer(const StandardizationStats& stats,
                                             InputFeatureVector v) {
  standardize_in_place(stats, v.values);
  return v;
}

}  // namespace hsf
