#pragma once

// Critical-layer analysis: compare normal and abnormal dataset-level features
// per layer with cosine similarity, rank each kind ascending (most divergent
// first) and keep the top fractions alpha (attention) and beta (MLP).

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "hsf/error.hpp"
#include "hsf/features.hpp"
#include "hsf/numeric.hpp"
#include "hsf/trace.hpp"

namespace hsf {

/// Cosine similarity in double precision with compensated dot products.
/// Both vectors zero: 1.0. Exactly one zero: 0.0.
inline double cosine_similarity(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) {
    throw ValidationError("cosine_similarity: length mismatch (" + std::to_string(u.size()) +
                          " vs " + std::to_string(v.size()) + ")");
  }
  if (u.empty()) throw ValidationError("cosine_similarity: empty vectors");
  const double uu = accurate_dot(u, u);
  const double vv = accurate_dot(v, v);
  const bool u_zero = uu == 0.0;
  const bool v_zero = vv == 0.0;
  if (u_zero && v_zero) return 1.0;
  if (u_zero || v_zero) return 0.0;
  const double c = accurate_dot(u, v) / (std::sqrt(uu) * std::sqrt(vv));
  return std::clamp(c, -1.0, 1.0);
}

struct SelectionRatios {
  double alpha = 0.25;  // attention
  double beta = 0.25;   // MLP

  SelectionRatios() = default;
  SelectionRatios(double a, double b) : alpha(a), beta(b) {
    if (!(a >= 0.0 && a <= 1.0) || !(b >= 0.0 && b <= 1.0)) {
      throw ValidationError("selection ratios must lie in [0, 1]");
    }
  }
};

/// floor(ratio * L), at least 1 when ratio > 0, 0 when ratio == 0.
inline std::size_t selection_count(double ratio, std::uint32_t num_blocks) {
  if (ratio <= 0.0) return 0;
  // Tolerance keeps products such as 0.29 * 100 from flooring one short.
  const auto n = static_cast<std::size_t>(std::floor(ratio * num_blocks + 1e-9));
  return std::clamp<std::size_t>(n, 1, num_blocks);
}

using LayerScores = std::map<LayerId, double>;

/// S_i for every layer in the (shared) header.
inline LayerScores layer_similarity_scores(const ActivationTrace& normal,
                                           const ActivationTrace& abnormal, FeatureKind kind,
                                           ActivationThreshold theta) {
  if (normal.header.layers != abnormal.header.layers ||
      normal.header.num_blocks != abnormal.header.num_blocks) {
    throw ValidationError("normal and abnormal traces have different layer tables");
  }
  if (normal.records.empty() || abnormal.records.empty()) {
    throw ValidationError("layer scoring needs non-empty normal and abnormal sets");
  }
  const auto ids = normal.header.layer_ids();
  std::vector<double> scores(ids.size());
  parallel_for(ids.size(), [&](std::size_t i) {
    const auto fn = dataset_feature(normal, all_records(), ids[i], kind, theta);
    const auto fa = dataset_feature(abnormal, all_records(), ids[i], kind, theta);
    scores[i] = cosine_similarity(fn.values, fa.values);
  });
  LayerScores out;
  for (std::size_t i = 0; i < ids.size(); ++i) out.emplace(ids[i], scores[i]);
  return out;
}

struct LayerSelection {
  std::vector<LayerId> rank_attn;  // ascending score, ties by lower block
  std::vector<LayerId> rank_mlp;
  std::vector<LayerId> selected;   // (kind, block) order
};

inline LayerSelection rank_and_select(const LayerScores& scores, SelectionRatios ratios,
                                      std::uint32_t num_blocks) {
  LayerSelection out;
  for (LayerKind kind : {LayerKind::Attention, LayerKind::Mlp}) {
    std::vector<std::pair<double, std::uint32_t>> entries;
    for (std::uint32_t b = 0; b < num_blocks; ++b) {
      auto it = scores.find({b, kind});
      if (it == scores.end()) {
        throw ValidationError("score map is missing layer " + to_string(LayerId{b, kind}));
      }
      entries.emplace_back(it->second, b);
    }
    std::stable_sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first < b.first;
      return a.second < b.second;
    });
    auto& rank = kind == LayerKind::Attention ? out.rank_attn : out.rank_mlp;
    for (const auto& e : entries) rank.push_back({e.second, kind});
    const std::size_t take = selection_count(
        kind == LayerKind::Attention ? ratios.alpha : ratios.beta, num_blocks);
    out.selected.insert(out.selected.end(), rank.begin(), rank.begin() + take);
  }
  std::sort(out.selected.begin(), out.selected.end());
  return out;
}

struct CriticalLayerReport {
  LayerScores scores;
  std::vector<LayerId> rank_attn;
  std::vector<LayerId> rank_mlp;
  std::vector<LayerId> selected;
  SelectionRatios ratios;
  FeatureKind feature_kind = FeatureKind::Nas;
  double theta = 0.2;
  std::size_t normal_count = 0;
  std::size_t abnormal_count = 0;
};

/// Score, rank and select in one call.
inline CriticalLayerReport critical_layer_analysis(const ActivationTrace& normal,
                                                   const ActivationTrace& abnormal,
                                                   FeatureKind kind, ActivationThreshold theta,
                                                   SelectionRatios ratios) {
  CriticalLayerReport r;
  r.scores = layer_similarity_scores(normal, abnormal, kind, theta);
  auto sel = rank_and_select(r.scores, ratios, normal.header.num_blocks);
  r.rank_attn = std::move(sel.rank_attn);
  r.rank_mlp = std::move(sel.rank_mlp);
  r.selected = std::move(sel.selected);
  r.ratios = ratios;
  r.feature_kind = kind;
  r.theta = theta.value;
  r.normal_count = normal.records.size();
  r.abnormal_count = abnormal.records.size();
  return r;
}

// ---------------------------------------------------------------------------
// Active-neuron ratio study

struct LayerRatio {
  LayerId layer;
  double mean_count_normal = 0.0;
  double mean_count_abnormal = 0.0;
  double ratio = 1.0;
  bool flagged = false;
};

/// abnormal / normal; 0/0 is 1, x/0 is +inf.
inline double count_ratio(double abnormal, double normal) {
  if (normal == 0.0) return abnormal > 0.0 ? std::numeric_limits<double>::infinity() : 1.0;
  return abnormal / normal;
}

inline std::vector<LayerRatio> activation_ratio_report(const ActivationTrace& normal,
                                                       const ActivationTrace& abnormal,
                                                       ActivationThreshold theta,
                                                       double flag_factor = 2.0) {
  if (!(flag_factor >= 1.0) || !std::isfinite(flag_factor)) {
    throw ValidationError("flag_factor must be a finite value >= 1");
  }
  if (normal.records.empty() || abnormal.records.empty()) {
    throw ValidationError("ratio report needs non-empty normal and abnormal sets");
  }
  if (normal.header.layers != abnormal.header.layers) {
    throw ValidationError("normal and abnormal traces have different layer tables");
  }
  auto mean_count = [&](const ActivationTrace& t, LayerId id) {
    CompensatedSum s;
    for (const auto& rec : t.records) s.add(static_cast<double>(count_active(rec.at(id), theta)));
    return s.value() / static_cast<double>(t.records.size());
  };
  std::vector<LayerRatio> out;
  for (LayerId id : normal.header.layer_ids()) {
    LayerRatio r{id, mean_count(normal, id), mean_count(abnormal, id)};
    r.ratio = count_ratio(r.mean_count_abnormal, r.mean_count_normal);
    r.flagged = r.ratio >= flag_factor || r.ratio <= 1.0 / flag_factor;
    out.push_back(r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Structured-text form

inline nlohmann::json layer_to_json(LayerId id) {
  return {{"block", id.block}, {"kind", to_string(id.kind)}};
}

inline LayerId layer_from_json(const nlohmann::json& j) {
  return {j.at("block").get<std::uint32_t>(), parse_layer_kind(j.at("kind").get<std::string>())};
}

inline nlohmann::json to_json(const CriticalLayerReport& r) {
  auto list = [](const std::vector<LayerId>& ids) {
    nlohmann::json a = nlohmann::json::array();
    for (auto id : ids) a.push_back(layer_to_json(id));
    return a;
  };
  nlohmann::json scores = nlohmann::json::array();
  for (const auto& [id, s] : r.scores) {
    auto e = layer_to_json(id);
    e["score"] = s;
    scores.push_back(e);
  }
  return {{"feature_kind", to_string(r.feature_kind)},
          {"theta", r.theta},
          {"alpha", r.ratios.alpha},
          {"beta", r.ratios.beta},
          {"normal_count", r.normal_count},
          {"abnormal_count", r.abnormal_count},
          {"scores", scores},
          {"rank_attention", list(r.rank_attn)},
          {"rank_mlp", list(r.rank_mlp)},
          {"selected", list(r.selected)}};
}

inline CriticalLayerReport report_from_json(const nlohmann::json& j) {
  CriticalLayerReport r;
  auto list = [](const nlohmann::json& a) {
    std::vector<LayerId> ids;
    for (const auto& e : a) ids.push_back(layer_from_json(e));
    return ids;
  };
  r.feature_kind = parse_feature_kind(j.at("feature_kind").get<std::string>());
  r.theta = j.at("theta").get<double>();
  r.ratios = SelectionRatios(j.at("alpha").get<double>(), j.at("beta").get<double>());
  r.normal_count = j.at("normal_count").get<std::size_t>();
  r.abnormal_count = j.at("abnormal_count").get<std::size_t>();
  for (const auto& e : j.at("scores")) r.scores.emplace(layer_from_json(e), e.at("score").get<double>());
  r.rank_attn = list(j.at("rank_attention"));
  r.rank_mlp = list(j.at("rank_mlp"));
  r.selected = list(j.at("selected"));
  return r;
}

}  // namespace hsf
