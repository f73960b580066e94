#pragma once

// Miniature post-norm transformer with hidden-state taps and planted anomalies.
//
// Block recurrence (per token sequence H, one row per position):
//   H' = LayerNorm(Attn(H) + H)      -> attention tap
//   H  = LayerNorm(MLP(H') + H')     -> MLP tap
// Output head: softmax(H_L W_out).
//
// With anomaly_on, a planted layer's sublayer output gets rho * u added before
// the residual and LayerNorm, where u is a fixed seeded direction with RMS 1
// per coordinate. Weights are random and untrained; sublayer output biases are
// non-zero so both classes share a strong common component and divergence stays
// local to the planted layer.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "hsf/error.hpp"
#include "hsf/numeric.hpp"
#include "hsf/trace.hpp"

namespace hsf::synth {

struct PlantedAnomaly {
  LayerId layer;
  double strength = 0.0;  // rho >= 0
};

struct ToyModelConfig {
  std::uint32_t vocab_size = 64;
  std::uint32_t model_dim = 64;
  std::uint32_t num_blocks = 8;
  std::uint32_t heads = 4;
  std::uint32_t mlp_expansion = 4;
  std::uint64_t seed = 0;
  Aggregation aggregation = Aggregation::LastToken;
  double bias_scale = 1.0;  // std of sublayer output biases
  std::vector<PlantedAnomaly> anomalies;

  void validate() const {
    if (vocab_size == 0) throw ValidationError("vocab_size must be positive");
    if (model_dim == 0) throw ValidationError("model_dim must be positive");
    if (num_blocks == 0) throw ValidationError("num_blocks must be at least 1");
    if (heads == 0 || model_dim % heads != 0) {
      throw ValidationError("model_dim " + std::to_string(model_dim) +
                            " is not divisible by heads " + std::to_string(heads));
    }
    if (mlp_expansion == 0) throw ValidationError("mlp_expansion must be positive");
    if (!std::isfinite(bias_scale) || bias_scale < 0.0) throw ValidationError("bias_scale must be >= 0");
    for (const auto& a : anomalies) {
      if (a.layer.block >= num_blocks) {
        throw ValidationError("anomaly layer " + to_string(a.layer) + " out of range");
      }
      if (!(a.strength >= 0.0) || !std::isfinite(a.strength)) {
        throw ValidationError("anomaly strength must be finite and >= 0");
      }
    }
  }
};

inline constexpr double kLayerNormEps = 1e-10;

struct LayerNormParams {
  Eigen::RowVectorXd gain;
  Eigen::RowVectorXd shift;
};

struct BlockParams {
  Eigen::MatrixXd wq, wk, wv, wo;  // d x d
  Eigen::RowVectorXd bo;           // attention output bias
  Eigen::MatrixXd w1;              // d x (d * expansion)
  Eigen::RowVectorXd b1;
  Eigen::MatrixXd w2;              // (d * expansion) x d
  Eigen::RowVectorXd b2;
  LayerNormParams ln_attn, ln_mlp;
  Eigen::RowVectorXd attn_direction;  // planted direction; zero-strength when unused
  Eigen::RowVectorXd mlp_direction;
  double attn_strength = 0.0;
  double mlp_strength = 0.0;
};

struct ToyModel {
  ToyModelConfig config;
  Eigen::MatrixXd embedding;  // vocab x d
  std::vector<BlockParams> blocks;
  Eigen::MatrixXd w_out;      // d x vocab
};

namespace detail {

inline Eigen::MatrixXd gaussian(Rng& rng, Eigen::Index rows, Eigen::Index cols, double stddev) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = stddev * rng.normal();
  return m;
}

inline Eigen::RowVectorXd direction(std::uint64_t seed, LayerId layer, Eigen::Index dim) {
  Rng rng(derive_seed(seed, 0x1000 + 2ull * layer.block + static_cast<std::uint64_t>(layer.kind)));
  Eigen::RowVectorXd u = gaussian(rng, 1, dim, 1.0);
  u *= std::sqrt(static_cast<double>(dim)) / u.norm();
  return u;
}

}  // namespace detail

inline ToyModel build_toy_model(const ToyModelConfig& config) {
  config.validate();
  const auto d = static_cast<Eigen::Index>(config.model_dim);
  const auto hidden = d * static_cast<Eigen::Index>(config.mlp_expansion);
  Rng rng(config.seed);
  ToyModel m;
  m.config = config;
  m.embedding = detail::gaussian(rng, config.vocab_size, d, 1.0);
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  for (std::uint32_t b = 0; b < config.num_blocks; ++b) {
    BlockParams p;
    p.wq = detail::gaussian(rng, d, d, s);
    p.wk = detail::gaussian(rng, d, d, s);
    p.wv = detail::gaussian(rng, d, d, s);
    p.wo = detail::gaussian(rng, d, d, s);
    p.bo = detail::gaussian(rng, 1, d, config.bias_scale);
    p.w1 = detail::gaussian(rng, d, hidden, std::sqrt(2.0 / static_cast<double>(d)));
    p.b1 = Eigen::RowVectorXd::Zero(hidden);
    p.w2 = detail::gaussian(rng, hidden, d, 1.0 / std::sqrt(static_cast<double>(hidden)));
    p.b2 = detail::gaussian(rng, 1, d, config.bias_scale);
    p.ln_attn = {Eigen::RowVectorXd::Ones(d), Eigen::RowVectorXd::Zero(d)};
    p.ln_mlp = {Eigen::RowVectorXd::Ones(d), Eigen::RowVectorXd::Zero(d)};
    p.attn_direction = Eigen::RowVectorXd::Zero(d);
    p.mlp_direction = Eigen::RowVectorXd::Zero(d);
    m.blocks.push_back(std::move(p));
  }
  m.w_out = detail::gaussian(rng, d, config.vocab_size, s);
  for (const auto& a : config.anomalies) {
    auto& p = m.blocks[a.layer.block];
    auto u = detail::direction(config.seed, a.layer, d);
    if (a.layer.kind == LayerKind::Attention) {
      p.attn_direction = u;
      p.attn_strength += a.strength;
    } else {
      p.mlp_direction = u;
      p.mlp_strength += a.strength;
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Building blocks (exposed for structural tests)

inline Eigen::MatrixXd layer_norm(const Eigen::MatrixXd& x, const LayerNormParams& p) {
  Eigen::MatrixXd out(x.rows(), x.cols());
  const double n = static_cast<double>(x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mean = x.row(r).sum() / n;
    const Eigen::RowVectorXd c = x.row(r).array() - mean;
    const double var = c.squaredNorm() / n;
    out.row(r) = (c / std::sqrt(var + kLayerNormEps)).cwiseProduct(p.gain) + p.shift;
  }
  return out;
}

/// Causal multi-head scaled dot-product attention, output projection and bias.
inline Eigen::MatrixXd attention(const BlockParams& p, const Eigen::MatrixXd& x, std::uint32_t heads) {
  const Eigen::Index t = x.rows();
  const Eigen::Index d = x.cols();
  const Eigen::Index dh = d / heads;
  const Eigen::MatrixXd q = x * p.wq, k = x * p.wk, v = x * p.wv;
  Eigen::MatrixXd concat = Eigen::MatrixXd::Zero(t, d);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::uint32_t h = 0; h < heads; ++h) {
    const Eigen::Index off = h * dh;
    for (Eigen::Index i = 0; i < t; ++i) {
      Eigen::VectorXd logits(i + 1);
      for (Eigen::Index j = 0; j <= i; ++j) {
        logits[j] = q.row(i).segment(off, dh).dot(k.row(j).segment(off, dh)) * scale;
      }
      const double mx = logits.maxCoeff();
      Eigen::VectorXd w = (logits.array() - mx).exp();
      w /= w.sum();
      for (Eigen::Index j = 0; j <= i; ++j) concat.block(i, off, 1, dh) += w[j] * v.block(j, off, 1, dh);
    }
  }
  Eigen::MatrixXd out = concat * p.wo;
  out.rowwise() += p.bo;
  return out;
}

inline double gelu(double x) {
  const double c = std::sqrt(2.0 / std::numbers::pi);
  return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

inline Eigen::MatrixXd feed_forward(const BlockParams& p, const Eigen::MatrixXd& x) {
  Eigen::MatrixXd h = x * p.w1;
  h.rowwise() += p.b1;
  h = h.unaryExpr([](double v) { return gelu(v); });
  Eigen::MatrixXd out = h * p.w2;
  out.rowwise() += p.b2;
  return out;
}

/// Full per-position states of one forward pass.
struct ForwardStates {
  std::vector<Eigen::MatrixXd> block_inputs;  // H_{i-1}
  std::vector<Eigen::MatrixXd> attn_taps;     // H_i'
  std::vector<Eigen::MatrixXd> mlp_taps;      // H_i
};

inline ForwardStates run_blocks(const ToyModel& m, std::span<const std::uint32_t> tokens,
                                bool anomaly_on) {
  if (tokens.empty()) throw ValidationError("token sequence must be non-empty");
  Eigen::MatrixXd x(static_cast<Eigen::Index>(tokens.size()), m.embedding.cols());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] >= m.config.vocab_size) {
      throw ValidationError("token " + std::to_string(tokens[i]) + " at position " +
                            std::to_string(i) + " is outside the vocabulary");
    }
    x.row(static_cast<Eigen::Index>(i)) = m.embedding.row(tokens[i]);
  }
  ForwardStates s;
  for (const auto& p : m.blocks) {
    s.block_inputs.push_back(x);
    Eigen::MatrixXd a = attention(p, x, m.config.heads);
    if (anomaly_on && p.attn_strength != 0.0) a.rowwise() += p.attn_strength * p.attn_direction;
    x = layer_norm(a + x, p.ln_attn);
    s.attn_taps.push_back(x);
    Eigen::MatrixXd f = feed_forward(p, x);
    if (anomaly_on && p.mlp_strength != 0.0) f.rowwise() += p.mlp_strength * p.mlp_direction;
    x = layer_norm(f + x, p.ln_mlp);
    s.mlp_taps.push_back(x);
  }
  return s;
}

/// Next-token distribution for every position (rows sum to 1).
inline Eigen::MatrixXd output_distribution(const ToyModel& m, std::span<const std::uint32_t> tokens) {
  const auto s = run_blocks(m, tokens, false);
  Eigen::MatrixXd logits = s.mlp_taps.back() * m.w_out;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double mx = logits.row(r).maxCoeff();
    logits.row(r) = (logits.row(r).array() - mx).exp();
    logits.row(r) /= logits.row(r).sum();
  }
  return logits;
}

inline TraceHeader toy_header(const ToyModel& m) {
  const auto& c = m.config;
  return TraceHeader::uniform("synth-lm:L" + std::to_string(c.num_blocks) + ":d" +
                                  std::to_string(c.model_dim) + ":seed" + std::to_string(c.seed),
                              c.num_blocks, c.model_dim, c.aggregation);
}

inline std::vector<float> aggregate(const Eigen::MatrixXd& states, Aggregation mode) {
  Eigen::RowVectorXd v = mode == Aggregation::LastToken
                             ? Eigen::RowVectorXd(states.row(states.rows() - 1))
                             : Eigen::RowVectorXd(states.colwise().mean());
  std::vector<float> out(static_cast<std::size_t>(v.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) out[static_cast<std::size_t>(i)] = static_cast<float>(v[i]);
  return out;
}

/// One record with an attention and MLP tap per block, aggregated over positions.
inline SampleRecord infer_with_taps(const ToyModel& m, std::span<const std::uint32_t> tokens,
                                    bool anomaly_on) {
  const auto s = run_blocks(m, tokens, anomaly_on);
  SampleRecord rec;
  for (std::uint32_t b = 0; b < m.config.num_blocks; ++b) {
    rec.activations.emplace(LayerId{b, LayerKind::Attention}, aggregate(s.attn_taps[b], m.config.aggregation));
    rec.activations.emplace(LayerId{b, LayerKind::Mlp}, aggregate(s.mlp_taps[b], m.config.aggregation));
  }
  return rec;
}

inline std::vector<std::uint32_t> random_tokens(std::uint64_t seed, std::size_t length,
                                                std::uint32_t vocab) {
  Rng rng(seed);
  std::vector<std::uint32_t> t(length);
  for (auto& x : t) x = static_cast<std::uint32_t>(rng.below(vocab));
  return t;
}

struct Corpus {
  ActivationTrace normal;
  ActivationTrace abnormal;
};

/// Random token sequences; normal records run clean (label 0), abnormal
/// records run with planted anomalies (label 1). Each record's tokens come from
/// a seed derived from (seed, class, index), so the output does not depend on
/// thread scheduling.
inline Corpus generate_corpus(const ToyModel& m, std::size_t n_normal, std::size_t n_abnormal,
                              std::size_t seq_len, std::uint64_t seed) {
  if (n_normal == 0 || n_abnormal == 0) throw ValidationError("corpus counts must be at least 1");
  if (seq_len == 0) throw ValidationError("seq_len must be at least 1");
  Corpus c;
  c.normal.header = toy_header(m);
  c.abnormal.header = c.normal.header;
  auto fill = [&](ActivationTrace& t, std::size_t n, bool abnormal) {
    t.records.resize(n);
    parallel_for(n, [&](std::size_t i) {
      const auto tokens = random_tokens(derive_seed(seed, 2 * i + (abnormal ? 1 : 0)), seq_len,
                                        m.config.vocab_size);
      auto rec = infer_with_taps(m, tokens, abnormal);
      rec.record_id = i;
      rec.label = abnormal ? Label::Abnormal : Label::Normal;
      t.records[i] = std::move(rec);
    });
  };
  fill(c.normal, n_normal, false);
  fill(c.abnormal, n_abnormal, true);
  return c;
}

}  // namespace hsf::synth
