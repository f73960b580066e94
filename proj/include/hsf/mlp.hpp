#pragma once

// Five-layer MLP binary classifier: input, three ReLU hidden layers, softmax
// output over {normal, abnormal}. Trained with mean cross-entropy, mini-batch
// SGD with momentum and step learning-rate decay.

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "hsf/error.hpp"
#include "hsf/numeric.hpp"

namespace hsf {

inline constexpr std::size_t kMlpLayers = 4;  // weight matrices between 5 layers

using MlpDims = std::array<std::size_t, kMlpLayers + 1>;

/// Weights (in x out) and biases per dense layer. Also used for gradients and
/// optimizer velocity.
struct MlpParams {
  std::array<Eigen::MatrixXd, kMlpLayers> weights;
  std::array<Eigen::VectorXd, kMlpLayers> biases;

  static MlpParams zeros_like(const MlpParams& p) {
    MlpParams z;
    for (std::size_t l = 0; l < kMlpLayers; ++l) {
      z.weights[l] = Eigen::MatrixXd::Zero(p.weights[l].rows(), p.weights[l].cols());
      z.biases[l] = Eigen::VectorXd::Zero(p.biases[l].size());
    }
    return z;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < kMlpLayers; ++l) n += weights[l].size() + biases[l].size();
    return n;
  }

  /// Visits every scalar parameter in a fixed order (layer, weights col-major, biases).
  template <typename F>
  void for_each(F&& f) {
    for (std::size_t l = 0; l < kMlpLayers; ++l) {
      for (Eigen::Index i = 0; i < weights[l].size(); ++i) f(weights[l].data()[i]);
      for (Eigen::Index i = 0; i < biases[l].size(); ++i) f(biases[l].data()[i]);
    }
  }
  template <typename F>
  void for_each(F&& f) const {
    const_cast<MlpParams*>(this)->for_each([&](double& v) { f(static_cast<const double&>(v)); });
  }
};

struct MlpModel {
  MlpDims dims{};
  MlpParams params;

  std::size_t input_dim() const { return dims[0]; }

  friend bool operator==(const MlpModel& a, const MlpModel& b) {
    if (a.dims != b.dims) return false;
    for (std::size_t l = 0; l < kMlpLayers; ++l) {
      if (a.params.weights[l] != b.params.weights[l] || a.params.biases[l] != b.params.biases[l])
        return false;
    }
    return true;
  }
};

inline void check_dims(std::span<const std::size_t> dims) {
  if (dims.size() != kMlpLayers + 1) {
    throw ValidationError("MLP needs exactly 5 layer sizes (input, 3 hidden, output), got " +
                          std::to_string(dims.size()));
  }
  for (auto d : dims) {
    if (d == 0) throw ValidationError("MLP layer sizes must be positive");
  }
  if (dims.back() != 2) throw ValidationError("MLP output layer must have 2 units");
}

/// He-uniform weights (limit sqrt(6 / fan_in)), zero biases. Deterministic in seed.
inline MlpModel init_mlp(std::span<const std::size_t> dims, std::uint64_t seed) {
  check_dims(dims);
  MlpModel m;
  std::copy(dims.begin(), dims.end(), m.dims.begin());
  Rng rng(seed);
  for (std::size_t l = 0; l < kMlpLayers; ++l) {
    const auto in = static_cast<Eigen::Index>(dims[l]);
    const auto out = static_cast<Eigen::Index>(dims[l + 1]);
    const double limit = std::sqrt(6.0 / static_cast<double>(in));
    m.params.weights[l].resize(in, out);
    for (Eigen::Index i = 0; i < m.params.weights[l].size(); ++i) {
      m.params.weights[l].data()[i] = rng.uniform(-limit, limit);
    }
    m.params.biases[l] = Eigen::VectorXd::Zero(out);
  }
  return m;
}

namespace detail {

/// Forward pass over a batch (rows = samples). Keeps pre-activations and
/// layer inputs for backprop.
struct ForwardCache {
  std::array<Eigen::MatrixXd, kMlpLayers> inputs;  // input to dense layer l
  std::array<Eigen::MatrixXd, kMlpLayers> pre;     // x W + b
};

inline Eigen::MatrixXd forward_batch(const MlpModel& m, const Eigen::MatrixXd& x,
                                     ForwardCache* cache = nullptr) {
  Eigen::MatrixXd a = x;
  for (std::size_t l = 0; l < kMlpLayers; ++l) {
    Eigen::MatrixXd z = a * m.params.weights[l];
    z.rowwise() += m.params.biases[l].transpose();
    if (cache) {
      cache->inputs[l] = a;
      cache->pre[l] = z;
    }
    a = l + 1 < kMlpLayers ? Eigen::MatrixXd(z.cwiseMax(0.0)) : z;
  }
  return a;  // logits
}

/// Row-wise max-shifted log-sum-exp.
inline Eigen::VectorXd logsumexp_rows(const Eigen::MatrixXd& logits) {
  Eigen::VectorXd out(logits.rows());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double mx = logits.row(r).maxCoeff();
    out[r] = mx + std::log((logits.row(r).array() - mx).exp().sum());
  }
  return out;
}

}  // namespace detail

/// Stabilized two-class softmax.
inline std::array<double, 2> softmax2(double z0, double z1) {
  const double mx = std::max(z0, z1);
  const double e0 = std::exp(z0 - mx);
  const double e1 = std::exp(z1 - mx);
  const double s = e0 + e1;
  return {e0 / s, e1 / s};
}

/// (p_normal, p_abnormal).
inline std::array<double, 2> forward(const MlpModel& m, std::span<const double> x) {
  if (x.size() != m.input_dim()) {
    throw ValidationError("classifier expects " + std::to_string(m.input_dim()) +
                          " features, got " + std::to_string(x.size()));
  }
  for (double v : x) {
    if (!std::isfinite(v)) throw ValidationError("non-finite classifier input");
  }
  Eigen::MatrixXd row = Eigen::Map<const Eigen::RowVectorXd>(x.data(), static_cast<Eigen::Index>(x.size()));
  const Eigen::MatrixXd logits = detail::forward_batch(m, row);
  return softmax2(logits(0, 0), logits(0, 1));
}

struct Verdict {
  int label = 0;  // 1 = abnormal
  double p_abnormal = 0.0;
  friend bool operator==(const Verdict&, const Verdict&) = default;
};

/// Ties at exactly 0.5 are flagged abnormal.
inline Verdict verdict_from(double p_abnormal) {
  return {p_abnormal >= 0.5 ? 1 : 0, p_abnormal};
}

inline Verdict predict(const MlpModel& m, std::span<const double> x) {
  return verdict_from(forward(m, x)[1]);
}

/// Batch of training examples, one row per sample.
struct Batch {
  Eigen::MatrixXd x;
  std::vector<int> labels;

  static Batch from_rows(std::span<const std::vector<double>> rows, std::span<const int> labels) {
    if (rows.size() != labels.size()) throw ValidationError("feature/label count mismatch");
    Batch b;
    b.labels.assign(labels.begin(), labels.end());
    if (rows.empty()) return b;
    const auto cols = static_cast<Eigen::Index>(rows.front().size());
    b.x.resize(static_cast<Eigen::Index>(rows.size()), cols);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (static_cast<Eigen::Index>(rows[r].size()) != cols) {
        throw ValidationError("feature rows have inconsistent dimensions");
      }
      for (Eigen::Index c = 0; c < cols; ++c) b.x(static_cast<Eigen::Index>(r), c) = rows[r][c];
    }
    return b;
  }
};

struct LossAndGrad {
  double loss = 0.0;
  MlpParams grad;
};

inline void check_batch(const MlpModel& m, const Batch& batch) {
  if (batch.labels.empty()) throw ValidationError("empty batch");
  if (static_cast<std::size_t>(batch.x.rows()) != batch.labels.size()) {
    throw ValidationError("batch rows and labels differ in count");
  }
  if (static_cast<std::size_t>(batch.x.cols()) != m.input_dim()) {
    throw ValidationError("batch feature dimension " + std::to_string(batch.x.cols()) +
                          " != classifier input " + std::to_string(m.input_dim()));
  }
  for (int y : batch.labels) {
    if (y != 0 && y != 1) throw ValidationError("labels must be 0 or 1");
  }
}

/// Mean cross-entropy only.
inline double batch_loss(const MlpModel& m, const Batch& batch) {
  check_batch(m, batch);
  const Eigen::MatrixXd logits = detail::forward_batch(m, batch.x);
  const Eigen::VectorXd lse = detail::logsumexp_rows(logits);
  CompensatedSum s;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) s.add(lse[r] - logits(r, batch.labels[r]));
  return s.value() / static_cast<double>(logits.rows());
}

/// Mean cross-entropy and its gradient by reverse-mode differentiation.
inline LossAndGrad loss_and_grad(const MlpModel& m, const Batch& batch) {
  check_batch(m, batch);
  detail::ForwardCache cache;
  const Eigen::MatrixXd logits = detail::forward_batch(m, batch.x, &cache);
  const Eigen::VectorXd lse = detail::logsumexp_rows(logits);
  const auto n = logits.rows();

  LossAndGrad out;
  CompensatedSum s;
  Eigen::MatrixXd delta(n, 2);
  for (Eigen::Index r = 0; r < n; ++r) {
    const int y = batch.labels[r];
    s.add(lse[r] - logits(r, y));
    for (int c = 0; c < 2; ++c) {
      delta(r, c) = (std::exp(logits(r, c) - lse[r]) - (c == y ? 1.0 : 0.0)) / static_cast<double>(n);
    }
  }
  out.loss = s.value() / static_cast<double>(n);

  for (std::size_t l = kMlpLayers; l-- > 0;) {
    out.grad.weights[l] = cache.inputs[l].transpose() * delta;
    out.grad.biases[l] = delta.colwise().sum().transpose();
    if (l > 0) {
      Eigen::MatrixXd back = delta * m.params.weights[l].transpose();
      delta = back.cwiseProduct((cache.pre[l - 1].array() > 0.0).cast<double>().matrix());
    }
  }
  return out;
}

/// Central finite differences of the mean loss, one parameter at a time.
inline MlpParams numeric_gradient(const MlpModel& m, const Batch& batch, double fd_step) {
  MlpModel probe = m;
  MlpParams out = MlpParams::zeros_like(m.params);
  std::vector<double*> slots, dst;
  probe.params.for_each([&](double& v) { slots.push_back(&v); });
  out.for_each([&](double& v) { dst.push_back(&v); });
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const double saved = *slots[i];
    *slots[i] = saved + fd_step;
    const double up = batch_loss(probe, batch);
    *slots[i] = saved - fd_step;
    const double down = batch_loss(probe, batch);
    *slots[i] = saved;
    *dst[i] = (up - down) / (2.0 * fd_step);
  }
  return out;
}

/// Max over entries of |a - n| / max(|a|, |n|, 1e-8).
inline double max_relative_error(const MlpParams& analytic, const MlpParams& numeric) {
  std::vector<double> a, n;
  analytic.for_each([&](const double& v) { a.push_back(v); });
  numeric.for_each([&](const double& v) { n.push_back(v); });
  if (a.size() != n.size()) throw ValidationError("gradient shape mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double denom = std::max({std::abs(a[i]), std::abs(n[i]), 1e-8});
    worst = std::max(worst, std::abs(a[i] - n[i]) / denom);
  }
  return worst;
}

inline double gradient_error(const MlpModel& m, const Batch& batch, const MlpParams& analytic,
                             double fd_step) {
  return max_relative_error(analytic, numeric_gradient(m, batch, fd_step));
}

inline double grad_check(const MlpModel& m, const Batch& batch, double fd_step = 1e-5) {
  return gradient_error(m, batch, loss_and_grad(m, batch).grad, fd_step);
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  double learning_rate = 0.01;
  double momentum = 0.9;
  double decay_factor = 0.5;
  std::size_t decay_every = 20;
  std::size_t epochs = 100;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
      throw ValidationError("learning_rate must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ValidationError("momentum must be in [0, 1)");
    if (!(decay_factor > 0.0 && decay_factor <= 1.0))
      throw ValidationError("decay_factor must be in (0, 1]");
    if (decay_every == 0) throw ValidationError("decay_every must be positive");
    if (epochs == 0) throw ValidationError("epochs must be positive");
    if (batch_size == 0) throw ValidationError("batch_size must be positive");
  }
};

struct TrainHistory {
  std::vector<double> loss;      // mean cross-entropy over the training set after each epoch
  std::vector<double> accuracy;  // training accuracy after each epoch
};

struct TrainResult {
  MlpModel model;
  TrainHistory history;
  bool imbalance_warning = false;  // class ratio beyond 2:1
};

inline double accuracy_of(const MlpModel& m, const Batch& data) {
  const Eigen::MatrixXd logits = detail::forward_batch(m, data.x);
  std::size_t hits = 0;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const int label = verdict_from(softmax2(logits(r, 0), logits(r, 1))[1]).label;
    hits += label == data.labels[r];
  }
  return static_cast<double>(hits) / static_cast<double>(logits.rows());
}

inline TrainResult train(MlpModel model, const Batch& data, const TrainConfig& config) {
  config.validate();
  check_batch(model, data);
  std::size_t positives = 0;
  for (int y : data.labels) positives += y == 1;
  const std::size_t negatives = data.labels.size() - positives;
  if (positives == 0 || negatives == 0) {
    throw ValidationError("training data must contain both classes");
  }

  TrainResult result;
  result.imbalance_warning = std::max(positives, negatives) > 2 * std::min(positives, negatives);

  const auto n = static_cast<std::size_t>(data.x.rows());
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(config.seed);
  MlpParams velocity = MlpParams::zeros_like(model.params);

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = config.learning_rate *
                      std::pow(config.decay_factor, static_cast<double>(epoch / config.decay_every));
    rng.shuffle(order);
    for (std::size_t start = 0; start < n; start += config.batch_size) {
      const std::size_t end = std::min(n, start + config.batch_size);
      Batch mb;
      mb.x.resize(static_cast<Eigen::Index>(end - start), data.x.cols());
      mb.labels.resize(end - start);
      for (std::size_t k = start; k < end; ++k) {
        mb.x.row(static_cast<Eigen::Index>(k - start)) = data.x.row(static_cast<Eigen::Index>(order[k]));
        mb.labels[k - start] = data.labels[order[k]];
      }
      const auto g = loss_and_grad(model, mb);
      for (std::size_t l = 0; l < kMlpLayers; ++l) {
        velocity.weights[l] = config.momentum * velocity.weights[l] - lr * g.grad.weights[l];
        velocity.biases[l] = config.momentum * velocity.biases[l] - lr * g.grad.biases[l];
        model.params.weights[l] += velocity.weights[l];
        model.params.biases[l] += velocity.biases[l];
      }
    }
    result.history.loss.push_back(batch_loss(model, data));
    result.history.accuracy.push_back(accuracy_of(model, data));
    if (!std::isfinite(result.history.loss.back())) {
      throw ValidationError("training diverged (non-finite loss) at epoch " + std::to_string(epoch));
    }
  }
  result.model = std::move(model);
  return result;
}

}  // namespace hsf
