#include "poslm/gmlm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace poslm {

double SoftLabelTarget::entropy() const {
  double h = 0;
  for (double p : probs) {
    if (p > 0) h -= p * std::log(p);
  }
  return h;
}

SoftLabelTarget soft_labels(int p_star, int m, double alpha) {
  if (m < 2) throw std::invalid_argument("soft_labels: m must be >= 2");
  if (p_star < 0 || p_star >= m) throw std::invalid_argument("soft_labels: p_star out of range");
  if (!(alpha > 0)) throw std::invalid_argument("soft_labels: alpha must be > 0");

  // Normalize in log space: exp(-alpha * d) underflows for sharp alpha at
  // M = 512, but log y_i = -alpha * d is exact.
  std::vector<double> log_y(static_cast<size_t>(m));
  for (int i = 0; i < m; ++i) log_y[static_cast<size_t>(i)] = -alpha * std::abs(i - p_star);
  double lse = log_sum_exp(log_y);

  SoftLabelTarget t;
  t.ground_truth_bin = p_star;
  t.alpha = alpha;
  t.probs.resize(static_cast<size_t>(m));
  for (int i = 0; i < m; ++i) t.probs[static_cast<size_t>(i)] = std::exp(log_y[static_cast<size_t>(i)] - lse);
  return t;
}

SoftLabelTarget one_hot_target(int p_star, int m) {
  if (m < 2) throw std::invalid_argument("one_hot_target: m must be >= 2");
  if (p_star < 0 || p_star >= m) throw std::invalid_argument("one_hot_target: p_star out of range");
  SoftLabelTarget t;
  t.ground_truth_bin = p_star;
  t.alpha = std::numeric_limits<double>::infinity();
  t.probs.assign(static_cast<size_t>(m), 0.0);
  t.probs[static_cast<size_t>(p_star)] = 1.0;
  return t;
}

double log_sum_exp(std::span<const double> logits) {
  if (logits.empty()) throw std::invalid_argument("log_sum_exp: empty input");
  double mx = *std::max_element(logits.begin(), logits.end());
  double s = 0;
  for (double v : logits) s += std::exp(v - mx);
  return mx + std::log(s);
}

std::vector<double> softmax(std::span<const double> logits) {
  double lse = log_sum_exp(logits);
  std::vector<double> out(logits.size());
  for (size_t i = 0; i < logits.size(); ++i) out[i] = std::exp(logits[i] - lse);
  return out;
}

std::vector<double> log_softmax(std::span<const double> logits) {
  double lse = log_sum_exp(logits);
  std::vector<double> out(logits.size());
  for (size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

std::vector<double> position_softmax(std::span<const double> hidden, std::span<const double> embeddings,
                                     int m, int dim) {
  if (static_cast<int>(hidden.size()) != dim)
    throw std::invalid_argument("position_softmax: hidden dim mismatch");
  if (static_cast<int>(embeddings.size()) != m * dim)
    throw std::invalid_argument("position_softmax: embedding table shape mismatch");
  std::vector<double> logits(static_cast<size_t>(m));
  for (int i = 0; i < m; ++i) {
    double acc = 0;
    const double* row = embeddings.data() + static_cast<size_t>(i) * static_cast<size_t>(dim);
    for (int d = 0; d < dim; ++d) acc += hidden[static_cast<size_t>(d)] * row[d];
    logits[static_cast<size_t>(i)] = acc;
  }
  return softmax(logits);
}

double position_loss(std::span<const double> probs, const SoftLabelTarget& target) {
  if (probs.size() != target.probs.size())
    throw std::invalid_argument("position_loss: probs/target size mismatch");
  constexpr double kFloor = std::numeric_limits<double>::min();
  double loss = 0;
  for (size_t i = 0; i < probs.size(); ++i) {
    if (target.probs[i] > 0) loss -= target.probs[i] * std::log(std::max(probs[i], kFloor));
  }
  return loss;
}

double position_loss_from_logits(std::span<const double> logits, const SoftLabelTarget& target) {
  if (logits.size() != target.probs.size())
    throw std::invalid_argument("position_loss_from_logits: logits/target size mismatch");
  double lse = log_sum_exp(logits);
  double loss = 0;
  for (size_t i = 0; i < logits.size(); ++i) {
    if (target.probs[i] > 0) loss -= target.probs[i] * (logits[i] - lse);
  }
  return loss;
}

double text_loss(std::span<const double> probs, int gold) {
  if (gold < 0 || gold >= static_cast<int>(probs.size()))
    throw std::invalid_argument("text_loss: gold id out of range");
  constexpr double kFloor = std::numeric_limits<double>::min();
  return -std::log(std::max(probs[static_cast<size_t>(gold)], kFloor));
}

double text_loss_from_logits(std::span<const double> logits, int gold) {
  if (gold < 0 || gold >= static_cast<int>(logits.size()))
    throw std::invalid_argument("text_loss_from_logits: gold id out of range");
  return log_sum_exp(logits) - logits[static_cast<size_t>(gold)];
}

GmlmLossBreakdown gmlm_loss(double position, double text, double lambda) {
  if (!std::isfinite(position) || !std::isfinite(text))
    throw std::invalid_argument("gmlm_loss: non-finite component loss");
  GmlmLossBreakdown b;
  b.position_loss = position;
  b.text_loss = text;
  b.lambda = lambda;
  b.combined = lambda * position + text;
  return b;
}

std::vector<double> loss_gradient_wrt_logits(std::span<const double> logits, const SoftLabelTarget& target) {
  if (logits.size() != target.probs.size())
    throw std::invalid_argument("loss_gradient_wrt_logits: size mismatch");
  std::vector<double> grad = softmax(logits);
  for (size_t i = 0; i < grad.size(); ++i) grad[i] -= target.probs[i];
  return grad;
}

}  // namespace poslm
