#pragma once

#include <span>
#include <vector>

namespace poslm {

// Normalized soft-label distribution over the M position bins for one masked
// slot: probs[i] proportional to exp(-alpha * |i - ground_truth_bin|).
struct SoftLabelTarget {
  std::vector<double> probs;
  int ground_truth_bin = 0;
  double alpha = 0;

  double entropy() const;
};

// Ordering-aware target. alpha > 0 controls how fast mass decays away from
// the ground-truth bin; alpha -> inf approaches one-hot.
SoftLabelTarget soft_labels(int p_star, int m, double alpha);

// One-hot target in the same container, used by the objective ablation.
SoftLabelTarget one_hot_target(int p_star, int m);

double log_sum_exp(std::span<const double> logits);
std::vector<double> softmax(std::span<const double> logits);
std::vector<double> log_softmax(std::span<const double> logits);

// P(i) = exp(h . e_i) / sum_j exp(h . e_j) over the given embedding rows.
// `embeddings` holds m rows of `dim` contiguous values.
std::vector<double> position_softmax(std::span<const double> hidden, std::span<const double> embeddings,
                                     int m, int dim);

// Cross-entropy of a probability vector against the soft target,
// -sum_i target_i * log(probs_i). Zero probabilities are floored at the
// smallest positive double so the result is finite.
double position_loss(std::span<const double> probs, const SoftLabelTarget& target);

// Same loss computed from logits through log-sum-exp; the training path.
double position_loss_from_logits(std::span<const double> logits, const SoftLabelTarget& target);

// Standard negative log-likelihood of the gold token.
double text_loss(std::span<const double> probs, int gold);
double text_loss_from_logits(std::span<const double> logits, int gold);

struct GmlmLossBreakdown {
  double position_loss = 0;  // L_p, mean over masked position slots
  double text_loss = 0;      // L_t, mean over masked text slots
  double lambda = 0;
  double combined = 0;  // lambda * L_p + L_t
};

GmlmLossBreakdown gmlm_loss(double position, double text, double lambda);

// d position_loss_from_logits / d logits = softmax(logits) - target.
std::vector<double> loss_gradient_wrt_logits(std::span<const double> logits, const SoftLabelTarget& target);

}  // namespace poslm
