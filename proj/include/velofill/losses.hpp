#pragma once

#include "velofill/roll.hpp"

namespace velofill {

struct LossConfig {
  double alpha = 0.2;          // weight of the (1 - CosSim) term
  double weight_factor = 3.0;  // slope of the V-shaped onset weighting
  double weight_center = 0.5;  // velocity 64 after normalization
  double cos_eps = 1e-8;       // floor on column norms
  double bce_eps = 1e-7;       // predictions clamped to [eps, 1 - eps]
  bool masked = true;          // restrict BCE to onset cells
  bool weighted = true;        // apply the V-shaped weighting to masked terms

  void validate() const;
};

struct LossValue {
  double total = 0.0;
  double bce_term = 0.0;
  double cossim_term = 0.0;
  Roll gradient;  // d total / d prediction
};

/// -(y ln p + (1 - y) ln(1 - p)) with p clamped to [eps, 1 - eps].
double bce_elementwise(double target, double prediction, double eps = 1e-7);
/// Derivative of bce_elementwise w.r.t. the prediction (0 where clamped).
double bce_elementwise_grad(double target, double prediction, double eps = 1e-7);

/// Cosine similarity along time for each pitch column, averaged over pitches.
/// Each column norm is floored at eps, so an all-zero column contributes 0.
double cos_sim(const Roll& target, const Roll& prediction, double eps = 1e-8);

/// Mean over all T*P cells of onset-masked BCE.
double masked_bce(const Roll& target, const Roll& prediction, const Roll& onset, double eps = 1e-7);

/// 1 + factor * |v - center|.
double velocity_weight(double velocity, const LossConfig& config = {});

double weighted_masked_bce(const Roll& target, const Roll& prediction, const Roll& onset,
                           const Roll& velocity, const LossConfig& config = {});

/// (1 - alpha) * BCE term + alpha * (1 - CosSim), with the BCE term chosen by
/// config.masked / config.weighted. CosSim is always unmasked.
LossValue combined_loss(const Roll& target, const Roll& prediction, const Roll& onset,
                        const Roll& velocity, const LossConfig& config = {});

}  // namespace velofill
