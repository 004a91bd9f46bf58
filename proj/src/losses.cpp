#include "velofill/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace velofill {

namespace {

void require_same(const Roll& a, const Roll& b, const char* what) {
  if (!a.same_shape(b)) throw std::invalid_argument(std::string(what) + ": roll shapes differ");
}

double clamp_prediction(double p, double eps) { return std::clamp(p, eps, 1.0 - eps); }

// Per-cell weight of the BCE term; 0 where masked out.
double cell_weight(const Roll& onset, const Roll& velocity, int t, int p, const LossConfig& cfg) {
  if (!cfg.masked) return 1.0;
  if (onset(t, p) == 0.0) return 0.0;
  const double w = cfg.weighted ? velocity_weight(velocity(t, p), cfg) : 1.0;
  return onset(t, p) * w;
}

}  // namespace

void LossConfig::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("alpha must lie in [0,1]");
  if (!(cos_eps > 0.0) || !(bce_eps > 0.0)) throw std::invalid_argument("loss epsilons must be > 0");
}

double bce_elementwise(double target, double prediction, double eps) {
  const double p = clamp_prediction(prediction, eps);
  return -(target * std::log(p) + (1.0 - target) * std::log(1.0 - p));
}

double bce_elementwise_grad(double target, double prediction, double eps) {
  if (prediction < eps || prediction > 1.0 - eps) return 0.0;
  return (prediction - target) / (prediction * (1.0 - prediction));
}

double cos_sim(const Roll& target, const Roll& prediction, double eps) {
  require_same(target, prediction, "cos_sim");
  const int T = target.frames(), P = target.pitches();
  if (P == 0) return 0.0;
  double sum = 0.0;
  for (int p = 0; p < P; ++p) {
    double dot = 0.0, ny = 0.0, np = 0.0;
    for (int t = 0; t < T; ++t) {
      dot += target(t, p) * prediction(t, p);
      ny += target(t, p) * target(t, p);
      np += prediction(t, p) * prediction(t, p);
    }
    sum += dot / (std::max(std::sqrt(ny), eps) * std::max(std::sqrt(np), eps));
  }
  return sum / P;
}

double masked_bce(const Roll& target, const Roll& prediction, const Roll& onset, double eps) {
  LossConfig cfg;
  cfg.bce_eps = eps;
  cfg.weighted = false;
  return weighted_masked_bce(target, prediction, onset, onset, cfg);
}

double velocity_weight(double velocity, const LossConfig& config) {
  return 1.0 + config.weight_factor * std::abs(velocity - config.weight_center);
}

double weighted_masked_bce(const Roll& target, const Roll& prediction, const Roll& onset,
                           const Roll& velocity, const LossConfig& config) {
  require_same(target, prediction, "weighted_masked_bce");
  require_same(target, onset, "weighted_masked_bce");
  require_same(target, velocity, "weighted_masked_bce");
  const int T = target.frames(), P = target.pitches();
  double sum = 0.0;
  for (int t = 0; t < T; ++t)
    for (int p = 0; p < P; ++p) {
      const double w = cell_weight(onset, velocity, t, p, config);
      if (w != 0.0) sum += w * bce_elementwise(target(t, p), prediction(t, p), config.bce_eps);
    }
  return sum / (static_cast<double>(T) * P);
}

LossValue combined_loss(const Roll& target, const Roll& prediction, const Roll& onset,
                        const Roll& velocity, const LossConfig& config) {
  config.validate();
  require_same(target, prediction, "combined_loss");
  require_same(target, onset, "combined_loss");
  require_same(target, velocity, "combined_loss");
  const int T = target.frames(), P = target.pitches();
  const double cells = static_cast<double>(T) * P;
  const double a = config.alpha;

  LossValue out;
  out.gradient = Roll(T, P);
  out.bce_term = weighted_masked_bce(target, prediction, onset, velocity, config);
  out.cossim_term = cos_sim(target, prediction, config.cos_eps);
  out.total = (1.0 - a) * out.bce_term + a * (1.0 - out.cossim_term);

  for (int t = 0; t < T; ++t)
    for (int p = 0; p < P; ++p) {
      const double w = cell_weight(onset, velocity, t, p, config);
      if (w != 0.0)
        out.gradient(t, p) = (1.0 - a) * w *
                             bce_elementwise_grad(target(t, p), prediction(t, p), config.bce_eps) /
                             cells;
    }

  if (a != 0.0 && P > 0) {
    for (int p = 0; p < P; ++p) {
      double dot = 0.0, ny = 0.0, np = 0.0;
      for (int t = 0; t < T; ++t) {
        dot += target(t, p) * prediction(t, p);
        ny += target(t, p) * target(t, p);
        np += prediction(t, p) * prediction(t, p);
      }
      const double norm_y = std::max(std::sqrt(ny), config.cos_eps);
      const double raw_p = std::sqrt(np);
      const double norm_p = std::max(raw_p, config.cos_eps);
      const double s = dot / (norm_y * norm_p);
      const bool floored = raw_p <= config.cos_eps;
      for (int t = 0; t < T; ++t) {
        double ds = target(t, p) / (norm_y * norm_p);
        if (!floored) ds -= s * prediction(t, p) / (norm_p * norm_p);
        out.gradient(t, p) -= a * ds / P;
      }
    }
  }
  return out;
}

}  // namespace velofill
