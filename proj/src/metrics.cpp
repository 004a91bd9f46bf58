#include "velofill/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <map>
#include "json.hpp"

namespace velofill {

MetricsReport compute_metrics(std::span<const NotePair> pairs, double tolerance_fraction) {
  if (pairs.empty()) throw EmptyInput();
  const double count = static_cast<double>(pairs.size());
  const double tolerance = tolerance_fraction * 127.0;

  MetricsReport r;
  r.note_count = pairs.size();
  double hits = 0.0;
  for (const auto& p : pairs) {
    const double err = p.predicted_velocity - p.true_velocity;
    r.mae += std::abs(err);
    r.mse += err * err;
    if (std::abs(err) <= tolerance) hits += 1.0;
  }
  r.mae /= count;
  r.mse /= count;
  r.recall = hits / count;

  double var_ae = 0.0;
  for (const auto& p : pairs) {
    const double d = std::abs(p.predicted_velocity - p.true_velocity) - r.mae;
    var_ae += d * d;
  }
  r.sd_ae = std::sqrt(var_ae / count);

  std::map<std::string, std::vector<int>> by_piece;
  for (const auto& p : pairs) by_piece[p.piece_id].push_back(p.predicted_velocity);
  double sd_sum = 0.0;
  for (const auto& [id, velocities] : by_piece) {
    double mean = 0.0;
    for (int v : velocities) mean += v;
    mean /= static_cast<double>(velocities.size());
    double var = 0.0;
    for (int v : velocities) var += (v - mean) * (v - mean);
    sd_sum += std::sqrt(var / static_cast<double>(velocities.size()));
  }
  r.sd_velo = sd_sum / static_cast<double>(by_piece.size());
  return r;
}

MidiPiece flat_baseline(MidiPiece piece) {
  for (auto& n : piece.notes) n.velocity = kFlatVelocity;
  return piece;
}

std::vector<NotePair> pair_notes(const MidiPiece& truth, const MidiPiece& prediction,
                                 const std::string& piece_id) {
  if (truth.notes.size() != prediction.notes.size())
    throw std::invalid_argument(piece_id + ": " + std::to_string(truth.notes.size()) +
                                " reference notes vs " + std::to_string(prediction.notes.size()) +
                                " predicted");
  std::vector<NotePair> pairs;
  pairs.reserve(truth.notes.size());
  for (std::size_t i = 0; i < truth.notes.size(); ++i) {
    if (truth.notes[i].pitch != prediction.notes[i].pitch)
      throw std::invalid_argument(piece_id + ": pitch mismatch at note " + std::to_string(i));
    pairs.push_back({truth.notes[i].velocity, prediction.notes[i].velocity, piece_id});
  }
  return pairs;
}

std::string to_json(const MetricsReport& report) {
  nlohmann::ordered_json j;
  j["mae"] = report.mae;
  j["mse"] = report.mse;
  j["sd_ae"] = report.sd_ae;
  j["recall"] = report.recall;
  j["sd_velo"] = report.sd_velo;
  j["note_count"] = report.note_count;
  return j.dump();
}

std::string csv_header() { return "label,mae,mse,sd_ae,recall,sd_velo,note_count"; }

std::string to_csv_row(const MetricsReport& report, const std::string& label) {
  char buf[256];
  std::snprintf(buf, sizeof buf, ",%.6f,%.6f,%.6f,%.6f,%.6f,%zu", report.mae, report.mse,
                report.sd_ae, report.recall, report.sd_velo, report.note_count);
  return label + buf;
}

}  // namespace velofill
