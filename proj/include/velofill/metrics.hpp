#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "velofill/midi_io.hpp"

namespace velofill {

struct NotePair {
  int true_velocity = 0;
  int predicted_velocity = 0;
  std::string piece_id;
};

struct MetricsReport {
  double mae = 0.0;
  double mse = 0.0;
  double sd_ae = 0.0;    // population std of |error|
  double recall = 0.0;   // fraction with |error| <= tolerance * 127
  double sd_velo = 0.0;  // per-piece std of predictions, averaged over pieces
  std::size_t note_count = 0;
};

class EmptyInput : public std::invalid_argument {
 public:
  EmptyInput() : std::invalid_argument("no note pairs to evaluate") {}
};

inline constexpr int kFlatVelocity = 64;

/// Note-level velocity metrics on the 0-127 scale. Throws EmptyInput.
MetricsReport compute_metrics(std::span<const NotePair> pairs, double tolerance_fraction = 0.1);

/// Every velocity set to 64.
MidiPiece flat_baseline(MidiPiece piece);

/// Pairs notes of two renditions of the same score by position. Throws
/// std::invalid_argument if note counts or pitches disagree.
std::vector<NotePair> pair_notes(const MidiPiece& truth, const MidiPiece& prediction,
                                 const std::string& piece_id);

std::string to_json(const MetricsReport& report);
std::string csv_header();
std::string to_csv_row(const MetricsReport& report, const std::string& label);

}  // namespace velofill
