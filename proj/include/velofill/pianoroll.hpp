#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "velofill/midi_io.hpp"
#include "velofill/roll.hpp"

namespace velofill {

inline constexpr int kPitchCount = 88;
inline constexpr int kSegmentFrames = 96;

struct SegmentationConfig {
  double segment_duration = 10.0;  // seconds
  int frames = kSegmentFrames;
};

/// Seconds covered by one time frame.
double resolution_of(const SegmentationConfig& config);

struct SegmentNote {
  std::size_t note_index;  // into MidiPiece::notes
  int onset_frame;
  int pitch_row;
};

/// Onset, frame and velocity rolls for one fixed-length window of a piece.
struct PianorollSegment {
  int index = 0;
  double start_seconds = 0.0;
  double duration_seconds = 10.0;
  Roll onset;     // binary
  Roll frame;     // binary
  Roll velocity;  // normalized, zero where frame is zero
  std::vector<SegmentNote> notes;
};

/// Splits a piece into consecutive non-overlapping segments starting at 0.
///
/// A note belongs to the segment holding its onset. Its frame span is
/// [floor(onset / res), ceil(offset / res) - 1] relative to the segment start,
/// truncated at the segment end and never shorter than one frame. Segments
/// without onsets between two non-empty ones are still emitted, so indices
/// stay contiguous.
std::vector<PianorollSegment> segment_piece(const MidiPiece& piece,
                                            const SegmentationConfig& config = {});

/// Maps [0,127] to [0,1) by dividing by 128. Throws std::out_of_range.
double normalize_velocity(int velocity);
/// round(x * 128) clamped to [0,127].
int denormalize_velocity(double x);

/// Gives every note of the segment the predicted velocity at its onset cell.
/// Throws std::invalid_argument on a shape mismatch.
MidiPiece fill_velocities(const PianorollSegment& segment, const Roll& predicted, MidiPiece piece);

/// Binary PGM (P5, maxval 255): one row per pitch, one column per frame.
std::vector<std::uint8_t> encode_pgm(const Roll& roll, double scale);
void write_pgm(const std::string& path, const Roll& roll, double scale);

/// Writes `<prefix>_O.pgm`, `<prefix>_F.pgm` and `<prefix>_V.pgm`.
void dump_segment_pgm(const PianorollSegment& segment, const std::string& prefix);

}  // namespace velofill
