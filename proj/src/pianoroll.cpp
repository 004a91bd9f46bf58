#include "velofill/pianoroll.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>

namespace velofill {

double resolution_of(const SegmentationConfig& config) {
  if (config.frames <= 0 || !(config.segment_duration > 0.0))
    throw std::invalid_argument("segmentation needs positive duration and frame count");
  return config.segment_duration / config.frames;
}

std::vector<PianorollSegment> segment_piece(const MidiPiece& piece, const SegmentationConfig& config) {
  const double res = resolution_of(config);
  const double dur = config.segment_duration;
  const int T = config.frames;

  std::vector<PianorollSegment> segments;
  auto segment_at = [&](std::size_t k) -> PianorollSegment& {
    while (segments.size() <= k) {
      PianorollSegment s;
      s.index = static_cast<int>(segments.size());
      s.start_seconds = s.index * dur;
      s.duration_seconds = dur;
      s.onset = Roll(T, kPitchCount);
      s.frame = Roll(T, kPitchCount);
      s.velocity = Roll(T, kPitchCount);
      segments.push_back(std::move(s));
    }
    return segments[k];
  };

  for (std::size_t i = 0; i < piece.notes.size(); ++i) {
    const MidiNote& note = piece.notes[i];
    if (note.pitch < kLowestPitch || note.pitch > kHighestPitch) continue;

    auto k = static_cast<std::size_t>(std::max(0.0, std::floor(note.onset_seconds / dur)));
    int onset_frame = static_cast<int>(std::floor((note.onset_seconds - k * dur) / res));
    if (onset_frame > T - 1) {
      ++k;
      onset_frame = 0;
    }
    onset_frame = std::max(onset_frame, 0);
    const double start = k * dur;
    int last = static_cast<int>(std::ceil((note.offset_seconds - start) / res)) - 1;
    last = std::min(T - 1, std::max(onset_frame, last));

    PianorollSegment& seg = segment_at(k);
    const int row = note.pitch - kLowestPitch;
    const double v = normalize_velocity(note.velocity);
    seg.onset(onset_frame, row) = 1.0;
    for (int t = onset_frame; t <= last; ++t) {
      seg.frame(t, row) = 1.0;
      seg.velocity(t, row) = v;
    }
    seg.notes.push_back({i, onset_frame, row});
  }
  return segments;
}

double normalize_velocity(int velocity) {
  if (velocity < 0 || velocity > 127)
    throw std::out_of_range("velocity " + std::to_string(velocity) + " outside [0,127]");
  return velocity / 128.0;
}

int denormalize_velocity(double x) {
  if (std::isnan(x)) return 0;
  const double scaled = std::round(std::clamp(x, 0.0, 1.0) * 128.0);
  return std::clamp(static_cast<int>(scaled), 0, 127);
}

MidiPiece fill_velocities(const PianorollSegment& segment, const Roll& predicted, MidiPiece piece) {
  if (!predicted.same_shape(segment.onset))
    throw std::invalid_argument("predicted velocity roll shape does not match segment");
  for (const auto& n : segment.notes) {
    if (n.note_index >= piece.notes.size())
      throw std::invalid_argument("segment refers to a note outside the piece");
    piece.notes[n.note_index].velocity = denormalize_velocity(predicted(n.onset_frame, n.pitch_row));
  }
  return piece;
}

std::vector<std::uint8_t> encode_pgm(const Roll& roll, double scale) {
  const std::string header =
      "P5\n" + std::to_string(roll.frames()) + " " + std::to_string(roll.pitches()) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(out.size() + roll.size());
  for (int p = 0; p < roll.pitches(); ++p) {
    for (int t = 0; t < roll.frames(); ++t) {
      const double v = std::clamp(std::round(roll(t, p) * scale), 0.0, 255.0);
      out.push_back(static_cast<std::uint8_t>(v));
    }
  }
  return out;
}

void write_pgm(const std::string& path, const Roll& roll, double scale) {
  const auto bytes = encode_pgm(roll, scale);
  std::ofstream file(path, std::ios::binary);
  if (!file) throw std::runtime_error("cannot write " + path);
  file.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void dump_segment_pgm(const PianorollSegment& segment, const std::string& prefix) {
  write_pgm(prefix + "_O.pgm", segment.onset, 255.0);
  write_pgm(prefix + "_F.pgm", segment.frame, 255.0);
  write_pgm(prefix + "_V.pgm", segment.velocity, 255.0);
}

}  // namespace velofill
