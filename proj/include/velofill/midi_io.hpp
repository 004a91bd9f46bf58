#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace velofill {

inline constexpr int kLowestPitch = 21;   // A0
inline constexpr int kHighestPitch = 108; // C8
inline constexpr int kDefaultTempo = 500000;
inline constexpr int kDefaultPpq = 480;

struct MidiNote {
  double onset_seconds = 0.0;
  double offset_seconds = 0.0;
  int pitch = 60;
  int velocity = 64;

  bool operator==(const MidiNote&) const = default;
};

struct TempoChange {
  std::int64_t tick = 0;
  int microseconds_per_quarter = kDefaultTempo;

  bool operator==(const TempoChange&) const = default;
};

/// A piano performance as a flat, time-sorted note list.
///
/// Notes are kept sorted by onset, ties broken by pitch. The tempo map always
/// starts at tick 0 so that seconds and ticks can be converted both ways.
struct MidiPiece {
  std::vector<MidiNote> notes;
  std::vector<TempoChange> tempo_map{TempoChange{}};
  int ppq = kDefaultPpq;
  std::optional<std::string> source_path;

  /// Restores the ordering invariant after notes were edited in place.
  void sort_notes();
};

/// Non-fatal findings while parsing.
struct ParseReport {
  int dropped_out_of_range = 0;  // notes outside the 88-key range
  int unmatched_note_ons = 0;    // closed at end of track
};

class MidiError : public std::runtime_error {
 public:
  enum class Kind { MalformedHeader, UnsupportedFormat, TruncatedTrack };

  MidiError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

MidiPiece parse_midi(std::span<const std::uint8_t> bytes, ParseReport* report = nullptr);
std::vector<std::uint8_t> write_midi(const MidiPiece& piece);

MidiPiece read_midi_file(const std::string& path, ParseReport* report = nullptr);
void write_midi_file(const MidiPiece& piece, const std::string& path);

double ticks_to_seconds(std::int64_t tick, std::span<const TempoChange> tempo_map, int ppq);
/// Inverse of ticks_to_seconds, rounded to the nearest tick.
std::int64_t seconds_to_ticks(double seconds, std::span<const TempoChange> tempo_map, int ppq);

}  // namespace velofill
