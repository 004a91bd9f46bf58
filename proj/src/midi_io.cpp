#include "velofill/midi_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <map>
#include <tuple>
#include <utility>

namespace velofill {

namespace {

using Kind = MidiError::Kind;

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::size_t remaining() const { return bytes_.size() - pos_; }
  bool done() const { return pos_ >= bytes_.size(); }

  std::uint8_t u8(Kind on_short) {
    need(1, on_short);
    return bytes_[pos_++];
  }
  std::uint16_t u16(Kind on_short) {
    need(2, on_short);
    std::uint16_t v = static_cast<std::uint16_t>((bytes_[pos_] << 8) | bytes_[pos_ + 1]);
    pos_ += 2;
    return v;
  }
  std::uint32_t u32(Kind on_short) {
    need(4, on_short);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v = (v << 8) | bytes_[pos_++];
    return v;
  }
  std::uint32_t vlq(Kind on_short) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      std::uint8_t b = u8(on_short);
      v = (v << 7) | (b & 0x7F);
      if (!(b & 0x80)) return v;
    }
    throw MidiError(on_short, "variable-length quantity longer than 4 bytes");
  }
  std::span<const std::uint8_t> take(std::size_t n, Kind on_short) {
    need(n, on_short);
    auto out = bytes_.subspan(pos_, n);
    pos_ += n;
    return out;
  }
  void skip(std::size_t n, Kind on_short) { take(n, on_short); }

 private:
  void need(std::size_t n, Kind on_short) const {
    if (remaining() < n) throw MidiError(on_short, "unexpected end of data");
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

struct RawNote {
  std::int64_t on_tick;
  std::int64_t off_tick;
  int pitch;
  int velocity;
};

// Parses one MTrk body, pairing note-on/off per (channel, pitch).
void parse_track(std::span<const std::uint8_t> body, std::vector<RawNote>& notes,
                 std::vector<TempoChange>& tempos, int& unmatched) {
  ByteReader in(body);
  std::int64_t tick = 0;
  std::uint8_t status = 0;
  std::map<std::pair<int, int>, std::size_t> open;  // (channel, pitch) -> index in notes

  auto close = [&](std::size_t idx, std::int64_t at) {
    RawNote& n = notes[idx];
    n.off_tick = std::max(at, n.on_tick + 1);
  };

  while (!in.done()) {
    tick += in.vlq(Kind::TruncatedTrack);
    std::uint8_t byte = in.u8(Kind::TruncatedTrack);

    if (byte == 0xFF) {
      std::uint8_t type = in.u8(Kind::TruncatedTrack);
      std::uint32_t len = in.vlq(Kind::TruncatedTrack);
      auto data = in.take(len, Kind::TruncatedTrack);
      if (type == 0x51 && len == 3) {
        int tempo = (data[0] << 16) | (data[1] << 8) | data[2];
        if (tempo > 0) tempos.push_back({tick, tempo});
      } else if (type == 0x2F) {
        break;
      }
      status = 0;
      continue;
    }
    if (byte == 0xF0 || byte == 0xF7) {
      in.skip(in.vlq(Kind::TruncatedTrack), Kind::TruncatedTrack);
      status = 0;
      continue;
    }
    if (byte > 0xF0) {  // system common / real-time, not expected in files
      in.skip(byte == 0xF2 ? 2 : (byte == 0xF1 || byte == 0xF3) ? 1 : 0, Kind::TruncatedTrack);
      continue;
    }

    std::uint8_t first;
    if (byte & 0x80) {
      status = byte;
      first = in.u8(Kind::TruncatedTrack);
    } else {
      if (status == 0) throw MidiError(Kind::TruncatedTrack, "data byte without running status");
      first = byte;
    }

    const int kind = status & 0xF0;
    const int channel = status & 0x0F;
    if (kind == 0xC0 || kind == 0xD0) continue;  // one data byte
    std::uint8_t second = in.u8(Kind::TruncatedTrack);

    if (kind == 0x90 || kind == 0x80) {
      const auto key = std::make_pair(channel, static_cast<int>(first));
      auto it = open.find(key);
      if (it != open.end()) {
        close(it->second, tick);
        open.erase(it);
      }
      if (kind == 0x90 && second > 0) {
        notes.push_back({tick, tick + 1, first, second});
        open.emplace(key, notes.size() - 1);
      }
    }
  }

  for (const auto& [key, idx] : open) {
    close(idx, tick);
    ++unmatched;
  }
}

std::vector<TempoChange> normalized_tempo_map(std::vector<TempoChange> tempos) {
  std::stable_sort(tempos.begin(), tempos.end(),
                   [](const TempoChange& a, const TempoChange& b) { return a.tick < b.tick; });
  std::vector<TempoChange> out;
  for (const auto& t : tempos) {
    if (!out.empty() && out.back().tick == t.tick)
      out.back() = t;  // last one at a tick wins
    else
      out.push_back(t);
  }
  if (out.empty() || out.front().tick != 0) out.insert(out.begin(), TempoChange{});
  return out;
}

double seconds_per_tick(int tempo, int ppq) { return tempo * 1e-6 / ppq; }

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v & 0xFF));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) out.push_back(static_cast<std::uint8_t>(v >> shift));
}

void put_vlq(std::vector<std::uint8_t>& out, std::uint32_t v) {
  std::uint8_t buf[5];
  int n = 0;
  buf[n++] = v & 0x7F;
  while (v >>= 7) buf[n++] = static_cast<std::uint8_t>((v & 0x7F) | 0x80);
  while (n > 0) out.push_back(buf[--n]);
}

}  // namespace

void MidiPiece::sort_notes() {
  std::stable_sort(notes.begin(), notes.end(), [](const MidiNote& a, const MidiNote& b) {
    return std::tie(a.onset_seconds, a.pitch) < std::tie(b.onset_seconds, b.pitch);
  });
}

double ticks_to_seconds(std::int64_t tick, std::span<const TempoChange> tempo_map, int ppq) {
  double seconds = 0.0;
  std::int64_t seg_tick = 0;
  int tempo = kDefaultTempo;
  for (const auto& change : tempo_map) {
    if (change.tick > tick) break;
    seconds += static_cast<double>(change.tick - seg_tick) * seconds_per_tick(tempo, ppq);
    seg_tick = change.tick;
    tempo = change.microseconds_per_quarter;
  }
  return seconds + static_cast<double>(tick - seg_tick) * seconds_per_tick(tempo, ppq);
}

std::int64_t seconds_to_ticks(double seconds, std::span<const TempoChange> tempo_map, int ppq) {
  if (seconds <= 0.0) return 0;
  double seg_seconds = 0.0;
  std::int64_t seg_tick = 0;
  int tempo = kDefaultTempo;
  for (const auto& change : tempo_map) {
    double change_seconds =
        seg_seconds + static_cast<double>(change.tick - seg_tick) * seconds_per_tick(tempo, ppq);
    if (change_seconds > seconds) break;
    seg_seconds = change_seconds;
    seg_tick = change.tick;
    tempo = change.microseconds_per_quarter;
  }
  return seg_tick + std::llround((seconds - seg_seconds) / seconds_per_tick(tempo, ppq));
}

MidiPiece parse_midi(std::span<const std::uint8_t> bytes, ParseReport* report) {
  ByteReader in(bytes);
  if (in.remaining() < 14) throw MidiError(Kind::MalformedHeader, "file too short for MThd");
  auto magic = in.take(4, Kind::MalformedHeader);
  if (!std::equal(magic.begin(), magic.end(), "MThd"))
    throw MidiError(Kind::MalformedHeader, "missing MThd magic");
  const std::uint32_t header_len = in.u32(Kind::MalformedHeader);
  if (header_len < 6) throw MidiError(Kind::MalformedHeader, "MThd length < 6");
  const std::uint16_t format = in.u16(Kind::MalformedHeader);
  const std::uint16_t ntracks = in.u16(Kind::MalformedHeader);
  const std::uint16_t division = in.u16(Kind::MalformedHeader);
  in.skip(header_len - 6, Kind::MalformedHeader);

  if (format > 1) throw MidiError(Kind::UnsupportedFormat, "SMF format " + std::to_string(format));
  if (division & 0x8000) throw MidiError(Kind::UnsupportedFormat, "SMPTE time division");
  if (division == 0) throw MidiError(Kind::MalformedHeader, "zero ticks per quarter note");

  std::vector<RawNote> raw;
  std::vector<TempoChange> tempos;
  ParseReport local;

  for (int track = 0; track < ntracks && !in.done();) {
    auto id = in.take(4, Kind::TruncatedTrack);
    const std::uint32_t len = in.u32(Kind::TruncatedTrack);
    auto body = in.take(len, Kind::TruncatedTrack);
    if (!std::equal(id.begin(), id.end(), "MTrk")) continue;  // alien chunk
    parse_track(body, raw, tempos, local.unmatched_note_ons);
    ++track;
  }

  MidiPiece piece;
  piece.ppq = division;
  piece.tempo_map = normalized_tempo_map(std::move(tempos));
  piece.notes.reserve(raw.size());
  for (const auto& n : raw) {
    if (n.pitch < kLowestPitch || n.pitch > kHighestPitch) {
      ++local.dropped_out_of_range;
      continue;
    }
    piece.notes.push_back({ticks_to_seconds(n.on_tick, piece.tempo_map, piece.ppq),
                           ticks_to_seconds(n.off_tick, piece.tempo_map, piece.ppq), n.pitch,
                           n.velocity});
  }
  piece.sort_notes();
  if (report) *report = local;
  return piece;
}

std::vector<std::uint8_t> write_midi(const MidiPiece& piece) {
  struct Event {
    std::int64_t tick;
    int order;  // tempo, then note-off, then note-on at equal ticks
    std::size_t seq;
    std::uint8_t data[3];
    int size;
  };
  std::vector<Event> events;
  std::size_t seq = 0;

  for (const auto& t : piece.tempo_map) {
    Event e{t.tick, 0, seq++, {}, 3};
    e.data[0] = static_cast<std::uint8_t>(t.microseconds_per_quarter >> 16);
    e.data[1] = static_cast<std::uint8_t>(t.microseconds_per_quarter >> 8);
    e.data[2] = static_cast<std::uint8_t>(t.microseconds_per_quarter);
    events.push_back(e);
  }
  for (const auto& n : piece.notes) {
    const std::int64_t on = seconds_to_ticks(n.onset_seconds, piece.tempo_map, piece.ppq);
    const std::int64_t off =
        std::max(on + 1, seconds_to_ticks(n.offset_seconds, piece.tempo_map, piece.ppq));
    const auto pitch = static_cast<std::uint8_t>(n.pitch);
    // Velocity 0 would read back as a note-off.
    const auto velocity = static_cast<std::uint8_t>(std::clamp(n.velocity, 1, 127));
    events.push_back({on, 2, seq++, {0x90, pitch, velocity}, 3});
    events.push_back({off, 1, seq++, {0x80, pitch, 0}, 3});
  }
  std::sort(events.begin(), events.end(), [](const Event& a, const Event& b) {
    return std::tie(a.tick, a.order, a.seq) < std::tie(b.tick, b.order, b.seq);
  });

  std::vector<std::uint8_t> track;
  std::int64_t last = 0;
  for (const auto& e : events) {
    put_vlq(track, static_cast<std::uint32_t>(e.tick - last));
    last = e.tick;
    if (e.order == 0) {
      track.insert(track.end(), {0xFF, 0x51, 0x03});
    }
    track.insert(track.end(), e.data, e.data + e.size);
  }
  put_vlq(track, 0);
  track.insert(track.end(), {0xFF, 0x2F, 0x00});

  std::vector<std::uint8_t> out;
  out.reserve(track.size() + 22);
  out.insert(out.end(), {'M', 'T', 'h', 'd'});
  put_u32(out, 6);
  put_u16(out, 0);
  put_u16(out, 1);
  put_u16(out, static_cast<std::uint16_t>(piece.ppq));
  out.insert(out.end(), {'M', 'T', 'r', 'k'});
  put_u32(out, static_cast<std::uint32_t>(track.size()));
  out.insert(out.end(), track.begin(), track.end());
  return out;
}

MidiPiece read_midi_file(const std::string& path, ParseReport* report) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw std::runtime_error("cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(file)),
                                  std::istreambuf_iterator<char>());
  MidiPiece piece = parse_midi(bytes, report);
  piece.source_path = path;
  return piece;
}

void write_midi_file(const MidiPiece& piece, const std::string& path) {
  const auto bytes = write_midi(piece);
  std::ofstream file(path, std::ios::binary);
  if (!file) throw std::runtime_error("cannot write " + path);
  file.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace velofill
