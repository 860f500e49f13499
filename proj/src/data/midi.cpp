#include "m2m/data/midi.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <iterator>
#include <map>
#include <tuple>

#include "m2m/core/error.hpp"

namespace m2m::midi {

namespace {

enum class RawKind { NoteOn, NoteOff, Program, TimeSig };

struct RawEvent {
  std::int64_t tick;
  int track;
  int seq;
  RawKind kind;
  int channel;
  int a;  // pitch / program / numerator
  int b;  // velocity / denominator
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::size_t pos() const { return pos_; }
  std::size_t size() const { return bytes_.size(); }
  bool at_end() const { return pos_ >= bytes_.size(); }

  std::uint8_t peek(std::size_t limit) const {
    if (pos_ >= limit) throw ParseError("unexpected end of data", pos_);
    return bytes_[pos_];
  }
  std::uint8_t u8(std::size_t limit) {
    std::uint8_t v = peek(limit);
    ++pos_;
    return v;
  }
  std::uint32_t be(int n, std::size_t limit) {
    std::uint32_t v = 0;
    for (int i = 0; i < n; ++i) v = (v << 8) | u8(limit);
    return v;
  }
  std::uint32_t vlq(std::size_t limit) {
    const std::size_t start = pos_;
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      std::uint8_t b = u8(limit);
      v = (v << 7) | (b & 0x7f);
      if ((b & 0x80) == 0) return v;
    }
    throw ParseError("variable-length quantity longer than 4 bytes", start);
  }
  std::string tag() {
    if (pos_ + 4 > bytes_.size()) throw ParseError("truncated chunk header", pos_);
    std::string t(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_),
                  bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + 4));
    pos_ += 4;
    return t;
  }
  void skip(std::size_t n, std::size_t limit) {
    if (pos_ + n > limit) throw ParseError("data runs past end of chunk", pos_);
    pos_ += n;
  }
  void seek(std::size_t p) { pos_ = p; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

void parse_track(Reader& r, std::size_t end, int track, std::vector<RawEvent>& out) {
  std::int64_t tick = 0;
  int seq = 0;
  int running = -1;
  while (r.pos() < end) {
    tick += r.vlq(end);
    const std::size_t status_pos = r.pos();
    std::uint8_t status = r.peek(end);
    if (status & 0x80) {
      r.u8(end);
    } else {
      if (running < 0) throw ParseError("data byte without running status", status_pos);
      status = static_cast<std::uint8_t>(running);
    }

    if (status == 0xff) {
      running = -1;
      const int type = r.u8(end);
      const std::uint32_t len = r.vlq(end);
      const std::size_t data = r.pos();
      r.skip(len, end);
      if (type == 0x2f) return;
      if (type == 0x58) {
        if (len < 2) throw ParseError("time signature meta event too short", data);
        r.seek(data);
        const int num = r.u8(end);
        const int den_pow = r.u8(end);
        r.seek(data + len);
        if (den_pow > 7) throw ParseError("time signature denominator out of range", data + 1);
        out.push_back({tick, track, seq++, RawKind::TimeSig, 0, num, 1 << den_pow});
      }
      continue;
    }
    if (status == 0xf0 || status == 0xf7) {
      running = -1;
      r.skip(r.vlq(end), end);
      continue;
    }
    if (status >= 0xf0) throw ParseError("unexpected system message in track", status_pos);

    running = status;
    const int kind = status & 0xf0;
    const int channel = status & 0x0f;
    const int d0 = r.u8(end);
    if (d0 & 0x80) throw ParseError("data byte has high bit set", r.pos() - 1);
    int d1 = 0;
    if (kind != 0xc0 && kind != 0xd0) {
      d1 = r.u8(end);
      if (d1 & 0x80) throw ParseError("data byte has high bit set", r.pos() - 1);
    }
    if (kind == 0x90 && d1 > 0) {
      out.push_back({tick, track, seq++, RawKind::NoteOn, channel, d0, d1});
    } else if (kind == 0x80 || kind == 0x90) {
      out.push_back({tick, track, seq++, RawKind::NoteOff, channel, d0, 0});
    } else if (kind == 0xc0) {
      out.push_back({tick, track, seq++, RawKind::Program, channel, d0, 0});
    }
  }
  // Missing end-of-track meta event is tolerated.
}

}  // namespace

Song parse_midi(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  if (r.tag() != "MThd") throw ParseError("missing MThd header", 0);
  const std::uint32_t header_len = r.be(4, bytes.size());
  if (header_len < 6) throw ParseError("header chunk shorter than 6 bytes", 4);
  const std::size_t header_end = r.pos() + header_len;
  if (header_end > bytes.size()) throw ParseError("truncated header chunk", r.pos());
  const int format = static_cast<int>(r.be(2, header_end));
  const int ntracks = static_cast<int>(r.be(2, header_end));
  const std::uint32_t division = r.be(2, header_end);
  if (format > 1) throw ParseError("unsupported MIDI format " + std::to_string(format), 8);
  if (division & 0x8000) throw ParseError("SMPTE time division is not supported", 12);
  if (division == 0) throw ParseError("zero ticks per quarter note", 12);
  r.seek(header_end);

  std::vector<RawEvent> raw;
  int track = 0;
  while (track < ntracks) {
    if (r.at_end()) throw ParseError("file ends before all tracks were read", r.pos());
    const std::size_t chunk_pos = r.pos();
    const std::string tag = r.tag();
    const std::uint32_t len = r.be(4, bytes.size());
    const std::size_t end = r.pos() + len;
    if (end > bytes.size()) throw ParseError("chunk '" + tag + "' runs past end of file", chunk_pos);
    if (tag == "MTrk") {
      parse_track(r, end, track, raw);
      ++track;
    }
    r.seek(end);
  }

  std::stable_sort(raw.begin(), raw.end(), [](const RawEvent& a, const RawEvent& b) {
    return std::tie(a.tick, a.track, a.seq) < std::tie(b.tick, b.track, b.seq);
  });

  Song song;
  song.ticks_per_quarter = static_cast<int>(division);
  int program[16] = {};
  std::map<std::pair<int, int>, std::deque<std::pair<std::int64_t, int>>> open;
  for (const RawEvent& e : raw) {
    switch (e.kind) {
      case RawKind::TimeSig:
        song.time_signatures.push_back({e.tick, e.a, e.b});
        break;
      case RawKind::Program:
        program[e.channel] = e.a;
        break;
      case RawKind::NoteOn:
        open[{e.channel, e.a}].emplace_back(e.tick, program[e.channel]);
        break;
      case RawKind::NoteOff: {
        auto it = open.find({e.channel, e.a});
        if (it == open.end() || it->second.empty()) break;
        auto [start, prog] = it->second.front();
        it->second.pop_front();
        if (e.tick - start >= 1) {
          song.events.push_back({start, e.tick - start, e.a, e.channel, prog});
        } else {
          ++song.unresolved_notes;
        }
        break;
      }
    }
  }
  for (const auto& [key, queue] : open) song.unresolved_notes += static_cast<int>(queue.size());

  std::sort(song.events.begin(), song.events.end(), [](const NoteEvent& a, const NoteEvent& b) {
    return std::tie(a.start_tick, a.channel, a.pitch, a.duration_ticks, a.program) <
           std::tie(b.start_tick, b.channel, b.pitch, b.duration_ticks, b.program);
  });
  return song;
}

Song read_midi_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_midi(bytes);
}

namespace {

void put_be(std::vector<std::uint8_t>& out, std::uint32_t v, int n) {
  for (int i = n - 1; i >= 0; --i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

void put_vlq(std::vector<std::uint8_t>& out, std::uint32_t v) {
  std::uint8_t buf[5];
  int n = 0;
  buf[n++] = v & 0x7f;
  while (v >>= 7) buf[n++] = static_cast<std::uint8_t>((v & 0x7f) | 0x80);
  while (n > 0) out.push_back(buf[--n]);
}

void put_chunk(std::vector<std::uint8_t>& out, const std::vector<std::uint8_t>& track) {
  out.insert(out.end(), {'M', 'T', 'r', 'k'});
  put_be(out, static_cast<std::uint32_t>(track.size()), 4);
  out.insert(out.end(), track.begin(), track.end());
}

void put_name(std::vector<std::uint8_t>& trk, const std::string& name) {
  put_vlq(trk, 0);
  trk.insert(trk.end(), {0xff, 0x03});
  put_vlq(trk, static_cast<std::uint32_t>(name.size()));
  trk.insert(trk.end(), name.begin(), name.end());
}

}  // namespace

std::vector<std::uint8_t> write_midi(const std::vector<TrackSpec>& tracks, int ticks_per_quarter, double bpm) {
  std::vector<std::uint8_t> out{'M', 'T', 'h', 'd'};
  put_be(out, 6, 4);
  put_be(out, 1, 2);
  put_be(out, static_cast<std::uint32_t>(tracks.size() + 1), 2);
  put_be(out, static_cast<std::uint32_t>(ticks_per_quarter), 2);

  std::vector<std::uint8_t> conductor;
  put_vlq(conductor, 0);
  conductor.insert(conductor.end(), {0xff, 0x58, 0x04, 0x04, 0x02, 0x18, 0x08});
  const auto us_per_quarter = static_cast<std::uint32_t>(std::lround(60'000'000.0 / bpm));
  put_vlq(conductor, 0);
  conductor.insert(conductor.end(), {0xff, 0x51, 0x03});
  put_be(conductor, us_per_quarter, 3);
  put_vlq(conductor, 0);
  conductor.insert(conductor.end(), {0xff, 0x2f, 0x00});
  put_chunk(out, conductor);

  for (const TrackSpec& spec : tracks) {
    std::vector<std::uint8_t> trk;
    put_name(trk, spec.name);
    put_vlq(trk, 0);
    trk.push_back(static_cast<std::uint8_t>(0xc0 | spec.channel));
    trk.push_back(static_cast<std::uint8_t>(spec.program));

    // (tick, is_on, pitch): offs sort before ons at equal ticks.
    std::vector<std::tuple<std::int64_t, int, int>> msgs;
    for (const NoteEvent& n : spec.notes) {
      msgs.emplace_back(n.start_tick, 1, n.pitch);
      msgs.emplace_back(n.start_tick + n.duration_ticks, 0, n.pitch);
    }
    std::sort(msgs.begin(), msgs.end());
    std::int64_t now = 0;
    for (const auto& [tick, on, pitch] : msgs) {
      put_vlq(trk, static_cast<std::uint32_t>(tick - now));
      now = tick;
      trk.push_back(static_cast<std::uint8_t>((on ? 0x90 : 0x80) | spec.channel));
      trk.push_back(static_cast<std::uint8_t>(pitch));
      trk.push_back(on ? 100 : 0);
    }
    put_vlq(trk, 0);
    trk.insert(trk.end(), {0xff, 0x2f, 0x00});
    put_chunk(out, trk);
  }
  return out;
}

}  // namespace m2m::midi
