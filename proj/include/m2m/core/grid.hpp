#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace m2m {

inline constexpr int kSteps = 64;        // sixteenth steps per phrase (4 bars)
inline constexpr int kPitches = 72;      // MIDI pitches 24..95
inline constexpr int kInstruments = 5;   // piano, guitar, bass, string, drum
inline constexpr int kStepsPerBar = 16;
inline constexpr int kLowestPitch = 24;
inline constexpr int kHighestPitch = kLowestPitch + kPitches - 1;

enum class Instrument : int { Piano = 0, Guitar = 1, Bass = 2, String = 3, Drum = 4 };

const char* instrument_name(Instrument inst);

struct Dims {
  int t = kSteps;
  int p = kPitches;
  int c = kInstruments;

  std::size_t cells() const { return static_cast<std::size_t>(t) * p * c; }
  friend bool operator==(const Dims&, const Dims&) = default;
};

std::string to_string(const Dims& d);

/// Binary time x pitch x instrument grid, (t, p, c) row-major.
class Pianoroll {
 public:
  Pianoroll() : Pianoroll(Dims{}) {}
  explicit Pianoroll(Dims dims) : dims_(dims), cells_(dims.cells(), 0) {}

  const Dims& dims() const { return dims_; }
  std::size_t index(int t, int p, int c) const {
    return (static_cast<std::size_t>(t) * dims_.p + p) * dims_.c + c;
  }
  std::uint8_t at(int t, int p, int c) const { return cells_[index(t, p, c)]; }
  void set(int t, int p, int c, bool on = true) { cells_[index(t, p, c)] = on ? 1 : 0; }

  std::span<const std::uint8_t> cells() const { return cells_; }
  std::span<std::uint8_t> cells() { return cells_; }

  std::size_t active_count() const;
  /// Copy of steps [begin, begin + length).
  Pianoroll slice_steps(int begin, int length) const;

  friend bool operator==(const Pianoroll&, const Pianoroll&) = default;

 private:
  Dims dims_;
  std::vector<std::uint8_t> cells_;
};

/// Binary time x pitch grid: the unlabeled performance.
class Mixture {
 public:
  Mixture() : Mixture(kSteps, kPitches) {}
  Mixture(int t, int p) : t_(t), p_(p), cells_(static_cast<std::size_t>(t) * p, 0) {}

  int steps() const { return t_; }
  int pitches() const { return p_; }
  std::uint8_t at(int t, int p) const { return cells_[static_cast<std::size_t>(t) * p_ + p]; }
  void set(int t, int p, bool on = true) { cells_[static_cast<std::size_t>(t) * p_ + p] = on ? 1 : 0; }

  std::span<const std::uint8_t> cells() const { return cells_; }
  std::span<std::uint8_t> cells() { return cells_; }

  std::size_t active_count() const;
  double density() const;

  friend bool operator==(const Mixture&, const Mixture&) = default;

 private:
  int t_;
  int p_;
  std::vector<std::uint8_t> cells_;
};

/// Real-valued (t, p, c) array used by the diffusion process.
struct RealGrid {
  Dims dims;
  std::vector<double> values;

  RealGrid() = default;
  explicit RealGrid(Dims d, double fill = 0.0) : dims(d), values(d.cells(), fill) {}

  double& at(int t, int p, int c) { return values[(static_cast<std::size_t>(t) * dims.p + p) * dims.c + c]; }
  double at(int t, int p, int c) const {
    return values[(static_cast<std::size_t>(t) * dims.p + p) * dims.c + c];
  }
};

/// x[t,p] = min(1, sum_c y[t,p,c]).
Mixture mixture_from_roll(const Pianoroll& roll);

RealGrid to_real(const Pianoroll& roll);

/// The mixture broadcast across `channels` as a 0/1 real mask.
RealGrid broadcast_mask(const Mixture& x, int channels);

/// values <- values * mask, element-wise. Shapes must match.
void apply_mask(RealGrid& grid, const RealGrid& mask);

}  // namespace m2m
