#include "m2m/core/grid.hpp"

#include <algorithm>
#include <numeric>

#include "m2m/core/error.hpp"

namespace m2m {

const char* instrument_name(Instrument inst) {
  switch (inst) {
    case Instrument::Piano: return "piano";
    case Instrument::Guitar: return "guitar";
    case Instrument::Bass: return "bass";
    case Instrument::String: return "string";
    case Instrument::Drum: return "drum";
  }
  return "?";
}

std::string to_string(const Dims& d) {
  return "(" + std::to_string(d.t) + ", " + std::to_string(d.p) + ", " + std::to_string(d.c) + ")";
}

std::size_t Pianoroll::active_count() const {
  return static_cast<std::size_t>(std::count(cells_.begin(), cells_.end(), std::uint8_t{1}));
}

Pianoroll Pianoroll::slice_steps(int begin, int length) const {
  if (begin < 0 || length < 0 || begin + length > dims_.t) {
    throw ContractError("slice_steps: range outside roll");
  }
  Pianoroll out(Dims{length, dims_.p, dims_.c});
  const std::size_t row = static_cast<std::size_t>(dims_.p) * dims_.c;
  std::copy_n(cells_.begin() + static_cast<std::ptrdiff_t>(begin * row), length * row, out.cells_.begin());
  return out;
}

std::size_t Mixture::active_count() const {
  return static_cast<std::size_t>(std::count(cells_.begin(), cells_.end(), std::uint8_t{1}));
}

double Mixture::density() const {
  return cells_.empty() ? 0.0 : static_cast<double>(active_count()) / static_cast<double>(cells_.size());
}

Mixture mixture_from_roll(const Pianoroll& roll) {
  const Dims& d = roll.dims();
  Mixture x(d.t, d.p);
  auto src = roll.cells();
  auto dst = x.cells();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    std::uint8_t any = 0;
    for (int c = 0; c < d.c; ++c) any |= src[i * d.c + c];
    dst[i] = any;
  }
  return x;
}

RealGrid to_real(const Pianoroll& roll) {
  RealGrid g(roll.dims());
  std::copy(roll.cells().begin(), roll.cells().end(), g.values.begin());
  return g;
}

RealGrid broadcast_mask(const Mixture& x, int channels) {
  RealGrid m(Dims{x.steps(), x.pitches(), channels});
  auto src = x.cells();
  for (std::size_t i = 0; i < src.size(); ++i) {
    for (int c = 0; c < channels; ++c) m.values[i * channels + c] = src[i];
  }
  return m;
}

void apply_mask(RealGrid& grid, const RealGrid& mask) {
  if (grid.dims != mask.dims) throw ContractError("apply_mask: shape mismatch");
  for (std::size_t i = 0; i < grid.values.size(); ++i) grid.values[i] *= mask.values[i];
}

}  // namespace m2m
