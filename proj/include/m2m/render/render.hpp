#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "m2m/core/grid.hpp"

namespace m2m::render {

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

/// Colors in instrument order piano, guitar, bass, string, drum.
struct RenderSpec {
  std::array<Rgb, kInstruments> colors{{{31, 119, 180}, {255, 127, 14}, {44, 160, 44}, {214, 39, 40}, {148, 103, 189}}};
  Rgb background{255, 255, 255};
  int scale = 4;  // pixels per cell edge

  /// Throws ContractError when two colors coincide or scale < 1.
  void validate() const;
};

struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel

  Rgb pixel(int x, int y) const;
};

/// One panel per instrument from left to right, time along x and pitch rising
/// upward. The generated roll occupies the upper row, the original the lower.
/// Size: width = C * T * scale, height = 2 * P * scale.
Image render_pair(const Pianoroll& generated, const Pianoroll& original, const RenderSpec& spec = {});

/// Top-left pixel of cell (t, p, c) in row 0 (generated) or 1 (original).
std::pair<int, int> cell_origin(const Dims& dims, int row, int t, int p, int c, int scale);

std::vector<std::uint8_t> encode_png(const Image& image);
void write_png(const Image& image, const std::string& path);

}  // namespace m2m::render
