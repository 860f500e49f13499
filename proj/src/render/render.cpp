#include "m2m/render/render.hpp"

#include <png.h>

#include <fstream>
#include <stdexcept>

#include "m2m/core/error.hpp"

namespace m2m::render {

void RenderSpec::validate() const {
  if (scale < 1) throw ContractError("render scale must be >= 1");
  for (std::size_t i = 0; i < colors.size(); ++i) {
    for (std::size_t j = i + 1; j < colors.size(); ++j) {
      if (colors[i] == colors[j]) throw ContractError("instrument colors must be pairwise distinct");
    }
  }
}

Rgb Image::pixel(int x, int y) const {
  const std::size_t i = (static_cast<std::size_t>(y) * width + x) * 3;
  return {rgb[i], rgb[i + 1], rgb[i + 2]};
}

std::pair<int, int> cell_origin(const Dims& dims, int row, int t, int p, int c, int scale) {
  const int x = (c * dims.t + t) * scale;
  const int y = (row * dims.p + (dims.p - 1 - p)) * scale;
  return {x, y};
}

Image render_pair(const Pianoroll& generated, const Pianoroll& original, const RenderSpec& spec) {
  spec.validate();
  if (generated.dims() != original.dims()) {
    throw ContractError("render: shapes " + to_string(generated.dims()) + " and " + to_string(original.dims()) +
                        " differ");
  }
  const Dims d = generated.dims();
  if (d.c > kInstruments) throw ContractError("render: at most five instrument channels");
  Image img;
  img.width = d.c * d.t * spec.scale;
  img.height = 2 * d.p * spec.scale;
  img.rgb.resize(static_cast<std::size_t>(img.width) * img.height * 3);
  for (std::size_t i = 0; i < img.rgb.size(); i += 3) {
    img.rgb[i] = spec.background.r;
    img.rgb[i + 1] = spec.background.g;
    img.rgb[i + 2] = spec.background.b;
  }
  const Pianoroll* rows[2] = {&generated, &original};
  for (int row = 0; row < 2; ++row) {
    for (int t = 0; t < d.t; ++t) {
      for (int p = 0; p < d.p; ++p) {
        for (int c = 0; c < d.c; ++c) {
          if (!rows[row]->at(t, p, c)) continue;
          const Rgb col = spec.colors[static_cast<std::size_t>(c)];
          const auto [x0, y0] = cell_origin(d, row, t, p, c, spec.scale);
          for (int y = y0; y < y0 + spec.scale; ++y) {
            for (int x = x0; x < x0 + spec.scale; ++x) {
              const std::size_t i = (static_cast<std::size_t>(y) * img.width + x) * 3;
              img.rgb[i] = col.r;
              img.rgb[i + 1] = col.g;
              img.rgb[i + 2] = col.b;
            }
          }
        }
      }
    }
  }
  return img;
}

namespace {

void append_bytes(png_structp png, png_bytep data, png_size_t length) {
  auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + length);
}

void no_flush(png_structp) {}

}  // namespace

std::vector<std::uint8_t> encode_png(const Image& image) {
  if (image.width < 1 || image.height < 1) throw ContractError("encode_png: empty image");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw std::runtime_error("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw std::runtime_error("png_create_info_struct failed");
  }
  std::vector<std::uint8_t> out;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("PNG encoding failed");
  }
  png_set_write_fn(png, &out, append_bytes, no_flush);
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < image.height; ++y) {
    auto* row = const_cast<png_bytep>(image.rgb.data() + static_cast<std::size_t>(y) * image.width * 3);
    png_write_row(png, row);
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

void write_png(const Image& image, const std::string& path) {
  const auto bytes = encode_png(image);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path);
}

}  // namespace m2m::render
