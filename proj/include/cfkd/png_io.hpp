#pragma once

// 8-bit PNG read/write through libpng. Values are clipped and quantised with
// quantize_channel() on the way out.

#include <png.h>

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "cfkd/error.hpp"
#include "cfkd/image.hpp"

namespace cfkd {

namespace detail {

inline int png_color_type(int channels) {
  switch (channels) {
    case 1: return PNG_COLOR_TYPE_GRAY;
    case 3: return PNG_COLOR_TYPE_RGB;
    case 4: return PNG_COLOR_TYPE_RGBA;
  }
  throw InputError("PNG supports 1, 3 or 4 channels, got " +
                   std::to_string(channels));
}

struct PngWriteGuard {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngWriteGuard() { png_destroy_write_struct(&png, &info); }
};

struct PngReadGuard {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngReadGuard() { png_destroy_read_struct(&png, &info, nullptr); }
};

[[noreturn]] inline void png_error_handler(png_structp, png_const_charp msg) {
  throw InputError(std::string("libpng: ") + msg);
}
inline void png_warning_handler(png_structp, png_const_charp) {}

inline void write_rows(png_structp png, png_infop info, const ImageTensor& img) {
  png_set_IHDR(png, info, img.width(), img.height(), 8,
               png_color_type(img.channels()), PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const auto bytes = to_bytes(img);
  const std::size_t stride =
      static_cast<std::size_t>(img.width()) * img.channels();
  for (int y = 0; y < img.height(); ++y)
    png_write_row(png, const_cast<png_bytep>(bytes.data() + y * stride));
  png_write_end(png, nullptr);
}

}  // namespace detail

inline void write_png(const std::filesystem::path& path,
                      const ImageTensor& img) {
  if (path.has_parent_path())
    std::filesystem::create_directories(path.parent_path());
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"),
                                           &std::fclose);
  if (!fp) throw ConfigError("cannot write " + path.string());
  detail::PngWriteGuard g;
  g.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr,
                                  detail::png_error_handler,
                                  detail::png_warning_handler);
  g.info = png_create_info_struct(g.png);
  png_init_io(g.png, fp.get());
  detail::write_rows(g.png, g.info, img);
}

inline std::vector<unsigned char> encode_png(const ImageTensor& img) {
  std::vector<unsigned char> out;
  detail::PngWriteGuard g;
  g.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr,
                                  detail::png_error_handler,
                                  detail::png_warning_handler);
  g.info = png_create_info_struct(g.png);
  png_set_write_fn(
      g.png, &out,
      [](png_structp p, png_bytep data, png_size_t n) {
        auto* v = static_cast<std::vector<unsigned char>*>(png_get_io_ptr(p));
        v->insert(v->end(), data, data + n);
      },
      [](png_structp) {});
  detail::write_rows(g.png, g.info, img);
  return out;
}

inline ImageTensor read_png(const std::filesystem::path& path) {
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "rb"),
                                           &std::fclose);
  if (!fp) throw ConfigError("cannot open " + path.string());
  detail::PngReadGuard g;
  g.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr,
                                 detail::png_error_handler,
                                 detail::png_warning_handler);
  g.info = png_create_info_struct(g.png);
  png_init_io(g.png, fp.get());
  png_read_info(g.png, g.info);
  const int w = static_cast<int>(png_get_image_width(g.png, g.info));
  const int h = static_cast<int>(png_get_image_height(g.png, g.info));
  const int depth = png_get_bit_depth(g.png, g.info);
  const int type = png_get_color_type(g.png, g.info);
  if (depth != 8) throw InputError(path.string() + ": only 8-bit PNG supported");
  int channels = 0;
  if (type == PNG_COLOR_TYPE_GRAY) channels = 1;
  else if (type == PNG_COLOR_TYPE_RGB) channels = 3;
  else if (type == PNG_COLOR_TYPE_RGBA) channels = 4;
  else throw InputError(path.string() + ": unsupported PNG color type");
  std::vector<unsigned char> bytes(static_cast<std::size_t>(w) * h * channels);
  for (int y = 0; y < h; ++y)
    png_read_row(g.png, bytes.data() + static_cast<std::size_t>(y) * w * channels,
                 nullptr);
  png_read_end(g.png, nullptr);
  return from_bytes(ImageShape{h, w, channels}, bytes);
}

inline std::string base64_encode(const std::vector<unsigned char>& in) {
  static constexpr char tbl[] =
      "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((in.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < in.size(); i += 3) {
    const unsigned v = (in[i] << 16) | (in[i + 1] << 8) | in[i + 2];
    out += tbl[(v >> 18) & 63];
    out += tbl[(v >> 12) & 63];
    out += tbl[(v >> 6) & 63];
    out += tbl[v & 63];
  }
  if (i < in.size()) {
    unsigned v = in[i] << 16;
    if (i + 1 < in.size()) v |= in[i + 1] << 8;
    out += tbl[(v >> 18) & 63];
    out += tbl[(v >> 12) & 63];
    out += i + 1 < in.size() ? tbl[(v >> 6) & 63] : '=';
    out += '=';
  }
  return out;
}

}  // namespace cfkd
