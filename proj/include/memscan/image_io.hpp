#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "memscan/tensor.hpp"

namespace memscan {

// Images travel as {3,H,W} tensors with values in [0,1]. Files are 8-bit RGB
// PNG or binary P6 PPM; one save/load round trip changes a channel by at most
// 1/255 (quantization). Grayscale or palette PNGs are coerced to RGB on load.

namespace img_detail {

inline unsigned char to_byte(double v) {
  double c = std::clamp(v, 0.0, 1.0);
  return static_cast<unsigned char>(std::lround(c * 255.0));
}

inline void require_rgb(const Tensor<double>& img, const char* who) {
  if (img.shape().ndim() != 3 || img.shape()[0] != 3)
    throw ConfigError(std::string(who) + ": need a {3,H,W} image, got " + img.shape().str());
}

}  // namespace img_detail

inline void save_png(const std::string& path, const Tensor<double>& img) {
  img_detail::require_rgb(img, "save_png");
  int h = img.shape()[1], w = img.shape()[2];
  std::FILE* fp = std::fopen(path.c_str(), "wb");
  if (fp == nullptr) throw IoError("save_png: cannot open " + path + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png != nullptr ? png_create_info_struct(png) : nullptr;
  if (png == nullptr || info == nullptr) {
    if (png != nullptr) png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw IoError("save_png: encoder initialization failed for " + path);
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw IoError("save_png: encode error for " + path);
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_byte> row(static_cast<std::size_t>(w) * 3);
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        row[static_cast<std::size_t>(x) * 3 + static_cast<std::size_t>(c)] =
            img_detail::to_byte(img[c * plane + static_cast<std::int64_t>(y) * w + x]);
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

inline Tensor<double> load_png(const std::string& path) {
  std::FILE* fp = std::fopen(path.c_str(), "rb");
  if (fp == nullptr) throw IoError("load_png: cannot open " + path);
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, fp) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    std::fclose(fp);
    throw IoError("load_png: " + path + " is not a PNG file");
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png != nullptr ? png_create_info_struct(png) : nullptr;
  if (png == nullptr || info == nullptr) {
    if (png != nullptr) png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw IoError("load_png: decoder initialization failed for " + path);
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw IoError("load_png: decode error for " + path);
  }
  png_init_io(png, fp);
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  png_byte color_type = png_get_color_type(png, info);
  png_byte bit_depth = png_get_bit_depth(png, info);
  if (bit_depth == 16) png_set_strip_16(png);
  if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color_type == PNG_COLOR_TYPE_GRAY || color_type == PNG_COLOR_TYPE_GRAY_ALPHA)
    png_set_gray_to_rgb(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  int h = static_cast<int>(png_get_image_height(png, info));
  int w = static_cast<int>(png_get_image_width(png, info));
  if (png_get_channels(png, info) != 3 ||
      png_get_rowbytes(png, info) != static_cast<std::size_t>(w) * 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw IoError("load_png: unsupported pixel layout in " + path);
  }
  Tensor<double> img({3, h, w});
  std::vector<png_byte> row(static_cast<std::size_t>(w) * 3);
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  for (int y = 0; y < h; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img[c * plane + static_cast<std::int64_t>(y) * w + x] =
            row[static_cast<std::size_t>(x) * 3 + static_cast<std::size_t>(c)] / 255.0;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return img;
}

inline void save_ppm(const std::string& path, const Tensor<double>& img) {
  img_detail::require_rgb(img, "save_ppm");
  int h = img.shape()[1], w = img.shape()[2];
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("save_ppm: cannot open " + path + " for writing");
  os << "P6\n" << w << " " << h << "\n255\n";
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  std::vector<char> bytes(static_cast<std::size_t>(plane) * 3);
  std::size_t k = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        bytes[k++] = static_cast<char>(
            img_detail::to_byte(img[c * plane + static_cast<std::int64_t>(y) * w + x]));
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("save_ppm: write to " + path + " failed");
}

inline Tensor<double> load_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("load_ppm: cannot open " + path);
  auto next_token = [&]() -> std::string {
    // Whitespace-separated header tokens; '#' starts a comment to end of line.
    std::string tok;
    int ch;
    while ((ch = is.get()) != EOF) {
      if (ch == '#') {
        while ((ch = is.get()) != EOF && ch != '\n') {
        }
        continue;
      }
      if (std::isspace(ch)) {
        if (!tok.empty()) return tok;
        continue;
      }
      tok.push_back(static_cast<char>(ch));
    }
    return tok;
  };
  if (next_token() != "P6") throw IoError("load_ppm: " + path + " is not a binary P6 PPM");
  auto next_int = [&](const char* what) {
    std::string tok = next_token();
    if (tok.empty() || tok.find_first_not_of("0123456789") != std::string::npos)
      throw IoError("load_ppm: malformed " + std::string(what) + " in " + path);
    long v = std::stol(tok);
    if (v < 1 || v > 1 << 20) throw IoError("load_ppm: implausible " + std::string(what) +
                                            " in " + path);
    return static_cast<int>(v);
  };
  int w = next_int("width");
  int h = next_int("height");
  int maxval = next_int("maxval");
  if (maxval > 255) throw IoError("load_ppm: only single-byte samples supported in " + path);
  // Exactly one whitespace byte separates the header from the pixel data; the
  // token scanner already consumed it.
  Tensor<double> img({3, h, w});
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  std::vector<unsigned char> bytes(static_cast<std::size_t>(plane) * 3);
  is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (static_cast<std::size_t>(is.gcount()) != bytes.size())
    throw IoError("load_ppm: truncated pixel data in " + path);
  std::size_t k = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img[c * plane + static_cast<std::int64_t>(y) * w + x] =
            static_cast<double>(bytes[k++]) / maxval;
  return img;
}

inline std::string path_extension(const std::string& path) {
  std::size_t dot = path.find_last_of('.');
  if (dot == std::string::npos) return "";
  std::string ext = path.substr(dot + 1);
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return ext;
}

inline void save_image(const std::string& path, const Tensor<double>& img) {
  std::string ext = path_extension(path);
  if (ext == "png") return save_png(path, img);
  if (ext == "ppm") return save_ppm(path, img);
  throw IoError("save_image: unsupported extension on " + path + " (use .png or .ppm)");
}

inline Tensor<double> load_image(const std::string& path) {
  std::string ext = path_extension(path);
  if (ext == "png") return load_png(path);
  if (ext == "ppm") return load_ppm(path);
  throw IoError("load_image: unsupported extension on " + path + " (use .png or .ppm)");
}

}  // namespace memscan
