#pragma once

#include <png.h>

#include <cctype>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace deepcarve {

/// 8-bit interleaved image (1 = gray, 3 = RGB).
struct Image8 {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 1;
  std::vector<std::uint8_t> pixels;
};

namespace detail {

inline std::string lower_ext(const std::filesystem::path& p) {
  std::string e = p.extension().string();
  for (auto& c : e) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return e;
}

// Skips whitespace and '#' comments in a netpbm header.
inline void pnm_skip(std::istream& is) {
  for (;;) {
    int c = is.peek();
    if (c == '#') {
      std::string line;
      std::getline(is, line);
    } else if (std::isspace(c)) {
      is.get();
    } else {
      return;
    }
  }
}

inline std::size_t pnm_number(std::istream& is, const std::string& path) {
  pnm_skip(is);
  std::size_t v = 0;
  if (!(is >> v)) throw std::runtime_error("unreadable image header: " + path);
  return v;
}

inline Image8 read_pnm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open image: " + path.string());
  std::string magic(2, '\0');
  is.read(magic.data(), 2);
  Image8 img;
  bool ascii = false;
  if (magic == "P5" || magic == "P2") {
    img.channels = 1;
    ascii = magic == "P2";
  } else if (magic == "P6" || magic == "P3") {
    img.channels = 3;
    ascii = magic == "P3";
  } else {
    throw std::runtime_error("unreadable image (not a PGM/PPM file): " + path.string());
  }
  img.width = pnm_number(is, path.string());
  img.height = pnm_number(is, path.string());
  const std::size_t maxval = pnm_number(is, path.string());
  if (img.width == 0 || img.height == 0 || maxval == 0 || maxval > 255)
    throw std::runtime_error("unsupported image header (need 8-bit): " + path.string());
  const std::size_t n = img.width * img.height * img.channels;
  img.pixels.resize(n);
  if (ascii) {
    for (auto& p : img.pixels) {
      const std::size_t v = pnm_number(is, path.string());
      if (v > maxval) throw std::runtime_error("pixel exceeds maxval in " + path.string());
      p = static_cast<std::uint8_t>(v * 255 / maxval);
    }
  } else {
    is.get();  // single whitespace after maxval
    is.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is.gcount()) != n) throw std::runtime_error("truncated image: " + path.string());
    if (maxval != 255)
      for (auto& p : img.pixels) p = static_cast<std::uint8_t>(static_cast<std::size_t>(p) * 255 / maxval);
  }
  return img;
}

inline void write_pnm(const std::filesystem::path& path, const Image8& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write image: " + path.string());
  os << (img.channels == 1 ? "P5" : "P6") << "\n" << img.width << " " << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!os) throw std::runtime_error("failed writing image: " + path.string());
}

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline Image8 read_png(const std::filesystem::path& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw std::runtime_error("cannot open image: " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw std::runtime_error("libpng initialisation failed");
  }
  Image8 img;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("unreadable PNG image: " + path.string());
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_palette_to_rgb(png);
  png_set_expand_gray_1_2_4_to_8(png);
  png_read_update_info(png, info);
  img.width = png_get_image_width(png, info);
  img.height = png_get_image_height(png, info);
  img.channels = png_get_channels(png, info);
  if (img.channels != 1 && img.channels != 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("unsupported PNG channel layout: " + path.string());
  }
  img.pixels.resize(img.width * img.height * img.channels);
  rows.resize(img.height);
  for (std::size_t y = 0; y < img.height; ++y) rows[y] = img.pixels.data() + y * img.width * img.channels;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

inline void write_png(const std::filesystem::path& path, const Image8& img) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw std::runtime_error("cannot write image: " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw std::runtime_error("libpng initialisation failed");
  }
  std::vector<png_bytep> rows(img.height);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("failed writing PNG: " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < img.height; ++y)
    rows[y] = const_cast<png_bytep>(img.pixels.data() + y * img.width * img.channels);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace detail

/// Reads .pgm/.ppm (binary or ascii, 8-bit) and .png files.
inline Image8 read_image(const std::filesystem::path& path) {
  const auto ext = detail::lower_ext(path);
  if (ext == ".png") return detail::read_png(path);
  if (ext == ".pgm" || ext == ".ppm" || ext == ".pnm") return detail::read_pnm(path);
  throw std::runtime_error("unsupported image extension: " + path.string());
}

/// Writes by extension: .pgm (gray), .ppm (RGB) or .png (either).
inline void write_image(const std::filesystem::path& path, const Image8& img) {
  if (img.channels != 1 && img.channels != 3) throw std::invalid_argument("write_image: channels must be 1 or 3");
  const auto ext = detail::lower_ext(path);
  if (ext == ".png") return detail::write_png(path, img);
  if ((ext == ".pgm" && img.channels == 1) || (ext == ".ppm" && img.channels == 3)) return detail::write_pnm(path, img);
  throw std::invalid_argument("cannot write a " + std::to_string(img.channels) + "-channel image as " + path.string());
}

inline bool is_image_file(const std::filesystem::path& p) {
  const auto ext = detail::lower_ext(p);
  return ext == ".png" || ext == ".pgm" || ext == ".ppm" || ext == ".pnm";
}

}  // namespace deepcarve
