// Copyright 2026 The nfspeech Authors.
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// 8-bit RGB image files: PNG through libpng and binary PPM (P6). Writers go
// through a temporary file and a rename so readers never see partial files.

#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <memory>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "nfs/core.hpp"
#include "nfs/render.hpp"

namespace nfs {

inline std::uint8_t quantize(double v) {
  NFS_CHECK(std::isfinite(v), "cannot quantize non-finite pixel value");
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

/// Interleaved 8-bit RGB bytes; channels beyond the third are ignored and
/// single-channel maps are replicated to gray.
inline std::vector<std::uint8_t> to_rgb8(const Image& img) {
  NFS_CHECK(img.channels == 1 || img.channels >= 3, "cannot store a ", img.channels, "-channel map as RGB");
  std::vector<std::uint8_t> out(static_cast<std::size_t>(img.height) * static_cast<std::size_t>(img.width) * 3);
  for (int i = 0; i < img.height; ++i)
    for (int j = 0; j < img.width; ++j)
      for (int k = 0; k < 3; ++k)
        out[(static_cast<std::size_t>(i) * static_cast<std::size_t>(img.width) + static_cast<std::size_t>(j)) * 3 + static_cast<std::size_t>(k)] = quantize(img.at(i, j, img.channels == 1 ? 0 : k));
  return out;
}

inline Image from_rgb8(const std::vector<std::uint8_t>& px, int h, int w) {
  Image img(h, w, 3);
  for (std::size_t q = 0; q < img.data.size(); ++q) img.data[q] = px[q] / 255.0;
  return img;
}

namespace detail {

template <typename Fn>
void write_atomically(const std::filesystem::path& path, Fn&& write) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  try {
    write(tmp);
  } catch (...) {
    std::error_code ignored;
    std::filesystem::remove(tmp, ignored);
    throw;
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  NFS_CHECK(!ec, "cannot rename \"", tmp.string(), "\" to \"", path.string(), "\": ", ec.message());
}

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};

}  // namespace detail

/// Single-channel maps are stored as 8-bit grayscale, everything else as RGB.
inline void save_png(const std::string& path, const Image& img) {
  const bool gray = img.channels == 1;
  std::vector<std::uint8_t> rgb;
  if (gray) {
    rgb.reserve(img.data.size());
    for (double v : img.data) rgb.push_back(quantize(v));
  } else {
    rgb = to_rgb8(img);
  }
  const std::size_t stride = static_cast<std::size_t>(img.width) * (gray ? 1 : 3);
  detail::write_atomically(path, [&](const std::filesystem::path& tmp) {
    std::unique_ptr<std::FILE, detail::FileCloser> fp(std::fopen(tmp.c_str(), "wb"));
    NFS_CHECK(fp, "cannot open \"", tmp.string(), "\" for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    NFS_CHECK(png && info, "libpng initialisation failed");
    if (setjmp(png_jmpbuf(png))) {
      png_destroy_write_struct(&png, &info);
      fail("libpng failed while writing \"", path, "\"");
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
                 gray ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    // no timestamps or other varying chunks: identical pixels give identical files
    png_write_info(png, info);
    for (int i = 0; i < img.height; ++i)
      png_write_row(png, rgb.data() + static_cast<std::size_t>(i) * stride);
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
  });
}

inline Image load_png(const std::string& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  NFS_CHECK(png_image_begin_read_from_file(&image, path.c_str()), "cannot read PNG \"", path, "\": ", image.message);
  image.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> px(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, px.data(), 0, nullptr)) {
    png_image_free(&image);
    fail("cannot decode PNG \"", path, "\": ", image.message);
  }
  return from_rgb8(px, static_cast<int>(image.height), static_cast<int>(image.width));
}

inline void save_ppm(const std::string& path, const Image& img) {
  const auto rgb = to_rgb8(img);
  detail::write_atomically(path, [&](const std::filesystem::path& tmp) {
    std::ofstream os(tmp, std::ios::binary);
    NFS_CHECK(os, "cannot open \"", tmp.string(), "\" for writing");
    os << "P6\n" << img.width << " " << img.height << "\n255\n";
    os.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
    NFS_CHECK(os.good(), "write failed for \"", tmp.string(), "\"");
  });
}

inline Image load_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  NFS_CHECK(is, "cannot open \"", path, "\"");
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  is >> magic >> w >> h >> maxval;
  NFS_CHECK(magic == "P6" && w > 0 && h > 0 && maxval == 255, "\"", path, "\" is not an 8-bit binary PPM");
  is.get();
  std::vector<std::uint8_t> px(static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * 3);
  is.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size()));
  NFS_CHECK(is.gcount() == static_cast<std::streamsize>(px.size()), "\"", path, "\" is truncated");
  return from_rgb8(px, h, w);
}

/// Writes by extension: .png or .ppm.
inline void save_image(const std::string& path, const Image& img) {
  const auto ext = std::filesystem::path(path).extension().string();
  if (ext == ".ppm") return save_ppm(path, img);
  NFS_CHECK(ext == ".png", "unsupported image extension \"", ext, "\"");
  save_png(path, img);
}

}  // namespace nfs
