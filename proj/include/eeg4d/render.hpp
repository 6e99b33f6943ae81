#pragma once

// PNG/CSV output for heatmaps. Needs libpng at link time.

#include <png.h>

#include <cstdio>
#include <fstream>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "eeg4d/explain.hpp"

namespace eeg4d {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void write_png(const std::string& path, const RgbImage& img) {
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!fp) throw IoError("cannot open for writing: " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("PNG encoding failed: " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < img.height; ++y) png_write_row(png, const_cast<png_bytep>(img.px(0, y)));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline RgbImage read_png(const std::string& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) throw IoError("cannot read PNG: " + path);
  image.format = PNG_FORMAT_RGB;
  RgbImage img;
  img.width = static_cast<int>(image.width);
  img.height = static_cast<int>(image.height);
  img.pixels.resize(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, img.pixels.data(), 0, nullptr)) {
    png_image_free(&image);
    throw IoError("cannot decode PNG: " + path);
  }
  return img;
}

struct RenderedFiles {
  std::string png;
  std::string csv;
  std::string report;
};

// Writes <prefix>.png, <prefix>.csv (grid of values) and <prefix>.top3.txt
// (highest-valued electrodes).
inline RenderedFiles render_heatmap(const Heatmap& hm, const ElectrodeLayout& layout, const std::string& prefix,
                                    const RenderOptions& opt = {}) {
  RenderedFiles files{prefix + ".png", prefix + ".csv", prefix + ".top3.txt"};
  write_png(files.png, render_heatmap_image(hm, layout, opt));

  std::ofstream csv(files.csv);
  if (!csv) throw IoError("cannot open for writing: " + files.csv);
  csv << heatmap_csv(hm);
  if (!csv) throw IoError("write failed: " + files.csv);

  std::ofstream rep(files.report);
  if (!rep) throw IoError("cannot open for writing: " + files.report);
  rep << "# class " << hm.target_class << ", slices combined by " << hm.slice_policy << "\n";
  rep << "rank,channel,row,col,value\n";
  int rank = 1;
  rep.precision(9);
  for (const auto& c : top_channels(hm, layout, 3)) rep << rank++ << ',' << c.channel << ',' << c.row << ',' << c.col << ',' << c.value << '\n';
  if (!rep) throw IoError("write failed: " + files.report);
  return files;
}

}  // namespace eeg4d
