#pragma once

// Binary formats, all little-endian.
//
// Sample record:
//   "E4DA" | u32 version | u32 dims[4] = (h, w, features, slices)
//   | u32 label | u32 subject | u32 experiment | f32 values[h*w*features*slices]
// Version 1 fixes the feature axis as DE(bands...) followed by PSD(bands...).
//
// Sample container: u64 count followed by `count` sample records.
//
// Raw recording exchange file:
//   "E4DR" | u32 version | f64 fs | u32 channels
//   | channels x (u16 name_len, name bytes) | u32 label | u32 subject
//   | u32 experiment | u64 n_samples | f32 payload[channels][n_samples]

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "eeg4d/binary_io.hpp"
#include "eeg4d/repr4d.hpp"
#include "eeg4d/sigproc.hpp"

namespace eeg4d {

inline constexpr std::uint32_t kSampleVersion = 1;
inline constexpr std::uint32_t kRawVersion = 1;

inline void write_sample(std::ostream& os, const Sample4D& s) {
  binio::put_magic(os, "E4DA");
  binio::put_u32(os, kSampleVersion);
  for (int d : {s.h, s.w, s.features, s.slices}) binio::put_u32(os, static_cast<std::uint32_t>(d));
  binio::put_u32(os, static_cast<std::uint32_t>(s.label));
  binio::put_u32(os, static_cast<std::uint32_t>(s.subject));
  binio::put_u32(os, static_cast<std::uint32_t>(s.experiment));
  binio::put_f32_array(os, s.values.data(), s.values.size());
}

inline Sample4D read_sample(std::istream& is) {
  binio::expect_magic(is, "E4DA");
  const auto version = binio::get_u32(is);
  if (version != kSampleVersion) throw FormatError("unsupported sample version " + std::to_string(version));
  Sample4D s;
  s.h = static_cast<int>(binio::get_u32(is));
  s.w = static_cast<int>(binio::get_u32(is));
  s.features = static_cast<int>(binio::get_u32(is));
  s.slices = static_cast<int>(binio::get_u32(is));
  if (s.h <= 0 || s.w <= 0 || s.features <= 0 || s.slices <= 0 || s.h > 4096 || s.w > 4096 || s.features > 4096 ||
      s.slices > 4096)
    throw FormatError("implausible sample dimensions");
  s.label = static_cast<int>(binio::get_u32(is));
  s.subject = static_cast<int>(binio::get_u32(is));
  s.experiment = static_cast<int>(binio::get_u32(is));
  s.values.resize(static_cast<std::size_t>(s.h) * s.w * s.features * s.slices);
  binio::get_f32_array(is, s.values.data(), s.values.size());
  return s;
}

inline void write_sample_file(const std::string& path, const Sample4D& s) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  write_sample(os, s);
  if (!os) throw std::runtime_error("write failed: " + path);
}

inline void write_container(const std::string& path, const std::vector<Sample4D>& samples) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  binio::put_u64(os, samples.size());
  for (const auto& s : samples) write_sample(os, s);
  if (!os) throw std::runtime_error("write failed: " + path);
}

// Reads either a single-sample file or a container, by sniffing the magic.
inline std::vector<Sample4D> read_samples(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path);
  char head[4] = {};
  if (!is.read(head, 4)) throw FormatError("file too short: " + path);
  is.seekg(0);
  std::vector<Sample4D> out;
  if (std::string(head, 4) == "E4DA") {
    out.push_back(read_sample(is));
  } else {
    const auto count = binio::get_u64(is);
    if (count > (std::uint64_t{1} << 32)) throw FormatError("implausible container count in " + path);
    out.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) out.push_back(read_sample(is));
  }
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes in " + path);
  return out;
}

// Every *.e4da file under `dir` (not recursive), in file-name order; each
// may be a single sample or a container.
inline std::vector<Sample4D> read_sample_dir(const std::string& dir) {
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".e4da") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<Sample4D> out;
  for (const auto& f : files) {
    auto part = read_samples(f.string());
    out.insert(out.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
  }
  return out;
}

// A file is read with read_samples, a directory with read_sample_dir.
inline std::vector<Sample4D> load_sample_path(const std::string& path) {
  return std::filesystem::is_directory(path) ? read_sample_dir(path) : read_samples(path);
}

// One file per sample: <dir>/<stem>_<index, zero-padded to 6>.e4da.
inline std::vector<std::string> write_sample_dir(const std::string& dir, const std::vector<Sample4D>& samples,
                                                 const std::string& stem = "sample") {
  std::filesystem::create_directories(dir);
  std::vector<std::string> paths;
  char idx[16];
  for (std::size_t i = 0; i < samples.size(); ++i) {
    std::snprintf(idx, sizeof idx, "_%06zu.e4da", i);
    paths.push_back((std::filesystem::path(dir) / (stem + idx)).string());
    write_sample_file(paths.back(), samples[i]);
  }
  return paths;
}

inline void write_raw(std::ostream& os, const sigproc::RawRecording& rec) {
  binio::put_magic(os, "E4DR");
  binio::put_u32(os, kRawVersion);
  binio::put_f64(os, rec.fs);
  binio::put_u32(os, static_cast<std::uint32_t>(rec.channels.size()));
  for (const auto& name : rec.channels) {
    binio::put_u16(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
  }
  binio::put_u32(os, static_cast<std::uint32_t>(rec.label));
  binio::put_u32(os, static_cast<std::uint32_t>(rec.subject));
  binio::put_u32(os, static_cast<std::uint32_t>(rec.experiment));
  binio::put_u64(os, rec.n_samples());
  for (const auto& ch : rec.data) {
    if (ch.size() != rec.n_samples()) throw FormatError("ragged recording");
    binio::put_f32_array(os, ch.data(), ch.size());
  }
}

inline void write_raw_file(const std::string& path, const sigproc::RawRecording& rec) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  write_raw(os, rec);
  if (!os) throw std::runtime_error("write failed: " + path);
}

inline sigproc::RawRecording read_raw(std::istream& is) {
  binio::expect_magic(is, "E4DR");
  const auto version = binio::get_u32(is);
  if (version != kRawVersion) throw FormatError("unsupported raw version " + std::to_string(version));
  sigproc::RawRecording rec;
  rec.fs = binio::get_f64(is);
  if (!(rec.fs > 0.0)) throw FormatError("non-positive sampling rate");
  const auto channels = binio::get_u32(is);
  if (channels == 0 || channels > 4096) throw FormatError("implausible channel count");
  for (std::uint32_t i = 0; i < channels; ++i) {
    std::string name(binio::get_u16(is), '\0');
    if (!is.read(name.data(), static_cast<std::streamsize>(name.size()))) throw FormatError("truncated channel table");
    rec.channels.push_back(std::move(name));
  }
  rec.label = static_cast<int>(binio::get_u32(is));
  rec.subject = static_cast<int>(binio::get_u32(is));
  rec.experiment = static_cast<int>(binio::get_u32(is));
  const auto n = binio::get_u64(is);
  if (n > (std::uint64_t{1} << 31)) throw FormatError("implausible sample count");
  rec.data.assign(channels, std::vector<float>(n));
  for (auto& ch : rec.data) binio::get_f32_array(is, ch.data(), ch.size());
  return rec;
}

inline sigproc::RawRecording read_raw_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path);
  return read_raw(is);
}

}  // namespace eeg4d
