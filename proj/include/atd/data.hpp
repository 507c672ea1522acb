// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "atd/tensor.hpp"

namespace atd {

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t line, std::size_t column = 0)
      : std::runtime_error(what), line_(line), column_(column) {}
  std::size_t line() const { return line_; }
  std::size_t column() const { return column_; }

 private:
  std::size_t line_;
  std::size_t column_;
};

class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shortest decimal text that parses back to the same double.
inline std::string format_double(double v) {
  std::array<char, 64> buf{};
  auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  if (ec != std::errc{}) throw std::runtime_error("format_double: conversion failed");
  return std::string(buf.data(), end);
}

/// Full-string decimal parse with optional exponent; no leading '+', no spaces.
inline bool parse_double(std::string_view text, double& out) {
  if (text.empty()) return false;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), out);
  return ec == std::errc{} && ptr == text.data() + text.size();
}

// ---------------------------------------------------------------------------
// ETT-style series CSV: timestamp, target, six features
// ---------------------------------------------------------------------------

inline constexpr std::size_t kSeriesFeatures = 6;
inline constexpr std::size_t kSeriesColumns = kSeriesFeatures + 1;

struct SeriesRow {
  std::string timestamp;
  double target = 0.0;
  std::array<double, kSeriesFeatures> features{};
};

struct SeriesDataset {
  std::string header = "date,OT,HUFL,HULL,MUFL,MULL,LUFL,LULL";
  std::vector<SeriesRow> rows;

  std::size_t size() const { return rows.size(); }
};

namespace detail {

inline std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  for (;;) {
    const auto pos = line.find(',', start);
    if (pos == std::string_view::npos) {
      fields.push_back(line.substr(start));
      return fields;
    }
    fields.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

}  // namespace detail

/// Parses header + rows. Errors carry the 1-based line number and, for bad
/// numbers, the 1-based field column.
inline SeriesDataset parse_series_csv(std::istream& in) {
  SeriesDataset ds;
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(in, line)) throw ParseError("series csv: missing header line", 1);
  ++line_no;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  ds.header = line;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = detail::split_commas(line);
    if (fields.size() != kSeriesColumns + 1) {
      throw ParseError("series csv: line " + std::to_string(line_no) + " has " + std::to_string(fields.size()) +
                           " fields, expected " + std::to_string(kSeriesColumns + 1),
                       line_no);
    }
    SeriesRow row;
    row.timestamp = std::string(fields[0]);
    for (std::size_t c = 1; c < fields.size(); ++c) {
      double v = 0.0;
      if (!parse_double(fields[c], v)) {
        throw ParseError("series csv: line " + std::to_string(line_no) + " column " + std::to_string(c + 1) +
                             ": cannot parse number '" + std::string(fields[c]) + "'",
                         line_no, c + 1);
      }
      if (c == 1) {
        row.target = v;
      } else {
        row.features[c - 2] = v;
      }
    }
    ds.rows.push_back(std::move(row));
  }
  return ds;
}

inline SeriesDataset load_series_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open series csv '" + path + "'");
  return parse_series_csv(in);
}

inline void write_series_csv(std::ostream& out, const SeriesDataset& ds) {
  out << ds.header << '\n';
  for (const auto& row : ds.rows) {
    out << row.timestamp << ',' << format_double(row.target);
    for (double f : row.features) out << ',' << format_double(f);
    out << '\n';
  }
}

inline void write_series_csv(const std::string& path, const SeriesDataset& ds) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write series csv '" + path + "'");
  write_series_csv(out, ds);
  if (!out) throw IoError("write failed for '" + path + "'");
}

struct SeriesWindow {
  Tensor window;  // T×7: target column then six features
  double target = 0.0;
};

/// Sliding windows: sample i covers rows i..i+T-1 and predicts the target at
/// row i+T-1+horizon.
inline std::vector<SeriesWindow> windowize(const SeriesDataset& ds, std::size_t steps, std::size_t horizon) {
  if (steps < 1 || horizon < 1) throw ContractError("windowize: window length and horizon must be >= 1");
  if (ds.size() < steps + horizon) {
    throw ContractError("windowize: dataset has " + std::to_string(ds.size()) + " rows, needs at least " +
                        std::to_string(steps + horizon));
  }
  const std::size_t count = ds.size() - steps - horizon + 1;
  std::vector<SeriesWindow> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<double> data;
    data.reserve(steps * kSeriesColumns);
    for (std::size_t t = 0; t < steps; ++t) {
      const auto& row = ds.rows[i + t];
      data.push_back(row.target);
      data.insert(data.end(), row.features.begin(), row.features.end());
    }
    out.push_back({Tensor({steps, kSeriesColumns}, std::move(data)), ds.rows[i + steps - 1 + horizon].target});
  }
  return out;
}

// ---------------------------------------------------------------------------
// ATDT binary tensor format
//
//   bytes 0-3  magic "ATDT"
//   byte  4    version = 1
//   byte  5    rank r (<= 8)
//   then r little-endian uint32 dims
//   then product(dims) little-endian IEEE-754 binary32 values, row-major
// ---------------------------------------------------------------------------

inline constexpr std::array<std::uint8_t, 4> kAtdtMagic{0x41, 0x54, 0x44, 0x54};
inline constexpr std::uint8_t kAtdtVersion = 1;
inline constexpr std::size_t kAtdtMaxRank = 8;

inline std::vector<std::uint8_t> encode_tensor(const Tensor& t) {
  if (t.rank() > kAtdtMaxRank) throw FormatError("ATDT: rank " + std::to_string(t.rank()) + " exceeds 8", 5);
  std::vector<std::uint8_t> out(kAtdtMagic.begin(), kAtdtMagic.end());
  out.push_back(kAtdtVersion);
  out.push_back(static_cast<std::uint8_t>(t.rank()));
  auto put_u32 = [&out](std::uint32_t v) {
    for (int b = 0; b < 4; ++b) out.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
  };
  for (auto d : t.shape()) {
    if (d > UINT32_MAX) throw FormatError("ATDT: dimension exceeds 32 bits", out.size());
    put_u32(static_cast<std::uint32_t>(d));
  }
  for (double v : t.data()) {
    if (!std::isfinite(v)) throw NumericDomainError("write_tensor_file: non-finite entry");
    put_u32(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  return out;
}

inline Tensor decode_tensor(std::span<const std::uint8_t> bytes) {
  for (std::size_t i = 0; i < kAtdtMagic.size(); ++i) {
    if (i >= bytes.size()) throw FormatError("ATDT: truncated magic", bytes.size());
    if (bytes[i] != kAtdtMagic[i]) throw FormatError("ATDT: bad magic", 0);
  }
  if (bytes.size() < 5) throw FormatError("ATDT: truncated header", bytes.size());
  if (bytes[4] != kAtdtVersion) throw FormatError("ATDT: unsupported version " + std::to_string(bytes[4]), 4);
  if (bytes.size() < 6) throw FormatError("ATDT: truncated header", bytes.size());
  const std::size_t rank = bytes[5];
  if (rank > kAtdtMaxRank) throw FormatError("ATDT: rank " + std::to_string(rank) + " exceeds 8", 5);
  std::size_t pos = 6;
  auto get_u32 = [&](const char* what) {
    if (bytes.size() < pos + 4) throw FormatError(std::string("ATDT: truncated ") + what, bytes.size());
    std::uint32_t v = 0;
    for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(bytes[pos + b]) << (8 * b);
    pos += 4;
    return v;
  };
  Shape shape;
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t at = pos;
    const auto d = get_u32("dimensions");
    if (d == 0) throw FormatError("ATDT: zero dimension", at);
    shape.push_back(d);
  }
  const std::size_t n = shape_numel(shape);
  if ((bytes.size() - pos) / 4 < n) throw FormatError("ATDT: truncated payload", bytes.size());
  std::vector<double> data(n);
  for (auto& v : data) v = static_cast<double>(std::bit_cast<float>(get_u32("payload")));
  if (pos != bytes.size()) throw FormatError("ATDT: trailing bytes after payload", pos);
  return Tensor(std::move(shape), std::move(data));
}

inline void write_tensor_file(const std::string& path, const Tensor& t) {
  const auto bytes = encode_tensor(t);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write tensor file '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + path + "'");
}

inline Tensor read_tensor_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open tensor file '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_tensor(bytes);
}

// ---------------------------------------------------------------------------
// Synthetic bimodal data
// ---------------------------------------------------------------------------

struct BimodalSample {
  Tensor series;  // T×input_dim
  Tensor image;   // C×H×W
  double target = 0.0;
  std::size_t label = 0;
  double latent_u = 0.0;  // carried by the series
  double latent_v = 0.0;  // carried by the image
};

struct SyntheticSpec {
  std::uint64_t seed = 1;
  std::size_t samples = 1000;
  std::size_t steps = 8;
  std::size_t input_dim = kSeriesColumns;
  std::size_t channels = 1;
  std::size_t height = 8;
  std::size_t width = 8;
  double a = 1.0;
  double b = 1.0;
  double noise_std = 0.05;
  double observation_noise = 0.1;
  std::size_t classes = 0;  // 0 = regression

  void validate() const {
    if (samples < 1 || steps < 1 || input_dim < 1 || channels < 1 || height < 1 || width < 1) {
      throw ContractError("SyntheticSpec: counts and dimensions must be >= 1");
    }
    if (noise_std < 0 || observation_noise < 0) throw ContractError("SyntheticSpec: noise must be >= 0");
    if (classes == 1) throw ContractError("SyntheticSpec: classes must be 0 (regression) or >= 2");
  }
};

/// Class index of a target under k equal-width bins on [-s, s], s = target std.
inline std::size_t class_of(double target, const SyntheticSpec& spec) {
  const double s = std::sqrt(spec.a * spec.a + spec.b * spec.b + spec.noise_std * spec.noise_std);
  std::size_t label = 0;
  for (std::size_t j = 1; j < spec.classes; ++j) {
    const double threshold = s * (-1.0 + 2.0 * static_cast<double>(j) / static_cast<double>(spec.classes));
    if (target > threshold) label = j;
  }
  return label;
}

/// Latents u, v ~ N(0,1) per sample. The series is u plus observation noise in
/// every cell; the image is v times a fixed positive pattern plus observation
/// noise; the target is a·u + b·v + N(0, noise_std²).
inline std::vector<BimodalSample> gen_synthetic_bimodal(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const Tensor pattern = Tensor::uniform({spec.channels, spec.height, spec.width}, rng, 0.5, 1.5);
  std::vector<BimodalSample> out;
  out.reserve(spec.samples);
  for (std::size_t i = 0; i < spec.samples; ++i) {
    BimodalSample s;
    s.latent_u = rng.gaussian();
    s.latent_v = rng.gaussian();
    std::vector<double> series(spec.steps * spec.input_dim);
    for (auto& x : series) x = s.latent_u + spec.observation_noise * rng.gaussian();
    s.series = Tensor({spec.steps, spec.input_dim}, std::move(series));
    std::vector<double> image(pattern.numel());
    for (std::size_t p = 0; p < image.size(); ++p) {
      image[p] = s.latent_v * pattern[p] + spec.observation_noise * rng.gaussian();
    }
    s.image = Tensor(pattern.shape(), std::move(image));
    s.target = spec.a * s.latent_u + spec.b * s.latent_v + spec.noise_std * rng.gaussian();
    if (spec.classes >= 2) s.label = class_of(s.target, spec);
    out.push_back(std::move(s));
  }
  return out;
}

/// Seeded shuffle, then prefix split. The train part gets round(fraction·n)
/// items, clamped so both parts are non-empty.
template <class T>
std::pair<std::vector<T>, std::vector<T>> split(const std::vector<T>& items, double train_fraction,
                                                std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw ContractError("split: train fraction must be in (0, 1), got " + format_double(train_fraction));
  }
  if (items.size() < 2) throw ContractError("split: need at least 2 samples");
  Rng rng(seed);
  const auto perm = rng.permutation(items.size());
  auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(items.size())));
  n_train = std::clamp<std::size_t>(n_train, 1, items.size() - 1);
  std::pair<std::vector<T>, std::vector<T>> out;
  for (std::size_t i = 0; i < perm.size(); ++i) (i < n_train ? out.first : out.second).push_back(items[perm[i]]);
  return out;
}

}  // namespace atd
