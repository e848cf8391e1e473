#pragma once

// SPRF feature dumps: "SPRF" | u32 version | u32 N | u32 D | N*D f32, all
// little-endian, rows contiguous.

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "sprout/binio.hpp"
#include "sprout/error.hpp"

namespace sprout {

inline constexpr std::uint32_t kFeatureFileVersion = 1;

using FeatureRows = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline std::string encode_features(const FeatureRows& rows) {
  if (rows.rows() > 0xffffffffLL || rows.cols() > 0xffffffffLL) throw ArgumentError("feature matrix too large for SPRF");
  ByteWriter w;
  w.bytes("SPRF");
  w.u32(kFeatureFileVersion);
  w.u32(static_cast<std::uint32_t>(rows.rows()));
  w.u32(static_cast<std::uint32_t>(rows.cols()));
  for (Eigen::Index i = 0; i < rows.size(); ++i) w.f32(rows.data()[i]);
  return w.data();
}

inline FeatureRows decode_features(std::string_view data, const std::string& file = "<memory>") {
  ByteReader r(data, file);
  if (r.bytes(4, "magic") != "SPRF") throw FormatError(file + ": bad magic, not an SPRF feature file");
  const auto version = r.u32("version");
  if (version != kFeatureFileVersion)
    throw FormatError(file + ": version mismatch, file has " + std::to_string(version) + ", reader supports " +
                      std::to_string(kFeatureFileVersion));
  const std::uint64_t n = r.u32("row count"), d = r.u32("column count");
  const std::uint64_t expected = 16 + 4 * n * d;
  if (data.size() != expected)
    throw FormatError(file + ": byte length " + std::to_string(data.size()) + " does not match 16 + 4*N*D = " +
                      std::to_string(expected) + (data.size() < expected ? " (truncated in values)" : ""));
  FeatureRows rows(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (Eigen::Index i = 0; i < rows.size(); ++i) rows.data()[i] = r.f32("values");
  return rows;
}

inline void write_features(const std::filesystem::path& path, const FeatureRows& rows) {
  atomic_write(path, encode_features(rows));
}

inline FeatureRows read_features(const std::filesystem::path& path) {
  return decode_features(read_file_bytes(path), path.string());
}

}  // namespace sprout
