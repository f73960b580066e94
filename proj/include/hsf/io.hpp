#pragma once

// File helpers. Outputs are written to a sibling temp file and renamed into
// place so readers never observe a partial file.

#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "hsf/detector.hpp"
#include "hsf/error.hpp"
#include "hsf/trace.hpp"

namespace hsf::io {

inline void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> data) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + tmp.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
    out.flush();
    if (!out) throw IoError("failed writing '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move '" + tmp.string() + "' to '" + path.string() + "': " + ec.message());
}

inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  return detail::slurp(in);
}

inline void save_trace(const std::filesystem::path& path, const ActivationTrace& trace) {
  write_file_atomic(path, encode_trace(trace));
}

/// Errors are rethrown with the file name prepended.
inline ActivationTrace load_trace(const std::filesystem::path& path) {
  const auto data = read_file(path);
  try {
    return decode_trace(data);
  } catch (const TruncationError& e) {
    throw TruncationError(path.string() + ": " + e.what(), e.record_index());
  } catch (const CorruptionError& e) {
    throw CorruptionError(path.string() + ": " + e.what());
  } catch (const VersionError& e) {
    throw VersionError(path.string() + ": " + e.what());
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

inline void save_artifact(const std::filesystem::path& path, const DetectorArtifact& a) {
  write_file_atomic(path, encode_artifact(a));
}

inline DetectorArtifact load_artifact(const std::filesystem::path& path) {
  const auto data = read_file(path);
  try {
    return decode_artifact(data);
  } catch (const TruncationError& e) {
    throw TruncationError(path.string() + ": " + e.what(), e.record_index());
  } catch (const CorruptionError& e) {
    throw CorruptionError(path.string() + ": " + e.what());
  } catch (const VersionError& e) {
    throw VersionError(path.string() + ": " + e.what());
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace hsf::io
