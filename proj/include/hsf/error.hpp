#pragma once

#include <stdexcept>
#include <cstdint>
#include <string>

namespace hsf {

/// Base of every error raised by the library. `category()` drives the CLI exit
/// code: validation problems map to 1, I/O and corruption problems map to 2.
class Error : public std::runtime_error {
 public:
  enum class Category { Validation, Io };

  Error(Category category, const std::string& what)
      : std::runtime_error(what), category_(category) {}

  Category category() const noexcept { return category_; }

 private:
  Category category_;
};

/// Caller supplied data that breaks a documented invariant or precondition.
class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& what) : Error(Category::Validation, what) {}
};

/// Sink or source failure.
class IoError : public Error {
 public:
  explicit IoError(const std::string& what, std::uint64_t bytes_written = 0)
      : Error(Category::Io, what), bytes_written_(bytes_written) {}
  std::uint64_t bytes_written() const noexcept { return bytes_written_; }

 private:
  std::uint64_t bytes_written_;
};

/// Bad magic, malformed header, trailing garbage.
class FormatError : public Error {
 public:
  explicit FormatError(const std::string& what) : Error(Category::Io, what) {}
};

/// Container written by a newer (or unknown) format version.
class VersionError : public Error {
 public:
  explicit VersionError(const std::string& what) : Error(Category::Io, what) {}
};

/// Stream ended before the declared payload. `record_index` is the first record
/// that could not be read completely, or the record count when only the
/// trailing checksum is missing.
class TruncationError : public Error {
 public:
  TruncationError(const std::string& what, std::uint64_t record_index)
      : Error(Category::Io, what), record_index_(record_index) {}
  std::uint64_t record_index() const noexcept { return record_index_; }

 private:
  std::uint64_t record_index_;
};

/// Checksum mismatch.
class CorruptionError : public Error {
 public:
  explicit CorruptionError(const std::string& what) : Error(Category::Io, what) {}
};

}  // namespace hsf
