#pragma once

#include <stdexcept>
#include <string>

namespace ntg {

enum class ErrorKind {
  shape_mismatch,
  invalid_argument,
  format,
  io,
  numeric,
  stale_tape,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error(ErrorKind::shape_mismatch, what) {}
};

class ArgumentError : public Error {
 public:
  explicit ArgumentError(const std::string& what) : Error(ErrorKind::invalid_argument, what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(ErrorKind::io, what) {}
};

class NumericError : public Error {
 public:
  NumericError(std::string term, const std::string& what)
      : Error(ErrorKind::numeric, what), term_(std::move(term)) {}

  /// Name of the loss term (or quantity) that went non-finite.
  const std::string& term() const noexcept { return term_; }

 private:
  std::string term_;
};

class StaleTapeError : public Error {
 public:
  explicit StaleTapeError(const std::string& what) : Error(ErrorKind::stale_tape, what) {}
};

/// Reasons a binary file is rejected. Each NTX1/PGM failure maps to exactly one.
enum class FormatIssue {
  bad_magic,
  bad_version,
  bad_rank,
  dims_overflow,
  truncated,
  trailing_bytes,
  duplicate_name,
  unsupported,
};

inline const char* to_string(FormatIssue issue) {
  switch (issue) {
    case FormatIssue::bad_magic: return "bad magic";
    case FormatIssue::bad_version: return "bad version";
    case FormatIssue::bad_rank: return "bad rank";
    case FormatIssue::dims_overflow: return "dims overflow";
    case FormatIssue::truncated: return "truncated";
    case FormatIssue::trailing_bytes: return "trailing bytes";
    case FormatIssue::duplicate_name: return "duplicate section name";
    case FormatIssue::unsupported: return "unsupported format";
  }
  return "unknown";
}

class FormatError : public Error {
 public:
  FormatError(FormatIssue issue, const std::string& what)
      : Error(ErrorKind::format, std::string(to_string(issue)) + ": " + what), issue_(issue) {}

  FormatIssue issue() const noexcept { return issue_; }

 private:
  FormatIssue issue_;
};

}  // namespace ntg
