#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace simplexdiff {

enum class ErrorKind {
  dimension,
  range,
  vocabulary,
  normalization,
  empty_loss,
  usage,
  sequence_length,
  truncation,
  ingestion,
  configuration,
  divergence,
  alignment,
  compatibility,
  io,
};

constexpr std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::dimension: return "dimension";
    case ErrorKind::range: return "range";
    case ErrorKind::vocabulary: return "vocabulary";
    case ErrorKind::normalization: return "normalization";
    case ErrorKind::empty_loss: return "empty_loss";
    case ErrorKind::usage: return "usage";
    case ErrorKind::sequence_length: return "sequence_length";
    case ErrorKind::truncation: return "truncation";
    case ErrorKind::ingestion: return "ingestion";
    case ErrorKind::configuration: return "configuration";
    case ErrorKind::divergence: return "divergence";
    case ErrorKind::alignment: return "alignment";
    case ErrorKind::compatibility: return "compatibility";
    case ErrorKind::io: return "io";
  }
  return "unknown";
}

/// Every failure in the library is reported as an Error carrying a kind, so
/// callers (and the CLI) can branch on the category without parsing text.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

}  // namespace simplexdiff
