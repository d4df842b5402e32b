#pragma once

#include <stdexcept>
#include <string>

namespace qst {

/// Base class for all library errors. Each concrete error carries a stable
/// machine-readable kind string and a process exit code used by the CLI.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, int exit_code, const std::string& detail)
      : std::runtime_error(detail), kind_(std::move(kind)), exit_code_(exit_code) {}

  const std::string& kind() const { return kind_; }
  int exit_code() const { return exit_code_; }

 private:
  std::string kind_;
  int exit_code_;
};

#define QST_DEFINE_ERROR(Name, Code)                        \
  class Name : public Error {                               \
   public:                                                  \
    explicit Name(const std::string& detail)                \
        : Error(#Name, Code, detail) {}                     \
  }

QST_DEFINE_ERROR(UsageError, 2);
QST_DEFINE_ERROR(FormatError, 3);
QST_DEFINE_ERROR(ChecksumError, 4);
QST_DEFINE_ERROR(ShapeMismatch, 5);
QST_DEFINE_ERROR(DimensionMismatch, 6);
QST_DEFINE_ERROR(ZeroTrace, 7);
QST_DEFINE_ERROR(NotPositive, 8);
QST_DEFINE_ERROR(UnsupportedSize, 9);
QST_DEFINE_ERROR(SingularGram, 10);
QST_DEFINE_ERROR(DegenerateTarget, 11);
QST_DEFINE_ERROR(RankDeficient, 12);
QST_DEFINE_ERROR(NonFiniteLoss, 13);
QST_DEFINE_ERROR(IoError, 14);
QST_DEFINE_ERROR(ConfigError, 15);

#undef QST_DEFINE_ERROR

}  // namespace qst
