#pragma once

#include <stdexcept>
#include <string>

namespace lpa {

/// Error categories; the CLI maps each to a stable process exit code.
enum class ErrorKind {
  usage = 2,
  configuration = 2,
  input = 3,
  format = 4,
  numeric = 5,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }
  int exit_code() const noexcept { return static_cast<int>(kind_); }

 private:
  ErrorKind kind_;
};

struct UsageError : Error {
  explicit UsageError(const std::string& what) : Error(ErrorKind::usage, what) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& what) : Error(ErrorKind::configuration, what) {}
};

struct InputError : Error {
  explicit InputError(const std::string& what) : Error(ErrorKind::input, what) {}
};

struct FormatError : Error {
  explicit FormatError(const std::string& what) : Error(ErrorKind::format, what) {}
};

/// Package/checkpoint sub-kinds, kept distinct so callers can tell them apart.
struct MagicError : FormatError {
  explicit MagicError(const std::string& what) : FormatError(what) {}
};
struct VersionError : FormatError {
  explicit VersionError(const std::string& what) : FormatError(what) {}
};
struct ChecksumError : FormatError {
  explicit ChecksumError(const std::string& what) : FormatError(what) {}
};

struct NumericError : Error {
  explicit NumericError(const std::string& what) : Error(ErrorKind::numeric, what) {}
};

}  // namespace lpa
