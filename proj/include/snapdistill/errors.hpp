#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace snapdistill {

/// Invalid user-facing configuration (bad depth, K > L, T <= 0, unknown key...).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A caller broke an operation's precondition (shape mismatch, label range...).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// NaN or Inf detected in a value or gradient.
class NumericFailure : public std::runtime_error {
 public:
  NumericFailure(const std::string& what, std::size_t node)
      : std::runtime_error(what), node_(node) {}
  explicit NumericFailure(const std::string& what)
      : std::runtime_error(what), node_(npos) {}

  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  /// Graph node that produced the non-finite value, or npos.
  std::size_t node() const { return node_; }

 private:
  std::size_t node_;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed file contents. `offset` is the byte position where parsing failed.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at byte " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

class VersionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace snapdistill
