#pragma once

#include <stdexcept>
#include <string>

namespace ptsm {

/// Violated precondition or invariant of a documented contract.
class ContractViolation : public std::logic_error {
 public:
  explicit ContractViolation(const std::string& what) : std::logic_error(what) {}
};

/// Numerical failure carrying the name of the offending term or parameter.
class NumericError : public std::runtime_error {
 public:
  NumericError(const std::string& name, const std::string& what)
      : std::runtime_error(name + ": " + what), name_(name) {}
  const std::string& name() const { return name_; }

 private:
  std::string name_;
};

/// Bad configuration file: syntax error, unknown key, or out-of-range value.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

/// Malformed or corrupted container file.
class DatasetError : public std::runtime_error {
 public:
  enum class Kind { BadMagic, BadVersion, Truncated, ChecksumMismatch, InvalidField, Io };

  DatasetError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

inline void check_contract(bool ok, const std::string& what) {
  if (!ok) throw ContractViolation(what);
}

}  // namespace ptsm
