#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace entrodrop {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A documented precondition was not met by the caller.
class ContractViolation : public Error {
 public:
  using Error::Error;
};

class DomainError : public ContractViolation {
 public:
  using ContractViolation::ContractViolation;
};

/// Requested more pruned blocks than are eligible.
class CapacityError : public ContractViolation {
 public:
  CapacityError(const std::string& what, std::size_t eligible)
      : ContractViolation(what), eligible_(eligible) {}
  std::size_t eligible() const noexcept { return eligible_; }

 private:
  std::size_t eligible_;
};

class StructuralError : public Error {
 public:
  using Error::Error;
};

class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

class InputError : public Error {
 public:
  using Error::Error;
};

class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, std::size_t step) : Error(what), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

class IoError : public Error {
 public:
  IoError(const std::string& what, std::uint64_t offset) : Error(what), offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

/// Malformed file: wrong magic, bad enum value, broken invariants.
class FormatError : public Error {
 public:
  using Error::Error;
};

class UnsupportedVersionError : public FormatError {
 public:
  explicit UnsupportedVersionError(unsigned version)
      : FormatError("unsupported format version " + std::to_string(version)), version_(version) {}
  unsigned version() const noexcept { return version_; }

 private:
  unsigned version_;
};

/// Truncated stream or checksum mismatch. `offset` is the byte position where the problem was detected.
class CorruptionError : public FormatError {
 public:
  CorruptionError(const std::string& what, std::uint64_t offset)
      : FormatError(what + " at byte " + std::to_string(offset)), offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

/// Payload decoded fine but holds non-finite values.
class DataError : public FormatError {
 public:
  using FormatError::FormatError;
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw ContractViolation(message);
}

}  // namespace entrodrop
