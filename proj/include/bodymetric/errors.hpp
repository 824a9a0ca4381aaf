#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace bodymetric {

// Malformed records, out-of-range annotations, bad configuration values.
class DataError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class DomainError : public DataError {
public:
  using DataError::DataError;
};

class ShapeError : public DataError {
public:
  using DataError::DataError;
};

// Binary file layout violation. `offset` is the byte position where parsing failed.
class FormatError : public DataError {
public:
  FormatError(const std::string& what, std::size_t offset)
      : DataError(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

private:
  std::size_t offset_;
};

// Caller broke an API contract (stale tape, mismatched lengths).
class ContractError : public std::logic_error {
public:
  using std::logic_error::logic_error;
};

class NumericError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class DegenerateEmbeddingError : public NumericError {
public:
  using NumericError::NumericError;
};

}  // namespace bodymetric
