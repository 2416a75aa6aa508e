#pragma once

#include <stdexcept>
#include <string>

namespace calign {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Token id outside the embedding table.
class VocabularyError : public Error {
 public:
  using Error::Error;
};

/// Token missing from an external embedding cache.
class AdapterError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

/// A manifest row could not be turned into a sample (missing file, bad pixels).
class IngestionError : public Error {
 public:
  using Error::Error;
};

class SchemaError : public Error {
 public:
  using Error::Error;
};

/// Malformed intervention or prediction request.
class RequestError : public Error {
 public:
  using Error::Error;
};

}  // namespace calign
