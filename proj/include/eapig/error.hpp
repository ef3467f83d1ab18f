#pragma once

#include <stdexcept>
#include <string>

namespace eapig {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Manifest, blob or dataset could not be read or failed validation.
class LoadError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Token ids, lengths or interventions that do not fit the model.
class InputError : public Error {
 public:
  using Error::Error;
};

/// Malformed JSON document; the message carries the location.
class ParseError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

/// Clean and corrupted baselines coincide, so normalized faithfulness is undefined.
class DegenerateTaskError : public Error {
 public:
  using Error::Error;
};

}  // namespace eapig
