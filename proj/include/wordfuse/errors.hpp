#pragma once

#include <stdexcept>
#include <string>

namespace wordfuse {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidVocabulary : public Error {
 public:
  using Error::Error;
};

class UncoverableCharacter : public Error {
 public:
  UncoverableCharacter(std::string character, std::size_t offset)
      : Error("no token covers character '" + character + "' at byte " +
              std::to_string(offset)),
        character_(std::move(character)),
        offset_(offset) {}

  const std::string& character() const noexcept { return character_; }
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::string character_;
  std::size_t offset_;
};

class ForeignToken : public Error {
 public:
  using Error::Error;
};

class InvalidModel : public Error {
 public:
  using Error::Error;
};

// Transport or availability failure of a scorer. The protocol errors below
// derive from it so a decode can treat them uniformly.
class ModelUnavailable : public Error {
 public:
  using Error::Error;
};

class HandshakeFailure : public ModelUnavailable {
 public:
  using ModelUnavailable::ModelUnavailable;
};

class Timeout : public ModelUnavailable {
 public:
  using ModelUnavailable::ModelUnavailable;
};

class MalformedResponse : public ModelUnavailable {
 public:
  MalformedResponse(const std::string& what, std::string frame)
      : ModelUnavailable(what), frame_(std::move(frame)) {}

  // The raw response line that failed validation.
  const std::string& frame() const noexcept { return frame_; }

 private:
  std::string frame_;
};

class SelectorUnavailable : public Error {
 public:
  using Error::Error;
};

class AlphaOutOfRange : public Error {
 public:
  explicit AlphaOutOfRange(double alpha)
      : Error("alpha must lie in [0, 1], got " + std::to_string(alpha)) {}
};

class TokenizationDisagreement : public Error {
 public:
  using Error::Error;
};

class SearchSpaceTooLarge : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace wordfuse
