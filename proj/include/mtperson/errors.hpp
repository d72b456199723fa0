#pragma once

#include <stdexcept>
#include <string>

namespace mtp {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An invalid configuration field; `field()` names the offender.
class ConfigError : public Error {
 public:
  ConfigError(std::string field, const std::string& what)
      : Error("config error [" + field + "]: " + what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error("shape error: " + what) {}
};

class BoundsError : public Error {
 public:
  explicit BoundsError(const std::string& what) : Error("bounds error: " + what) {}
};

/// A batch that violates the PK composition required by batch-hard mining.
class CompositionError : public Error {
 public:
  explicit CompositionError(const std::string& what) : Error("composition error: " + what) {}
};

class LabelError : public Error {
 public:
  explicit LabelError(const std::string& what) : Error("label error: " + what) {}
};

class MappingError : public Error {
 public:
  explicit MappingError(const std::string& what) : Error("mapping error: " + what) {}
};

/// Manifest schema violations; carries the record index (-1 for header fields).
class ManifestError : public Error {
 public:
  ManifestError(long record, std::string field, const std::string& what)
      : Error("manifest error" +
              (record >= 0 ? " (record " + std::to_string(record) + ")" : std::string()) + " [" +
              field + "]: " + what),
        record_(record),
        field_(std::move(field)) {}
  long record() const noexcept { return record_; }
  const std::string& field() const noexcept { return field_; }

 private:
  long record_;
  std::string field_;
};

class LoadError : public Error {
 public:
  explicit LoadError(const std::string& what) : Error("load error: " + what) {}
};

/// A requested task that the model or dataset cannot serve.
class TaskError : public Error {
 public:
  explicit TaskError(const std::string& what) : Error("task error: " + what) {}
};

/// Raised by the trainer when a loss turns NaN/Inf.
class DivergenceError : public Error {
 public:
  explicit DivergenceError(const std::string& what) : Error("divergence: " + what) {}
};

}  // namespace mtp
