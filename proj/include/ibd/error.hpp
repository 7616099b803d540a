#pragma once

#include <stdexcept>
#include <string>

namespace ibd {

// Every failure the library raises carries a short machine-readable category
// so the CLI can print a single parseable line.
class Error : public std::runtime_error {
 public:
  Error(std::string category, const std::string& message)
      : std::runtime_error(message), category_(std::move(category)) {}
  const std::string& category() const noexcept { return category_; }

 private:
  std::string category_;
};

struct ShapeError : Error {
  explicit ShapeError(const std::string& m) : Error("shape", m) {}
};
struct InvalidArgument : Error {
  explicit InvalidArgument(const std::string& m) : Error("invalid-argument", m) {}
};
struct DegenerateStep : Error {
  explicit DegenerateStep(const std::string& m) : Error("degenerate-step", m) {}
};
struct NumericalError : Error {
  explicit NumericalError(const std::string& m) : Error("numerical", m) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& m) : Error("config", m) {}
};
struct DataError : Error {
  explicit DataError(const std::string& m) : Error("data", m) {}
};
struct IntegrityError : Error {
  explicit IntegrityError(const std::string& m) : Error("integrity", m) {}
};
struct ConstraintViolation : Error {
  explicit ConstraintViolation(const std::string& m) : Error("constraint", m) {}
};

}  // namespace ibd
