#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace pointlap {

// Base for all library errors. `code()` is a stable machine-parsable tag;
// the CLI prints it verbatim and maps it to an exit status.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(message), code_(std::move(code)) {}

  const std::string& code() const { return code_; }

 private:
  std::string code_;
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& m) : Error("shape", m) {}
};

class RankError : public Error {
 public:
  explicit RankError(const std::string& m) : Error("rank", m) {}
};

class DegenerateBatchError : public Error {
 public:
  explicit DegenerateBatchError(const std::string& m) : Error("degenerate_batch", m) {}
};

class DegenerateCloudError : public Error {
 public:
  explicit DegenerateCloudError(const std::string& m) : Error("degenerate_cloud", m) {}
};

class InsufficientPointsError : public Error {
 public:
  explicit InsufficientPointsError(const std::string& m) : Error("insufficient_points", m) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& m) : Error("config", m) {}
};

class ParseError : public Error {
 public:
  explicit ParseError(const std::string& m) : Error("parse", m) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& m) : Error("io", m) {}
};

class LabelError : public Error {
 public:
  explicit LabelError(const std::string& m) : Error("label", m) {}
};

class OptimizerError : public Error {
 public:
  explicit OptimizerError(const std::string& m) : Error("optimizer", m) {}
};

class EvaluationError : public Error {
 public:
  explicit EvaluationError(const std::string& m) : Error("evaluation", m) {}
};

inline std::string format_shape(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << " x ";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

}  // namespace pointlap
