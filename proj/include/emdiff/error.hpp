#pragma once

#include <stdexcept>
#include <string>

namespace emdiff {

// Every failure surfaced by the library carries a short machine-readable
// category so the CLI can print "error: <category>: <detail>".
class Error : public std::runtime_error {
 public:
  Error(std::string category, const std::string& detail)
      : std::runtime_error(detail), category_(std::move(category)) {}

  const std::string& category() const noexcept { return category_; }

 protected:
  void set_category(std::string c) { category_ = std::move(c); }

 private:
  std::string category_;
};

struct ShapeError : Error {
  explicit ShapeError(const std::string& d) : Error("shape", d) {}
};

struct NonFiniteError : Error {
  explicit NonFiniteError(const std::string& d) : Error("non_finite", d) {}
};

struct PreconditionError : Error {
  explicit PreconditionError(const std::string& d) : Error("precondition", d) {}
};

struct FormatError : Error {
  explicit FormatError(const std::string& d) : Error("format", d) {}
};

struct VersionError : FormatError {
  explicit VersionError(const std::string& d) : FormatError(d) { set_category("version"); }
};

struct ChecksumError : FormatError {
  explicit ChecksumError(const std::string& d) : FormatError(d) { set_category("checksum"); }
};

struct IoError : Error {
  explicit IoError(const std::string& d) : Error("io", d) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& d) : Error("config", d) {}
};

struct DivergenceError : Error {
  explicit DivergenceError(const std::string& d) : Error("divergence", d) {}
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw PreconditionError(what);
}

}  // namespace emdiff
