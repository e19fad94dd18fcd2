#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace nsbuild {

// Base for every error the library throws. Module errors derive from
// KindedError so callers can switch on the failure without parsing text.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename Kind>
class KindedError : public Error {
 public:
  KindedError(Kind kind, std::string message)
      : Error(std::move(message)), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace nsbuild
