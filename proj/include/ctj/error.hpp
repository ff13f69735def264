#pragma once

#include <stdexcept>
#include <string>

namespace ctj {

/// Library-wide exception. `code` is a short stable identifier that the HTTP
/// service forwards verbatim to clients.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(message), code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

inline void require(bool cond, const char* code, const std::string& message) {
  if (!cond) throw Error(code, message);
}

}  // namespace ctj
