#ifndef CTS_ERROR_HPP_
#define CTS_ERROR_HPP_

#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>

namespace cts {

// Numeric values are part of the C API (see cts.h) and must not be reordered.
enum class ErrorCode : int {
  kOk = 0,
  kInvalidArgument = 1,
  kShapeMismatch = 2,
  kNonFinite = 3,
  kUnsupported = 4,
  kDivergence = 5,
  kEmptyTicket = 6,
  kParse = 7,
  kIo = 8,
  kBudgetExceeded = 9,
  kState = 10,
  kInternal = 11,
};

const char* error_code_name(ErrorCode code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

namespace detail {

template <typename... Args>
std::string concat(Args&&... args) {
  std::ostringstream os;
  (os << ... << std::forward<Args>(args));
  return os.str();
}

}  // namespace detail

template <typename... Args>
[[noreturn]] void fail(ErrorCode code, Args&&... args) {
  throw Error(code, detail::concat(std::forward<Args>(args)...));
}

template <typename... Args>
void require(bool condition, ErrorCode code, Args&&... args) {
  if (!condition) fail(code, std::forward<Args>(args)...);
}

}  // namespace cts

#endif  // CTS_ERROR_HPP_
