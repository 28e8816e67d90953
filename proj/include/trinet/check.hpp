#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace trinet {

// All recoverable failures surface as trinet::Error with a human-readable message.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {
template <typename... Args>
[[noreturn]] inline void fail(Args&&... args) {
  std::ostringstream os;
  (os << ... << args);
  throw Error(os.str());
}
}  // namespace detail

#define TRI_CHECK(cond, ...)                     \
  do {                                           \
    if (!(cond)) ::trinet::detail::fail(__VA_ARGS__); \
  } while (0)

}  // namespace trinet
