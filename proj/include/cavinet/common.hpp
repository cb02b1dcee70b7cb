#pragma once

#include <Eigen/Core>

#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cavinet {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

enum class Mode { kTrain, kEval };

// Error taxonomy. Shape/config errors mean the caller handed us something
// malformed; usage errors mean an API contract was violated (e.g. backward
// without a recorded forward); numeric errors mean non-finite values appeared.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct UsageError : std::logic_error {
  using std::logic_error::logic_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {
inline void stream_all(std::ostream&) {}
template <class T, class... Rest>
void stream_all(std::ostream& os, const T& v, const Rest&... rest) {
  os << v;
  stream_all(os, rest...);
}
}  // namespace detail

template <class Err, class... Args>
[[noreturn]] void raise(const Args&... args) {
  std::ostringstream os;
  detail::stream_all(os, args...);
  throw Err(os.str());
}

inline Index shape_size(const Shape& s) {
  Index n = 1;
  for (Index d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

inline bool same_shape(const Shape& a, const Shape& b) { return a == b; }

}  // namespace cavinet
