#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace ssmavs {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

[[noreturn]] inline void fail(const std::string& msg) { throw Error(msg); }

inline void check(bool cond, const std::string& msg) {
  if (!cond) fail(msg);
}

using i64 = std::int64_t;
using u64 = std::uint64_t;

}  // namespace ssmavs
