#include "kse/common.hpp"

#include <cstdio>

namespace kse {

void log_warn(const std::string& msg) {
  std::fprintf(stderr, "[warn] %s\n", msg.c_str());
}

void log_info(const std::string& msg) {
  std::fprintf(stderr, "[info] %s\n", msg.c_str());
}

}  // namespace kse
