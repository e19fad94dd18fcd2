#include "privilege_guard.hpp"

#include <unistd.h>

#include <fstream>
#include <string>

namespace nsbuild::test {

std::string elevated_privilege() {
  if (::geteuid() == 0) return "effective UID is 0";
  if (::getegid() == 0) return "effective GID is 0";
  std::ifstream status("/proc/self/status");
  std::string line;
  while (std::getline(status, line)) {
    if (line.rfind("CapEff:", 0) == 0) {
      const auto value = std::stoull(line.substr(7), nullptr, 16);
      if (value != 0) return "effective capabilities present: " + line;
    }
  }
  return {};
}

}  // namespace nsbuild::test
