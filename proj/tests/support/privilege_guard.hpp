#pragma once

#include <string>

namespace nsbuild::test {

// Empty when the process runs as a plain user; otherwise what is wrong
// (root effective UID or GID, or any effective capability).
std::string elevated_privilege();

}  // namespace nsbuild::test
