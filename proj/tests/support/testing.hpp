#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "nsbuild/image.hpp"

namespace nsbuild::test {

namespace fs = std::filesystem;

// Private directory under $TMPDIR, removed with everything in it.
class TempDir {
 public:
  explicit TempDir(std::string_view tag = "test");
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(std::string_view rel) const { return path_ / rel; }

 private:
  fs::path path_;
};

std::string read_file(const fs::path& path);
void write_file(const fs::path& path, std::string_view content, unsigned mode = 0644);

// Root filesystem fixtures built from tests/fixtures: "rhel7" or "debderiv".
fs::path fixture_root(std::string_view flavor);
fs::path golden_path(std::string_view name);
fs::path data_path(std::string_view name);
fs::path shim_path();

// Imports the rhel7 fixture as centos:7 and the debderiv one as debian:buster.
void import_fixture_images(image::Store& store);

struct CliResult {
  int code = 0;
  std::string out;
  std::string err;
};

// In-process `nsbuild ARGS...`.
CliResult run_cli(const std::vector<std::string>& args);

// Runs `nsbuild build` for `dockerfile_text` in a fresh context directory.
CliResult build(const fs::path& store, std::string_view dockerfile_text, const std::vector<std::string>& extra,
                std::string_view tag = "foo");

}  // namespace nsbuild::test
