#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "nsbuild/dockerfile.hpp"
#include "nsbuild/image.hpp"
#include "nsbuild/inject.hpp"
#include "nsbuild/registry.hpp"

namespace nsbuild::builder {

namespace fs = std::filesystem;

enum ExitCode : int {
  kExitOk = 0,
  kExitRun = 1,
  kExitParse = 2,
  kExitPull = 3,
  kExitExport = 4,
};

struct BuildOptions {
  std::string tag;  // as typed; echoed in the final line
  fs::path dockerfile;
  fs::path context;
  bool force = false;
  dockerfile::BuildArgs build_args;
  fs::path store_root;
  // Builder-provided preload shim. When set, modified RUNs run with it
  // and the ownership database instead of the image's own wrapper.
  std::optional<fs::path> shim;
  std::vector<inject::DistroConfig> configs = inject::builtin_configs();
  registry::ClientOptions registry_options;
};

struct BuildOutcome {
  int exit_code = kExitOk;
  std::string error;  // empty on success
  int instructions = 0;
  std::string manifest_digest;
};

// Runs the whole build, writing the transcript to `out` and errors to `err`.
BuildOutcome build(const BuildOptions& options, std::ostream& out, std::ostream& err);

// Fetches `ref` and unpacks it into the store. Returns the manifest digest.
std::string pull_image(const image::ImageRef& ref, image::Store& store, const registry::ClientOptions& options,
                       std::ostream& log);

// Pushes a stored image. Returns the manifest digest.
std::string push_image(const image::ImageRef& ref, image::Store& store, const registry::ClientOptions& options);

// Stores a directory tree as a single-layer image, as if it had been pulled.
std::string import_directory(const fs::path& dir, const image::ImageRef& ref, image::Store& store);

// Exports a root as a single-layer image in the store under `ref`.
// Returns the manifest digest.
std::string commit_image(const fs::path& root, const ownerdb::Session* db, const image::ImageConfig& config,
                         const image::ImageRef& ref, image::Store& store);

// "  1 " style instruction prefix.
std::string instruction_prefix(int number);

}  // namespace nsbuild::builder
