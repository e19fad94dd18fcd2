#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "nsbuild/error.hpp"

namespace nsbuild::inject {

namespace fs = std::filesystem;

struct Matcher {
  std::string file;   // absolute path inside the image
  std::string regex;  // ECMAScript, searched anywhere in the contents
};

struct InitStep {
  std::string check;   // exit 0 means already done
  std::string action;  // must exit 0
};

struct DistroConfig {
  std::string name;
  std::string description;
  std::vector<Matcher> matchers;
  std::vector<InitStep> init_steps;
  std::vector<std::string> triggers;
  std::vector<std::string> wrapper{"fakeroot"};
};

enum class InjectErrorKind { ConfigInvalid, InitStepFailed };

class InjectError : public KindedError<InjectErrorKind> {
 public:
  InjectError(InjectErrorKind kind, std::string message, int step = 0)
      : KindedError(kind, std::move(message)), step_(step) {}
  // 1-based init step for InitStepFailed.
  int step() const noexcept { return step_; }

 private:
  int step_;
};

// Config registry file: {"configs": [{"name", "description",
// "match": [{"file", "regex"}], "init": [{"check", "do"}], "triggers": [...],
// "wrapper": [...]}]}. Order is significant for detection.
std::vector<DistroConfig> load_configs(std::string_view json_text);
std::vector<DistroConfig> load_config_file(const fs::path& path);
// The shipped registry: rhel7 and debderiv.
const std::vector<DistroConfig>& builtin_configs();

// First config whose matchers all hit. Reads files only.
std::optional<DistroConfig> detect_config(const fs::path& image_root, const std::vector<DistroConfig>& configs);

bool needs_modification(std::string_view run_payload, const DistroConfig& config);

// wrapper ++ argv.
std::vector<std::string> rewrite(const std::vector<std::string>& argv, const DistroConfig& config);

// Python-style list literal, e.g. ['/bin/sh', '-c', 'echo hello'].
std::string argv_repr(const std::vector<std::string>& argv);

struct ForceState {
  bool enabled = false;
  std::optional<DistroConfig> config;
  bool initialized = false;
  int modified_count = 0;
};

// Runs a shell command inside the image and returns its exit code.
using StepRunner = std::function<int(const std::string& command)>;
using LineSink = std::function<void(const std::string& line)>;

// Runs each init step's check and, when it fails, its action. Marks the
// state initialized; a failing action throws InitStepFailed.
void apply_init(const StepRunner& run, ForceState& state, const LineSink& out);

// For one RUN: initializes on first use and returns the argv to execute.
// Unmodified argv is returned when force is off or nothing triggers.
std::vector<std::string> prepare_run(const std::vector<std::string>& argv, std::string_view payload,
                                     const StepRunner& run, ForceState& state, const LineSink& out);

// Transcript lines.
std::string will_use_line(const DistroConfig& config);
std::string new_command_line(const std::vector<std::string>& argv);
std::string summary_line(int modified_count);

// Summary when enabled; a --force suggestion when disabled, a config
// matched and the build failed; otherwise nothing.
std::optional<std::string> advise(const ForceState& state, bool build_failed);

}  // namespace nsbuild::inject
