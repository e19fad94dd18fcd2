#include "nsbuild/inject.hpp"

#include <fstream>
#include <nlohmann/json.hpp>
#include <regex>
#include <set>
#include <sstream>

#include "builtin_distros.hpp"
#include "nsbuild/image.hpp"

namespace nsbuild::inject {

namespace {

using json = nlohmann::json;

[[noreturn]] void invalid(const std::string& why) { throw InjectError(InjectErrorKind::ConfigInvalid, "distro config: " + why); }

std::string required_string(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key) || !j[key].is_string() || j[key].get<std::string>().empty()) {
    invalid(where + ": '" + key + "' must be a non-empty string");
  }
  return j[key].get<std::string>();
}

std::vector<std::string> string_list(const json& j, const char* key, const std::string& where) {
  std::vector<std::string> out;
  if (!j.contains(key)) return out;
  if (!j[key].is_array()) invalid(where + ": '" + key + "' must be a list");
  for (const auto& v : j[key]) {
    if (!v.is_string()) invalid(where + ": '" + key + "' entries must be strings");
    out.push_back(v.get<std::string>());
  }
  return out;
}

}  // namespace

std::vector<DistroConfig> load_configs(std::string_view json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::exception& e) {
    invalid(e.what());
  }
  if (!doc.is_object() || !doc.contains("configs") || !doc["configs"].is_array()) invalid("top level needs a 'configs' list");

  std::vector<DistroConfig> out;
  std::set<std::string> names;
  for (const auto& c : doc["configs"]) {
    if (!c.is_object()) invalid("config entries must be objects");
    DistroConfig cfg;
    cfg.name = required_string(c, "name", "config");
    const std::string where = "config " + cfg.name;
    if (!names.insert(cfg.name).second) invalid("duplicate config name " + cfg.name);
    cfg.description = required_string(c, "description", where);
    if (!c.contains("match") || !c["match"].is_array() || c["match"].empty()) invalid(where + ": needs at least one matcher");
    for (const auto& m : c["match"]) {
      Matcher matcher{required_string(m, "file", where + " matcher"), required_string(m, "regex", where + " matcher")};
      if (matcher.file.front() != '/') invalid(where + ": matcher file must be absolute: " + matcher.file);
      try {
        std::regex probe(matcher.regex);
      } catch (const std::regex_error& e) {
        invalid(where + ": bad regex '" + matcher.regex + "': " + e.what());
      }
      cfg.matchers.push_back(std::move(matcher));
    }
    if (c.contains("init")) {
      if (!c["init"].is_array()) invalid(where + ": 'init' must be a list");
      for (const auto& s : c["init"]) {
        if (!s.is_object()) invalid(where + ": init steps must be objects");
        cfg.init_steps.push_back({required_string(s, "check", where + " init step"), required_string(s, "do", where + " init step")});
      }
    }
    cfg.triggers = string_list(c, "triggers", where);
    if (std::any_of(cfg.triggers.begin(), cfg.triggers.end(), [](const auto& t) { return t.empty(); })) {
      invalid(where + ": empty trigger");
    }
    if (c.contains("wrapper")) cfg.wrapper = string_list(c, "wrapper", where);
    out.push_back(std::move(cfg));
  }
  return out;
}

std::vector<DistroConfig> load_config_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) invalid("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return load_configs(ss.str());
}

const std::vector<DistroConfig>& builtin_configs() {
  static const std::vector<DistroConfig> configs = load_configs(kBuiltinDistros);
  return configs;
}

std::optional<DistroConfig> detect_config(const fs::path& image_root, const std::vector<DistroConfig>& configs) {
  for (const auto& cfg : configs) {
    const bool all = std::all_of(cfg.matchers.begin(), cfg.matchers.end(), [&](const Matcher& m) {
      std::error_code ec;
      const fs::path file = image::resolve_in_root(image_root, m.file, true);
      if (!fs::is_regular_file(file, ec)) return false;
      std::ifstream in(file);
      std::ostringstream ss;
      ss << in.rdbuf();
      return std::regex_search(ss.str(), std::regex(m.regex));
    });
    if (all) return cfg;
  }
  return std::nullopt;
}

bool needs_modification(std::string_view run_payload, const DistroConfig& config) {
  return std::any_of(config.triggers.begin(), config.triggers.end(),
                     [&](const std::string& t) { return run_payload.find(t) != std::string_view::npos; });
}

std::vector<std::string> rewrite(const std::vector<std::string>& argv, const DistroConfig& config) {
  std::vector<std::string> out = config.wrapper;
  out.insert(out.end(), argv.begin(), argv.end());
  return out;
}

std::string argv_repr(const std::vector<std::string>& argv) {
  std::string out = "[";
  for (std::size_t i = 0; i < argv.size(); ++i) {
    if (i) out += ", ";
    const std::string& s = argv[i];
    const char quote = s.find('\'') != std::string::npos && s.find('"') == std::string::npos ? '"' : '\'';
    out += quote;
    for (unsigned char c : s) {
      if (c == static_cast<unsigned char>(quote) || c == '\\') {
        out += '\\';
        out += static_cast<char>(c);
      } else if (c == '\n') {
        out += "\\n";
      } else if (c == '\t') {
        out += "\\t";
      } else if (c == '\r') {
        out += "\\r";
      } else if (c < 0x20 || c == 0x7f) {
        static constexpr char kHex[] = "0123456789abcdef";
        out += "\\x";
        out += kHex[c >> 4];
        out += kHex[c & 15];
      } else {
        out += static_cast<char>(c);
      }
    }
    out += quote;
  }
  return out + "]";
}

void apply_init(const StepRunner& run, ForceState& state, const LineSink& out) {
  if (!state.enabled || !state.config || state.initialized) return;
  const auto& steps = state.config->init_steps;
  for (std::size_t i = 0; i < steps.size(); ++i) {
    const std::string prefix = "workarounds: init step " + std::to_string(i + 1) + ": ";
    out(prefix + "checking: $ " + steps[i].check);
    if (run(steps[i].check) == 0) continue;
    out(prefix + "$ " + steps[i].action);
    const int rc = run(steps[i].action);
    if (rc != 0) {
      throw InjectError(InjectErrorKind::InitStepFailed,
                        "--force: init step " + std::to_string(i + 1) + " failed with exit code " + std::to_string(rc),
                        static_cast<int>(i + 1));
    }
  }
  state.initialized = true;
}

std::vector<std::string> prepare_run(const std::vector<std::string>& argv, std::string_view payload,
                                     const StepRunner& run, ForceState& state, const LineSink& out) {
  if (!state.enabled || !state.config || !needs_modification(payload, *state.config)) return argv;
  apply_init(run, state, out);
  auto modified = rewrite(argv, *state.config);
  out(new_command_line(modified));
  ++state.modified_count;
  return modified;
}

std::string will_use_line(const DistroConfig& config) {
  return "will use --force: " + config.name + ": " + config.description;
}

std::string new_command_line(const std::vector<std::string>& argv) { return "workarounds: RUN: new command: " + argv_repr(argv); }

std::string summary_line(int modified_count) {
  return "--force: init OK & modified " + std::to_string(modified_count) + " RUN instructions";
}

std::optional<std::string> advise(const ForceState& state, bool build_failed) {
  if (state.enabled) {
    if (!state.config) return std::nullopt;
    return summary_line(state.modified_count);
  }
  if (state.config && build_failed) {
    return "hint: --force may fix it: available config " + state.config->name + ": " + state.config->description;
  }
  return std::nullopt;
}

}  // namespace nsbuild::inject
