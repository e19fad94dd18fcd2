#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "nsbuild/error.hpp"
#include "nsbuild/idmap.hpp"

namespace nsbuild::sandbox {

namespace fs = std::filesystem;

enum class SandboxErrorKind { UserNsUnavailable, MapWriteFailed, RootNotUsable, MountFailed, ExecFailed, Io };

class SandboxError : public KindedError<SandboxErrorKind> {
 public:
  using KindedError::KindedError;
};

struct BindMount {
  fs::path source;     // host path
  std::string target;  // absolute path inside the container
  bool read_only = false;
};

// Shim library and ownership endpoint made visible at fixed container
// paths, with the matching environment variables set.
struct Preload {
  fs::path shim;
  fs::path socket;
};

struct SandboxSpec {
  fs::path image_root;
  std::vector<std::string> argv;
  std::vector<std::string> env;  // "NAME=value"; PATH gets a default if absent
  std::string workdir = "/";
  std::vector<BindMount> binds;
  std::optional<Preload> preload;
  // The invoking user's IDs appear as these inside. Nothing else is mapped.
  idmap::Id ns_uid = 0;
  idmap::Id ns_gid = 0;
  // Send the child's stderr down the stdout stream so the two stay ordered.
  bool merge_output = false;
};

struct RunResult {
  int exit_code = 0;  // 128 + signal when killed
  int signal = 0;
  std::string out;
  std::string err;
  bool ok() const { return exit_code == 0; }
};

// Receives child output as it arrives; stream is 1 or 2.
using OutputSink = std::function<void(int stream, std::string_view chunk)>;

inline constexpr std::string_view kDefaultPath = "/usr/sbin:/usr/bin:/sbin:/bin";

// Runs argv inside a new user, mount and PID namespace rooted at
// spec.image_root. Needs no privilege: the only mapping installed is the
// invoker's own UID and GID, and setgroups is denied first.
RunResult run(const SandboxSpec& spec, const OutputSink& sink = {});

// Single-line uid_map/gid_map text installed by run().
std::string map_line(idmap::Id ns_id, idmap::Id host_id);

struct HostReport {
  bool user_namespaces = false;
  std::string failure;  // why not, with the knob to turn
  idmap::ContainerType type = idmap::ContainerType::TypeI;
  idmap::Id uid = 0;
  idmap::Id gid = 0;
  std::string kernel;
  std::optional<long> max_user_namespaces;
  std::optional<long> unprivileged_userns_clone;
};

// Tries to create a user namespace and install a mapping in a child.
HostReport probe_host();

// Explanation for an unshare(CLONE_NEWUSER) failure with errno `err`.
std::string user_ns_advice(int err);

}  // namespace nsbuild::sandbox
