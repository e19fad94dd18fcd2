#include "nsbuild/sandbox.hpp"

#include <fcntl.h>
#include <poll.h>
#include <sched.h>
#include <signal.h>
#include <sys/mount.h>
#include <sys/resource.h>
#include <sys/stat.h>
#include <sys/statvfs.h>
#include <sys/syscall.h>
#include <sys/utsname.h>
#include <sys/wait.h>
#include <unistd.h>

#include <array>
#include <cerrno>
#include <cstring>
#include <fstream>

#include "nsbuild/image.hpp"
#include "nsbuild/shim_abi.h"
#include "posix.hpp"

extern char** environ;

namespace nsbuild::sandbox {

namespace {

using posix::errno_text;
using posix::UniqueFd;

// Everything the children need, prepared before fork so that the children
// only make system calls.
struct Step {
  enum class Op { Mkdir, Touch, Bind, RBind, BindReadOnly, Tmpfs, Proc, Symlink };
  Op op;
  std::string source;
  std::string target;
  bool optional = false;
  std::string description;
};

struct ChildFailure {
  int kind;  // SandboxErrorKind
  int err;
  int step;  // index into the description table, -1 for fixed messages
};

enum FixedStep : int {
  kStepUnshare = -1,
  kStepSetgroups = -2,
  kStepUidMap = -3,
  kStepGidMap = -4,
  kStepFork = -5,
  kStepPrivate = -6,
  kStepPivot = -7,
  kStepChdir = -8,
  kStepExec = -9,
};

struct Plan {
  std::string root;
  std::string setgroups_path = "/proc/self/setgroups";
  std::string uid_map;
  std::string gid_map;
  std::vector<Step> steps;
  std::string workdir;
  std::vector<std::string> argv;
  std::vector<std::string> env;
  std::vector<char*> argv_ptrs;
  std::vector<char*> env_ptrs;
};

[[noreturn]] void report(int fd, SandboxErrorKind kind, int err, int step) {
  const ChildFailure f{static_cast<int>(kind), err, step};
  posix::write_all(fd, &f, sizeof f);
  _exit(127);
}

bool write_file(const char* path, const std::string& text) {
  const int fd = ::open(path, O_WRONLY | O_CLOEXEC);
  if (fd < 0) return false;
  const bool ok = posix::write_all(fd, text.data(), text.size());
  const int saved = errno;
  ::close(fd);
  errno = saved;
  return ok;
}

unsigned long locked_flags(const char* path) {
  struct statvfs sv {};
  if (::statvfs(path, &sv) != 0) return 0;
  unsigned long flags = 0;
  if (sv.f_flag & ST_NOSUID) flags |= MS_NOSUID;
  if (sv.f_flag & ST_NODEV) flags |= MS_NODEV;
  if (sv.f_flag & ST_NOEXEC) flags |= MS_NOEXEC;
  if (sv.f_flag & ST_NOATIME) flags |= MS_NOATIME;
  if (sv.f_flag & ST_NODIRATIME) flags |= MS_NODIRATIME;
  if (sv.f_flag & ST_RELATIME) flags |= MS_RELATIME;
  return flags;
}

bool do_step(const Step& s) {
  switch (s.op) {
    case Step::Op::Mkdir:
      return ::mkdir(s.target.c_str(), 0755) == 0 || errno == EEXIST;
    case Step::Op::Touch: {
      const int fd = ::open(s.target.c_str(), O_WRONLY | O_CREAT | O_CLOEXEC, 0644);
      if (fd < 0) return errno == EEXIST;
      ::close(fd);
      return true;
    }
    case Step::Op::Bind:
      return ::mount(s.source.c_str(), s.target.c_str(), nullptr, MS_BIND, nullptr) == 0;
    case Step::Op::RBind:
      return ::mount(s.source.c_str(), s.target.c_str(), nullptr, MS_BIND | MS_REC, nullptr) == 0;
    case Step::Op::BindReadOnly:
      if (::mount(s.source.c_str(), s.target.c_str(), nullptr, MS_BIND | MS_REC, nullptr) != 0) return false;
      // Best effort: remounting must repeat any flags locked by the kernel.
      ::mount(nullptr, s.target.c_str(), nullptr, MS_BIND | MS_REMOUNT | MS_RDONLY | locked_flags(s.target.c_str()),
              nullptr);
      return true;
    case Step::Op::Tmpfs:
      return ::mount("tmpfs", s.target.c_str(), "tmpfs", MS_NOSUID, "mode=0755") == 0;
    case Step::Op::Proc:
      if (::mount("proc", s.target.c_str(), "proc", MS_NOSUID | MS_NODEV | MS_NOEXEC, nullptr) == 0) return true;
      return ::mount("/proc", s.target.c_str(), nullptr, MS_BIND | MS_REC, nullptr) == 0;
    case Step::Op::Symlink:
      return ::symlink(s.source.c_str(), s.target.c_str()) == 0 || errno == EEXIST;
  }
  return false;
}

// PID 1 of the new PID namespace.
[[noreturn]] void container_init(const Plan& plan, int err_fd) {
  if (::mount(nullptr, "/", nullptr, MS_REC | MS_PRIVATE, nullptr) != 0) {
    report(err_fd, SandboxErrorKind::MountFailed, errno, kStepPrivate);
  }
  for (std::size_t i = 0; i < plan.steps.size(); ++i) {
    const Step& s = plan.steps[i];
    if (!do_step(s) && !s.optional) report(err_fd, SandboxErrorKind::MountFailed, errno, static_cast<int>(i));
  }
  if (::chdir(plan.root.c_str()) != 0) report(err_fd, SandboxErrorKind::RootNotUsable, errno, kStepChdir);
  if (::syscall(SYS_pivot_root, ".", ".") != 0) report(err_fd, SandboxErrorKind::MountFailed, errno, kStepPivot);
  if (::umount2(".", MNT_DETACH) != 0) report(err_fd, SandboxErrorKind::MountFailed, errno, kStepPivot);
  if (::chdir("/") != 0 || ::chdir(plan.workdir.c_str()) != 0) {
    report(err_fd, SandboxErrorKind::ExecFailed, errno, kStepChdir);
  }
  environ = const_cast<char**>(plan.env_ptrs.data());
  ::execvp(plan.argv_ptrs[0], const_cast<char**>(plan.argv_ptrs.data()));
  report(err_fd, SandboxErrorKind::ExecFailed, errno, kStepExec);
}

// Runs in the first child: becomes the namespace owner, installs the maps
// and forks PID 1.
[[noreturn]] void namespace_owner(const Plan& plan, int err_fd) {
  if (::unshare(CLONE_NEWUSER | CLONE_NEWNS | CLONE_NEWPID) != 0) {
    report(err_fd, SandboxErrorKind::UserNsUnavailable, errno, kStepUnshare);
  }
  if (!write_file(plan.setgroups_path.c_str(), "deny") && errno != ENOENT) {
    report(err_fd, SandboxErrorKind::MapWriteFailed, errno, kStepSetgroups);
  }
  if (!write_file("/proc/self/uid_map", plan.uid_map)) report(err_fd, SandboxErrorKind::MapWriteFailed, errno, kStepUidMap);
  if (!write_file("/proc/self/gid_map", plan.gid_map)) report(err_fd, SandboxErrorKind::MapWriteFailed, errno, kStepGidMap);

  const pid_t init = ::fork();
  if (init < 0) report(err_fd, SandboxErrorKind::Io, errno, kStepFork);
  if (init == 0) container_init(plan, err_fd);
  ::close(err_fd);

  int status = 0;
  while (::waitpid(init, &status, 0) < 0) {
    if (errno != EINTR) _exit(127);
  }
  if (WIFEXITED(status)) _exit(WEXITSTATUS(status));
  const int sig = WTERMSIG(status);
  ::signal(sig, SIG_DFL);
  // no core file for the relay itself
  const struct rlimit no_core {0, 0};
  ::setrlimit(RLIMIT_CORE, &no_core);
  ::kill(::getpid(), sig);
  _exit(128 + sig);
}

std::string fixed_description(int step) {
  switch (step) {
    case kStepUnshare: return "cannot create user namespace";
    case kStepSetgroups: return "cannot write /proc/self/setgroups";
    case kStepUidMap: return "cannot write /proc/self/uid_map";
    case kStepGidMap: return "cannot write /proc/self/gid_map";
    case kStepFork: return "cannot fork container init";
    case kStepPrivate: return "cannot make mounts private";
    case kStepPivot: return "cannot pivot to image root";
    case kStepChdir: return "cannot change to working directory";
    case kStepExec: return "cannot execute";
    default: return "sandbox setup failed";
  }
}

bool host_exists(const char* path) {
  struct stat st {};
  return ::stat(path, &st) == 0;
}

void add_dev_node(Plan& plan, const std::string& dev, const char* name, bool optional) {
  const std::string host = std::string("/dev/") + name;
  if (!host_exists(host.c_str())) return;
  if (optional) {
    // /dev/tty exists without a controlling terminal but cannot be opened
    const int fd = ::open(host.c_str(), O_RDWR | O_NOCTTY | O_CLOEXEC);
    if (fd < 0) return;
    ::close(fd);
  }
  plan.steps.push_back({Step::Op::Touch, "", dev + "/" + name, false, "create " + dev + "/" + name});
  plan.steps.push_back({Step::Op::Bind, host, dev + "/" + name, optional, "bind " + host});
}

Plan make_plan(const SandboxSpec& spec) {
  if (spec.argv.empty()) throw SandboxError(SandboxErrorKind::ExecFailed, "empty command");
  const fs::path root = fs::absolute(spec.image_root);
  std::error_code ec;
  if (!fs::is_directory(root, ec)) {
    throw SandboxError(SandboxErrorKind::RootNotUsable, "image root is not a directory: " + root.string());
  }
  if (!fs::exists(image::resolve_in_root(root, "bin", true), ec) &&
      !fs::exists(image::resolve_in_root(root, "usr/bin", true), ec)) {
    throw SandboxError(SandboxErrorKind::RootNotUsable, "image root has neither /bin nor /usr/bin: " + root.string());
  }

  Plan plan;
  plan.root = root.string();
  plan.uid_map = map_line(spec.ns_uid, ::getuid());
  plan.gid_map = map_line(spec.ns_gid, ::getgid());
  plan.workdir = spec.workdir.empty() ? "/" : spec.workdir;

  auto inside = [&](std::string_view p) { return image::resolve_in_root(root, p, true).string(); };
  plan.steps.push_back({Step::Op::RBind, plan.root, plan.root, false, "bind image root"});

  const std::string dev = inside("dev");
  plan.steps.push_back({Step::Op::Mkdir, "", dev, false, "create /dev"});
  plan.steps.push_back({Step::Op::Tmpfs, "", dev, false, "mount tmpfs on /dev"});
  for (const char* node : {"null", "zero", "random", "urandom", "full"}) add_dev_node(plan, dev, node, false);
  add_dev_node(plan, dev, "tty", true);
  plan.steps.push_back({Step::Op::Symlink, "/proc/self/fd", dev + "/fd", false, "create /dev/fd"});
  plan.steps.push_back({Step::Op::Symlink, "/proc/self/fd/0", dev + "/stdin", false, "create /dev/stdin"});
  plan.steps.push_back({Step::Op::Symlink, "/proc/self/fd/1", dev + "/stdout", false, "create /dev/stdout"});
  plan.steps.push_back({Step::Op::Symlink, "/proc/self/fd/2", dev + "/stderr", false, "create /dev/stderr"});
  plan.steps.push_back({Step::Op::Mkdir, "", dev + "/shm", false, "create /dev/shm"});
  plan.steps.push_back({Step::Op::Mkdir, "", dev + "/pts", false, "create /dev/pts"});

  const std::string proc = inside("proc");
  plan.steps.push_back({Step::Op::Mkdir, "", proc, false, "create /proc"});
  plan.steps.push_back({Step::Op::Proc, "", proc, false, "mount proc"});

  const std::string sys = inside("sys");
  if (fs::is_directory(sys, ec)) plan.steps.push_back({Step::Op::RBind, "/sys", sys, true, "bind /sys"});

  for (const char* f : {"etc/resolv.conf", "etc/hosts"}) {
    const fs::path host = fs::path("/") / f;
    const fs::path target = image::resolve_in_root(root, f, true);
    if (host_exists(host.c_str()) && fs::is_regular_file(target, ec)) {
      plan.steps.push_back({Step::Op::BindReadOnly, host.string(), target.string(), true, "bind " + host.string()});
    }
  }

  for (const auto& b : spec.binds) {
    if (b.target.empty() || b.target.front() != '/') {
      throw SandboxError(SandboxErrorKind::MountFailed, "bind target must be absolute: " + b.target);
    }
    const std::string target = inside(b.target);
    const bool dir = fs::is_directory(b.source, ec);
    if (!fs::exists(b.source, ec)) throw SandboxError(SandboxErrorKind::MountFailed, "bind source missing: " + b.source.string());
    // Parents are created from the outside, before the namespace exists.
    fs::create_directories(dir ? fs::path(target) : fs::path(target).parent_path(), ec);
    if (!dir) plan.steps.push_back({Step::Op::Touch, "", target, false, "create " + b.target});
    plan.steps.push_back({b.read_only ? Step::Op::BindReadOnly : Step::Op::RBind, b.source.string(), target, false,
                          "bind " + b.source.string() + " to " + b.target});
  }

  std::vector<std::string> env = spec.env;
  if (spec.preload) {
    if (!fs::exists(spec.preload->shim, ec)) {
      throw SandboxError(SandboxErrorKind::MountFailed, "shim not found: " + spec.preload->shim.string());
    }
    const std::string shim_dir = dev + "/" + fs::path(NSB_CONTAINER_SHIM_DIR).filename().string();
    const std::string shim = shim_dir + "/" + fs::path(NSB_CONTAINER_SHIM_PATH).filename().string();
    const std::string sock = shim_dir + "/" + fs::path(NSB_CONTAINER_OWNERDB_PATH).filename().string();
    plan.steps.push_back({Step::Op::Mkdir, "", shim_dir, false, "create " NSB_CONTAINER_SHIM_DIR});
    plan.steps.push_back({Step::Op::Touch, "", shim, false, "create " NSB_CONTAINER_SHIM_PATH});
    plan.steps.push_back({Step::Op::BindReadOnly, fs::absolute(spec.preload->shim).string(), shim, false, "bind shim"});
    plan.steps.push_back({Step::Op::Touch, "", sock, false, "create " NSB_CONTAINER_OWNERDB_PATH});
    plan.steps.push_back({Step::Op::Bind, fs::absolute(spec.preload->socket).string(), sock, false, "bind ownership socket"});
    std::erase_if(env, [](const std::string& e) {
      return e.starts_with(NSB_ENV_PRELOAD "=") || e.starts_with(NSB_ENV_OWNERDB "=");
    });
    env.push_back(NSB_ENV_PRELOAD "=" NSB_CONTAINER_SHIM_PATH);
    env.push_back(NSB_ENV_OWNERDB "=" NSB_CONTAINER_OWNERDB_PATH);
  }
  if (std::none_of(env.begin(), env.end(), [](const std::string& e) { return e.starts_with("PATH="); })) {
    env.push_back("PATH=" + std::string(kDefaultPath));
  }

  plan.argv = spec.argv;
  plan.env = std::move(env);
  for (auto& a : plan.argv) plan.argv_ptrs.push_back(a.data());
  plan.argv_ptrs.push_back(nullptr);
  for (auto& e : plan.env) plan.env_ptrs.push_back(e.data());
  plan.env_ptrs.push_back(nullptr);
  return plan;
}

}  // namespace

std::string map_line(idmap::Id ns_id, idmap::Id host_id) {
  return idmap::plan_unprivileged_map(host_id, ns_id).render();
}

std::string user_ns_advice(int err) {
  std::string why = "unprivileged user namespaces are unavailable (" + errno_text(err) + ")";
  auto read_long = [](const char* path) -> std::optional<long> {
    std::ifstream in(path);
    long v = 0;
    if (in >> v) return v;
    return std::nullopt;
  };
  if (auto v = read_long("/proc/sys/user/max_user_namespaces"); v && *v == 0) {
    why += "; sysctl user.max_user_namespaces is 0";
  } else if (auto c = read_long("/proc/sys/kernel/unprivileged_userns_clone"); c && *c == 0) {
    why += "; sysctl kernel.unprivileged_userns_clone is 0";
  } else if (err == EPERM) {
    why += "; the kernel or a security policy refused the request (seccomp, AppArmor, or running inside a chroot)";
  } else if (err == ENOSPC) {
    why += "; the user.max_user_namespaces limit is exhausted";
  } else if (err == EINVAL) {
    why += "; the kernel lacks CONFIG_USER_NS";
  }
  why += ". Enable them with: sysctl user.max_user_namespaces=15000 (RHEL/CentOS 7 also needs the kernel argument "
         "namespace.unpriv_enable=1 and user_namespace.enable=1), or sysctl kernel.unprivileged_userns_clone=1 on "
         "Debian-patched kernels";
  return why;
}

RunResult run(const SandboxSpec& spec, const OutputSink& sink) {
  const Plan plan = make_plan(spec);

  int out_pipe[2], err_pipe[2], fail_pipe[2];
  if (::pipe2(out_pipe, O_CLOEXEC) != 0) throw SandboxError(SandboxErrorKind::Io, "pipe: " + errno_text(errno));
  UniqueFd out_r(out_pipe[0]), out_w(out_pipe[1]);
  if (::pipe2(err_pipe, O_CLOEXEC) != 0) throw SandboxError(SandboxErrorKind::Io, "pipe: " + errno_text(errno));
  UniqueFd err_r(err_pipe[0]), err_w(err_pipe[1]);
  if (::pipe2(fail_pipe, O_CLOEXEC) != 0) throw SandboxError(SandboxErrorKind::Io, "pipe: " + errno_text(errno));
  UniqueFd fail_r(fail_pipe[0]), fail_w(fail_pipe[1]);
  UniqueFd null_in(::open("/dev/null", O_RDONLY | O_CLOEXEC));

  const pid_t pid = ::fork();
  if (pid < 0) throw SandboxError(SandboxErrorKind::Io, "fork: " + errno_text(errno));
  if (pid == 0) {
    ::dup2(null_in.get(), 0);
    ::dup2(out_w.get(), 1);
    ::dup2(spec.merge_output ? out_w.get() : err_w.get(), 2);
    namespace_owner(plan, fail_w.get());
  }
  out_w.reset();
  err_w.reset();
  fail_w.reset();

  RunResult result;
  ChildFailure failure{};
  std::size_t failure_bytes = 0;
  std::array<pollfd, 3> fds{{{out_r.get(), POLLIN, 0}, {err_r.get(), POLLIN, 0}, {fail_r.get(), POLLIN, 0}}};
  int open_fds = 3;
  std::array<char, 1 << 14> buf{};
  while (open_fds > 0) {
    if (::poll(fds.data(), fds.size(), -1) < 0) {
      if (errno == EINTR) continue;
      break;
    }
    for (std::size_t i = 0; i < fds.size(); ++i) {
      if (fds[i].fd < 0 || !(fds[i].revents & (POLLIN | POLLHUP | POLLERR))) continue;
      const ssize_t n = ::read(fds[i].fd, buf.data(), buf.size());
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) {
        fds[i].fd = -1;
        --open_fds;
        continue;
      }
      const std::string_view chunk(buf.data(), static_cast<std::size_t>(n));
      if (i == 2) {
        const std::size_t take = std::min(chunk.size(), sizeof failure - failure_bytes);
        std::memcpy(reinterpret_cast<char*>(&failure) + failure_bytes, chunk.data(), take);
        failure_bytes += take;
        continue;
      }
      (i == 0 ? result.out : result.err).append(chunk);
      if (sink) sink(static_cast<int>(i) + 1, chunk);
    }
  }

  int status = 0;
  while (::waitpid(pid, &status, 0) < 0) {
    if (errno != EINTR) throw SandboxError(SandboxErrorKind::Io, "waitpid: " + errno_text(errno));
  }

  if (failure_bytes == sizeof failure) {
    const auto kind = static_cast<SandboxErrorKind>(failure.kind);
    std::string what = failure.step >= 0 && static_cast<std::size_t>(failure.step) < plan.steps.size()
                           ? plan.steps[failure.step].description
                           : fixed_description(failure.step);
    if (failure.step == kStepExec) what += " " + spec.argv[0];
    if (failure.step == kStepChdir) what += " " + plan.workdir;
    if (kind == SandboxErrorKind::UserNsUnavailable) throw SandboxError(kind, user_ns_advice(failure.err));
    throw SandboxError(kind, what + ": " + errno_text(failure.err));
  }

  if (WIFEXITED(status)) {
    result.exit_code = WEXITSTATUS(status);
  } else if (WIFSIGNALED(status)) {
    result.signal = WTERMSIG(status);
    result.exit_code = 128 + result.signal;
  }
  return result;
}

HostReport probe_host() {
  HostReport r;
  r.uid = ::getuid();
  r.gid = ::getgid();
  struct utsname u {};
  if (::uname(&u) == 0) r.kernel = std::string(u.sysname) + " " + u.release;
  auto read_long = [](const char* path) -> std::optional<long> {
    std::ifstream in(path);
    long v = 0;
    if (in >> v) return v;
    return std::nullopt;
  };
  r.max_user_namespaces = read_long("/proc/sys/user/max_user_namespaces");
  r.unprivileged_userns_clone = read_long("/proc/sys/kernel/unprivileged_userns_clone");
  if (std::string(u.sysname) != "Linux") {
    r.failure = "unsupported platform: " + std::string(u.sysname);
    r.type = idmap::classify_runtime(false, false);
    return r;
  }

  const std::string uid_map = map_line(0, r.uid);
  const std::string gid_map = map_line(0, r.gid);
  int p[2];
  if (::pipe2(p, O_CLOEXEC) != 0) {
    r.failure = "pipe: " + errno_text(errno);
    return r;
  }
  UniqueFd rd(p[0]), wr(p[1]);
  const pid_t pid = ::fork();
  if (pid == 0) {
    int stage = 0;
    if (::unshare(CLONE_NEWUSER | CLONE_NEWNS) != 0) stage = 1;
    else if (!write_file("/proc/self/setgroups", "deny") && errno != ENOENT) stage = 2;
    else if (!write_file("/proc/self/uid_map", uid_map)) stage = 3;
    else if (!write_file("/proc/self/gid_map", gid_map)) stage = 4;
    const int msg[2] = {stage, stage ? errno : 0};
    posix::write_all(wr.get(), msg, sizeof msg);
    _exit(0);
  }
  wr.reset();
  int msg[2] = {-1, 0};
  if (pid < 0 || posix::read_full(rd.get(), msg, sizeof msg) != static_cast<ssize_t>(sizeof msg)) msg[0] = -1;
  if (pid > 0) ::waitpid(pid, nullptr, 0);
  switch (msg[0]) {
    case 0: r.user_namespaces = true; break;
    case 1: r.failure = user_ns_advice(msg[1]); break;
    case 2: r.failure = "cannot deny setgroups: " + errno_text(msg[1]); break;
    case 3: r.failure = "cannot write uid_map: " + errno_text(msg[1]); break;
    case 4: r.failure = "cannot write gid_map: " + errno_text(msg[1]); break;
    default: r.failure = "probe child failed"; break;
  }
  r.type = idmap::classify_runtime(r.user_namespaces, false);
  return r;
}

}  // namespace nsbuild::sandbox
