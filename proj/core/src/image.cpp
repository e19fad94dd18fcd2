#include "nsbuild/image.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <sys/stat.h>
#include <sys/sysmacros.h>
#include <sys/utsname.h>
#include <unistd.h>

#include <algorithm>
#include <cstdlib>
#include <deque>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>

#include "nsbuild/digest.hpp"
#include "nsbuild/tar.hpp"
#include "posix.hpp"

namespace nsbuild::image {

namespace {

using json = nlohmann::json;
using posix::errno_text;
using posix::UniqueFd;

[[noreturn]] void fail(ImageErrorKind kind, const std::string& message) { throw ImageError(kind, message); }

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto pos = s.find(sep, start);
    const auto end = pos == std::string_view::npos ? s.size() : pos;
    out.emplace_back(s.substr(start, end - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

bool valid_repo_component(std::string_view c) {
  if (c.empty()) return false;
  return std::all_of(c.begin(), c.end(), [](char ch) {
    return (ch >= 'a' && ch <= 'z') || (ch >= '0' && ch <= '9') || ch == '.' || ch == '_' || ch == '-';
  });
}

bool valid_tag(std::string_view t) {
  if (t.empty() || t.size() > 128 || t.front() == '.' || t.front() == '-') return false;
  return std::all_of(t.begin(), t.end(), [](char ch) {
    return (ch >= 'a' && ch <= 'z') || (ch >= 'A' && ch <= 'Z') || (ch >= '0' && ch <= '9') || ch == '.' ||
           ch == '_' || ch == '-';
  });
}

bool lexists(const fs::path& p) {
  struct stat st {};
  return ::lstat(p.c_str(), &st) == 0;
}

void remove_any(const fs::path& p) { remove_tree(p); }

// Temporarily adds owner permission bits so the builder can read trees that
// image contents made unreadable (e.g. a mode 0111 setgid helper). Restored
// deepest first, since restoring a parent can cut off access to its children.
class ModeBumps {
 public:
  ModeBumps() = default;
  ModeBumps(const ModeBumps&) = delete;
  ModeBumps& operator=(const ModeBumps&) = delete;
  ~ModeBumps() { restore(); }

  void need(const fs::path& p, mode_t current, mode_t bits) {
    if ((current & bits) == bits) return;
    if (::chmod(p.c_str(), (current | bits) & 07777) == 0) saved_.emplace_back(p, current & 07777);
  }

  void restore() {
    for (auto it = saved_.rbegin(); it != saved_.rend(); ++it) ::chmod(it->first.c_str(), it->second);
    saved_.clear();
  }

 private:
  std::vector<std::pair<fs::path, mode_t>> saved_;
};

std::string join_components(const std::vector<std::string>& parts) {
  std::string out;
  for (const auto& p : parts) {
    if (!out.empty()) out += '/';
    out += p;
  }
  return out;
}

}  // namespace

// ---- ImageRef --------------------------------------------------------------

ImageRef ImageRef::parse(std::string_view text) {
  const std::string original(text);
  auto bad = [&](const std::string& why) -> ImageError {
    return ImageError(ImageErrorKind::BadReference, "invalid image reference '" + original + "': " + why);
  };
  if (text.empty()) throw bad("empty");

  ImageRef ref;
  if (const auto at = text.find('@'); at != std::string_view::npos) {
    std::string digest(text.substr(at + 1));
    if (!is_sha256_digest(digest)) throw bad("digest must be sha256:<64 hex>");
    ref.digest = digest;
    text = text.substr(0, at);
  }

  std::string_view rest = text;
  if (const auto slash = rest.find('/'); slash != std::string_view::npos) {
    const auto first = rest.substr(0, slash);
    if (first.find('.') != std::string_view::npos || first.find(':') != std::string_view::npos ||
        first == "localhost") {
      ref.host = std::string(first);
      rest = rest.substr(slash + 1);
    }
  }
  if (ref.host.empty()) throw bad("empty registry host");

  const auto last_slash = rest.rfind('/');
  const auto colon = rest.rfind(':');
  if (colon != std::string_view::npos && (last_slash == std::string_view::npos || colon > last_slash)) {
    ref.tag = std::string(rest.substr(colon + 1));
    rest = rest.substr(0, colon);
    if (!valid_tag(ref.tag)) throw bad("invalid tag '" + ref.tag + "'");
  }
  for (const auto& c : split(rest, '/')) {
    if (!valid_repo_component(c)) throw bad("invalid repository component '" + c + "'");
  }
  ref.repository = std::string(rest);
  if (ref.host == kDefaultRegistry && ref.repository.find('/') == std::string::npos) {
    ref.repository = "library/" + ref.repository;
  }
  return ref;
}

std::string ImageRef::str() const {
  std::string out = host + "/" + repository + ":" + tag;
  if (digest) out += "@" + *digest;
  return out;
}

std::string ImageRef::encoded() const {
  std::string out = str();
  for (auto& c : out) {
    if (c == '/') c = '%';
    else if (c == ':') c = '+';
  }
  return out;
}

// ---- scoped resolution -----------------------------------------------------

fs::path resolve_in_root(const fs::path& root, std::string_view relative, bool follow_last) {
  std::deque<std::string> pending;
  for (auto& c : split(relative, '/')) pending.push_back(std::move(c));
  std::vector<std::string> current;
  int links = 0;
  while (!pending.empty()) {
    std::string c = std::move(pending.front());
    pending.pop_front();
    if (c.empty() || c == ".") continue;
    if (c == "..") {
      if (!current.empty()) current.pop_back();
      continue;
    }
    const bool last = pending.empty();
    fs::path candidate = root / join_components(current) / c;
    struct stat st {};
    if ((!last || follow_last) && ::lstat(candidate.c_str(), &st) == 0 && S_ISLNK(st.st_mode)) {
      if (++links > 40) fail(ImageErrorKind::PathEscape, "too many levels of symbolic links: " + std::string(relative));
      std::error_code ec;
      const auto target = fs::read_symlink(candidate, ec).string();
      if (ec) fail(ImageErrorKind::Io, "readlink " + candidate.string() + ": " + ec.message());
      if (!target.empty() && target.front() == '/') current.clear();
      auto parts = split(target, '/');
      pending.insert(pending.begin(), parts.begin(), parts.end());
      continue;
    }
    current.push_back(std::move(c));
  }
  return current.empty() ? root : root / join_components(current);
}

// ---- unpack ----------------------------------------------------------------

namespace {

constexpr std::string_view kWhiteoutPrefix = ".wh.";
constexpr std::string_view kOpaqueMarker = ".wh..wh..opq";

struct Unpacker {
  fs::path dest;
  UnpackReport report;
  std::set<std::string> layer_paths;  // created by the current layer

  fs::path parent_dir(const std::string& parent_rel) {
    const fs::path dir = resolve_in_root(dest, parent_rel, true);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) {
      fail(ImageErrorKind::ArchiveCorrupt, "cannot create directory " + parent_rel + ": not a directory");
    }
    return dir;
  }

  void opaque(const std::string& dir_rel) {
    const fs::path dir = resolve_in_root(dest, dir_rel, true);
    if (!fs::is_directory(dir)) return;
    for (const auto& child : fs::directory_iterator(dir)) {
      const std::string rel = dir_rel.empty() ? child.path().filename().string()
                                              : dir_rel + "/" + child.path().filename().string();
      if (!layer_paths.contains(rel)) remove_any(child.path());
    }
  }

  void whiteout(const std::string& parent_rel, const std::string& name) {
    const std::string rel = parent_rel.empty() ? name : parent_rel + "/" + name;
    if (layer_paths.contains(rel)) return;
    const fs::path target = resolve_in_root(dest, rel, false);
    if (lexists(target)) remove_any(target);
  }

  void apply(tar::Reader& reader, const tar::Entry& e) {
    const auto cleaned = tar::clean_path(e.path);
    if (!cleaned) fail(ImageErrorKind::PathEscape, "archive entry escapes the image root: " + e.path);
    if (cleaned->empty()) return;
    const std::string& rel = *cleaned;
    const auto slash = rel.rfind('/');
    const std::string parent_rel = slash == std::string::npos ? "" : rel.substr(0, slash);
    const std::string name = slash == std::string::npos ? rel : rel.substr(slash + 1);

    if (name == kOpaqueMarker) {
      opaque(parent_rel);
      return;
    }
    if (name.starts_with(kWhiteoutPrefix)) {
      whiteout(parent_rel, name.substr(kWhiteoutPrefix.size()));
      return;
    }
    if (e.type == tar::EntryType::CharDevice || e.type == tar::EntryType::BlockDevice) {
      report.warnings.push_back("skipping device file: " + rel);
      return;
    }

    const fs::path target = parent_dir(parent_rel) / name;
    struct stat st {};
    const bool exists = ::lstat(target.c_str(), &st) == 0;
    if (exists && !(e.type == tar::EntryType::Directory && S_ISDIR(st.st_mode))) remove_any(target);

    const mode_t bits = e.mode & 07777 & ~mode_t{06000};
    switch (e.type) {
      case tar::EntryType::Directory:
        if (!exists || !S_ISDIR(st.st_mode)) {
          if (::mkdir(target.c_str(), 0700) != 0) fail(ImageErrorKind::Io, "mkdir " + rel + ": " + errno_text(errno));
        }
        ::chmod(target.c_str(), bits | 0700);
        break;
      case tar::EntryType::Regular: {
        // target was removed above, so nothing here can redirect the write
        std::ofstream out(target, std::ios::binary | std::ios::trunc);
        if (!out) fail(ImageErrorKind::Io, "create " + rel + ": " + errno_text(errno));
        reader.copy_data(out);
        out.close();
        if (!out) fail(ImageErrorKind::Io, "write " + rel);
        ::chmod(target.c_str(), bits | 0600);
        break;
      }
      case tar::EntryType::Symlink:
        if (::symlink(e.linkname.c_str(), target.c_str()) != 0) {
          fail(ImageErrorKind::Io, "symlink " + rel + ": " + errno_text(errno));
        }
        break;
      case tar::EntryType::HardLink: {
        const auto link_rel = tar::clean_path(e.linkname);
        if (!link_rel || link_rel->empty()) {
          fail(ImageErrorKind::PathEscape, "hard link target escapes the image root: " + e.linkname);
        }
        const fs::path source = resolve_in_root(dest, *link_rel, false);
        if (::link(source.c_str(), target.c_str()) != 0) {
          fail(ImageErrorKind::ArchiveCorrupt, "hard link " + rel + " -> " + e.linkname + ": " + errno_text(errno));
        }
        break;
      }
      case tar::EntryType::Fifo:
        if (::mkfifo(target.c_str(), bits | 0600) != 0) fail(ImageErrorKind::Io, "mkfifo " + rel + ": " + errno_text(errno));
        break;
      default:
        break;
    }
    if (e.type != tar::EntryType::Directory && e.type != tar::EntryType::HardLink) {
      const timespec times[2] = {{e.mtime, 0}, {e.mtime, 0}};
      ::utimensat(AT_FDCWD, target.c_str(), times, AT_SYMLINK_NOFOLLOW);
    }
    layer_paths.insert(rel);
    ++report.entries;
  }
};

}  // namespace

UnpackReport unpack(std::span<const fs::path> layers, const fs::path& dest) {
  std::error_code ec;
  fs::create_directories(dest, ec);
  if (ec) fail(ImageErrorKind::Io, "cannot create " + dest.string() + ": " + ec.message());
  if (!fs::is_empty(dest)) fail(ImageErrorKind::Io, "unpack destination is not empty: " + dest.string());

  Unpacker u;
  u.dest = dest;
  for (const auto& layer : layers) {
    u.layer_paths.clear();
    try {
      auto in = tar::open_archive(layer);
      tar::Reader reader(*in);
      tar::Entry entry;
      while (reader.next(entry)) u.apply(reader, entry);
    } catch (const tar::ArchiveCorrupt& e) {
      fail(ImageErrorKind::ArchiveCorrupt, layer.filename().string() + ": " + e.what());
    }
  }
  return std::move(u.report);
}

// ---- export ----------------------------------------------------------------

namespace {

struct WalkItem {
  std::string rel;
  fs::path path;
  struct stat st;
};

void walk(const fs::path& root, const std::string& prefix, std::vector<WalkItem>& out, ModeBumps& bumps) {
  std::error_code ec;
  fs::directory_iterator it(root / prefix, ec);
  if (ec) fail(ImageErrorKind::WalkFailed, "cannot read directory " + (root / prefix).string() + ": " + ec.message());
  for (const auto& child : it) {
    WalkItem item;
    item.rel = prefix.empty() ? child.path().filename().string() : prefix + "/" + child.path().filename().string();
    item.path = child.path();
    if (::lstat(item.path.c_str(), &item.st) != 0) {
      fail(ImageErrorKind::WalkFailed, "cannot stat " + item.path.string() + ": " + errno_text(errno));
    }
    const bool dir = S_ISDIR(item.st.st_mode);
    if (dir) bumps.need(item.path, item.st.st_mode, S_IRUSR | S_IXUSR);
    std::string rel = item.rel;
    out.push_back(std::move(item));
    if (dir) walk(root, rel, out, bumps);
  }
}

tar::EntryType entry_type_for(ownerdb::FileKind kind) {
  switch (kind) {
    case ownerdb::FileKind::CharDevice: return tar::EntryType::CharDevice;
    case ownerdb::FileKind::BlockDevice: return tar::EntryType::BlockDevice;
    case ownerdb::FileKind::Fifo: return tar::EntryType::Fifo;
    default: return tar::EntryType::Regular;
  }
}

}  // namespace

ExportResult export_layer(const fs::path& root, const ownerdb::Session* db, std::ostream& out) {
  if (!fs::is_directory(root)) fail(ImageErrorKind::WalkFailed, "not a directory: " + root.string());
  std::vector<WalkItem> items;
  ModeBumps bumps;
  walk(root, "", items, bumps);
  std::sort(items.begin(), items.end(), [](const WalkItem& a, const WalkItem& b) { return a.rel < b.rel; });

  ExportResult result;
  tar::Writer writer(out);
  std::map<ownerdb::FileIdentity, std::string> first_link;
  for (const auto& item : items) {
    const auto& st = item.st;
    const auto identity = ownerdb::identity_of(st);
    const auto record = db ? db->lookup(identity) : std::nullopt;

    tar::Entry e;
    e.path = item.rel;
    e.mtime = 0;
    if (record) {
      e.uid = record->uid;
      e.gid = record->gid;
      e.mode = record->mode_bits & 07777;
    } else {
      e.mode = st.st_mode & 07777 & ~mode_t{06000};
    }

    if (S_ISDIR(st.st_mode)) {
      e.type = tar::EntryType::Directory;
    } else if (S_ISLNK(st.st_mode)) {
      e.type = tar::EntryType::Symlink;
      std::error_code ec;
      e.linkname = fs::read_symlink(item.path, ec).string();
      if (ec) fail(ImageErrorKind::WalkFailed, "readlink " + item.path.string() + ": " + ec.message());
    } else if (S_ISREG(st.st_mode) || S_ISFIFO(st.st_mode)) {
      e.type = S_ISREG(st.st_mode) ? tar::EntryType::Regular : tar::EntryType::Fifo;
      if (record) {
        const auto faked = entry_type_for(record->kind);
        if (faked != tar::EntryType::Regular) e.type = faked;
        if (record->rdev) {
          e.devmajor = major(*record->rdev);
          e.devminor = minor(*record->rdev);
        }
      }
      if (e.type == tar::EntryType::Regular && st.st_nlink > 1) {
        auto [it, inserted] = first_link.try_emplace(identity, item.rel);
        if (!inserted) {
          e.type = tar::EntryType::HardLink;
          e.linkname = it->second;
        }
      }
    } else {
      result.warnings.push_back("skipping special file: " + item.rel);
      continue;
    }

    if (e.type == tar::EntryType::Regular) {
      e.size = static_cast<std::uint64_t>(st.st_size);
      std::ifstream data;
      {
        ModeBumps file_bump;
        file_bump.need(item.path, st.st_mode, S_IRUSR);
        data.open(item.path, std::ios::binary);
      }
      if (!data) fail(ImageErrorKind::WalkFailed, "cannot read " + item.path.string());
      writer.add(e, data);
    } else {
      writer.add(e);
    }
    ++result.entries;
  }
  writer.finish();
  if (!out) fail(ImageErrorKind::Io, "error writing layer archive");
  return result;
}

// ---- config ----------------------------------------------------------------

std::string make_config(const ImageConfig& config, const std::string& diff_id) {
  json cfg;
  cfg["architecture"] = config.architecture.empty() ? host_architecture() : config.architecture;
  cfg["os"] = "linux";
  cfg["created"] = "1970-01-01T00:00:00Z";
  json inner = json::object();
  if (!config.env.empty()) inner["Env"] = config.env;
  if (!config.workdir.empty()) inner["WorkingDir"] = config.workdir;
  cfg["config"] = inner;
  cfg["rootfs"] = {{"type", "layers"}, {"diff_ids", json::array({diff_id})}};
  cfg["history"] = json::array({json{{"created", "1970-01-01T00:00:00Z"}, {"created_by", "nsbuild"}}});
  return cfg.dump();
}

ImageConfig parse_config(std::string_view text) {
  ImageConfig out;
  json cfg;
  try {
    cfg = json::parse(text);
  } catch (const json::exception& e) {
    fail(ImageErrorKind::ArchiveCorrupt, std::string("malformed image config: ") + e.what());
  }
  if (!cfg.is_object()) fail(ImageErrorKind::ArchiveCorrupt, "malformed image config: not an object");
  out.architecture = cfg.value("architecture", "");
  if (auto it = cfg.find("config"); it != cfg.end() && it->is_object()) {
    if (auto env = it->find("Env"); env != it->end() && env->is_array()) {
      for (const auto& v : *env) {
        if (v.is_string()) out.env.push_back(v.get<std::string>());
      }
    }
    if (auto wd = it->find("WorkingDir"); wd != it->end() && wd->is_string()) out.workdir = wd->get<std::string>();
  }
  return out;
}

std::string host_architecture() {
  struct utsname u {};
  ::uname(&u);
  const std::string m = u.machine;
  if (m == "x86_64") return "amd64";
  if (m == "aarch64") return "arm64";
  if (m == "i686" || m == "i386") return "386";
  if (m.starts_with("armv7")) return "arm";
  return m;
}

// ---- snapshot --------------------------------------------------------------

namespace {

void copy_tree(const fs::path& src, const fs::path& dest, std::map<ownerdb::FileIdentity, fs::path>& links) {
  std::error_code iter_ec;
  fs::directory_iterator children(src, iter_ec);
  if (iter_ec) fail(ImageErrorKind::CopyFailed, "cannot read directory " + src.string() + ": " + iter_ec.message());
  for (const auto& child : children) {
    const fs::path from = child.path();
    const fs::path to = dest / from.filename();
    struct stat st {};
    if (::lstat(from.c_str(), &st) != 0) fail(ImageErrorKind::CopyFailed, "stat " + from.string() + ": " + errno_text(errno));
    const mode_t bits = st.st_mode & 07777;
    if (S_ISDIR(st.st_mode)) {
      if (::mkdir(to.c_str(), 0700) != 0) fail(ImageErrorKind::CopyFailed, "mkdir " + to.string() + ": " + errno_text(errno));
      ModeBumps bump;
      bump.need(from, st.st_mode, S_IRUSR | S_IXUSR);
      copy_tree(from, to, links);
      ::chmod(to.c_str(), bits);
    } else if (S_ISLNK(st.st_mode)) {
      std::error_code ec;
      fs::copy_symlink(from, to, ec);
      if (ec) fail(ImageErrorKind::CopyFailed, "symlink " + to.string() + ": " + ec.message());
    } else if (S_ISREG(st.st_mode)) {
      const auto id = ownerdb::identity_of(st);
      if (st.st_nlink > 1) {
        if (auto it = links.find(id); it != links.end()) {
          if (::link(it->second.c_str(), to.c_str()) != 0) {
            fail(ImageErrorKind::CopyFailed, "link " + to.string() + ": " + errno_text(errno));
          }
          continue;
        }
        links.emplace(id, to);
      }
      std::error_code ec;
      ModeBumps bump;
      bump.need(from, st.st_mode, S_IRUSR);
      fs::copy_file(from, to, fs::copy_options::none, ec);
      if (ec) fail(ImageErrorKind::CopyFailed, "copy " + from.string() + ": " + ec.message());
      ::chmod(to.c_str(), bits);
    } else if (S_ISFIFO(st.st_mode)) {
      if (::mkfifo(to.c_str(), bits) != 0) fail(ImageErrorKind::CopyFailed, "mkfifo " + to.string() + ": " + errno_text(errno));
    } else {
      continue;  // sockets and devices are not copied
    }
    const timespec times[2] = {st.st_atim, st.st_mtim};
    ::utimensat(AT_FDCWD, to.c_str(), times, AT_SYMLINK_NOFOLLOW);
  }
}

}  // namespace

void remove_tree(const fs::path& p) {
  struct stat st {};
  if (::lstat(p.c_str(), &st) != 0) {
    if (errno == ENOENT) return;
    fail(ImageErrorKind::Io, "cannot remove " + p.string() + ": " + errno_text(errno));
  }
  if (S_ISDIR(st.st_mode)) {
    if ((st.st_mode & S_IRWXU) != S_IRWXU) ::chmod(p.c_str(), (st.st_mode | S_IRWXU) & 07777);
    std::error_code ec;
    std::vector<fs::path> children;
    for (fs::directory_iterator it(p, ec), end; !ec && it != end; it.increment(ec)) children.push_back(it->path());
    if (ec) fail(ImageErrorKind::Io, "cannot remove " + p.string() + ": " + ec.message());
    for (const auto& c : children) remove_tree(c);
    if (::rmdir(p.c_str()) != 0) fail(ImageErrorKind::Io, "cannot remove " + p.string() + ": " + errno_text(errno));
  } else if (::unlink(p.c_str()) != 0) {
    fail(ImageErrorKind::Io, "cannot remove " + p.string() + ": " + errno_text(errno));
  }
}

void snapshot(const fs::path& src, const fs::path& dest) {
  std::error_code ec;
  if (!fs::is_directory(src, ec)) fail(ImageErrorKind::CopyFailed, "snapshot source is not a directory: " + src.string());
  if (fs::exists(dest, ec) && fs::equivalent(src, dest, ec)) {
    fail(ImageErrorKind::CopyFailed, "snapshot source and destination are the same: " + src.string());
  }
  const auto src_abs = fs::weakly_canonical(src);
  const auto dest_abs = fs::weakly_canonical(dest);
  const auto rel = dest_abs.lexically_relative(src_abs);
  if (!rel.empty() && *rel.begin() != "..") {
    fail(ImageErrorKind::CopyFailed, "snapshot destination is inside the source: " + dest.string());
  }
  if (fs::exists(dest) && !fs::is_empty(dest)) fail(ImageErrorKind::CopyFailed, "snapshot destination is not empty: " + dest.string());
  fs::create_directories(dest, ec);
  if (ec) fail(ImageErrorKind::CopyFailed, "cannot create " + dest.string() + ": " + ec.message());
  std::map<ownerdb::FileIdentity, fs::path> links;
  copy_tree(src, dest, links);
  struct stat st {};
  if (::stat(src.c_str(), &st) == 0) ::chmod(dest.c_str(), st.st_mode & 07777);
}

// ---- locks and store -------------------------------------------------------

FileLock::FileLock(const fs::path& path) {
  std::error_code ec;
  fs::create_directories(path.parent_path(), ec);
  fd_ = ::open(path.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
  if (fd_ < 0) fail(ImageErrorKind::Io, "cannot open lock " + path.string() + ": " + errno_text(errno));
  while (::flock(fd_, LOCK_EX) != 0) {
    if (errno != EINTR) {
      const int err = errno;
      ::close(fd_);
      fail(ImageErrorKind::Io, "cannot lock " + path.string() + ": " + errno_text(err));
    }
  }
}

FileLock::~FileLock() {
  if (fd_ >= 0) ::close(fd_);
}

Store::Store(fs::path root) : root_(std::move(root)) {
  for (const char* sub : {"imgs", "dl/sha256", "locks", "tmp"}) {
    std::error_code ec;
    fs::create_directories(root_ / sub, ec);
    if (ec) fail(ImageErrorKind::Io, "cannot create store directory " + (root_ / sub).string() + ": " + ec.message());
  }
}

fs::path Store::image_root(const ImageRef& ref) const { return root_ / "imgs" / ref.encoded(); }
fs::path Store::meta_path(const ImageRef& ref) const { return root_ / "imgs" / (ref.encoded() + ".meta.json"); }
fs::path Store::ownerdb_path(const ImageRef& ref) const { return root_ / "imgs" / (ref.encoded() + ".ownerdb"); }
fs::path Store::lock_path(std::string_view name) const { return root_ / "locks" / (std::string(name) + ".lock"); }
fs::path Store::temp_dir() const { return root_ / "tmp"; }

fs::path Store::blob_path(std::string_view digest) const {
  if (!is_sha256_digest(digest)) fail(ImageErrorKind::NotFound, "invalid digest: " + std::string(digest));
  return root_ / "dl" / "sha256" / std::string(digest.substr(7));
}

bool Store::has_blob(std::string_view digest) const { return is_sha256_digest(digest) && fs::exists(blob_path(digest)); }

std::string Store::read_blob(std::string_view digest) const {
  std::ifstream in(blob_path(digest), std::ios::binary);
  if (!in) fail(ImageErrorKind::NotFound, "blob not in store: " + std::string(digest));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string Store::put_blob(std::string_view bytes) {
  const auto digest = sha256_digest(bytes);
  if (has_blob(digest)) return digest;
  char tmpl[] = "blob-XXXXXX";
  const fs::path tmp = temp_dir() / tmpl;
  std::string name = tmp.string();
  UniqueFd fd(::mkstemp(name.data()));
  if (!fd) fail(ImageErrorKind::Io, "cannot create temp blob: " + errno_text(errno));
  if (!posix::write_all(fd.get(), bytes.data(), bytes.size()) || ::fsync(fd.get()) != 0) {
    ::unlink(name.c_str());
    fail(ImageErrorKind::Io, "cannot write temp blob: " + errno_text(errno));
  }
  fd.reset();
  commit_blob(name, digest);
  return digest;
}

void Store::commit_blob(const fs::path& file, std::string_view digest) {
  const auto actual = sha256_file_digest(file);
  if (actual != digest) {
    fs::remove(file);
    fail(ImageErrorKind::ArchiveCorrupt, "blob digest mismatch: expected " + std::string(digest) + ", got " + actual);
  }
  ::chmod(file.c_str(), 0644);
  std::error_code ec;
  fs::rename(file, blob_path(digest), ec);
  if (ec) fail(ImageErrorKind::Io, "cannot commit blob " + std::string(digest) + ": " + ec.message());
}

bool Store::has_image(const ImageRef& ref) const { return fs::is_directory(image_root(ref)) && fs::exists(meta_path(ref)); }

std::optional<ImageMeta> Store::read_meta(const ImageRef& ref) const {
  std::ifstream in(meta_path(ref));
  if (!in) return std::nullopt;
  try {
    const auto j = json::parse(in);
    ImageMeta m;
    m.ref = j.at("ref").get<std::string>();
    m.manifest_digest = j.at("manifest_digest").get<std::string>();
    m.config_digest = j.at("config_digest").get<std::string>();
    m.manifest_media_type = j.value("manifest_media_type", "");
    return m;
  } catch (const json::exception& e) {
    fail(ImageErrorKind::Io, "malformed metadata " + meta_path(ref).string() + ": " + e.what());
  }
}

void Store::write_meta(const ImageRef& ref, const ImageMeta& meta) {
  const json j = {{"ref", meta.ref},
                  {"manifest_digest", meta.manifest_digest},
                  {"config_digest", meta.config_digest},
                  {"manifest_media_type", meta.manifest_media_type}};
  const fs::path path = meta_path(ref);
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    out << j.dump(2) << '\n';
    if (!out) fail(ImageErrorKind::Io, "cannot write " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) fail(ImageErrorKind::Io, "cannot write " + path.string() + ": " + ec.message());
}

std::vector<ImageMeta> Store::list() const {
  std::vector<ImageMeta> out;
  for (const auto& entry : fs::directory_iterator(root_ / "imgs")) {
    const auto name = entry.path().filename().string();
    constexpr std::string_view kSuffix = ".meta.json";
    if (!name.ends_with(kSuffix)) continue;
    std::ifstream in(entry.path());
    try {
      const auto j = json::parse(in);
      out.push_back({j.at("ref").get<std::string>(), j.at("manifest_digest").get<std::string>(),
                     j.at("config_digest").get<std::string>(), j.value("manifest_media_type", "")});
    } catch (const json::exception&) {
      continue;
    }
  }
  std::sort(out.begin(), out.end(), [](const ImageMeta& a, const ImageMeta& b) { return a.ref < b.ref; });
  return out;
}

std::string default_store_path() {
  if (const char* env = std::getenv("NSBUILD_STORAGE"); env && *env) return env;
  if (const char* xdg = std::getenv("XDG_CACHE_HOME"); xdg && *xdg) return std::string(xdg) + "/nsbuild";
  if (const char* home = std::getenv("HOME"); home && *home) return std::string(home) + "/.cache/nsbuild";
  return "/tmp/nsbuild-" + std::to_string(::getuid());
}

}  // namespace nsbuild::image
