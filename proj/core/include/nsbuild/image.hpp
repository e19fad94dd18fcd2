#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "nsbuild/error.hpp"
#include "nsbuild/ownerdb.hpp"

namespace nsbuild::image {

namespace fs = std::filesystem;

inline constexpr std::string_view kDefaultRegistry = "registry-1.docker.io";

enum class ImageErrorKind { BadReference, ArchiveCorrupt, PathEscape, WalkFailed, CopyFailed, NotFound, Io };

class ImageError : public KindedError<ImageErrorKind> {
 public:
  using KindedError::KindedError;
};

// `[host/]repo[:tag][@digest]`. The registry host is recognised by a dot,
// a colon or the name "localhost" in the first component. Single-component
// names on the default registry live under "library/".
struct ImageRef {
  std::string host{kDefaultRegistry};
  std::string repository;
  std::string tag{"latest"};
  std::optional<std::string> digest;

  static ImageRef parse(std::string_view text);

  // Canonical "host/repository:tag[@digest]".
  std::string str() const;
  // Tag or digest, whichever addresses the manifest.
  std::string reference() const { return digest.value_or(tag); }
  // File-name-safe encoding used for store directories.
  std::string encoded() const;

  bool operator==(const ImageRef&) const = default;
};

// Resolves `relative` under `root` as if `root` were "/": symlinks in the
// path are followed but can never leave `root`. The final component is
// followed only when `follow_last` is set.
fs::path resolve_in_root(const fs::path& root, std::string_view relative, bool follow_last);

struct UnpackReport {
  std::size_t entries = 0;
  std::vector<std::string> warnings;
};

// Applies layer archives in order onto an empty `dest`. Extracted files
// belong to the invoking user, lose setuid/setgid and stay owner-writable.
// Device nodes are skipped with a warning. OCI whiteouts remove files from
// lower layers.
UnpackReport unpack(std::span<const fs::path> layers, const fs::path& dest);

struct ExportResult {
  std::size_t entries = 0;
  std::vector<std::string> warnings;
};

// Writes `root` as one layer archive: entries sorted by path, mtime 0.
// Files with an ownership record carry the recorded owner, mode and kind
// (device records become device entries). All other files become
// root:root without setuid/setgid bits.
ExportResult export_layer(const fs::path& root, const ownerdb::Session* db, std::ostream& out);

struct ImageConfig {
  std::vector<std::string> env;
  std::string workdir;
  std::string architecture;
};

// OCI image config JSON for a single-layer image. Deterministic.
std::string make_config(const ImageConfig& config, const std::string& diff_id);
ImageConfig parse_config(std::string_view json);

// Recursive copy preserving modes, symlinks and hard links within the tree.
void snapshot(const fs::path& src, const fs::path& dest);

// rm -rf that also handles directories the image left without owner access.
// Missing paths are fine.
void remove_tree(const fs::path& p);

// Content-addressed architecture name for the host ("amd64", "arm64", ...).
std::string host_architecture();

struct ImageMeta {
  std::string ref;              // canonical ImageRef::str()
  std::string manifest_digest;  // blob in dl/
  std::string config_digest;    // blob in dl/
  std::string manifest_media_type;
};

// Exclusive advisory lock on a file, released on destruction.
class FileLock {
 public:
  explicit FileLock(const fs::path& path);
  ~FileLock();
  FileLock(const FileLock&) = delete;
  FileLock& operator=(const FileLock&) = delete;

 private:
  int fd_ = -1;
};

// On-disk layout:
//   imgs/<encoded ref>/            unpacked, writable root filesystem
//   imgs/<encoded ref>.meta.json   manifest and config digests for it
//   dl/sha256/<hex>                verified blobs (layers, configs, manifests)
//   locks/                         per-ref and whole-store lock files
class Store {
 public:
  explicit Store(fs::path root);

  const fs::path& root() const { return root_; }
  fs::path image_root(const ImageRef& ref) const;
  fs::path meta_path(const ImageRef& ref) const;
  fs::path ownerdb_path(const ImageRef& ref) const;
  fs::path blob_path(std::string_view digest) const;
  fs::path lock_path(std::string_view name) const;
  // Scratch directory on the same filesystem as dl/, for atomic renames.
  fs::path temp_dir() const;

  bool has_blob(std::string_view digest) const;
  std::string read_blob(std::string_view digest) const;
  // Stores bytes under their own digest; returns it.
  std::string put_blob(std::string_view bytes);
  // Verifies `file` hashes to `digest`, then renames it into place.
  void commit_blob(const fs::path& file, std::string_view digest);

  bool has_image(const ImageRef& ref) const;
  std::optional<ImageMeta> read_meta(const ImageRef& ref) const;
  void write_meta(const ImageRef& ref, const ImageMeta& meta);
  std::vector<ImageMeta> list() const;

 private:
  fs::path root_;
};

std::string default_store_path();

}  // namespace nsbuild::image
