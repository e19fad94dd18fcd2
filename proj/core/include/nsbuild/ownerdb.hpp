#pragma once

#include <sys/stat.h>
#include <sys/types.h>

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "nsbuild/error.hpp"
#include "nsbuild/shim_abi.h"

namespace nsbuild::ownerdb {

struct FileIdentity {
  std::uint64_t device = 0;
  std::uint64_t inode = 0;
  auto operator<=>(const FileIdentity&) const = default;
};

enum class FileKind : std::uint8_t {
  Regular = NSB_KIND_REGULAR,
  Directory = NSB_KIND_DIRECTORY,
  Symlink = NSB_KIND_SYMLINK,
  CharDevice = NSB_KIND_CHAR_DEVICE,
  BlockDevice = NSB_KIND_BLOCK_DEVICE,
  Fifo = NSB_KIND_FIFO,
  Socket = NSB_KIND_SOCKET,
};

bool is_device(FileKind kind);
std::optional<FileKind> kind_from_byte(std::uint8_t b);
FileKind kind_from_mode(mode_t mode);
mode_t mode_type_bits(FileKind kind);

// The faked metadata for one file. rdev is set exactly for device kinds;
// the constructor-free aggregate is checked by valid().
struct OwnershipRecord {
  std::uint32_t uid = 0;
  std::uint32_t gid = 0;
  std::uint32_t mode_bits = 0;  // 07777 subset
  FileKind kind = FileKind::Regular;
  std::optional<std::uint64_t> rdev;

  bool valid() const;
  bool operator==(const OwnershipRecord&) const = default;
};

enum class OwnerDbErrorKind { JournalWriteFailed, CorruptJournal, BindFailed, InvalidRecord, Io };

class OwnerDbError : public KindedError<OwnerDbErrorKind> {
 public:
  using KindedError::KindedError;
};

class CorruptJournal : public OwnerDbError {
 public:
  CorruptJournal(std::uint64_t offset, const std::string& why);
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

using Store = std::map<FileIdentity, OwnershipRecord>;

// Store plus an append-only journal. Every mutation reaches the journal
// before it is acknowledged; load() replays it.
//
// Journal: 8-byte magic "NSBODB\0" + version byte, then records
// [u32 LE length][u8 op][u64 dev][u64 ino][21-byte record if op is upsert].
class Session {
 public:
  // Opens (replaying) or creates the journal at `journal_path`.
  static Session load(const std::filesystem::path& journal_path);
  // In-memory only; save() and mutations do not touch disk.
  Session() = default;

  Session(Session&&) noexcept;
  Session& operator=(Session&&) noexcept;
  Session(const Session&) = delete;
  Session& operator=(const Session&) = delete;
  ~Session();

  void upsert(const FileIdentity& id, const OwnershipRecord& record);
  void erase(const FileIdentity& id);
  std::optional<OwnershipRecord> lookup(const FileIdentity& id) const;

  const Store& store() const { return store_; }
  const std::filesystem::path& journal_path() const { return journal_path_; }

  // Rewrites the journal compactly (temp file + rename).
  void save();

 private:
  void append(std::span<const std::uint8_t> frame);

  Store store_;
  std::filesystem::path journal_path_;
  int journal_fd_ = -1;
};

// Metadata as the wrapped process sees it.
struct StatView {
  std::uint32_t uid = 0;
  std::uint32_t gid = 0;
  std::uint32_t mode = 0;  // full st_mode, type included
  std::uint64_t rdev = 0;
  std::uint64_t size = 0;
  std::uint64_t nlink = 0;
  std::int64_t mtime = 0;
  bool operator==(const StatView&) const = default;
};

StatView stat_view(const struct stat& st);

// Unrecorded files appear owned by 0:0; recorded ones take their owner,
// mode, kind and device from the record. Size, times and link count pass
// through.
StatView rewrite_stat(const StatView& real, const std::optional<OwnershipRecord>& record);

FileIdentity identity_of(const struct stat& st);

namespace protocol {

struct Request {
  std::uint8_t type = 0;
  FileIdentity id;
  OwnershipRecord record;  // SET / MKNOD
};

std::vector<std::uint8_t> encode_request(const Request& request);
// `body` is the frame without its length prefix. Returns nullopt for any
// frame that is not exactly one well-formed message.
std::optional<Request> decode_request(std::span<const std::uint8_t> body);

std::vector<std::uint8_t> encode_record(const OwnershipRecord& record);
std::optional<OwnershipRecord> decode_record(std::span<const std::uint8_t> bytes);

}  // namespace protocol

// Unix-socket endpoint for the preload shim. One thread multiplexes all
// connections and applies messages one at a time, so mutations are
// totally ordered. The session must outlive the service.
class Service {
 public:
  Service(Session& session, std::filesystem::path socket_path);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  const std::filesystem::path& socket_path() const { return socket_path_; }
  // Stops accepting and joins the worker. After this the session may be
  // used directly again.
  void stop();

  std::uint64_t messages() const { return messages_.load(); }
  std::uint64_t errors() const { return errors_.load(); }

 private:
  void loop();

  Session& session_;
  std::filesystem::path socket_path_;
  int listen_fd_ = -1;
  int wake_fds_[2] = {-1, -1};
  std::thread worker_;
  std::atomic<std::uint64_t> messages_{0};
  std::atomic<std::uint64_t> errors_{0};
  bool stopped_ = false;
};

// Blocking client, used by tests and tooling.
class Client {
 public:
  explicit Client(const std::filesystem::path& socket_path);
  ~Client();
  Client(const Client&) = delete;
  Client& operator=(const Client&) = delete;

  std::optional<OwnershipRecord> get(const FileIdentity& id);
  void set(const FileIdentity& id, const OwnershipRecord& record);
  void mknod(const FileIdentity& id, const OwnershipRecord& record);
  void unlink(const FileIdentity& id);

  // Sends raw bytes and returns the first status byte (or nullopt when the
  // server closed the connection without replying).
  std::optional<std::uint8_t> send_raw(std::span<const std::uint8_t> bytes);

 private:
  std::uint8_t roundtrip(const protocol::Request& request, OwnershipRecord* out);
  int fd_ = -1;
};

}  // namespace nsbuild::ownerdb
