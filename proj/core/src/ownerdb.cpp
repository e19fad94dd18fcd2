#include "nsbuild/ownerdb.hpp"

#include <fcntl.h>
#include <poll.h>
#include <sys/socket.h>
#include <sys/stat.h>
#include <sys/un.h>

#include <array>
#include <cstring>
#include <fstream>
#include <iterator>

#include "posix.hpp"

namespace nsbuild::ownerdb {

namespace {

using posix::get_le;
using posix::put_le;
using posix::UniqueFd;

constexpr std::array<std::uint8_t, 8> kMagic = {'N', 'S', 'B', 'O', 'D', 'B', 0, 1};
constexpr std::uint8_t kOpUpsert = 1;
constexpr std::uint8_t kOpErase = 2;
constexpr std::uint32_t kMaxFrame = 64;

void put_identity(std::vector<std::uint8_t>& out, const FileIdentity& id) {
  put_le(out, id.device, 8);
  put_le(out, id.inode, 8);
}

FileIdentity get_identity(const std::uint8_t* p) { return {get_le(p, 8), get_le(p + 8, 8)}; }

std::vector<std::uint8_t> frame(std::uint8_t op, const FileIdentity& id, const OwnershipRecord* record) {
  std::vector<std::uint8_t> body;
  body.push_back(op);
  put_identity(body, id);
  if (record != nullptr) {
    const auto rec = protocol::encode_record(*record);
    body.insert(body.end(), rec.begin(), rec.end());
  }
  std::vector<std::uint8_t> out;
  put_le(out, body.size(), 4);
  out.insert(out.end(), body.begin(), body.end());
  return out;
}

}  // namespace

bool is_device(FileKind kind) { return kind == FileKind::CharDevice || kind == FileKind::BlockDevice; }

std::optional<FileKind> kind_from_byte(std::uint8_t b) {
  if (b < NSB_KIND_REGULAR || b > NSB_KIND_SOCKET) return std::nullopt;
  return static_cast<FileKind>(b);
}

FileKind kind_from_mode(mode_t mode) {
  switch (mode & S_IFMT) {
    case S_IFDIR: return FileKind::Directory;
    case S_IFLNK: return FileKind::Symlink;
    case S_IFCHR: return FileKind::CharDevice;
    case S_IFBLK: return FileKind::BlockDevice;
    case S_IFIFO: return FileKind::Fifo;
    case S_IFSOCK: return FileKind::Socket;
    default: return FileKind::Regular;
  }
}

mode_t mode_type_bits(FileKind kind) {
  switch (kind) {
    case FileKind::Regular: return S_IFREG;
    case FileKind::Directory: return S_IFDIR;
    case FileKind::Symlink: return S_IFLNK;
    case FileKind::CharDevice: return S_IFCHR;
    case FileKind::BlockDevice: return S_IFBLK;
    case FileKind::Fifo: return S_IFIFO;
    case FileKind::Socket: return S_IFSOCK;
  }
  return S_IFREG;
}

bool OwnershipRecord::valid() const { return (mode_bits & ~07777u) == 0 && rdev.has_value() == is_device(kind); }

CorruptJournal::CorruptJournal(std::uint64_t offset, const std::string& why)
    : OwnerDbError(OwnerDbErrorKind::CorruptJournal,
                   "corrupt ownership journal at byte offset " + std::to_string(offset) + ": " + why),
      offset_(offset) {}

// --- protocol ---------------------------------------------------------------

namespace protocol {

std::vector<std::uint8_t> encode_record(const OwnershipRecord& r) {
  std::vector<std::uint8_t> out;
  put_le(out, r.uid, 4);
  put_le(out, r.gid, 4);
  put_le(out, r.mode_bits, 4);
  out.push_back(static_cast<std::uint8_t>(r.kind));
  put_le(out, r.rdev.value_or(0), 8);
  return out;
}

std::optional<OwnershipRecord> decode_record(std::span<const std::uint8_t> b) {
  if (b.size() != NSB_RECORD_BYTES) return std::nullopt;
  const auto kind = kind_from_byte(b[12]);
  if (!kind) return std::nullopt;
  OwnershipRecord r;
  r.uid = static_cast<std::uint32_t>(get_le(b.data(), 4));
  r.gid = static_cast<std::uint32_t>(get_le(b.data() + 4, 4));
  r.mode_bits = static_cast<std::uint32_t>(get_le(b.data() + 8, 4));
  r.kind = *kind;
  if (is_device(r.kind)) r.rdev = get_le(b.data() + 13, 8);
  if (!r.valid()) return std::nullopt;
  return r;
}

std::vector<std::uint8_t> encode_request(const Request& req) {
  const bool with_record = req.type == NSB_MSG_SET || req.type == NSB_MSG_MKNOD;
  return frame(req.type, req.id, with_record ? &req.record : nullptr);
}

std::optional<Request> decode_request(std::span<const std::uint8_t> body) {
  if (body.empty()) return std::nullopt;
  Request req;
  req.type = body[0];
  switch (req.type) {
    case NSB_MSG_GET:
    case NSB_MSG_UNLINK:
      if (body.size() != NSB_FRAME_GET_LENGTH) return std::nullopt;
      req.id = get_identity(body.data() + 1);
      return req;
    case NSB_MSG_SET:
    case NSB_MSG_MKNOD: {
      if (body.size() != NSB_FRAME_SET_LENGTH) return std::nullopt;
      req.id = get_identity(body.data() + 1);
      auto rec = decode_record(body.subspan(1 + NSB_IDENTITY_BYTES));
      if (!rec) return std::nullopt;
      req.record = *rec;
      return req;
    }
    default:
      return std::nullopt;
  }
}

}  // namespace protocol

// --- session ----------------------------------------------------------------

Session::Session(Session&& other) noexcept
    : store_(std::move(other.store_)),
      journal_path_(std::move(other.journal_path_)),
      journal_fd_(std::exchange(other.journal_fd_, -1)) {}

Session& Session::operator=(Session&& other) noexcept {
  if (this != &other) {
    if (journal_fd_ >= 0) ::close(journal_fd_);
    store_ = std::move(other.store_);
    journal_path_ = std::move(other.journal_path_);
    journal_fd_ = std::exchange(other.journal_fd_, -1);
  }
  return *this;
}

Session::~Session() {
  if (journal_fd_ >= 0) ::close(journal_fd_);
}

Session Session::load(const std::filesystem::path& journal_path) {
  Session s;
  s.journal_path_ = journal_path;

  std::error_code ec;
  const bool fresh = !std::filesystem::exists(journal_path) || std::filesystem::file_size(journal_path, ec) == 0;
  std::ifstream in(journal_path, std::ios::binary);
  if (in && !fresh) {
    const std::vector<std::uint8_t> data{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    if (data.size() < kMagic.size() || !std::equal(kMagic.begin(), kMagic.end(), data.begin())) {
      throw CorruptJournal(0, "bad magic or unsupported version");
    }
    std::size_t off = kMagic.size();
    while (off < data.size()) {
      if (data.size() - off < 4) throw CorruptJournal(off, "truncated record length");
      const auto len = static_cast<std::uint32_t>(get_le(data.data() + off, 4));
      if (len == 0 || len > kMaxFrame) throw CorruptJournal(off, "implausible record length " + std::to_string(len));
      if (data.size() - off - 4 < len) throw CorruptJournal(off, "truncated record");
      const std::uint8_t* body = data.data() + off + 4;
      const std::uint8_t op = body[0];
      if (op == kOpUpsert && len == NSB_FRAME_SET_LENGTH) {
        auto rec = protocol::decode_record({body + 1 + NSB_IDENTITY_BYTES, NSB_RECORD_BYTES});
        if (!rec) throw CorruptJournal(off, "invalid ownership record");
        s.store_[get_identity(body + 1)] = *rec;
      } else if (op == kOpErase && len == NSB_FRAME_GET_LENGTH) {
        s.store_.erase(get_identity(body + 1));
      } else {
        throw CorruptJournal(off, "unknown record type " + std::to_string(op));
      }
      off += 4 + len;
    }
  }

  s.journal_fd_ = ::open(journal_path.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
  if (s.journal_fd_ < 0) {
    throw OwnerDbError(OwnerDbErrorKind::JournalWriteFailed,
                       "cannot open journal " + journal_path.string() + ": " + posix::errno_text(errno));
  }
  if (fresh) s.append(kMagic);
  return s;
}

void Session::append(std::span<const std::uint8_t> bytes) {
  if (journal_fd_ < 0) return;
  if (!posix::write_all(journal_fd_, bytes)) {
    throw OwnerDbError(OwnerDbErrorKind::JournalWriteFailed,
                       "journal write to " + journal_path_.string() + " failed: " + posix::errno_text(errno));
  }
}

void Session::upsert(const FileIdentity& id, const OwnershipRecord& record) {
  if (!record.valid()) throw OwnerDbError(OwnerDbErrorKind::InvalidRecord, "invalid ownership record");
  append(frame(kOpUpsert, id, &record));
  store_[id] = record;
}

void Session::erase(const FileIdentity& id) {
  if (!store_.contains(id)) return;
  append(frame(kOpErase, id, nullptr));
  store_.erase(id);
}

std::optional<OwnershipRecord> Session::lookup(const FileIdentity& id) const {
  if (auto it = store_.find(id); it != store_.end()) return it->second;
  return std::nullopt;
}

void Session::save() {
  if (journal_path_.empty()) return;
  auto tmp = journal_path_;
  tmp += ".tmp";
  UniqueFd fd(::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644));
  if (!fd) {
    throw OwnerDbError(OwnerDbErrorKind::JournalWriteFailed, "cannot write " + tmp.string() + ": " + posix::errno_text(errno));
  }
  std::vector<std::uint8_t> out(kMagic.begin(), kMagic.end());
  for (const auto& [id, rec] : store_) {
    const auto f = frame(kOpUpsert, id, &rec);
    out.insert(out.end(), f.begin(), f.end());
  }
  if (!posix::write_all(fd.get(), out) || ::fsync(fd.get()) != 0) {
    throw OwnerDbError(OwnerDbErrorKind::JournalWriteFailed, "cannot write " + tmp.string() + ": " + posix::errno_text(errno));
  }
  fd.reset();
  std::filesystem::rename(tmp, journal_path_);
  if (journal_fd_ >= 0) ::close(journal_fd_);
  journal_fd_ = ::open(journal_path_.c_str(), O_WRONLY | O_APPEND | O_CLOEXEC);
  if (journal_fd_ < 0) {
    throw OwnerDbError(OwnerDbErrorKind::JournalWriteFailed, "cannot reopen journal: " + posix::errno_text(errno));
  }
}

// --- stat rewriting -----------------------------------------------------------

StatView stat_view(const struct stat& st) {
  return {st.st_uid,
          st.st_gid,
          st.st_mode,
          static_cast<std::uint64_t>(st.st_rdev),
          static_cast<std::uint64_t>(st.st_size),
          static_cast<std::uint64_t>(st.st_nlink),
          static_cast<std::int64_t>(st.st_mtime)};
}

FileIdentity identity_of(const struct stat& st) {
  return {static_cast<std::uint64_t>(st.st_dev), static_cast<std::uint64_t>(st.st_ino)};
}

StatView rewrite_stat(const StatView& real, const std::optional<OwnershipRecord>& record) {
  StatView out = real;
  if (!record) {
    out.uid = 0;
    out.gid = 0;
    return out;
  }
  out.uid = record->uid;
  out.gid = record->gid;
  out.mode = mode_type_bits(record->kind) | (record->mode_bits & 07777);
  out.rdev = is_device(record->kind) ? *record->rdev : 0;
  return out;
}

// --- service --------------------------------------------------------------------

Service::Service(Session& session, std::filesystem::path socket_path)
    : session_(session), socket_path_(std::move(socket_path)) {
  sockaddr_un addr{};
  addr.sun_family = AF_UNIX;
  if (socket_path_.native().size() >= sizeof(addr.sun_path)) {
    throw OwnerDbError(OwnerDbErrorKind::BindFailed, "socket path too long: " + socket_path_.string());
  }
  std::strcpy(addr.sun_path, socket_path_.c_str());

  UniqueFd fd(::socket(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0));
  if (!fd || ::bind(fd.get(), reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0 || ::listen(fd.get(), 64) != 0) {
    throw OwnerDbError(OwnerDbErrorKind::BindFailed,
                       "cannot listen on " + socket_path_.string() + ": " + posix::errno_text(errno));
  }
  if (::pipe2(wake_fds_, O_CLOEXEC) != 0) {
    ::unlink(socket_path_.c_str());
    throw OwnerDbError(OwnerDbErrorKind::BindFailed, "pipe: " + posix::errno_text(errno));
  }
  listen_fd_ = fd.release();
  worker_ = std::thread([this] { loop(); });
}

Service::~Service() { stop(); }

void Service::stop() {
  if (stopped_) return;
  stopped_ = true;
  const char b = 'x';
  (void)!::write(wake_fds_[1], &b, 1);
  if (worker_.joinable()) worker_.join();
  ::close(listen_fd_);
  ::close(wake_fds_[0]);
  ::close(wake_fds_[1]);
  ::unlink(socket_path_.c_str());
}

void Service::loop() {
  struct Conn {
    UniqueFd fd;
    std::vector<std::uint8_t> buf;
  };
  std::vector<Conn> conns;

  while (true) {
    std::vector<pollfd> fds;
    fds.push_back({wake_fds_[0], POLLIN, 0});
    fds.push_back({listen_fd_, POLLIN, 0});
    for (const auto& c : conns) fds.push_back({c.fd.get(), POLLIN, 0});
    if (::poll(fds.data(), fds.size(), -1) < 0) {
      if (errno == EINTR) continue;
      return;
    }
    if (fds[0].revents != 0) return;
    if (fds[1].revents & POLLIN) {
      int cfd = ::accept4(listen_fd_, nullptr, nullptr, SOCK_CLOEXEC);
      if (cfd >= 0) conns.push_back({UniqueFd(cfd), {}});
    }

    std::vector<bool> drop(conns.size(), false);
    for (size_t i = 0; i < conns.size() && i + 2 < fds.size(); ++i) {
      if (fds[i + 2].revents == 0) continue;
      Conn& c = conns[i];
      std::uint8_t tmp[512];
      const ssize_t n = ::read(c.fd.get(), tmp, sizeof tmp);
      if (n <= 0) {
        drop[i] = true;
        continue;
      }
      c.buf.insert(c.buf.end(), tmp, tmp + n);

      while (c.buf.size() >= 4) {
        const auto len = static_cast<std::uint32_t>(get_le(c.buf.data(), 4));
        std::optional<protocol::Request> req;
        if (len <= kMaxFrame) {
          if (c.buf.size() < 4 + len) break;
          req = protocol::decode_request({c.buf.data() + 4, len});
        }
        if (!req) {
          ++errors_;
          const std::uint8_t status = NSB_STATUS_MALFORMED;
          posix::send_all(c.fd.get(), &status, 1);
          drop[i] = true;
          break;
        }
        c.buf.erase(c.buf.begin(), c.buf.begin() + 4 + len);
        ++messages_;

        std::vector<std::uint8_t> reply;
        try {
          switch (req->type) {
            case NSB_MSG_GET:
              if (auto rec = session_.lookup(req->id)) {
                reply.push_back(NSB_STATUS_PRESENT);
                const auto bytes = protocol::encode_record(*rec);
                reply.insert(reply.end(), bytes.begin(), bytes.end());
              } else {
                reply.push_back(NSB_STATUS_ABSENT);
              }
              break;
            case NSB_MSG_SET:
            case NSB_MSG_MKNOD:
              session_.upsert(req->id, req->record);
              reply.push_back(NSB_STATUS_OK);
              break;
            case NSB_MSG_UNLINK:
              session_.erase(req->id);
              reply.push_back(NSB_STATUS_OK);
              break;
          }
        } catch (const OwnerDbError&) {
          // Journal failure: do not acknowledge. The shim fails the call.
          ++errors_;
          drop[i] = true;
          break;
        }
        if (!posix::send_all(c.fd.get(), reply)) {
          drop[i] = true;
          break;
        }
      }
    }
    for (size_t i = conns.size(); i-- > 0;) {
      if (drop[i]) conns.erase(conns.begin() + static_cast<std::ptrdiff_t>(i));
    }
  }
}

// --- client -------------------------------------------------------------------------

Client::Client(const std::filesystem::path& socket_path) {
  sockaddr_un addr{};
  addr.sun_family = AF_UNIX;
  std::strncpy(addr.sun_path, socket_path.c_str(), sizeof(addr.sun_path) - 1);
  fd_ = ::socket(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0);
  if (fd_ < 0 || ::connect(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
    const int err = errno;
    if (fd_ >= 0) ::close(fd_);
    throw OwnerDbError(OwnerDbErrorKind::Io, "cannot connect to " + socket_path.string() + ": " + posix::errno_text(err));
  }
}

Client::~Client() {
  if (fd_ >= 0) ::close(fd_);
}

std::optional<std::uint8_t> Client::send_raw(std::span<const std::uint8_t> bytes) {
  if (!posix::send_all(fd_, bytes)) return std::nullopt;
  std::uint8_t status = 0;
  if (posix::read_full(fd_, &status, 1) != 1) return std::nullopt;
  return status;
}

std::uint8_t Client::roundtrip(const protocol::Request& request, OwnershipRecord* out) {
  const auto status = send_raw(protocol::encode_request(request));
  if (!status) throw OwnerDbError(OwnerDbErrorKind::Io, "ownership service closed the connection");
  if (*status == NSB_STATUS_PRESENT) {
    std::array<std::uint8_t, NSB_RECORD_BYTES> rec{};
    if (posix::read_full(fd_, rec.data(), rec.size()) != static_cast<ssize_t>(rec.size())) {
      throw OwnerDbError(OwnerDbErrorKind::Io, "short record from ownership service");
    }
    auto decoded = protocol::decode_record(rec);
    if (!decoded) throw OwnerDbError(OwnerDbErrorKind::Io, "invalid record from ownership service");
    if (out != nullptr) *out = *decoded;
  } else if (*status == NSB_STATUS_MALFORMED) {
    throw OwnerDbError(OwnerDbErrorKind::Io, "ownership service rejected the message");
  }
  return *status;
}

std::optional<OwnershipRecord> Client::get(const FileIdentity& id) {
  OwnershipRecord rec;
  if (roundtrip({NSB_MSG_GET, id, {}}, &rec) == NSB_STATUS_PRESENT) return rec;
  return std::nullopt;
}

void Client::set(const FileIdentity& id, const OwnershipRecord& record) { roundtrip({NSB_MSG_SET, id, record}, nullptr); }

void Client::mknod(const FileIdentity& id, const OwnershipRecord& record) {
  roundtrip({NSB_MSG_MKNOD, id, record}, nullptr);
}

void Client::unlink(const FileIdentity& id) { roundtrip({NSB_MSG_UNLINK, id, {}}, nullptr); }

}  // namespace nsbuild::ownerdb
