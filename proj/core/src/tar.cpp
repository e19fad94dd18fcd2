#include "nsbuild/tar.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cstring>
#include <fstream>
#include <map>
#include <ostream>
#include <vector>

namespace nsbuild::tar {

namespace {

constexpr std::size_t kBlock = 512;

// Header field offsets (POSIX ustar).
struct Field {
  std::size_t off, len;
};
constexpr Field kName{0, 100}, kMode{100, 8}, kUid{108, 8}, kGid{116, 8}, kSize{124, 12}, kMtime{136, 12},
    kChksum{148, 8}, kType{156, 1}, kLink{157, 100}, kMagic{257, 6}, kVersion{263, 2}, kDevMajor{329, 8},
    kDevMinor{337, 8}, kPrefix{345, 155};

std::string field_string(const char* block, Field f) {
  const char* p = block + f.off;
  return std::string(p, strnlen(p, f.len));
}

std::uint64_t parse_number(const char* block, Field f) {
  const auto* p = reinterpret_cast<const unsigned char*>(block + f.off);
  if (p[0] & 0x80) {
    // base-256
    std::uint64_t v = p[0] & 0x7f;
    for (std::size_t i = 1; i < f.len; ++i) v = (v << 8) | p[i];
    return v;
  }
  std::uint64_t v = 0;
  std::size_t i = 0;
  while (i < f.len && (p[i] == ' ' || p[i] == 0)) ++i;
  for (; i < f.len && p[i] >= '0' && p[i] <= '7'; ++i) v = v * 8 + (p[i] - '0');
  return v;
}

std::uint32_t compute_checksum(const char* block) {
  std::uint32_t sum = 0;
  for (std::size_t i = 0; i < kBlock; ++i) {
    const bool in_chksum = i >= kChksum.off && i < kChksum.off + kChksum.len;
    sum += in_chksum ? ' ' : static_cast<unsigned char>(block[i]);
  }
  return sum;
}

// Octal with NUL terminator; false when the value does not fit.
bool put_octal(char* block, Field f, std::uint64_t v) {
  const std::size_t digits = f.len - 1;
  if (digits < 22 && v >= (std::uint64_t{1} << (3 * digits))) return false;
  for (std::size_t i = digits; i-- > 0;) {
    block[f.off + i] = static_cast<char>('0' + (v & 7));
    v >>= 3;
  }
  block[f.off + digits] = 0;
  return true;
}

void put_string(char* block, Field f, std::string_view s) { std::memcpy(block + f.off, s.data(), std::min(s.size(), f.len)); }

std::map<std::string, std::string> parse_pax(const std::string& data) {
  std::map<std::string, std::string> out;
  std::size_t pos = 0;
  while (pos < data.size()) {
    const auto sp = data.find(' ', pos);
    if (sp == std::string::npos) throw ArchiveCorrupt("malformed pax header");
    std::size_t len = 0;
    try {
      len = std::stoul(data.substr(pos, sp - pos));
    } catch (const std::exception&) {
      throw ArchiveCorrupt("malformed pax record length");
    }
    if (len == 0 || pos + len > data.size() || data[pos + len - 1] != '\n') throw ArchiveCorrupt("malformed pax record");
    const std::string rec = data.substr(sp + 1, pos + len - sp - 2);
    const auto eq = rec.find('=');
    if (eq == std::string::npos) throw ArchiveCorrupt("malformed pax record");
    out[rec.substr(0, eq)] = rec.substr(eq + 1);
    pos += len;
  }
  return out;
}

std::string pax_record(const std::string& key, const std::string& value) {
  // The length prefix counts itself.
  const std::size_t base = key.size() + value.size() + 3;
  std::size_t len = base + 1;
  while (std::to_string(len).size() + base != len) ++len;
  return std::to_string(len) + ' ' + key + '=' + value + '\n';
}

char type_flag(EntryType t) {
  switch (t) {
    case EntryType::Regular: return '0';
    case EntryType::HardLink: return '1';
    case EntryType::Symlink: return '2';
    case EntryType::CharDevice: return '3';
    case EntryType::BlockDevice: return '4';
    case EntryType::Directory: return '5';
    case EntryType::Fifo: return '6';
  }
  return '0';
}

class GzipBuf : public std::streambuf {
 public:
  explicit GzipBuf(std::unique_ptr<std::istream> src) : src_(std::move(src)) {
    std::memset(&zs_, 0, sizeof zs_);
    if (inflateInit2(&zs_, 16 + MAX_WBITS) != Z_OK) throw ArchiveCorrupt("zlib init failed");
  }
  ~GzipBuf() override { inflateEnd(&zs_); }

 protected:
  int_type underflow() override {
    if (gptr() < egptr()) return traits_type::to_int_type(*gptr());
    while (!done_) {
      if (zs_.avail_in == 0) {
        src_->read(in_.data(), static_cast<std::streamsize>(in_.size()));
        zs_.next_in = reinterpret_cast<Bytef*>(in_.data());
        zs_.avail_in = static_cast<uInt>(src_->gcount());
        if (zs_.avail_in == 0) throw ArchiveCorrupt("truncated gzip stream");
      }
      zs_.next_out = reinterpret_cast<Bytef*>(out_.data());
      zs_.avail_out = static_cast<uInt>(out_.size());
      const int rc = inflate(&zs_, Z_NO_FLUSH);
      if (rc == Z_STREAM_END) {
        // Concatenated members are legal gzip.
        if (zs_.avail_in > 0 || src_->peek() != std::char_traits<char>::eof()) {
          inflateReset(&zs_);
        } else {
          done_ = true;
        }
      } else if (rc != Z_OK && rc != Z_BUF_ERROR) {
        throw ArchiveCorrupt(std::string("gzip: ") + (zs_.msg ? zs_.msg : "inflate failed"));
      }
      const std::size_t have = out_.size() - zs_.avail_out;
      if (have > 0) {
        setg(out_.data(), out_.data(), out_.data() + have);
        return traits_type::to_int_type(*gptr());
      }
    }
    return traits_type::eof();
  }

 private:
  std::unique_ptr<std::istream> src_;
  z_stream zs_;
  std::array<char, 1 << 16> in_{};
  std::array<char, 1 << 16> out_{};
  bool done_ = false;
};

class GzipStream : public std::istream {
 public:
  explicit GzipStream(std::unique_ptr<std::istream> src) : std::istream(nullptr), buf_(std::move(src)) { rdbuf(&buf_); }

 private:
  GzipBuf buf_;
};

}  // namespace

// --- reader -----------------------------------------------------------------

Reader::Reader(std::istream& in) : in_(in) {}

bool Reader::read_block(char* block) {
  in_.read(block, kBlock);
  const auto got = in_.gcount();
  if (got == 0) return false;
  if (got != static_cast<std::streamsize>(kBlock)) throw ArchiveCorrupt("truncated header block");
  return true;
}

void Reader::skip_remaining() {
  std::uint64_t n = remaining_ + padding_;
  std::array<char, 8192> buf{};
  while (n > 0) {
    const auto chunk = static_cast<std::streamsize>(std::min<std::uint64_t>(n, buf.size()));
    in_.read(buf.data(), chunk);
    if (in_.gcount() != chunk) throw ArchiveCorrupt("truncated entry data");
    n -= static_cast<std::uint64_t>(chunk);
  }
  remaining_ = padding_ = 0;
}

bool Reader::next(Entry& entry) {
  skip_remaining();
  std::map<std::string, std::string> pax;
  std::string long_name, long_link;

  while (true) {
    std::array<char, kBlock> block{};
    if (!read_block(block.data())) return false;
    if (std::all_of(block.begin(), block.end(), [](char c) { return c == 0; })) return false;

    const auto stored = static_cast<std::uint32_t>(parse_number(block.data(), kChksum));
    if (stored != compute_checksum(block.data())) throw ArchiveCorrupt("header checksum mismatch");

    const char flag = block[kType.off];
    const std::uint64_t size = parse_number(block.data(), kSize);

    if (flag == 'x' || flag == 'g' || flag == 'L' || flag == 'K') {
      remaining_ = size;
      padding_ = (kBlock - size % kBlock) % kBlock;
      std::string data = read_data();
      skip_remaining();
      if (flag == 'x') {
        for (auto& [k, v] : parse_pax(data)) pax[k] = v;
      } else if (flag == 'L') {
        long_name = std::string(data.c_str());
      } else if (flag == 'K') {
        long_link = std::string(data.c_str());
      }
      continue;
    }

    entry = Entry{};
    std::string name = field_string(block.data(), kName);
    if (field_string(block.data(), kMagic).starts_with("ustar")) {
      const std::string prefix = field_string(block.data(), kPrefix);
      if (!prefix.empty()) name = prefix + "/" + name;
    }
    if (!long_name.empty()) name = long_name;
    if (auto it = pax.find("path"); it != pax.end()) name = it->second;
    entry.linkname = field_string(block.data(), kLink);
    if (!long_link.empty()) entry.linkname = long_link;
    if (auto it = pax.find("linkpath"); it != pax.end()) entry.linkname = it->second;

    entry.mode = static_cast<std::uint32_t>(parse_number(block.data(), kMode) & 07777);
    entry.uid = static_cast<std::uint32_t>(parse_number(block.data(), kUid));
    entry.gid = static_cast<std::uint32_t>(parse_number(block.data(), kGid));
    entry.size = size;
    entry.mtime = static_cast<std::int64_t>(parse_number(block.data(), kMtime));
    entry.devmajor = static_cast<std::uint32_t>(parse_number(block.data(), kDevMajor));
    entry.devminor = static_cast<std::uint32_t>(parse_number(block.data(), kDevMinor));
    try {
      if (auto it = pax.find("size"); it != pax.end()) entry.size = std::stoull(it->second);
      if (auto it = pax.find("uid"); it != pax.end()) entry.uid = static_cast<std::uint32_t>(std::stoul(it->second));
      if (auto it = pax.find("gid"); it != pax.end()) entry.gid = static_cast<std::uint32_t>(std::stoul(it->second));
      if (auto it = pax.find("mtime"); it != pax.end()) entry.mtime = std::stoll(it->second);
    } catch (const std::exception&) {
      throw ArchiveCorrupt("malformed pax numeric value");
    }

    switch (flag) {
      case '0': case '\0': case '7': entry.type = EntryType::Regular; break;
      case '1': entry.type = EntryType::HardLink; break;
      case '2': entry.type = EntryType::Symlink; break;
      case '3': entry.type = EntryType::CharDevice; break;
      case '4': entry.type = EntryType::BlockDevice; break;
      case '5': entry.type = EntryType::Directory; break;
      case '6': entry.type = EntryType::Fifo; break;
      default:
        throw ArchiveCorrupt(std::string("unsupported entry type '") + flag + "' for " + name);
    }
    if (entry.type != EntryType::Regular) entry.size = 0;
    while (name.size() > 1 && name.back() == '/') name.pop_back();
    entry.path = std::move(name);

    remaining_ = entry.size;
    padding_ = (kBlock - entry.size % kBlock) % kBlock;
    return true;
  }
}

std::string Reader::read_data() {
  std::string data(remaining_, '\0');
  in_.read(data.data(), static_cast<std::streamsize>(remaining_));
  if (static_cast<std::uint64_t>(in_.gcount()) != remaining_) throw ArchiveCorrupt("truncated entry data");
  remaining_ = 0;
  return data;
}

void Reader::copy_data(std::ostream& out) {
  std::array<char, 1 << 16> buf{};
  while (remaining_ > 0) {
    const auto chunk = static_cast<std::streamsize>(std::min<std::uint64_t>(remaining_, buf.size()));
    in_.read(buf.data(), chunk);
    if (in_.gcount() != chunk) throw ArchiveCorrupt("truncated entry data");
    out.write(buf.data(), chunk);
    remaining_ -= static_cast<std::uint64_t>(chunk);
  }
}

// --- writer -----------------------------------------------------------------

Writer::Writer(std::ostream& out) : out_(out) {}

void Writer::write_padding(std::uint64_t size) {
  static const std::array<char, kBlock> zeros{};
  const auto pad = (kBlock - size % kBlock) % kBlock;
  out_.write(zeros.data(), static_cast<std::streamsize>(pad));
}

void Writer::write_header(const Entry& e) {
  std::string name = e.path;
  if (e.type == EntryType::Directory && !name.ends_with('/')) name += '/';
  const std::uint64_t size = e.type == EntryType::Regular ? e.size : 0;

  std::array<char, kBlock> block{};
  std::string pax;
  std::string ustar_name = name, ustar_prefix;
  if (name.size() > kName.len) {
    // Split at a '/' so the prefix fits in 155 bytes and the rest in 100.
    bool split = false;
    for (std::size_t i = std::min(name.size() - 1, kPrefix.len); i > 0; --i) {
      if (name[i] == '/' && name.size() - i - 1 <= kName.len && name.size() - i - 1 > 0) {
        ustar_prefix = name.substr(0, i);
        ustar_name = name.substr(i + 1);
        split = true;
        break;
      }
    }
    if (!split) {
      pax += pax_record("path", name);
      ustar_name = name.substr(0, kName.len);
      ustar_prefix.clear();
    }
  }
  if (e.linkname.size() > kLink.len) pax += pax_record("linkpath", e.linkname);

  put_string(block.data(), kName, ustar_name);
  put_string(block.data(), kPrefix, ustar_prefix);
  put_octal(block.data(), kMode, e.mode & 07777);
  if (!put_octal(block.data(), kUid, e.uid)) {
    pax += pax_record("uid", std::to_string(e.uid));
    put_octal(block.data(), kUid, 0);
  }
  if (!put_octal(block.data(), kGid, e.gid)) {
    pax += pax_record("gid", std::to_string(e.gid));
    put_octal(block.data(), kGid, 0);
  }
  if (!put_octal(block.data(), kSize, size)) {
    pax += pax_record("size", std::to_string(size));
    put_octal(block.data(), kSize, 0);
  }
  put_octal(block.data(), kMtime, static_cast<std::uint64_t>(std::max<std::int64_t>(e.mtime, 0)));
  block[kType.off] = type_flag(e.type);
  put_string(block.data(), kLink, e.linkname.substr(0, std::min(e.linkname.size(), kLink.len)));
  put_string(block.data(), kMagic, std::string_view("ustar\0", 6));
  put_string(block.data(), kVersion, "00");
  put_octal(block.data(), kDevMajor, e.devmajor);
  put_octal(block.data(), kDevMinor, e.devminor);

  if (!pax.empty()) {
    std::array<char, kBlock> xblock{};
    put_string(xblock.data(), kName, "././@PaxHeader");
    put_octal(xblock.data(), kMode, 0644);
    put_octal(xblock.data(), kUid, 0);
    put_octal(xblock.data(), kGid, 0);
    put_octal(xblock.data(), kSize, pax.size());
    put_octal(xblock.data(), kMtime, 0);
    xblock[kType.off] = 'x';
    put_string(xblock.data(), kMagic, std::string_view("ustar\0", 6));
    put_string(xblock.data(), kVersion, "00");
    put_octal(xblock.data(), Field{kChksum.off, 7}, compute_checksum(xblock.data()));
    xblock[kChksum.off + 7] = ' ';
    out_.write(xblock.data(), kBlock);
    out_.write(pax.data(), static_cast<std::streamsize>(pax.size()));
    write_padding(pax.size());
  }

  // Checksum field: six octal digits, NUL, space.
  put_octal(block.data(), Field{kChksum.off, 7}, compute_checksum(block.data()));
  block[kChksum.off + 7] = ' ';
  out_.write(block.data(), kBlock);
}

void Writer::add(const Entry& entry, std::string_view data) {
  Entry e = entry;
  if (e.type == EntryType::Regular) e.size = data.size();
  write_header(e);
  if (e.type == EntryType::Regular) {
    out_.write(data.data(), static_cast<std::streamsize>(data.size()));
    write_padding(data.size());
  }
}

void Writer::add(const Entry& entry, std::istream& data) {
  write_header(entry);
  if (entry.type != EntryType::Regular) return;
  std::array<char, 1 << 16> buf{};
  std::uint64_t left = entry.size;
  while (left > 0) {
    const auto chunk = static_cast<std::streamsize>(std::min<std::uint64_t>(left, buf.size()));
    data.read(buf.data(), chunk);
    if (data.gcount() != chunk) throw Error("file changed size while archiving: " + entry.path);
    out_.write(buf.data(), chunk);
    left -= static_cast<std::uint64_t>(chunk);
  }
  write_padding(entry.size);
}

void Writer::finish() {
  if (finished_) return;
  finished_ = true;
  static const std::array<char, 2 * kBlock> zeros{};
  out_.write(zeros.data(), zeros.size());
  out_.flush();
}

// --- helpers -----------------------------------------------------------------

std::unique_ptr<std::istream> open_archive(const std::filesystem::path& path) {
  auto file = std::make_unique<std::ifstream>(path, std::ios::binary);
  if (!*file) throw ArchiveCorrupt("cannot open archive " + path.string());
  const int b0 = file->get();
  const int b1 = file->get();
  file->clear();
  file->seekg(0);
  if (b0 == 0x1f && b1 == 0x8b) return std::make_unique<GzipStream>(std::move(file));
  return file;
}

std::optional<std::string> clean_path(std::string_view name) {
  std::vector<std::string_view> parts;
  std::size_t start = 0;
  while (start <= name.size()) {
    auto end = name.find('/', start);
    if (end == std::string_view::npos) end = name.size();
    const auto part = name.substr(start, end - start);
    if (part == "..") {
      if (parts.empty()) return std::nullopt;
      parts.pop_back();
    } else if (!part.empty() && part != ".") {
      parts.push_back(part);
    }
    start = end + 1;
  }
  std::string out;
  for (const auto& p : parts) {
    if (!out.empty()) out += '/';
    out += p;
  }
  return out;
}

}  // namespace nsbuild::tar
