#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <istream>
#include <memory>
#include <optional>
#include <string>
#include <string_view>

#include "nsbuild/error.hpp"

// Minimal ustar/pax archive support for OCI layers.
namespace nsbuild::tar {

enum class EntryType { Regular, HardLink, Symlink, CharDevice, BlockDevice, Directory, Fifo };

struct Entry {
  std::string path;  // as stored, minus any trailing "/"
  EntryType type = EntryType::Regular;
  std::uint32_t mode = 0644;  // 07777 subset
  std::uint32_t uid = 0;
  std::uint32_t gid = 0;
  std::uint64_t size = 0;
  std::int64_t mtime = 0;
  std::string linkname;
  std::uint32_t devmajor = 0;
  std::uint32_t devminor = 0;
};

class ArchiveCorrupt : public Error {
 public:
  using Error::Error;
};

// Sequential reader. After next() returns an entry, its data may be read
// with read_data()/copy_data(); otherwise it is skipped on the next call.
class Reader {
 public:
  explicit Reader(std::istream& in);

  bool next(Entry& entry);
  std::string read_data();
  void copy_data(std::ostream& out);

 private:
  void skip_remaining();
  bool read_block(char* block);

  std::istream& in_;
  std::uint64_t remaining_ = 0;
  std::uint64_t padding_ = 0;
};

// Writes entries in the order given. Long names and large numbers use pax
// extended headers; the output depends only on the entries and data.
class Writer {
 public:
  explicit Writer(std::ostream& out);

  void add(const Entry& entry, std::string_view data = {});
  // entry.size bytes are streamed from `data`.
  void add(const Entry& entry, std::istream& data);
  // End-of-archive marker. Idempotent.
  void finish();

 private:
  void write_header(const Entry& entry);
  void write_padding(std::uint64_t size);

  std::ostream& out_;
  bool finished_ = false;
};

// Opens a layer archive, transparently decompressing gzip.
std::unique_ptr<std::istream> open_archive(const std::filesystem::path& path);

// Normalises an archive member name: strips leading "/", drops "." and
// empty components and resolves "..". Returns "" for the archive root and
// nullopt when ".." would climb above it.
std::optional<std::string> clean_path(std::string_view name);

}  // namespace nsbuild::tar
