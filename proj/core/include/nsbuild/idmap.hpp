#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "nsbuild/error.hpp"

namespace nsbuild::idmap {

// Kernel UIDs/GIDs are 32-bit. Counts and range ends need one more bit.
using Id = std::uint32_t;
inline constexpr std::uint64_t kIdSpace = std::uint64_t{1} << 32;

// Shown in place of IDs that have no mapping (nobody / nogroup).
inline constexpr Id kOverflowId = 65534;

struct SubidEntry {
  std::string user;
  Id start = 0;
  std::uint64_t count = 0;

  std::uint64_t end() const { return std::uint64_t{start} + count; }  // exclusive
  bool contains(std::uint64_t id) const { return id >= start && id < end(); }
  bool operator==(const SubidEntry&) const = default;
};

struct Extent {
  Id ns_start = 0;
  Id host_start = 0;
  std::uint64_t count = 0;
  bool operator==(const Extent&) const = default;
};

enum class IdMapErrorKind { Overlap, OutOfRange, EmptyExtent, RangeContainsInvoker, Malformed };

class IdMapError : public KindedError<IdMapErrorKind> {
 public:
  using KindedError::KindedError;
};

// One-to-one ID map as installed through /proc/<pid>/uid_map or gid_map.
// Construction validates that neither side of any two extents overlaps.
class IdMap {
 public:
  IdMap() = default;
  explicit IdMap(std::vector<Extent> extents);

  const std::vector<Extent>& extents() const { return extents_; }

  // "ns_start host_start count\n" per extent, the format the kernel accepts.
  std::string render() const;
  // Accepts both the written form and the column-aligned /proc listing.
  static IdMap parse(std::string_view text);

  bool operator==(const IdMap&) const = default;

 private:
  std::vector<Extent> extents_;
};

enum class Direction { NsToHost, HostToNs };

std::optional<Id> translate(const IdMap& map, Id id, Direction direction);

// translate() for display: unmapped IDs show as the overflow ID.
Id translate_or_overflow(const IdMap& map, Id id, Direction direction);

// Invoker becomes namespace root; the subordinate range fills 1..count.
IdMap plan_privileged_map(Id invoking_id, const SubidEntry& entry);

// The only map an unprivileged process may install: one ID.
IdMap plan_unprivileged_map(Id host_id, Id ns_id);

enum class MapCase { InUseMapped, UnusedMapped, InUseUnmapped, UnusedUnmapped };

struct PairClassification {
  MapCase map_case;
  std::string_view semantics;
};

PairClassification classify_pair(bool host_in_use, bool mapped);
std::string_view to_string(MapCase c);

enum class ContainerType { TypeI, TypeII, TypeIII };

ContainerType classify_runtime(bool has_user_ns, bool privileged_setup);
std::string_view to_string(ContainerType t);

enum class Severity { Error, Warning };
enum class FindingKind { RangeOverlapUsers, RangeCoversLiveId, MalformedEntry };

struct LintFinding {
  Severity severity = Severity::Error;
  FindingKind kind = FindingKind::MalformedEntry;
  std::string detail;
  // Index into the linted entry list (or 1-based line for MalformedEntry).
  std::size_t first = 0;
  std::size_t second = 0;
};

std::string_view to_string(FindingKind k);
std::string_view to_string(Severity s);

struct SubidParseResult {
  std::vector<SubidEntry> entries;
  std::vector<LintFinding> findings;  // MalformedEntry only
};

// Parses /etc/subuid or /etc/subgid text (`user:start:count`, `#`
// comments). Bad lines become findings; parsing continues.
SubidParseResult parse_subid(std::string_view text);

// Reports every pair of entries with intersecting host ranges and every
// entry whose range covers a live host ID. Sorted by (kind, first entry).
// What counts as "live" is up to the caller: IDs on unmounted network
// filesystems are invisible to account databases.
std::vector<LintFinding> lint_config(const std::vector<SubidEntry>& entries, const std::set<Id>& live_ids);

// IDs listed in passwd- or group-format text (third field).
std::set<Id> parse_account_ids(std::string_view text);

}  // namespace nsbuild::idmap
