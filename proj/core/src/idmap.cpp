#include "nsbuild/idmap.hpp"

#include <algorithm>
#include <charconv>
#include <sstream>

namespace nsbuild::idmap {

namespace {

bool intersects(std::uint64_t a_start, std::uint64_t a_count, std::uint64_t b_start, std::uint64_t b_count) {
  return a_start < b_start + b_count && b_start < a_start + a_count;
}

template <typename T>
std::optional<T> to_number(std::string_view s) {
  T value{};
  if (s.empty()) return std::nullopt;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec != std::errc{} || ptr != s.data() + s.size()) return std::nullopt;
  return value;
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(s.substr(start, pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::string describe(const SubidEntry& e) {
  return e.user + ":" + std::to_string(e.start) + ":" + std::to_string(e.count);
}

}  // namespace

IdMap::IdMap(std::vector<Extent> extents) : extents_(std::move(extents)) {
  for (size_t i = 0; i < extents_.size(); ++i) {
    const Extent& a = extents_[i];
    if (a.count == 0) throw IdMapError(IdMapErrorKind::EmptyExtent, "ID map extent with count 0");
    if (a.ns_start + a.count > kIdSpace || a.host_start + a.count > kIdSpace) {
      throw IdMapError(IdMapErrorKind::OutOfRange, "ID map extent exceeds the 32-bit ID space");
    }
    for (size_t j = 0; j < i; ++j) {
      const Extent& b = extents_[j];
      if (intersects(a.ns_start, a.count, b.ns_start, b.count)) {
        throw IdMapError(IdMapErrorKind::Overlap, "namespace ranges of extents " + std::to_string(j) + " and " +
                                                      std::to_string(i) + " overlap");
      }
      if (intersects(a.host_start, a.count, b.host_start, b.count)) {
        throw IdMapError(IdMapErrorKind::Overlap,
                         "host ranges of extents " + std::to_string(j) + " and " + std::to_string(i) + " overlap");
      }
    }
  }
}

std::string IdMap::render() const {
  std::string out;
  for (const Extent& e : extents_) {
    out += std::to_string(e.ns_start) + ' ' + std::to_string(e.host_start) + ' ' + std::to_string(e.count) + '\n';
  }
  return out;
}

IdMap IdMap::parse(std::string_view text) {
  std::vector<Extent> extents;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    std::istringstream fields(line);
    std::uint64_t ns = 0, host = 0, count = 0;
    if (!(fields >> ns >> host >> count) || ns >= kIdSpace || host >= kIdSpace) {
      throw IdMapError(IdMapErrorKind::Malformed, "malformed ID map line: " + line);
    }
    extents.push_back({static_cast<Id>(ns), static_cast<Id>(host), count});
  }
  return IdMap(std::move(extents));
}

std::optional<Id> translate(const IdMap& map, Id id, Direction direction) {
  for (const Extent& e : map.extents()) {
    const std::uint64_t from = direction == Direction::NsToHost ? e.ns_start : e.host_start;
    const std::uint64_t to = direction == Direction::NsToHost ? e.host_start : e.ns_start;
    if (id >= from && id < from + e.count) return static_cast<Id>(to + (id - from));
  }
  return std::nullopt;
}

Id translate_or_overflow(const IdMap& map, Id id, Direction direction) {
  return translate(map, id, direction).value_or(kOverflowId);
}

IdMap plan_privileged_map(Id invoking_id, const SubidEntry& entry) {
  if (entry.count == 0) throw IdMapError(IdMapErrorKind::EmptyExtent, "subordinate range of " + entry.user + " is empty");
  if (entry.contains(invoking_id)) {
    throw IdMapError(IdMapErrorKind::RangeContainsInvoker,
                     "subordinate range " + describe(entry) + " contains the invoking ID " +
                         std::to_string(invoking_id));
  }
  return IdMap({{0, invoking_id, 1}, {1, entry.start, entry.count}});
}

IdMap plan_unprivileged_map(Id host_id, Id ns_id) { return IdMap({{ns_id, host_id, 1}}); }

PairClassification classify_pair(bool host_in_use, bool mapped) {
  if (host_in_use && mapped) {
    return {MapCase::InUseMapped, "the namespace ID is an alias of the host ID"};
  }
  if (!host_in_use && mapped) {
    return {MapCase::UnusedMapped, "usable inside the namespace; files it owns have no host user or group name"};
  }
  if (host_in_use) {
    return {MapCase::InUseUnmapped,
            "still grants its access inside the namespace but cannot be named; listed as the overflow ID"};
  }
  return {MapCase::UnusedUnmapped, "not available inside the namespace"};
}

std::string_view to_string(MapCase c) {
  switch (c) {
    case MapCase::InUseMapped: return "in-use-mapped";
    case MapCase::UnusedMapped: return "unused-mapped";
    case MapCase::InUseUnmapped: return "in-use-unmapped";
    case MapCase::UnusedUnmapped: return "unused-unmapped";
  }
  return "?";
}

ContainerType classify_runtime(bool has_user_ns, bool privileged_setup) {
  if (!has_user_ns) return ContainerType::TypeI;
  return privileged_setup ? ContainerType::TypeII : ContainerType::TypeIII;
}

std::string_view to_string(ContainerType t) {
  switch (t) {
    case ContainerType::TypeI: return "Type I";
    case ContainerType::TypeII: return "Type II";
    case ContainerType::TypeIII: return "Type III";
  }
  return "?";
}

std::string_view to_string(FindingKind k) {
  switch (k) {
    case FindingKind::RangeOverlapUsers: return "range-overlap-users";
    case FindingKind::RangeCoversLiveId: return "range-covers-live-id";
    case FindingKind::MalformedEntry: return "malformed-entry";
  }
  return "?";
}

std::string_view to_string(Severity s) { return s == Severity::Error ? "error" : "warning"; }

SubidParseResult parse_subid(std::string_view text) {
  SubidParseResult result;
  size_t line_no = 0;
  for (std::string_view raw : split(text, '\n')) {
    ++line_no;
    const std::string_view line = trim(raw);
    if (line.empty() || line.front() == '#') continue;

    auto malformed = [&](const std::string& why) {
      result.findings.push_back({Severity::Error, FindingKind::MalformedEntry,
                                 "line " + std::to_string(line_no) + ": " + why + ": " + std::string(line), line_no,
                                 0});
    };

    const auto fields = split(line, ':');
    if (fields.size() != 3) {
      malformed("expected user:start:count");
      continue;
    }
    const auto start = to_number<std::uint64_t>(fields[1]);
    const auto count = to_number<std::uint64_t>(fields[2]);
    if (fields[0].empty()) {
      malformed("empty user name");
    } else if (!start || !count) {
      malformed("start and count must be non-negative integers");
    } else if (*count == 0) {
      malformed("count must be positive");
    } else if (*start >= kIdSpace || *start + *count > kIdSpace) {
      malformed("range exceeds the 32-bit ID space");
    } else {
      result.entries.push_back({std::string(fields[0]), static_cast<Id>(*start), *count});
    }
  }
  return result;
}

std::vector<LintFinding> lint_config(const std::vector<SubidEntry>& entries, const std::set<Id>& live_ids) {
  std::vector<LintFinding> findings;
  for (size_t i = 0; i < entries.size(); ++i) {
    for (size_t j = i + 1; j < entries.size(); ++j) {
      const auto& a = entries[i];
      const auto& b = entries[j];
      if (!intersects(a.start, a.count, b.start, b.count)) continue;
      const std::uint64_t lo = std::max<std::uint64_t>(a.start, b.start);
      const std::uint64_t hi = std::min(a.end(), b.end()) - 1;
      findings.push_back({Severity::Error, FindingKind::RangeOverlapUsers,
                          describe(a) + " and " + describe(b) + " share host IDs " + std::to_string(lo) + "-" +
                              std::to_string(hi),
                          i, j});
    }
  }
  for (size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    std::vector<Id> covered;
    for (auto it = live_ids.lower_bound(e.start); it != live_ids.end() && e.contains(*it); ++it) {
      covered.push_back(*it);
    }
    if (covered.empty()) continue;
    std::string ids;
    for (size_t k = 0; k < covered.size() && k < 16; ++k) ids += (k ? ", " : "") + std::to_string(covered[k]);
    if (covered.size() > 16) ids += ", ... (" + std::to_string(covered.size()) + " total)";
    findings.push_back({Severity::Error, FindingKind::RangeCoversLiveId,
                        describe(e) + " covers live host IDs " + ids, i, i});
  }
  std::stable_sort(findings.begin(), findings.end(), [](const LintFinding& a, const LintFinding& b) {
    if (a.kind != b.kind) return a.kind < b.kind;
    if (a.first != b.first) return a.first < b.first;
    return a.second < b.second;
  });
  return findings;
}

std::set<Id> parse_account_ids(std::string_view text) {
  std::set<Id> ids;
  for (std::string_view line : split(text, '\n')) {
    line = trim(line);
    if (line.empty() || line.front() == '#') continue;
    const auto fields = split(line, ':');
    if (fields.size() < 3) continue;
    if (auto id = to_number<std::uint64_t>(fields[2]); id && *id < kIdSpace) ids.insert(static_cast<Id>(*id));
  }
  return ids;
}

}  // namespace nsbuild::idmap
