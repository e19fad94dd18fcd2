// One line per criterion: PASS|FAIL <n> <name> (<detail>). Exit status is
// non-zero when any criterion fails.
#include <sys/stat.h>

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <sstream>

#include "mock_registry.hpp"
#include "nsbuild/builder.hpp"
#include "nsbuild/idmap.hpp"
#include "nsbuild/image.hpp"
#include "nsbuild/registry.hpp"
#include "nsbuild/tar.hpp"
#include "privilege_guard.hpp"
#include "properties.hpp"
#include "testing.hpp"

namespace image = nsbuild::image;
namespace idmap = nsbuild::idmap;
namespace registry = nsbuild::registry;
namespace tar = nsbuild::tar;
namespace t = nsbuild::test;
namespace fs = std::filesystem;

namespace {

// Wall-clock budgets.
constexpr double kFailureBudgetSeconds = 10.0;
constexpr double kIdmapBudgetSeconds = 5.0;
constexpr double kRegistryBudgetSeconds = 5.0;

constexpr std::size_t kBijectivityTrials = 10000;
constexpr std::size_t kLintOracleTrials = 500;

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Check {
  std::string* detail;
  bool ok = true;
  void require(bool cond, const std::string& what) {
    if (!cond && ok) {
      ok = false;
      *detail = what;
    }
  }
};

int failures = 0;

void report(int n, const char* name, const std::function<Outcome()>& fn) {
  const auto start = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = fn();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (!o.pass) ++failures;
  char timing[32];
  std::snprintf(timing, sizeof timing, "%.2fs", secs);
  std::cout << (o.pass ? "PASS" : "FAIL") << " " << n << " " << name << " (" << timing
            << (o.detail.empty() ? "" : "; ") << o.detail << ")" << std::endl;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::size_t count(const std::string& hay, const std::string& needle) {
  std::size_t n = 0;
  for (auto p = hay.find(needle); p != std::string::npos; p = hay.find(needle, p + 1)) ++n;
  return n;
}

class Workspace {
 public:
  Workspace() { t::import_fixture_images(store_); }
  t::CliResult build(std::string_view dockerfile, std::vector<std::string> extra, std::string_view tag) {
    return t::build(dir_ / "store", t::read_file(t::data_path(dockerfile)), extra, tag);
  }
  image::Store& store() { return store_; }

 private:
  t::TempDir dir_{"accept"};
  image::Store store_{dir_ / "store"};
};

Outcome failing_build(std::string_view dockerfile, std::string_view tag, std::string_view golden,
                      const std::string& expected_err_prefix) {
  Workspace ws;
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = ws.build(dockerfile, {}, tag);
  const double secs = seconds_since(t0);
  Outcome o;
  Check c{&o.detail};
  c.require(r.code == 1, "exit code " + std::to_string(r.code));
  c.require(r.out == t::read_file(t::golden_path(golden)), "transcript differs from " + std::string(golden));
  c.require(r.err.starts_with(expected_err_prefix), "stderr: " + r.err);
  c.require(r.err.find("hint: --force may fix it") != std::string::npos, "no --force hint");
  c.require(!ws.store().has_image(image::ImageRef::parse(tag)), "failed build left an image");
  c.require(secs < kFailureBudgetSeconds, "took " + std::to_string(secs) + "s");
  o.pass = c.ok;
  return o;
}

Outcome forced_build(std::string_view dockerfile, std::string_view tag, std::string_view golden,
                     std::size_t modified, const std::vector<std::string>& must_contain) {
  Workspace ws;
  const auto r = ws.build(dockerfile, {"--force"}, tag);
  Outcome o;
  Check c{&o.detail};
  c.require(r.code == 0, "exit code " + std::to_string(r.code) + ": " + r.err);
  c.require(r.out == t::read_file(t::golden_path(golden)), "transcript differs from " + std::string(golden));
  c.require(count(r.out, "workarounds: RUN: new command:") == modified, "modified RUN count");
  c.require(r.out.find("--force: init OK & modified " + std::to_string(modified) + " RUN instructions\n") !=
                std::string::npos,
            "summary line");
  for (const auto& s : must_contain) c.require(r.out.find(s) != std::string::npos, "missing: " + s);
  c.require(ws.store().has_image(image::ImageRef::parse(tag)), "image not stored");
  o.pass = c.ok;
  return o;
}

Outcome idmap_properties() {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  Check c{&o.detail};
  const auto bij = t::idmap_bijectivity(kBijectivityTrials, 2021);
  c.require(bij.ok(), "bijectivity: " + bij.first_failure);
  const auto lint = t::lint_overlap_oracle(kLintOracleTrials, 2022);
  c.require(lint.ok(), "lint oracle: " + lint.first_failure);

  // Alice's range covers Bob's live UID: exactly one error.
  const auto parsed = idmap::parse_subid("alice:1001:65536\n");
  const auto findings = idmap::lint_config(parsed.entries, {1001});
  std::size_t errors = 0;
  for (const auto& f : findings) errors += f.severity == idmap::Severity::Error;
  c.require(findings.size() == 1 && errors == 1, std::to_string(findings.size()) + " findings for alice/bob");

  const double secs = seconds_since(t0);
  c.require(secs < kIdmapBudgetSeconds, "took " + std::to_string(secs) + "s");
  o.pass = c.ok;
  if (o.pass) o.detail = std::to_string(bij.trials) + " maps, " + std::to_string(lint.trials) + " lint configs";
  return o;
}

Outcome export_ownership() {
  t::TempDir d("export");
  t::write_file(d / "root/usr/bin/tool", "#!/bin/sh\n", 0755);
  ::chmod((d / "root/usr/bin/tool").c_str(), 04755);
  t::write_file(d / "root/etc/motd", "hi\n");
  fs::create_symlink("motd", d / "root/etc/link");

  std::ostringstream first, second;
  image::export_layer(d / "root", nullptr, first);
  image::export_layer(d / "root", nullptr, second);

  Outcome o;
  Check c{&o.detail};
  c.require(first.str() == second.str(), "export not byte-deterministic");
  std::istringstream in(first.str());
  tar::Reader r(in);
  tar::Entry e;
  bool seen = false;
  while (r.next(e)) {
    c.require(e.uid == 0 && e.gid == 0, e.path + " not owned by 0:0");
    c.require((e.mode & 06000) == 0, e.path + " keeps setuid/setgid");
    if (e.path == "usr/bin/tool") {
      seen = true;
      c.require(e.mode == 0755, "tool mode " + std::to_string(e.mode));
    }
  }
  c.require(seen, "tool missing from layer");
  o.pass = c.ok;
  return o;
}

Outcome registry_round_trip() {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  Check c{&o.detail};
  t::MockRegistry reg;
  t::TempDir d("registry");
  image::Store store(d / "store");
  t::write_file(d / "root/etc/motd", "hello\n");
  const auto ref = image::ImageRef::parse(reg.host() + "/acceptance/app:1");
  const auto digest = nsbuild::builder::commit_image(d / "root", nullptr, {}, ref, store);

  registry::Client client(reg.host());
  c.require(client.push(ref, store, digest) == digest, "push digest");
  image::Store other(d / "other");
  const auto pulled = client.pull(ref, other);
  c.require(pulled.manifest_digest == digest, "pulled manifest digest");
  c.require(other.read_blob(digest) == store.read_blob(digest), "manifest bytes differ");
  c.require(other.read_blob(pulled.manifest.config.digest) == store.read_blob(pulled.manifest.config.digest),
            "config bytes differ");
  for (const auto& l : pulled.manifest.layers)
    c.require(other.read_blob(l.digest) == store.read_blob(l.digest), "layer bytes differ");

  // A tampered layer: typed error, nothing cached, nothing left in tmp.
  reg.tamper(pulled.manifest.layers.at(0).digest);
  image::Store third(d / "third");
  bool mismatch = false;
  try {
    client.pull(ref, third);
  } catch (const registry::RegistryError& e) {
    mismatch = e.kind() == registry::RegistryErrorKind::DigestMismatch;
  }
  c.require(mismatch, "tampered blob not rejected with DigestMismatch");
  const auto dl = third.root() / "dl/sha256";
  c.require(!fs::exists(dl) || fs::is_empty(dl), "tampered pull left cached blobs");
  c.require(fs::is_empty(third.temp_dir()), "tampered pull left temporaries");

  const double secs = seconds_since(t0);
  c.require(secs < kRegistryBudgetSeconds, "took " + std::to_string(secs) + "s");
  o.pass = c.ok;
  return o;
}

Outcome unprivileged() {
  const auto what = t::elevated_privilege();
  return {what.empty(), what.empty() ? "uid " + std::to_string(::getuid()) + ", no capabilities" : what};
}

}  // namespace

int main() {
  report(1, "centos7 build fails without --force", [] {
    return failing_build("centos7.dockerfile", "foo", "centos7.out", "error: build failed: RUN command exited with 1\n");
  });
  report(2, "debian10 build fails without --force", [] {
    return failing_build("debian10.dockerfile", "foo", "debian10.out",
                         "error: build failed: RUN command exited with 100\n");
  });
  report(3, "centos7 build succeeds with --force", [] {
    return forced_build("centos7.dockerfile", "foo", "centos7-force.out", 1,
                        {"will use --force: rhel7: CentOS/RHEL 7\n", "grown in 3 instructions: foo\n"});
  });
  report(4, "debian10 build succeeds with --force", [] {
    return forced_build("debian10.dockerfile", "foo", "debian10-force.out", 2,
                        {"echo 'APT::Sandbox::User \"root\";' > /etc/apt/apt.conf.d/no-sandbox",
                         "grown in 4 instructions: foo\n"});
  });
  report(5, "ID map bijectivity and lint oracle", idmap_properties);
  report(6, "export ownership flattening and determinism", export_ownership);
  report(7, "registry push/pull byte identity and tamper rejection", registry_round_trip);
  report(8, "no elevated privilege", unprivileged);
  return failures == 0 ? 0 : 1;
}
