#include <gtest/gtest.h>
#include <sys/stat.h>
#include <sys/sysmacros.h>
#include <unistd.h>

#include <fstream>
#include <map>
#include <sstream>

#include "nsbuild/digest.hpp"
#include "nsbuild/image.hpp"
#include "nsbuild/tar.hpp"
#include "testing.hpp"

using namespace nsbuild::image;
namespace tar = nsbuild::tar;
namespace ownerdb = nsbuild::ownerdb;
namespace t = nsbuild::test;

namespace {

tar::Entry entry(std::string path, tar::EntryType type = tar::EntryType::Regular, std::uint32_t mode = 0644) {
  tar::Entry e;
  e.path = std::move(path);
  e.type = type;
  e.mode = mode;
  return e;
}

struct LayerItem {
  tar::Entry e;
  std::string data;
};

fs::path write_layer(const fs::path& path, std::vector<LayerItem> items) {
  std::ofstream out(path, std::ios::binary);
  tar::Writer w(out);
  for (auto& it : items) {
    it.e.size = it.data.size();
    w.add(it.e, it.data);
  }
  w.finish();
  return path;
}

LayerItem file(std::string path, std::string data, std::uint32_t mode = 0644) {
  return {entry(std::move(path), tar::EntryType::Regular, mode), std::move(data)};
}
LayerItem dir(std::string path, std::uint32_t mode = 0755) { return {entry(std::move(path), tar::EntryType::Directory, mode), ""}; }
LayerItem link_to(std::string path, std::string target) {
  auto e = entry(std::move(path), tar::EntryType::Symlink, 0777);
  e.linkname = std::move(target);
  return {e, ""};
}

struct Listed {
  tar::Entry e;
  std::string data;
};

std::map<std::string, Listed> list_archive(const std::string& bytes) {
  std::istringstream in(bytes);
  tar::Reader r(in);
  std::map<std::string, Listed> out;
  tar::Entry e;
  while (r.next(e)) out[e.path] = {e, e.type == tar::EntryType::Regular ? r.read_data() : ""};
  return out;
}

std::string export_string(const fs::path& root, const ownerdb::Session* db = nullptr) {
  std::ostringstream out;
  export_layer(root, db, out);
  return out.str();
}

// Path -> (type, mode, content) view of a directory tree.
std::map<std::string, std::string> tree_signature(const fs::path& root) {
  std::map<std::string, std::string> sig;
  for (auto it = fs::recursive_directory_iterator(root); it != fs::recursive_directory_iterator(); ++it) {
    struct stat st {};
    ::lstat(it->path().c_str(), &st);
    std::string v = std::to_string(st.st_mode);
    if (S_ISREG(st.st_mode)) v += ":" + t::read_file(it->path());
    if (S_ISLNK(st.st_mode)) v += ">" + fs::read_symlink(it->path()).string();
    sig[it->path().lexically_relative(root).string()] = v;
  }
  return sig;
}

ImageErrorKind image_error(auto&& fn) {
  try {
    fn();
  } catch (const ImageError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no ImageError";
  return ImageErrorKind::Io;
}

}  // namespace

TEST(ImageRefParse, Forms) {
  const auto c = ImageRef::parse("centos:7");
  EXPECT_EQ(c.host, "registry-1.docker.io");
  EXPECT_EQ(c.repository, "library/centos");
  EXPECT_EQ(c.tag, "7");
  EXPECT_EQ(ImageRef::parse("debian").tag, "latest");
  const auto l = ImageRef::parse("localhost:5000/team/app:v1");
  EXPECT_EQ(l.host, "localhost:5000");
  EXPECT_EQ(l.repository, "team/app");
  EXPECT_EQ(l.str(), "localhost:5000/team/app:v1");
  EXPECT_EQ(ImageRef::parse("user/app").repository, "user/app");
  const std::string d = "sha256:" + std::string(64, 'a');
  EXPECT_EQ(ImageRef::parse("app@" + d).reference(), d);
  EXPECT_EQ(ImageRef::parse(ImageRef::parse("x.io/a/b:c").str()), ImageRef::parse("x.io/a/b:c"));
  EXPECT_EQ(c.encoded().find('/'), std::string::npos);
}

TEST(ImageRefParse, Rejects) {
  for (const char* bad : {"", "UPPER", "a:b:c", "app@sha256:zz", "a//b", "a:"}) {
    EXPECT_EQ(image_error([&] { ImageRef::parse(bad); }), ImageErrorKind::BadReference) << bad;
  }
}

TEST(Unpack, OwnedByInvokerAndSetuidDropped) {
  t::TempDir d;
  auto e = entry("bin/sh", tar::EntryType::Regular, 04755);
  e.uid = 0;
  e.gid = 0;
  const auto layer = write_layer(d / "l.tar", {dir("bin"), {e, "#!"}});
  const auto report = unpack(std::span(&layer, 1), d / "root");
  EXPECT_EQ(report.entries, 2u);
  struct stat st {};
  ASSERT_EQ(::lstat((d / "root/bin/sh").c_str(), &st), 0);
  EXPECT_EQ(st.st_uid, ::getuid());
  EXPECT_EQ(st.st_mode & 07777, 0755u);
}

TEST(Unpack, WhiteoutsMatchHandAppliedLayers) {
  t::TempDir d;
  const fs::path layers[] = {
      write_layer(d / "1.tar", {dir("etc"), file("etc/foo", "1"), file("etc/bar", "2"), file("etc/baz", "3"),
                                dir("var"), file("var/a", "a"), file("var/b", "b")}),
      write_layer(d / "2.tar", {file("etc/.wh.foo", ""), file("etc/baz", "3'"), dir("var"), file("var/.wh..wh..opq", ""),
                                file("var/c", "c")}),
  };
  unpack(layers, d / "root");
  // Layer 2 deletes etc/foo, replaces etc/baz and hides everything old in var.
  std::map<std::string, std::string> expected = {
      {"etc/bar", "2"}, {"etc/baz", "3'"}, {"var/c", "c"}};
  std::map<std::string, std::string> got;
  for (auto& p : fs::recursive_directory_iterator(d / "root")) {
    if (p.is_regular_file()) got[fs::relative(p.path(), d / "root").string()] = t::read_file(p.path());
  }
  EXPECT_EQ(got, expected);
}

TEST(Unpack, WhiteoutInSameLayerDoesNotRemoveItsOwnFile) {
  t::TempDir d;
  const auto layer = write_layer(d / "l.tar", {file("x", "1"), file(".wh.x", "")});
  unpack(std::span(&layer, 1), d / "root");
  EXPECT_TRUE(fs::exists(d / "root/x"));
}

TEST(Unpack, PathEscape) {
  t::TempDir d;
  const auto layer = write_layer(d / "l.tar", {file("../../evil", "x")});
  EXPECT_EQ(image_error([&] { unpack(std::span(&layer, 1), d / "root"); }), ImageErrorKind::PathEscape);
  EXPECT_FALSE(fs::exists(d.path().parent_path() / "evil"));
}

TEST(Unpack, SymlinksCannotRedirectOutOfRoot) {
  t::TempDir d;
  const fs::path layers[] = {
      write_layer(d / "1.tar", {link_to("esc", "/../../../" + d.path().string())}),
      write_layer(d / "2.tar", {file("esc/planted", "x")}),
  };
  unpack(layers, d / "root");
  EXPECT_FALSE(fs::exists(d / "planted"));
  EXPECT_TRUE(fs::exists(resolve_in_root(d / "root", "esc/planted", true)));
}

TEST(Unpack, DevicesAreSkippedWithWarning) {
  t::TempDir d;
  auto dev = entry("dev/null", tar::EntryType::CharDevice, 0666);
  dev.devmajor = 1;
  dev.devminor = 3;
  const auto layer = write_layer(d / "l.tar", {{dev, ""}, file("ok", "1")});
  const auto report = unpack(std::span(&layer, 1), d / "root");
  ASSERT_EQ(report.warnings.size(), 1u);
  EXPECT_NE(report.warnings[0].find("dev/null"), std::string::npos);
  EXPECT_FALSE(fs::exists(d / "root/dev/null"));
  EXPECT_TRUE(fs::exists(d / "root/ok"));
}

TEST(Unpack, HardLinksAndNonEmptyDest) {
  t::TempDir d;
  auto hard = entry("b", tar::EntryType::HardLink);
  hard.linkname = "a";
  const auto layer = write_layer(d / "l.tar", {file("a", "same"), {hard, ""}});
  unpack(std::span(&layer, 1), d / "root");
  EXPECT_TRUE(fs::equivalent(d / "root/a", d / "root/b"));
  EXPECT_EQ(image_error([&] { unpack(std::span(&layer, 1), d / "root"); }), ImageErrorKind::Io);
}

TEST(Unpack, CorruptArchive) {
  t::TempDir d;
  t::write_file(d / "bad.tar", std::string(1024, 'x'));
  const fs::path layer = d / "bad.tar";
  EXPECT_EQ(image_error([&] { unpack(std::span(&layer, 1), d / "root"); }), ImageErrorKind::ArchiveCorrupt);
}

TEST(Export, NoDbNormalisesToRoot) {
  t::TempDir d;
  t::write_file(d / "root/usr/bin/su", "su", 0755);
  ASSERT_EQ(::chmod((d / "root/usr/bin/su").c_str(), 04755), 0);
  const auto listed = list_archive(export_string(d / "root"));
  const auto& su = listed.at("usr/bin/su").e;
  EXPECT_EQ(su.uid, 0u);
  EXPECT_EQ(su.gid, 0u);
  EXPECT_EQ(su.mode, 0755u);
  EXPECT_EQ(su.mtime, 0);
  EXPECT_EQ(listed.at("usr").e.type, tar::EntryType::Directory);
}

TEST(Export, DbRecordsCarryFakedOwnershipAndDevices) {
  t::TempDir d;
  t::write_file(d / "root/test.file", "", 0640);
  t::write_file(d / "root/test.dev", "", 0600);
  struct stat f {}, v {};
  ::lstat((d / "root/test.file").c_str(), &f);
  ::lstat((d / "root/test.dev").c_str(), &v);
  ownerdb::Session db;
  db.upsert(ownerdb::identity_of(f), {65534, 0, 0640, ownerdb::FileKind::Regular, std::nullopt});
  db.upsert(ownerdb::identity_of(v), {0, 0, 0640, ownerdb::FileKind::CharDevice, makedev(1, 1)});
  const auto listed = list_archive(export_string(d / "root", &db));
  EXPECT_EQ(listed.at("test.file").e.uid, 65534u);
  EXPECT_EQ(listed.at("test.file").e.gid, 0u);
  const auto& dev = listed.at("test.dev").e;
  EXPECT_EQ(dev.type, tar::EntryType::CharDevice);
  EXPECT_EQ(dev.devmajor, 1u);
  EXPECT_EQ(dev.devminor, 1u);
  EXPECT_EQ(dev.mode, 0640u);
}

TEST(Export, EveryLiveRecordIsExported) {
  t::TempDir d;
  ownerdb::Session db;
  for (int i = 0; i < 20; ++i) {
    const auto p = d / "root" / ("d" + std::to_string(i % 4)) / ("f" + std::to_string(i));
    t::write_file(p, std::to_string(i));
    struct stat st {};
    ::lstat(p.c_str(), &st);
    db.upsert(ownerdb::identity_of(st), {static_cast<std::uint32_t>(1000 + i), 0, 0600, ownerdb::FileKind::Regular,
                                         std::nullopt});
  }
  std::set<std::uint32_t> uids;
  for (const auto& [path, item] : list_archive(export_string(d / "root", &db))) {
    if (item.e.type == tar::EntryType::Regular) uids.insert(item.e.uid);
  }
  EXPECT_EQ(uids.size(), db.store().size());
}

TEST(Export, EmptyRootIsValidArchive) {
  t::TempDir d;
  fs::create_directories(d / "root");
  const auto bytes = export_string(d / "root");
  EXPECT_EQ(bytes.size(), 1024u);
  EXPECT_TRUE(list_archive(bytes).empty());
}

TEST(Export, Deterministic) {
  t::TempDir d;
  t::write_file(d / "root/b/x", "x");
  t::write_file(d / "root/a", "a");
  fs::create_hard_link(d / "root/a", d / "root/c");
  fs::create_symlink("a", d / "root/l");
  const auto first = export_string(d / "root");
  EXPECT_EQ(first, export_string(d / "root"));
  const auto listed = list_archive(first);
  EXPECT_EQ(listed.at("c").e.type, tar::EntryType::HardLink);
  EXPECT_EQ(listed.at("c").e.linkname, "a");
  EXPECT_EQ(listed.at("l").e.linkname, "a");
}

TEST(Export, UnreadableFilesAreExportedAndLeftAsFound) {
  t::TempDir d;
  t::write_file(d / "root/usr/libexec/helper", "secret", 0700);
  ASSERT_EQ(::chmod((d / "root/usr/libexec/helper").c_str(), 02111), 0);
  ASSERT_EQ(::chmod((d / "root/usr/libexec").c_str(), 0111), 0);
  const auto listed = list_archive(export_string(d / "root"));
  EXPECT_EQ(listed.at("usr/libexec/helper").data, "secret");
  EXPECT_EQ(listed.at("usr/libexec/helper").e.mode, 0111u);
  struct stat st {};
  ::lstat((d / "root/usr/libexec").c_str(), &st);
  EXPECT_EQ(st.st_mode & 07777, 0111u);
}

TEST(Export, UnpackRoundTrip) {
  t::TempDir d;
  const auto layer = write_layer(d / "l.tar", {dir("etc"), file("etc/passwd", "root:x:0:0\n"), dir("bin", 0711),
                                               file("bin/tool", "ELF", 0755), link_to("sh", "bin/tool"),
                                               file("etc/shadow", "", 0600)});
  unpack(std::span(&layer, 1), d / "one");
  std::ofstream(d / "again.tar", std::ios::binary) << export_string(d / "one");
  const fs::path again = d / "again.tar";
  unpack(std::span(&again, 1), d / "two");
  EXPECT_EQ(tree_signature(d / "one"), tree_signature(d / "two"));
  EXPECT_EQ(tree_signature(d / "one").size(), 6u);
}

TEST(Snapshot, CopiesTreeAndSymlinks) {
  t::TempDir d;
  t::write_file(d / "src/a", "1");
  t::write_file(d / "src/sub/b", "2", 0600);
  fs::create_symlink("/nonexistent", d / "src/dangling");
  fs::create_hard_link(d / "src/a", d / "src/a2");
  snapshot(d / "src", d / "dest");
  EXPECT_EQ(tree_signature(d / "src"), tree_signature(d / "dest"));
  EXPECT_EQ(fs::read_symlink(d / "dest/dangling"), "/nonexistent");
  EXPECT_TRUE(fs::equivalent(d / "dest/a", d / "dest/a2"));
  EXPECT_FALSE(fs::equivalent(d / "dest/a", d / "src/a"));
}

TEST(Snapshot, Guards) {
  t::TempDir d;
  t::write_file(d / "src/a", "1");
  EXPECT_EQ(image_error([&] { snapshot(d / "src", d / "src"); }), ImageErrorKind::CopyFailed);
  EXPECT_EQ(image_error([&] { snapshot(d / "src", d / "src/inner"); }), ImageErrorKind::CopyFailed);
  t::write_file(d / "full/x", "");
  EXPECT_EQ(image_error([&] { snapshot(d / "src", d / "full"); }), ImageErrorKind::CopyFailed);
}

TEST(RemoveTree, HandlesClosedDirectories) {
  t::TempDir d;
  t::write_file(d / "x/y/z", "");
  ::chmod((d / "x/y").c_str(), 0);
  ::chmod((d / "x").c_str(), 0500);
  remove_tree(d / "x");
  EXPECT_FALSE(fs::exists(d / "x"));
  EXPECT_NO_THROW(remove_tree(d / "missing"));
}

TEST(Config, DeterministicAndParsable) {
  ImageConfig c{{"PATH=/bin", "A=1"}, "/work", "amd64"};
  const auto a = make_config(c, "sha256:" + std::string(64, '0'));
  EXPECT_EQ(a, make_config(c, "sha256:" + std::string(64, '0')));
  const auto back = parse_config(a);
  EXPECT_EQ(back.env, c.env);
  EXPECT_EQ(back.workdir, "/work");
  EXPECT_EQ(back.architecture, "amd64");
  EXPECT_EQ(image_error([] { parse_config("{"); }), ImageErrorKind::ArchiveCorrupt);
}

TEST(StoreTest, BlobsAndMeta) {
  t::TempDir d;
  Store s(d / "store");
  const auto digest = s.put_blob("hello");
  EXPECT_EQ(digest, nsbuild::sha256_digest("hello"));
  EXPECT_TRUE(s.has_blob(digest));
  EXPECT_EQ(s.read_blob(digest), "hello");
  EXPECT_EQ(s.put_blob("hello"), digest);

  t::write_file(s.temp_dir() / "wrong", "not hello");
  EXPECT_EQ(image_error([&] { s.commit_blob(s.temp_dir() / "wrong", digest); }), ImageErrorKind::ArchiveCorrupt);
  EXPECT_FALSE(fs::exists(s.temp_dir() / "wrong"));

  const auto ref = ImageRef::parse("foo");
  EXPECT_FALSE(s.read_meta(ref));
  s.write_meta(ref, {ref.str(), digest, digest, "application/vnd.oci.image.manifest.v1+json"});
  ASSERT_TRUE(s.read_meta(ref));
  EXPECT_EQ(s.read_meta(ref)->manifest_digest, digest);
  ASSERT_EQ(s.list().size(), 1u);
  EXPECT_EQ(s.list()[0].ref, "registry-1.docker.io/library/foo:latest");
}
