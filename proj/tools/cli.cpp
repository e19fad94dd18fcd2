#include "cli.hpp"

#include <CLI11.hpp>
#include <fstream>
#include <iostream>
#include <sstream>

#include "nsbuild/builder.hpp"
#include "nsbuild/idmap.hpp"
#include "nsbuild/image.hpp"
#include "nsbuild/sandbox.hpp"

namespace nsbuild::cli {

namespace {

namespace fs = std::filesystem;

std::optional<std::string> slurp(const std::string& path) {
  std::ifstream in(path);
  if (!in) return std::nullopt;
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int lint_space(const std::string& label, const std::string& subid_path, const std::string& accounts_path,
               std::ostream& out, std::ostream& err, bool& any_error) {
  const auto subid = slurp(subid_path);
  if (!subid) {
    err << "error: cannot read " << subid_path << std::endl;
    return builder::kExitParse;
  }
  const auto accounts = slurp(accounts_path);
  if (!accounts) {
    err << "error: cannot read " << accounts_path << std::endl;
    return builder::kExitParse;
  }
  const auto parsed = idmap::parse_subid(*subid);
  auto findings = parsed.findings;
  const auto lint = idmap::lint_config(parsed.entries, idmap::parse_account_ids(*accounts));
  findings.insert(findings.end(), lint.begin(), lint.end());
  for (const auto& f : findings) {
    out << label << ": " << idmap::to_string(f.severity) << ": " << idmap::to_string(f.kind) << ": " << f.detail << "\n";
    any_error = any_error || f.severity == idmap::Severity::Error;
  }
  out << label << ": " << parsed.entries.size() << " entries, " << findings.size() << " findings\n";
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Unprivileged container image builder", "nsbuild"};
  app.require_subcommand(1);
  std::string storage;
  app.add_option("-s,--storage", storage, "Image store directory (default $NSBUILD_STORAGE or ~/.cache/nsbuild)");

  builder::BuildOptions build;
  std::vector<std::string> build_args;
  std::string dockerfile;
  std::string shim;
  std::string context = ".";
  auto* cmd_build = app.add_subcommand("build", "Build an image from a Dockerfile");
  cmd_build->add_option("-t,--tag", build.tag, "Name of the image to build")->required();
  cmd_build->add_option("-f,--file", dockerfile, "Dockerfile (default CONTEXT/Dockerfile)");
  cmd_build->add_flag("--force", build.force, "Inject workarounds so privileged package managers succeed");
  cmd_build->add_option("--build-arg", build_args, "Set build-time variable KEY=VALUE (repeatable)")
      ->allow_extra_args(false);
  cmd_build->add_option("--shim", shim, "Preload shim library for faked ownership")->check(CLI::ExistingFile);
  cmd_build->add_option("context", context, "Build context directory");

  std::string ref_text;
  auto* cmd_pull = app.add_subcommand("pull", "Pull an image into the store");
  cmd_pull->add_option("ref", ref_text, "Image reference")->required();
  auto* cmd_push = app.add_subcommand("push", "Push a stored image");
  cmd_push->add_option("ref", ref_text, "Image reference")->required();
  auto* cmd_list = app.add_subcommand("list", "List stored images");

  std::string import_dir;
  auto* cmd_import = app.add_subcommand("import", "Store a directory tree as an image");
  cmd_import->add_option("dir", import_dir, "Root filesystem directory")->required()->check(CLI::ExistingDirectory);
  cmd_import->add_option("ref", ref_text, "Image reference")->required();

  std::string subuid = "/etc/subuid", subgid = "/etc/subgid", passwd = "/etc/passwd", group = "/etc/group";
  auto* cmd_lint = app.add_subcommand("lint-subid", "Check subordinate ID ranges for collisions");
  cmd_lint->add_option("--subuid", subuid, "subuid file")->capture_default_str();
  cmd_lint->add_option("--subgid", subgid, "subgid file")->capture_default_str();
  cmd_lint->add_option("--passwd", passwd, "passwd file")->capture_default_str();
  cmd_lint->add_option("--group", group, "group file")->capture_default_str();

  auto* cmd_probe = app.add_subcommand("probe", "Report whether unprivileged containers work here");

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : builder::kExitParse;
  }

  const fs::path store_root = storage.empty() ? fs::path(image::default_store_path()) : fs::path(storage);

  try {
    if (*cmd_build) {
      for (const auto& kv : build_args) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos || eq == 0) {
          err << "error: --build-arg needs KEY=VALUE: " << kv << std::endl;
          return builder::kExitParse;
        }
        build.build_args[kv.substr(0, eq)] = kv.substr(eq + 1);
      }
      build.context = context;
      build.dockerfile = dockerfile.empty() ? fs::path(context) / "Dockerfile" : fs::path(dockerfile);
      build.store_root = store_root;
      if (!shim.empty()) build.shim = fs::absolute(shim);
      if (const char* extra = std::getenv("NSBUILD_DISTRO_CONFIG"); extra && *extra) {
        auto more = inject::load_config_file(extra);
        more.insert(more.end(), build.configs.begin(), build.configs.end());
        build.configs = std::move(more);
      }
      return builder::build(build, out, err).exit_code;
    }

    if (*cmd_list) {
      image::Store store(store_root);
      for (const auto& m : store.list()) out << m.ref << " " << m.manifest_digest << "\n";
      return 0;
    }

    if (*cmd_probe) {
      const auto r = sandbox::probe_host();
      out << "user namespaces: " << (r.user_namespaces ? "available" : "unavailable") << "\n";
      if (!r.user_namespaces) out << "reason: " << r.failure << "\n";
      out << "container type: " << idmap::to_string(r.type) << "\n";
      out << "uid: " << r.uid << "\n" << "gid: " << r.gid << "\n";
      out << "kernel: " << r.kernel << "\n";
      if (r.max_user_namespaces) out << "user.max_user_namespaces: " << *r.max_user_namespaces << "\n";
      if (r.unprivileged_userns_clone) out << "kernel.unprivileged_userns_clone: " << *r.unprivileged_userns_clone << "\n";
      return r.user_namespaces ? 0 : 1;
    }

    if (*cmd_lint) {
      bool any_error = false;
      if (int rc = lint_space("subuid", subuid, passwd, out, err, any_error)) return rc;
      if (int rc = lint_space("subgid", subgid, group, out, err, any_error)) return rc;
      return any_error ? 1 : 0;
    }

    image::ImageRef ref;
    try {
      ref = image::ImageRef::parse(ref_text);
    } catch (const Error& e) {
      err << "error: " << e.what() << std::endl;
      return builder::kExitParse;
    }
    image::Store store(store_root);

    if (*cmd_pull) {
      try {
        const auto digest = builder::pull_image(ref, store, {}, out);
        out << ref.str() << " " << digest << "\n";
        return 0;
      } catch (const Error& e) {
        err << "error: pull failed: " << e.what() << std::endl;
        return builder::kExitPull;
      }
    }

    if (*cmd_push) {
      if (!store.read_meta(ref)) {
        err << "error: no such image in storage: " << ref_text << std::endl;
        return builder::kExitExport;
      }
      try {
        const auto digest = builder::push_image(ref, store, {});
        out << ref.str() << " " << digest << "\n";
        return 0;
      } catch (const Error& e) {
        err << "error: push failed: " << e.what() << std::endl;
        return builder::kExitExport;
      }
    }

    if (*cmd_import) {
      const auto digest = builder::import_directory(import_dir, ref, store);
      out << ref.str() << " " << digest << "\n";
      return 0;
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << std::endl;
    return builder::kExitExport;
  }
  return 0;
}

}  // namespace nsbuild::cli
