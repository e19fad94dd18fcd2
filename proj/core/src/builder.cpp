#include "nsbuild/builder.hpp"

#include <stdlib.h>

#include <cstdio>
#include <fstream>
#include <ostream>
#include <sstream>

#include "nsbuild/digest.hpp"
#include "nsbuild/ownerdb.hpp"
#include "nsbuild/sandbox.hpp"
#include "nsbuild/tar.hpp"

namespace nsbuild::builder {

namespace {

// Thrown inside build() to leave with a specific exit code.
struct Abort {
  int code;
  std::string message;
};

void set_env(std::vector<std::string>& env, const std::string& key, const std::string& value) {
  const std::string prefix = key + "=";
  for (auto& e : env) {
    if (e.starts_with(prefix)) {
      e = prefix + value;
      return;
    }
  }
  env.push_back(prefix + value);
}

std::string join_container_path(const std::string& base, const std::string& p) {
  if (!p.empty() && p.front() == '/') return fs::path(p).lexically_normal().string();
  return (fs::path(base.empty() ? "/" : base) / p).lexically_normal().string();
}

using image::remove_tree;

void copy_into(const fs::path& context, const dockerfile::CopyArgs& args, const fs::path& root, const std::string& workdir) {
  const std::string dest = join_container_path(workdir, args.destination);
  const bool dest_is_dir_syntax = args.destination.ends_with('/') || args.sources.size() > 1;
  const fs::path dest_host = image::resolve_in_root(root, dest, true);
  std::error_code ec;
  const bool into_dir = dest_is_dir_syntax || fs::is_directory(dest_host, ec);
  if (into_dir) fs::create_directories(dest_host, ec);
  else fs::create_directories(dest_host.parent_path(), ec);

  const auto options = fs::copy_options::recursive | fs::copy_options::overwrite_existing | fs::copy_options::copy_symlinks;
  for (const auto& src : args.sources) {
    const auto rel = tar::clean_path(src);
    if (!rel) throw Abort{kExitRun, "COPY source outside the context: " + src};
    const fs::path from = rel->empty() ? context : context / *rel;
    if (!fs::exists(fs::symlink_status(from, ec))) throw Abort{kExitRun, "COPY source not found: " + src};
    if (fs::is_directory(from, ec)) {
      // the directory's contents, not the directory itself
      fs::create_directories(dest_host, ec);
      for (const auto& child : fs::directory_iterator(from)) {
        const fs::path to = image::resolve_in_root(root, (fs::path(dest) / child.path().filename()).string(), false);
        fs::copy(child.path(), to, options, ec);
        if (ec) throw Abort{kExitRun, "COPY " + src + ": " + ec.message()};
      }
    } else {
      const fs::path to = into_dir ? image::resolve_in_root(root, (fs::path(dest) / from.filename()).string(), false)
                                   : image::resolve_in_root(root, dest, false);
      fs::copy(from, to, options, ec);
      if (ec) throw Abort{kExitRun, "COPY " + src + ": " + ec.message()};
    }
  }
}

fs::path make_socket_dir() {
  std::string tmpl = (fs::temp_directory_path() / "nsbuild-XXXXXX").string();
  if (::mkdtemp(tmpl.data()) == nullptr) throw Abort{kExitRun, "cannot create socket directory"};
  return tmpl;
}

}  // namespace

std::string instruction_prefix(int number) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%3d ", number);
  return buf;
}

std::string commit_image(const fs::path& root, const ownerdb::Session* db, const image::ImageConfig& config,
                         const image::ImageRef& ref, image::Store& store) {
  std::string tmp = (store.temp_dir() / "layer-XXXXXX").string();
  const int fd = ::mkstemp(tmp.data());
  if (fd < 0) throw image::ImageError(image::ImageErrorKind::Io, "cannot create temporary layer file");
  ::close(fd);
  try {
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      image::export_layer(root, db, out);
      out.close();
      if (!out) throw image::ImageError(image::ImageErrorKind::Io, "cannot write layer " + tmp);
    }
    const std::string layer_digest = sha256_file_digest(tmp);
    const auto layer_size = static_cast<std::int64_t>(fs::file_size(tmp));
    store.commit_blob(tmp, layer_digest);

    const std::string config_json = image::make_config(config, layer_digest);
    const std::string config_digest = store.put_blob(config_json);

    registry::Manifest manifest;
    manifest.media_type = std::string(registry::media::kOciManifest);
    manifest.config = {std::string(registry::media::kOciConfig), config_digest, static_cast<std::int64_t>(config_json.size())};
    manifest.layers.push_back({std::string(registry::media::kOciLayer), layer_digest, layer_size});
    const std::string manifest_digest = store.put_blob(manifest.to_json());

    store.write_meta(ref, {ref.str(), manifest_digest, config_digest, manifest.media_type});
    return manifest_digest;
  } catch (...) {
    std::error_code ec;
    fs::remove(tmp, ec);
    throw;
  }
}

std::string pull_image(const image::ImageRef& ref, image::Store& store, const registry::ClientOptions& options,
                       std::ostream& log) {
  image::FileLock lock(store.lock_path(ref.encoded()));
  registry::Client client(ref.host, options);
  log << "pulling image: " << ref.str() << std::endl;
  const auto pulled = client.pull(ref, store);

  std::vector<fs::path> layers;
  for (const auto& l : pulled.manifest.layers) layers.push_back(store.blob_path(l.digest));
  const fs::path root = store.image_root(ref);
  const fs::path staging = root.string() + ".unpack";
  remove_tree(staging);
  const auto report = image::unpack(layers, staging);
  for (const auto& w : report.warnings) log << "warning: " << w << std::endl;
  remove_tree(root);
  fs::rename(staging, root);
  store.write_meta(ref, {ref.str(), pulled.manifest_digest, pulled.manifest.config.digest, pulled.manifest_media_type});
  return pulled.manifest_digest;
}

std::string push_image(const image::ImageRef& ref, image::Store& store, const registry::ClientOptions& options) {
  const auto meta = store.read_meta(ref);
  if (!meta) throw image::ImageError(image::ImageErrorKind::NotFound, "no such image in storage: " + ref.str());
  registry::Client client(ref.host, options);
  return client.push(ref, store, meta->manifest_digest);
}

std::string import_directory(const fs::path& dir, const image::ImageRef& ref, image::Store& store) {
  image::FileLock lock(store.lock_path(ref.encoded()));
  const fs::path root = store.image_root(ref);
  const fs::path staging = root.string() + ".unpack";
  remove_tree(staging);
  const std::string digest = commit_image(dir, nullptr, {}, ref, store);
  const auto meta = store.read_meta(ref);
  const auto manifest = registry::Manifest::parse(store.read_blob(meta->manifest_digest));
  std::vector<fs::path> layers{store.blob_path(manifest.layers.front().digest)};
  image::unpack(layers, staging);
  remove_tree(root);
  fs::rename(staging, root);
  return digest;
}

BuildOutcome build(const BuildOptions& options, std::ostream& out, std::ostream& err) {
  BuildOutcome outcome;
  auto failed = [&](int code, const std::string& message) {
    outcome.exit_code = code;
    outcome.error = message;
    err << "error: " << message << std::endl;
    return outcome;
  };

  dockerfile::Recipe recipe;
  image::ImageRef target;
  try {
    std::ifstream in(options.dockerfile);
    if (!in) return failed(kExitParse, "cannot read Dockerfile: " + options.dockerfile.string());
    std::ostringstream text;
    text << in.rdbuf();
    recipe = dockerfile::parse(text.str(), options.dockerfile.string(), options.build_args);
    target = image::ImageRef::parse(options.tag);
  } catch (const Error& e) {
    return failed(kExitParse, e.what());
  }
  for (const auto& w : recipe.warnings) err << "warning: " << w << std::endl;
  std::error_code ec;
  if (!fs::is_directory(options.context, ec)) return failed(kExitParse, "context is not a directory: " + options.context.string());

  std::optional<image::Store> store_holder;
  try {
    store_holder.emplace(options.store_root);
  } catch (const Error& e) {
    return failed(kExitExport, e.what());
  }
  image::Store& store = *store_holder;
  image::FileLock build_lock(store.lock_path("build"));

  const fs::path final_root = store.image_root(target);
  const fs::path root = final_root.string() + ".build";
  image::ImageConfig config;
  std::string workdir = "/";
  std::map<std::string, std::string> args;
  inject::ForceState force;
  force.enabled = options.force;

  std::optional<ownerdb::Session> db;
  std::optional<ownerdb::Service> service;
  fs::path socket_dir;
  auto cleanup = [&] {
    if (service) service->stop();
    service.reset();
    if (!socket_dir.empty()) fs::remove_all(socket_dir, ec);
  };

  auto sink = [&](int, std::string_view chunk) {
    out.write(chunk.data(), static_cast<std::streamsize>(chunk.size()));
    out.flush();
  };
  auto run_in_image = [&](const std::vector<std::string>& argv, bool preload) {
    sandbox::SandboxSpec spec;
    spec.image_root = root;
    spec.argv = argv;
    spec.env = config.env;
    for (const auto& [k, v] : args) {
      if (std::none_of(spec.env.begin(), spec.env.end(), [&](const std::string& e) { return e.starts_with(k + "="); })) {
        spec.env.push_back(k + "=" + v);
      }
    }
    spec.workdir = workdir;
    spec.merge_output = true;
    if (preload && service) spec.preload = sandbox::Preload{*options.shim, service->socket_path()};
    out.flush();
    return sandbox::run(spec, sink);
  };

  int number = 0;
  try {
    for (const auto& ins : recipe.instructions) {
      ++number;
      out << instruction_prefix(number);
      if (ins.kind == dockerfile::InstructionKind::Run) {
        out << "RUN " << inject::argv_repr(dockerfile::shell_form(ins)) << std::endl;
      } else {
        out << dockerfile::serialize(ins) << std::endl;
      }

      switch (ins.kind) {
        case dockerfile::InstructionKind::From: {
          const auto& from = ins.as<dockerfile::FromArgs>();
          remove_tree(root);
          if (from.image == "scratch") {
            fs::create_directories(root);
          } else {
            image::ImageRef base;
            try {
              base = image::ImageRef::parse(from.image);
            } catch (const Error& e) {
              throw Abort{kExitParse, e.what()};
            }
            try {
              if (!store.has_image(base)) pull_image(base, store, options.registry_options, out);
            } catch (const Error& e) {
              throw Abort{kExitPull, "cannot pull " + from.image + ": " + e.what()};
            }
            image::snapshot(store.image_root(base), root);
            if (auto meta = store.read_meta(base); meta && store.has_blob(meta->config_digest)) {
              config = image::parse_config(store.read_blob(meta->config_digest));
              if (!config.workdir.empty()) workdir = config.workdir;
            }
          }
          config.architecture.clear();
          force.config = inject::detect_config(root, options.configs);
          if (force.enabled) {
            if (force.config) out << inject::will_use_line(*force.config) << std::endl;
            else out << "--force: no matching config; building without modifications" << std::endl;
          }
          if (options.shim && force.enabled && force.config) {
            // The builder's shim replaces the image's wrapper and its setup.
            out << "--force: faking ownership with builder shim " << options.shim->string() << std::endl;
            force.config->wrapper.clear();
            force.config->init_steps.clear();
            const fs::path journal = store.ownerdb_path(target);
            fs::remove(journal.string() + ".build", ec);
            db.emplace(ownerdb::Session::load(journal.string() + ".build"));
            socket_dir = make_socket_dir();
            service.emplace(*db, socket_dir / "ownerdb.sock");
          }
          break;
        }
        case dockerfile::InstructionKind::Run: {
          const auto argv = dockerfile::shell_form(ins);
          const auto& payload = ins.as<dockerfile::RunArgs>().command;
          const auto step_runner = [&](const std::string& command) {
            return run_in_image({"/bin/sh", "-c", command}, false).exit_code;
          };
          const auto line_sink = [&](const std::string& line) { out << line << std::endl; };
          const int before = force.modified_count;
          std::vector<std::string> actual;
          try {
            actual = inject::prepare_run(argv, payload, step_runner, force, line_sink);
          } catch (const inject::InjectError& e) {
            throw Abort{kExitRun, e.what()};
          }
          const auto result = run_in_image(actual, force.modified_count > before);
          if (!result.ok()) throw Abort{kExitRun, "build failed: RUN command exited with " + std::to_string(result.exit_code)};
          break;
        }
        case dockerfile::InstructionKind::Copy:
          copy_into(options.context, ins.as<dockerfile::CopyArgs>(), root, workdir);
          break;
        case dockerfile::InstructionKind::Env: {
          const auto& var = ins.as<dockerfile::VariableArgs>();
          set_env(config.env, var.key, var.value.value_or(""));
          break;
        }
        case dockerfile::InstructionKind::Arg: {
          const auto& var = ins.as<dockerfile::VariableArgs>();
          const auto it = options.build_args.find(var.key);
          args[var.key] = it != options.build_args.end() ? it->second : var.value.value_or("");
          break;
        }
        case dockerfile::InstructionKind::Workdir: {
          workdir = join_container_path(workdir, ins.as<dockerfile::WorkdirArgs>().path);
          fs::create_directories(image::resolve_in_root(root, workdir, true), ec);
          config.workdir = workdir;
          break;
        }
      }
    }
  } catch (const Abort& a) {
    cleanup();
    outcome.instructions = number;
    const bool run_failed = a.code == kExitRun;
    failed(a.code, a.message);
    if (run_failed && !force.enabled) {
      if (auto hint = inject::advise(force, true)) err << *hint << std::endl;
    }
    return outcome;
  } catch (const Error& e) {
    cleanup();
    outcome.instructions = number;
    return failed(kExitRun, e.what());
  }
  cleanup();

  if (auto summary = inject::advise(force, false)) out << *summary << std::endl;

  try {
    image::FileLock lock(store.lock_path(target.encoded()));
    outcome.manifest_digest = commit_image(root, db ? &*db : nullptr, config, target, store);
    remove_tree(final_root);
    fs::rename(root, final_root);
    if (db) {
      db->save();
      fs::rename(db->journal_path(), store.ownerdb_path(target));
    }
  } catch (const Error& e) {
    return failed(kExitExport, std::string("export failed: ") + e.what());
  }
  outcome.instructions = number;
  out << "grown in " << number << " instructions: " << options.tag << std::endl;
  return outcome;
}

}  // namespace nsbuild::builder
