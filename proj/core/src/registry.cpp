#define CPPHTTPLIB_OPENSSL_SUPPORT
#include "nsbuild/registry.hpp"

#include <unistd.h>

#include <cstdlib>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>

#include "httplib.h"
#include "nsbuild/digest.hpp"

namespace nsbuild::registry {

namespace fs = std::filesystem;

namespace {

using json = nlohmann::json;

[[noreturn]] void fail(RegistryErrorKind kind, const std::string& message, int status = 0) {
  throw RegistryError(kind, message, status);
}

std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

bool is_loopback(std::string_view host) {
  const auto name = host.substr(0, host.rfind(':') == std::string_view::npos || host.front() == '['
                                       ? host.size()
                                       : host.rfind(':'));
  return name == "localhost" || name.starts_with("127.") || name == "[::1]";
}

// Splits "scheme://authority/path?query" into origin and the rest.
struct Url {
  std::string origin;  // "scheme://authority"
  std::string target;  // path and query, at least "/"
};

std::optional<Url> split_url(std::string_view url) {
  const auto sep = url.find("://");
  if (sep == std::string_view::npos) return std::nullopt;
  const auto slash = url.find('/', sep + 3);
  Url out;
  out.origin = std::string(url.substr(0, slash));
  out.target = slash == std::string_view::npos ? "/" : std::string(url.substr(slash));
  return out;
}

std::string url_encode(std::string_view s) {
  static constexpr char kHex[] = "0123456789ABCDEF";
  std::string out;
  for (unsigned char c : s) {
    if (std::isalnum(c) || c == '-' || c == '_' || c == '.' || c == '~') {
      out += static_cast<char>(c);
    } else {
      out += '%';
      out += kHex[c >> 4];
      out += kHex[c & 15];
    }
  }
  return out;
}

std::string env_or(const char* a, const char* b) {
  if (const char* v = std::getenv(a); v && *v) return v;
  if (const char* v = std::getenv(b); v && *v) return v;
  return {};
}

bool no_proxy_matches(std::string_view host) {
  const std::string list = env_or("NO_PROXY", "no_proxy");
  std::string name(host.substr(0, host.find(':')));
  std::size_t start = 0;
  while (start < list.size()) {
    auto end = list.find(',', start);
    if (end == std::string::npos) end = list.size();
    std::string item = list.substr(start, end - start);
    start = end + 1;
    while (!item.empty() && item.front() == ' ') item.erase(item.begin());
    while (!item.empty() && item.back() == ' ') item.pop_back();
    if (item.empty()) continue;
    if (item == "*") return true;
    if (item.front() == '.') item.erase(item.begin());
    if (name == item || (name.size() > item.size() && name.ends_with("." + item))) return true;
  }
  return false;
}

Descriptor parse_descriptor(const json& j) {
  Descriptor d;
  d.media_type = j.value("mediaType", "");
  d.digest = j.at("digest").get<std::string>();
  d.size = j.at("size").get<std::int64_t>();
  if (!is_sha256_digest(d.digest)) fail(RegistryErrorKind::BadManifest, "unsupported digest: " + d.digest);
  if (d.size < 0) fail(RegistryErrorKind::BadManifest, "negative size for " + d.digest);
  return d;
}

json descriptor_json(const Descriptor& d) {
  return {{"mediaType", d.media_type}, {"digest", d.digest}, {"size", d.size}};
}

std::string media_type_of(std::string_view bytes, std::string_view content_type) {
  try {
    const auto j = json::parse(bytes);
    if (j.is_object() && j.contains("mediaType") && j["mediaType"].is_string()) return j["mediaType"].get<std::string>();
  } catch (const json::exception&) {
  }
  auto ct = std::string(content_type.substr(0, content_type.find(';')));
  while (!ct.empty() && ct.back() == ' ') ct.pop_back();
  return ct;
}

}  // namespace

// ---- manifests --------------------------------------------------------------

bool is_manifest_list(std::string_view media_type) {
  return media_type == media::kOciIndex || media_type == media::kDockerList;
}

Manifest Manifest::parse(std::string_view bytes, std::string_view content_type) {
  json j;
  try {
    j = json::parse(bytes);
  } catch (const json::exception& e) {
    fail(RegistryErrorKind::BadManifest, std::string("malformed manifest: ") + e.what());
  }
  Manifest m;
  m.media_type = media_type_of(bytes, content_type);
  if (m.media_type.empty() && j.is_object() && j.contains("config")) m.media_type = std::string(media::kOciManifest);
  if (m.media_type != media::kOciManifest && m.media_type != media::kDockerManifest) {
    fail(RegistryErrorKind::UnsupportedMediaType, "unsupported manifest media type: '" + m.media_type + "'");
  }
  try {
    if (j.value("schemaVersion", 0) != 2) fail(RegistryErrorKind::BadManifest, "unsupported manifest schemaVersion");
    m.config = parse_descriptor(j.at("config"));
    for (const auto& l : j.at("layers")) m.layers.push_back(parse_descriptor(l));
  } catch (const json::exception& e) {
    fail(RegistryErrorKind::BadManifest, std::string("malformed manifest: ") + e.what());
  }
  return m;
}

std::string Manifest::to_json() const {
  json j;
  j["schemaVersion"] = 2;
  j["mediaType"] = media_type;
  j["config"] = descriptor_json(config);
  j["layers"] = json::array();
  for (const auto& l : layers) j["layers"].push_back(descriptor_json(l));
  return j.dump();
}

std::optional<Descriptor> select_platform(std::string_view index_bytes, std::string_view os, std::string_view arch) {
  json j;
  try {
    j = json::parse(index_bytes);
  } catch (const json::exception& e) {
    fail(RegistryErrorKind::BadManifest, std::string("malformed manifest list: ") + e.what());
  }
  if (!j.is_object() || !j.contains("manifests") || !j["manifests"].is_array()) {
    fail(RegistryErrorKind::BadManifest, "manifest list has no manifests");
  }
  for (const auto& entry : j["manifests"]) {
    if (!entry.is_object() || !entry.contains("platform")) continue;
    const auto& p = entry["platform"];
    if (p.value("os", "") == os && p.value("architecture", "") == arch) return parse_descriptor(entry);
  }
  return std::nullopt;
}

std::optional<Challenge> parse_challenge(std::string_view header) {
  auto sp = header.find(' ');
  if (sp == std::string_view::npos) return std::nullopt;
  Challenge c;
  c.scheme = lower(std::string(header.substr(0, sp)));
  std::string_view rest = header.substr(sp + 1);
  while (!rest.empty()) {
    while (!rest.empty() && (rest.front() == ' ' || rest.front() == ',')) rest.remove_prefix(1);
    const auto eq = rest.find('=');
    if (eq == std::string_view::npos) break;
    const auto key = lower(std::string(rest.substr(0, eq)));
    rest.remove_prefix(eq + 1);
    std::string value;
    if (!rest.empty() && rest.front() == '"') {
      rest.remove_prefix(1);
      while (!rest.empty() && rest.front() != '"') {
        if (rest.front() == '\\' && rest.size() > 1) rest.remove_prefix(1);
        value += rest.front();
        rest.remove_prefix(1);
      }
      if (!rest.empty()) rest.remove_prefix(1);
    } else {
      const auto end = rest.find(',');
      value = std::string(rest.substr(0, end));
      rest.remove_prefix(end == std::string_view::npos ? rest.size() : end);
    }
    if (key == "realm") c.realm = value;
    else if (key == "service") c.service = value;
    else if (key == "scope") c.scope = value;
  }
  return c;
}

// ---- client -----------------------------------------------------------------

struct Client::Impl {
  Client& owner;
  std::string base;  // origin of the registry
  std::map<std::string, std::unique_ptr<httplib::Client>> connections;

  explicit Impl(Client& o) : owner(o) {}

  httplib::Client& connection(const std::string& origin) {
    auto& slot = connections[origin];
    if (!slot) {
      slot = std::make_unique<httplib::Client>(origin);
      if (!slot->is_valid()) fail(RegistryErrorKind::Transport, "cannot create HTTP client for " + origin);
      slot->set_url_encode(false);
      slot->set_follow_location(true);
      slot->set_connection_timeout(owner.options_.timeout);
      slot->set_read_timeout(owner.options_.timeout);
      slot->set_write_timeout(owner.options_.timeout);
      const bool https = origin.starts_with("https://");
      if (https && !owner.options_.ca_file.empty()) slot->set_ca_cert_path(owner.options_.ca_file);
      const std::string authority = origin.substr(origin.find("://") + 3);
      if (!is_loopback(authority) && !no_proxy_matches(authority)) {
        const std::string proxy = https ? env_or("HTTPS_PROXY", "https_proxy") : env_or("HTTP_PROXY", "http_proxy");
        if (!proxy.empty()) {
          auto hostport = proxy.substr(proxy.find("://") == std::string::npos ? 0 : proxy.find("://") + 3);
          hostport = hostport.substr(0, hostport.find('/'));
          if (const auto at = hostport.rfind('@'); at != std::string::npos) hostport = hostport.substr(at + 1);
          const auto colon = hostport.rfind(':');
          const int port = colon == std::string::npos ? 80 : std::atoi(hostport.c_str() + colon + 1);
          slot->set_proxy(hostport.substr(0, colon), port);
        }
      }
    }
    return *slot;
  }

  Url resolve(const std::string& url_or_path) {
    if (auto u = split_url(url_or_path)) return *u;
    return {base, url_or_path};
  }

  void fetch_token(const Challenge& c, const std::string& fallback_scope) {
    if (c.realm.empty()) fail(RegistryErrorKind::AuthFailed, "bearer challenge without realm", 401);
    auto realm = split_url(c.realm);
    if (!realm) fail(RegistryErrorKind::AuthFailed, "unusable token realm: " + c.realm, 401);
    std::string target = realm->target;
    const std::string scope = c.scope.empty() ? fallback_scope : c.scope;
    std::string query;
    if (!c.service.empty()) query += "service=" + url_encode(c.service);
    if (!scope.empty()) query += std::string(query.empty() ? "" : "&") + "scope=" + url_encode(scope);
    if (!query.empty()) target += (target.find('?') == std::string::npos ? "?" : "&") + query;

    httplib::Headers headers;
    if (!owner.options_.username.empty()) {
      headers.emplace(httplib::make_basic_authentication_header(owner.options_.username, owner.options_.password));
    }
    auto res = connection(realm->origin).Get(target, headers);
    if (!res) fail(RegistryErrorKind::Transport, "token request to " + c.realm + " failed: " + httplib::to_string(res.error()));
    if (res->status != 200) fail(RegistryErrorKind::AuthFailed, "token endpoint answered " + std::to_string(res->status), res->status);
    try {
      const auto j = json::parse(res->body);
      std::string token = j.value("token", "");
      if (token.empty()) token = j.value("access_token", "");
      if (token.empty()) fail(RegistryErrorKind::AuthFailed, "token endpoint returned no token", res->status);
      auto& a = owner.auth_;
      a.mode = AuthState::Mode::Bearer;
      a.token = token;
      a.expiry = std::chrono::steady_clock::now() + std::chrono::seconds(j.value("expires_in", 60));
      a.realm = c.realm;
      a.service = c.service;
      a.scope = scope;
    } catch (const json::exception& e) {
      fail(RegistryErrorKind::AuthFailed, std::string("malformed token response: ") + e.what(), res->status);
    }
  }

  // Runs `call` with credentials; on a 401 obtains a token from the
  // challenge and retries once.
  template <typename Call>
  httplib::Result send(const std::string& url_or_path, httplib::Headers headers, const std::string& scope, Call&& call) {
    const Url url = resolve(url_or_path);
    for (int attempt = 0;; ++attempt) {
      httplib::Headers h = headers;
      if (owner.auth_.mode == AuthState::Mode::Bearer) h.emplace("Authorization", "Bearer " + owner.auth_.token);
      auto res = call(connection(url.origin), url.target, h);
      if (!res) fail(RegistryErrorKind::Transport, "request to " + url.origin + url.target + " failed: " + httplib::to_string(res.error()));
      if (res->status != 401) return res;
      if (attempt > 0) fail(RegistryErrorKind::AuthFailed, "registry rejected credentials for " + url.target, 401);
      const auto challenge = parse_challenge(res->get_header_value("WWW-Authenticate"));
      if (!challenge || challenge->scheme != "bearer") {
        fail(RegistryErrorKind::AuthFailed, "registry requires unsupported authentication", 401);
      }
      fetch_token(*challenge, scope);
    }
  }

  httplib::Result get(const std::string& path, const httplib::Headers& headers, const std::string& scope) {
    return send(path, headers, scope,
                [](httplib::Client& c, const std::string& t, const httplib::Headers& h) { return c.Get(t, h); });
  }

  // Streams a blob to a temporary file while hashing; the file is only
  // returned when the digest matches.
  std::string download_blob(const std::string& name, const Descriptor& d, const fs::path& tmp_dir, const std::string& scope) {
    std::string tmp = (tmp_dir / "dl-XXXXXX").string();
    const int fd = ::mkstemp(tmp.data());
    if (fd < 0) fail(RegistryErrorKind::Transport, "cannot create temporary file in " + tmp_dir.string());
    ::close(fd);
    int status = 0;
    Sha256 hash;
    std::ofstream out;
    auto res = send("/v2/" + name + "/blobs/" + d.digest, {}, scope,
                    [&](httplib::Client& c, const std::string& t, const httplib::Headers& h) {
                      out.close();
                      out.open(tmp, std::ios::binary | std::ios::trunc);
                      hash = Sha256();
                      return c.Get(
                          t, h,
                          [&](const httplib::Response& r) {
                            status = r.status;
                            return true;
                          },
                          [&](const char* data, size_t len) {
                            if (status != 200) return true;
                            hash.update(std::string_view(data, len));
                            out.write(data, static_cast<std::streamsize>(len));
                            return static_cast<bool>(out);
                          });
                    });
    out.close();
    if (res->status != 200) {
      fs::remove(tmp);
      if (res->status == 404) fail(RegistryErrorKind::NotFound, "blob not found: " + d.digest, 404);
      fail(RegistryErrorKind::Transport, "blob " + d.digest + ": HTTP " + std::to_string(res->status), res->status);
    }
    const std::string actual = "sha256:" + hash.hex_digest();
    if (actual != d.digest) {
      fs::remove(tmp);
      fail(RegistryErrorKind::DigestMismatch, "digest mismatch for blob " + d.digest + ": got " + actual);
    }
    return tmp;
  }
};

Client::Client(std::string host, ClientOptions options)
    : impl_(std::make_unique<Impl>(*this)), host_(std::move(host)), options_(std::move(options)) {
  if (options_.scheme.empty()) options_.scheme = is_loopback(host_) ? "http" : "https";
  if (options_.ca_file.empty()) {
    if (const char* ca = std::getenv("SSL_CERT_FILE"); ca && *ca) options_.ca_file = ca;
  }
  if (options_.architecture.empty()) options_.architecture = image::host_architecture();
  impl_->base = options_.scheme + "://" + host_;
}

Client::~Client() = default;

void Client::ping() {
  auto res = impl_->get("/v2/", {}, "");
  if (res->status != 200) fail(RegistryErrorKind::Transport, "registry " + host_ + " answered " + std::to_string(res->status), res->status);
}

PullResult Client::pull(const image::ImageRef& ref, image::Store& store) {
  const std::string name = ref.repository;
  const std::string scope = "repository:" + name + ":pull";
  const httplib::Headers accept = {{"Accept", std::string(media::kOciManifest) + ", " + std::string(media::kDockerManifest) +
                                                  ", " + std::string(media::kOciIndex) + ", " +
                                                  std::string(media::kDockerList)}};

  auto fetch_manifest = [&](const std::string& reference, const std::optional<std::string>& expect) {
    auto res = impl_->get("/v2/" + name + "/manifests/" + reference, accept, scope);
    if (res->status == 404) fail(RegistryErrorKind::NotFound, "manifest not found: " + ref.str(), 404);
    if (res->status != 200) {
      fail(RegistryErrorKind::Transport, "manifest " + ref.str() + ": HTTP " + std::to_string(res->status), res->status);
    }
    const std::string digest = sha256_digest(res->body);
    if (expect && digest != *expect) fail(RegistryErrorKind::DigestMismatch, "manifest digest mismatch: expected " + *expect + ", got " + digest);
    const std::string claimed = res->get_header_value("Docker-Content-Digest");
    if (!claimed.empty() && is_sha256_digest(claimed) && claimed != digest) {
      fail(RegistryErrorKind::DigestMismatch, "manifest digest mismatch: registry claims " + claimed + ", got " + digest);
    }
    return std::pair{res->body, res->get_header_value("Content-Type")};
  };

  auto [body, content_type] = fetch_manifest(ref.reference(), ref.digest);
  std::string media_type = media_type_of(body, content_type);
  if (is_manifest_list(media_type)) {
    const auto chosen = select_platform(body, options_.os, options_.architecture);
    if (!chosen) {
      fail(RegistryErrorKind::NotFound,
           "no manifest for " + options_.os + "/" + options_.architecture + " in " + ref.str());
    }
    std::tie(body, content_type) = fetch_manifest(chosen->digest, chosen->digest);
    media_type = media_type_of(body, content_type);
  }

  PullResult result;
  result.manifest = Manifest::parse(body, content_type);
  result.manifest_media_type = result.manifest.media_type;

  // Everything is verified before anything becomes visible in the cache.
  std::vector<const Descriptor*> wanted;
  wanted.push_back(&result.manifest.config);
  for (const auto& l : result.manifest.layers) wanted.push_back(&l);
  std::vector<std::pair<std::string, std::string>> staged;  // temp file, digest
  try {
    for (const Descriptor* d : wanted) {
      if (store.has_blob(d->digest)) continue;
      bool dup = false;
      for (const auto& s : staged) dup = dup || s.second == d->digest;
      if (dup) continue;
      staged.emplace_back(impl_->download_blob(name, *d, store.temp_dir(), scope), d->digest);
      ++result.blobs_downloaded;
    }
  } catch (...) {
    for (const auto& s : staged) fs::remove(s.first);
    throw;
  }
  for (const auto& [tmp, digest] : staged) {
    ::chmod(tmp.c_str(), 0644);
    fs::rename(tmp, store.blob_path(digest));
  }
  result.manifest_digest = store.put_blob(body);
  return result;
}

std::string Client::push(const image::ImageRef& ref, const image::Store& store, std::string_view manifest_digest) {
  const std::string name = ref.repository;
  const std::string scope = "repository:" + name + ":pull,push";
  const std::string manifest_bytes = store.read_blob(manifest_digest);
  const Manifest manifest = Manifest::parse(manifest_bytes);

  std::vector<Descriptor> blobs{manifest.config};
  blobs.insert(blobs.end(), manifest.layers.begin(), manifest.layers.end());
  for (const auto& d : blobs) {
    auto head = impl_->send("/v2/" + name + "/blobs/" + d.digest, {}, scope,
                            [](httplib::Client& c, const std::string& t, const httplib::Headers& h) { return c.Head(t, h); });
    if (head->status == 200) continue;

    auto start = impl_->send("/v2/" + name + "/blobs/uploads/", {}, scope,
                             [](httplib::Client& c, const std::string& t, const httplib::Headers& h) {
                               return c.Post(t, h, "", "application/octet-stream");
                             });
    if (start->status != 202) {
      fail(RegistryErrorKind::UploadRejected,
           "upload initiation for " + d.digest + " rejected: HTTP " + std::to_string(start->status) + ": " + start->body,
           start->status);
    }
    std::string location = start->get_header_value("Location");
    if (location.empty()) fail(RegistryErrorKind::UploadRejected, "upload initiation returned no Location", start->status);
    location += (location.find('?') == std::string::npos ? "?" : "&") + std::string("digest=") + d.digest;

    const fs::path path = store.blob_path(d.digest);
    const auto size = static_cast<std::size_t>(fs::file_size(path));
    auto put = impl_->send(location, {}, scope, [&](httplib::Client& c, const std::string& t, const httplib::Headers& h) {
      auto in = std::make_shared<std::ifstream>(path, std::ios::binary);
      return c.Put(
          t, h, size,
          [in](size_t offset, size_t length, httplib::DataSink& sink) {
            std::vector<char> buf(std::min<size_t>(length, 1 << 16));
            in->seekg(static_cast<std::streamoff>(offset));
            in->read(buf.data(), static_cast<std::streamsize>(buf.size()));
            const auto got = static_cast<size_t>(in->gcount());
            return got > 0 && sink.write(buf.data(), got);
          },
          "application/octet-stream");
    });
    if (put->status != 201 && put->status != 204) {
      fail(RegistryErrorKind::UploadRejected,
           "upload of " + d.digest + " rejected: HTTP " + std::to_string(put->status) + ": " + put->body, put->status);
    }
    ++blob_uploads_;
  }

  auto res = impl_->send("/v2/" + name + "/manifests/" + ref.reference(), {}, scope,
                         [&](httplib::Client& c, const std::string& t, const httplib::Headers& h) {
                           return c.Put(t, h, manifest_bytes, manifest.media_type);
                         });
  if (res->status != 201 && res->status != 200 && res->status != 204) {
    fail(RegistryErrorKind::UploadRejected,
         "manifest upload for " + ref.str() + " rejected: HTTP " + std::to_string(res->status) + ": " + res->body, res->status);
  }
  return std::string(manifest_digest);
}

}  // namespace nsbuild::registry
