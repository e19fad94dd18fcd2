#pragma once

#include <chrono>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "nsbuild/error.hpp"
#include "nsbuild/image.hpp"

namespace nsbuild::registry {

namespace media {
inline constexpr std::string_view kOciManifest = "application/vnd.oci.image.manifest.v1+json";
inline constexpr std::string_view kOciIndex = "application/vnd.oci.image.index.v1+json";
inline constexpr std::string_view kDockerManifest = "application/vnd.docker.distribution.manifest.v2+json";
inline constexpr std::string_view kDockerList = "application/vnd.docker.distribution.manifest.list.v2+json";
inline constexpr std::string_view kOciConfig = "application/vnd.oci.image.config.v1+json";
inline constexpr std::string_view kDockerConfig = "application/vnd.docker.container.image.v1+json";
inline constexpr std::string_view kOciLayer = "application/vnd.oci.image.layer.v1.tar";
inline constexpr std::string_view kOciLayerGzip = "application/vnd.oci.image.layer.v1.tar+gzip";
inline constexpr std::string_view kDockerLayerGzip = "application/vnd.docker.image.rootfs.diff.tar.gzip";
}  // namespace media

enum class RegistryErrorKind {
  DigestMismatch,
  AuthFailed,
  NotFound,
  UnsupportedMediaType,
  UploadRejected,
  BadManifest,
  Transport,
};

class RegistryError : public KindedError<RegistryErrorKind> {
 public:
  RegistryError(RegistryErrorKind kind, std::string message, int status = 0)
      : KindedError(kind, std::move(message)), status_(status) {}
  // HTTP status that triggered the error, 0 if none.
  int status() const noexcept { return status_; }

 private:
  int status_;
};

struct Descriptor {
  std::string media_type;
  std::string digest;
  std::int64_t size = 0;
  bool operator==(const Descriptor&) const = default;
};

// Image manifest (OCI or Docker schema 2). Lists and indexes are resolved
// before one of these is produced.
struct Manifest {
  std::string media_type;
  Descriptor config;
  std::vector<Descriptor> layers;

  // `content_type` is the response header; the body's own mediaType wins
  // when present. Rejects lists/indexes and unknown types.
  static Manifest parse(std::string_view bytes, std::string_view content_type = {});
  std::string to_json() const;
};

bool is_manifest_list(std::string_view media_type);

// Picks the entry for os/arch out of an index or manifest list.
std::optional<Descriptor> select_platform(std::string_view index_bytes, std::string_view os, std::string_view arch);

struct AuthState {
  enum class Mode { Anonymous, Bearer };
  Mode mode = Mode::Anonymous;
  std::string token;
  std::chrono::steady_clock::time_point expiry{};
  std::string realm;
  std::string service;
  std::string scope;
};

// Parsed `WWW-Authenticate: Bearer k="v",...` challenge.
struct Challenge {
  std::string scheme;
  std::string realm;
  std::string service;
  std::string scope;
};
std::optional<Challenge> parse_challenge(std::string_view header);

struct ClientOptions {
  // "http" or "https"; empty picks http for localhost/loopback, https otherwise.
  std::string scheme;
  // CA bundle; defaults to $SSL_CERT_FILE.
  std::string ca_file;
  std::string os = "linux";
  std::string architecture;  // defaults to the host's
  // Optional credentials for the token endpoint.
  std::string username;
  std::string password;
  std::chrono::seconds timeout{60};
};

struct PullResult {
  Manifest manifest;
  std::string manifest_digest;
  std::string manifest_media_type;
  std::size_t blobs_downloaded = 0;
};

// OCI distribution client for one registry host. Pulled blobs land in the
// store's blob cache only after their digest has been verified.
class Client {
 public:
  explicit Client(std::string host, ClientOptions options = {});
  ~Client();
  Client(const Client&) = delete;
  Client& operator=(const Client&) = delete;

  const std::string& host() const { return host_; }

  // GET /v2/ to check the endpoint (authenticating if challenged).
  void ping();

  PullResult pull(const image::ImageRef& ref, image::Store& store);

  // Uploads config and layer blobs of the stored manifest (skipping any the
  // registry already has), then the manifest. Returns the manifest digest.
  std::string push(const image::ImageRef& ref, const image::Store& store, std::string_view manifest_digest);

  const AuthState& auth() const { return auth_; }
  std::size_t blob_uploads() const { return blob_uploads_; }

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  std::string host_;
  ClientOptions options_;
  AuthState auth_;
  std::size_t blob_uploads_ = 0;

  friend struct Impl;
};

}  // namespace nsbuild::registry
