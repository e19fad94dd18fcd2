/*
 * Preload shim for build containers. Ownership changes, device creation and
 * identity changes report success; the lies are kept by the builder's
 * ownership service so stat() stays consistent and export can use them.
 *
 * Statically linked programs are not affected.
 */
#define _GNU_SOURCE
#include <dlfcn.h>
#include <errno.h>
#include <fcntl.h>
#include <grp.h>
#include <pthread.h>
#include <stdarg.h>
#include <stdint.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>
#include <sys/socket.h>
#include <sys/stat.h>
#include <sys/sysmacros.h>
#include <sys/types.h>
#include <sys/un.h>
#include <unistd.h>

#include "nsbuild/shim_abi.h"

#define EXPORT __attribute__((visibility("default")))

struct record {
  uint32_t uid, gid, mode;
  uint8_t kind;
  uint64_t rdev;
};

/* ---- real functions ---------------------------------------------------- */

static int (*real_fstatat)(int, const char *, struct stat *, int);
static int (*real_fstat)(int, struct stat *);
static int (*real_statx)(int, const char *, int, unsigned, struct statx *);
static int (*real_fchmodat)(int, const char *, mode_t, int);
static int (*real_fchmod)(int, mode_t);
static int (*real_unlinkat)(int, const char *, int);
static int (*real_mknodat)(int, const char *, mode_t, dev_t);

static pthread_once_t resolve_once = PTHREAD_ONCE_INIT;

static void resolve(void) {
  real_fstatat = dlsym(RTLD_NEXT, "fstatat");
  real_fstat = dlsym(RTLD_NEXT, "fstat");
  real_statx = dlsym(RTLD_NEXT, "statx");
  real_fchmodat = dlsym(RTLD_NEXT, "fchmodat");
  real_fchmod = dlsym(RTLD_NEXT, "fchmod");
  real_unlinkat = dlsym(RTLD_NEXT, "unlinkat");
  real_mknodat = dlsym(RTLD_NEXT, "mknodat");
}

#define REAL(name) (pthread_once(&resolve_once, resolve), real_##name)

/* ---- connection -------------------------------------------------------- */

static pthread_mutex_t conn_lock = PTHREAD_MUTEX_INITIALIZER;
static int conn_fd = -1;

static void after_fork_child(void) {
  /* The parent's connection must not be shared: replies would interleave. */
  if (conn_fd >= 0) close(conn_fd);
  conn_fd = -1;
  pthread_mutex_init(&conn_lock, NULL);
}

__attribute__((constructor)) static void shim_init(void) {
  pthread_atfork(NULL, NULL, after_fork_child);
}

static void complain(const char *what) {
  static const char prefix[] = "fakeshim: ";
  ssize_t ignored = write(2, prefix, sizeof prefix - 1);
  ignored = write(2, what, strlen(what));
  ignored = write(2, "\n", 1);
  (void)ignored;
}

static int connect_locked(void) {
  if (conn_fd >= 0) return 0;
  const char *path = getenv(NSB_ENV_OWNERDB);
  if (!path || !*path) {
    complain("no ownership database (" NSB_ENV_OWNERDB " unset)");
    return -1;
  }
  struct sockaddr_un addr;
  memset(&addr, 0, sizeof addr);
  addr.sun_family = AF_UNIX;
  if (strlen(path) >= sizeof addr.sun_path) return -1;
  strcpy(addr.sun_path, path);
  int fd = socket(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0);
  if (fd < 0) return -1;
  if (connect(fd, (struct sockaddr *)&addr, sizeof addr) != 0) {
    close(fd);
    complain("cannot reach the ownership database");
    return -1;
  }
  conn_fd = fd;
  return 0;
}

static void put_le(uint8_t *p, uint64_t v, int n) {
  for (int i = 0; i < n; ++i) p[i] = (uint8_t)(v >> (8 * i));
}

static uint64_t get_le(const uint8_t *p, int n) {
  uint64_t v = 0;
  for (int i = 0; i < n; ++i) v |= (uint64_t)p[i] << (8 * i);
  return v;
}

static int io_all(int fd, void *buf, size_t len, int writing) {
  uint8_t *p = buf;
  while (len > 0) {
    ssize_t n = writing ? send(fd, p, len, MSG_NOSIGNAL) : read(fd, p, len);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) return -1;
    p += n;
    len -= (size_t)n;
  }
  return 0;
}

/* One request/reply. Returns the status byte or -1 (errno EIO). */
static int roundtrip(uint8_t type, const struct stat *id, const struct record *rec, struct record *out) {
  uint8_t frame[4 + NSB_FRAME_SET_LENGTH];
  const uint32_t len = (type == NSB_MSG_SET || type == NSB_MSG_MKNOD) ? NSB_FRAME_SET_LENGTH : NSB_FRAME_GET_LENGTH;
  put_le(frame, len, 4);
  frame[4] = type;
  put_le(frame + 5, (uint64_t)id->st_dev, 8);
  put_le(frame + 13, (uint64_t)id->st_ino, 8);
  if (len == NSB_FRAME_SET_LENGTH) {
    uint8_t *r = frame + 21;
    put_le(r, rec->uid, 4);
    put_le(r + 4, rec->gid, 4);
    put_le(r + 8, rec->mode & 07777, 4);
    r[12] = rec->kind;
    put_le(r + 13, rec->rdev, 8);
  }

  const int saved = errno;
  int status = -1;
  pthread_mutex_lock(&conn_lock);
  if (connect_locked() == 0) {
    uint8_t st;
    if (io_all(conn_fd, frame, 4 + len, 1) == 0 && io_all(conn_fd, &st, 1, 0) == 0) {
      status = st;
      if (st == NSB_STATUS_PRESENT) {
        uint8_t body[NSB_RECORD_BYTES];
        if (io_all(conn_fd, body, sizeof body, 0) != 0) {
          status = -1;
        } else if (out) {
          out->uid = (uint32_t)get_le(body, 4);
          out->gid = (uint32_t)get_le(body + 4, 4);
          out->mode = (uint32_t)get_le(body + 8, 4);
          out->kind = body[12];
          out->rdev = get_le(body + 13, 8);
        }
      }
    }
    if (status < 0) {
      close(conn_fd);
      conn_fd = -1;
      complain("lost the ownership database connection");
    }
  }
  pthread_mutex_unlock(&conn_lock);
  errno = status < 0 ? EIO : saved;
  return status;
}

static uint8_t kind_of(mode_t mode) {
  switch (mode & S_IFMT) {
    case S_IFDIR: return NSB_KIND_DIRECTORY;
    case S_IFLNK: return NSB_KIND_SYMLINK;
    case S_IFCHR: return NSB_KIND_CHAR_DEVICE;
    case S_IFBLK: return NSB_KIND_BLOCK_DEVICE;
    case S_IFIFO: return NSB_KIND_FIFO;
    case S_IFSOCK: return NSB_KIND_SOCKET;
    default: return NSB_KIND_REGULAR;
  }
}

static mode_t type_bits(uint8_t kind) {
  switch (kind) {
    case NSB_KIND_DIRECTORY: return S_IFDIR;
    case NSB_KIND_SYMLINK: return S_IFLNK;
    case NSB_KIND_CHAR_DEVICE: return S_IFCHR;
    case NSB_KIND_BLOCK_DEVICE: return S_IFBLK;
    case NSB_KIND_FIFO: return S_IFIFO;
    case NSB_KIND_SOCKET: return S_IFSOCK;
    default: return S_IFREG;
  }
}

static int is_device_kind(uint8_t kind) { return kind == NSB_KIND_CHAR_DEVICE || kind == NSB_KIND_BLOCK_DEVICE; }

/* Existing record, or the default lie (root-owned, real mode) in *rec.
   Returns -1 only when the database is unreachable. */
static int current_record(const struct stat *st, struct record *rec) {
  int status = roundtrip(NSB_MSG_GET, st, NULL, rec);
  if (status < 0) return -1;
  if (status != NSB_STATUS_PRESENT) {
    rec->uid = 0;
    rec->gid = 0;
    rec->mode = st->st_mode & 07777;
    rec->kind = kind_of(st->st_mode);
    rec->rdev = 0;
  }
  if (!is_device_kind(rec->kind)) rec->rdev = 0;
  return 0;
}

/* ---- stat rewriting ---------------------------------------------------- */

static void fake_stat(struct stat *st) {
  struct record rec;
  const int status = roundtrip(NSB_MSG_GET, st, NULL, &rec);
  if (status == NSB_STATUS_PRESENT) {
    st->st_uid = rec.uid;
    st->st_gid = rec.gid;
    st->st_mode = type_bits(rec.kind) | (rec.mode & 07777);
    st->st_rdev = is_device_kind(rec.kind) ? (dev_t)rec.rdev : 0;
  } else {
    st->st_uid = 0;
    st->st_gid = 0;
  }
}

static int do_fstatat(int dirfd, const char *path, struct stat *st, int flags) {
  int rc = REAL(fstatat)(dirfd, path, st, flags);
  if (rc == 0) fake_stat(st);
  return rc;
}

EXPORT int fstatat(int dirfd, const char *path, struct stat *st, int flags) { return do_fstatat(dirfd, path, st, flags); }
EXPORT int fstatat64(int dirfd, const char *path, struct stat64 *st, int flags) {
  return do_fstatat(dirfd, path, (struct stat *)st, flags);
}
EXPORT int stat(const char *path, struct stat *st) { return do_fstatat(AT_FDCWD, path, st, 0); }
EXPORT int stat64(const char *path, struct stat64 *st) { return do_fstatat(AT_FDCWD, path, (struct stat *)st, 0); }
EXPORT int lstat(const char *path, struct stat *st) { return do_fstatat(AT_FDCWD, path, st, AT_SYMLINK_NOFOLLOW); }
EXPORT int lstat64(const char *path, struct stat64 *st) {
  return do_fstatat(AT_FDCWD, path, (struct stat *)st, AT_SYMLINK_NOFOLLOW);
}
EXPORT int fstat(int fd, struct stat *st) {
  int rc = REAL(fstat)(fd, st);
  if (rc == 0) fake_stat(st);
  return rc;
}
EXPORT int fstat64(int fd, struct stat64 *st) { return fstat(fd, (struct stat *)st); }

/* Pre-2.33 glibc entry points, for binaries linked against older libcs. */
EXPORT int __xstat(int ver, const char *path, struct stat *st) {
  (void)ver;
  return do_fstatat(AT_FDCWD, path, st, 0);
}
EXPORT int __xstat64(int ver, const char *path, struct stat64 *st) { return __xstat(ver, path, (struct stat *)st); }
EXPORT int __lxstat(int ver, const char *path, struct stat *st) {
  (void)ver;
  return do_fstatat(AT_FDCWD, path, st, AT_SYMLINK_NOFOLLOW);
}
EXPORT int __lxstat64(int ver, const char *path, struct stat64 *st) { return __lxstat(ver, path, (struct stat *)st); }
EXPORT int __fxstat(int ver, int fd, struct stat *st) {
  (void)ver;
  return fstat(fd, st);
}
EXPORT int __fxstat64(int ver, int fd, struct stat64 *st) { return __fxstat(ver, fd, (struct stat *)st); }
EXPORT int __fxstatat(int ver, int dirfd, const char *path, struct stat *st, int flags) {
  (void)ver;
  return do_fstatat(dirfd, path, st, flags);
}
EXPORT int __fxstatat64(int ver, int dirfd, const char *path, struct stat64 *st, int flags) {
  return __fxstatat(ver, dirfd, path, (struct stat *)st, flags);
}

EXPORT int statx(int dirfd, const char *path, int flags, unsigned mask, struct statx *stx) {
  if (!REAL(statx)) {
    errno = ENOSYS;
    return -1;
  }
  int rc = real_statx(dirfd, path, flags, mask, stx);
  if (rc != 0) return rc;
  struct stat key;
  memset(&key, 0, sizeof key);
  key.st_dev = makedev(stx->stx_dev_major, stx->stx_dev_minor);
  key.st_ino = stx->stx_ino;
  struct record rec;
  if (roundtrip(NSB_MSG_GET, &key, NULL, &rec) == NSB_STATUS_PRESENT) {
    stx->stx_uid = rec.uid;
    stx->stx_gid = rec.gid;
    stx->stx_mode = (uint16_t)(type_bits(rec.kind) | (rec.mode & 07777));
    stx->stx_rdev_major = is_device_kind(rec.kind) ? major(rec.rdev) : 0;
    stx->stx_rdev_minor = is_device_kind(rec.kind) ? minor(rec.rdev) : 0;
  } else {
    stx->stx_uid = 0;
    stx->stx_gid = 0;
  }
  return 0;
}

/* ---- ownership --------------------------------------------------------- */

static int record_owner(const struct stat *st, uid_t uid, gid_t gid) {
  struct record rec;
  if (current_record(st, &rec) != 0) return -1;
  if (uid != (uid_t)-1) rec.uid = uid;
  if (gid != (gid_t)-1) rec.gid = gid;
  return roundtrip(NSB_MSG_SET, st, &rec, NULL) == NSB_STATUS_OK ? 0 : -1;
}

EXPORT int fchownat(int dirfd, const char *path, uid_t uid, gid_t gid, int flags) {
  struct stat st;
  if (REAL(fstatat)(dirfd, path, &st, flags) != 0) return -1;
  if (uid == (uid_t)-1 && gid == (gid_t)-1) return 0;
  return record_owner(&st, uid, gid);
}
EXPORT int chown(const char *path, uid_t uid, gid_t gid) { return fchownat(AT_FDCWD, path, uid, gid, 0); }
EXPORT int lchown(const char *path, uid_t uid, gid_t gid) {
  return fchownat(AT_FDCWD, path, uid, gid, AT_SYMLINK_NOFOLLOW);
}
EXPORT int fchown(int fd, uid_t uid, gid_t gid) {
  struct stat st;
  if (REAL(fstat)(fd, &st) != 0) return -1;
  if (uid == (uid_t)-1 && gid == (gid_t)-1) return 0;
  return record_owner(&st, uid, gid);
}

/* ---- modes ------------------------------------------------------------- */

/* The real mode keeps the owner able to read, write and traverse, since the
   invoker is not really root. A record carries the requested mode whenever
   the two differ or a lie already exists. */
static mode_t reachable_mode(mode_t requested, mode_t file_type) {
  mode_t m = requested & 07777;
  m |= S_IRUSR | S_IWUSR;
  if (S_ISDIR(file_type)) m |= S_IXUSR;
  return m;
}

static int record_mode(const struct stat *before, mode_t requested, mode_t applied) {
  struct record rec;
  const int status = roundtrip(NSB_MSG_GET, before, NULL, &rec);
  if (status < 0) return -1;
  if (status != NSB_STATUS_PRESENT) {
    if (applied == (requested & 07777)) return 0;
    rec.uid = 0;
    rec.gid = 0;
    rec.kind = kind_of(before->st_mode);
    rec.rdev = 0;
  }
  if (!is_device_kind(rec.kind)) rec.rdev = 0;
  rec.mode = requested & 07777;
  return roundtrip(NSB_MSG_SET, before, &rec, NULL) == NSB_STATUS_OK ? 0 : -1;
}

EXPORT int fchmodat(int dirfd, const char *path, mode_t mode, int flags) {
  struct stat st;
  if (REAL(fstatat)(dirfd, path, &st, flags & AT_SYMLINK_NOFOLLOW) != 0) return -1;
  if (S_ISLNK(st.st_mode)) return REAL(fchmodat)(dirfd, path, mode, flags);
  const mode_t applied = reachable_mode(mode, st.st_mode);
  if (REAL(fchmodat)(dirfd, path, applied, flags) != 0) return -1;
  return record_mode(&st, mode, applied);
}
EXPORT int chmod(const char *path, mode_t mode) { return fchmodat(AT_FDCWD, path, mode, 0); }
EXPORT int fchmod(int fd, mode_t mode) {
  struct stat st;
  if (REAL(fstat)(fd, &st) != 0) return -1;
  const mode_t applied = reachable_mode(mode, st.st_mode);
  if (REAL(fchmod)(fd, applied) != 0) return -1;
  return record_mode(&st, mode, applied);
}

/* ---- node creation ----------------------------------------------------- */

EXPORT int mknodat(int dirfd, const char *path, mode_t mode, dev_t dev) {
  if (!S_ISCHR(mode) && !S_ISBLK(mode)) return REAL(mknodat)(dirfd, path, mode, dev);
  /* A device cannot be created unprivileged; an empty file stands in.
     Creating it with the node's mode lets the kernel apply the umask. */
  int fd = openat(dirfd, path, O_WRONLY | O_CREAT | O_EXCL | O_CLOEXEC, mode & 07777);
  if (fd < 0) return -1;
  struct stat st;
  int rc = REAL(fstat)(fd, &st);
  if (rc == 0 && (st.st_mode & 0600) != 0600) rc = REAL(fchmod)(fd, (st.st_mode & 07777) | 0600);
  close(fd);
  if (rc != 0) return -1;
  struct record rec = {0, 0, st.st_mode & 07777, S_ISCHR(mode) ? NSB_KIND_CHAR_DEVICE : NSB_KIND_BLOCK_DEVICE,
                       (uint64_t)dev};
  if (roundtrip(NSB_MSG_MKNOD, &st, &rec, NULL) != NSB_STATUS_OK) {
    const int saved = errno;
    REAL(unlinkat)(dirfd, path, 0);
    errno = saved;
    return -1;
  }
  return 0;
}
EXPORT int mknod(const char *path, mode_t mode, dev_t dev) { return mknodat(AT_FDCWD, path, mode, dev); }
EXPORT int __xmknod(int ver, const char *path, mode_t mode, dev_t *dev) {
  (void)ver;
  return mknodat(AT_FDCWD, path, mode, *dev);
}
EXPORT int __xmknodat(int ver, int dirfd, const char *path, mode_t mode, dev_t *dev) {
  (void)ver;
  return mknodat(dirfd, path, mode, *dev);
}

/* ---- removal ----------------------------------------------------------- */

/* Forget lies about inodes that are going away so a reused inode number
   does not inherit them. */
EXPORT int unlinkat(int dirfd, const char *path, int flags) {
  struct stat st;
  const int have = REAL(fstatat)(dirfd, path, &st, AT_SYMLINK_NOFOLLOW) == 0;
  if (REAL(unlinkat)(dirfd, path, flags) != 0) return -1;
  if (have && (S_ISDIR(st.st_mode) || st.st_nlink <= 1)) roundtrip(NSB_MSG_UNLINK, &st, NULL, NULL);
  return 0;
}
EXPORT int unlink(const char *path) { return unlinkat(AT_FDCWD, path, 0); }
EXPORT int rmdir(const char *path) { return unlinkat(AT_FDCWD, path, AT_REMOVEDIR); }

/* ---- identity ---------------------------------------------------------- */

EXPORT uid_t getuid(void) { return 0; }
EXPORT uid_t geteuid(void) { return 0; }
EXPORT gid_t getgid(void) { return 0; }
EXPORT gid_t getegid(void) { return 0; }
EXPORT int getresuid(uid_t *r, uid_t *e, uid_t *s) {
  *r = *e = *s = 0;
  return 0;
}
EXPORT int getresgid(gid_t *r, gid_t *e, gid_t *s) {
  *r = *e = *s = 0;
  return 0;
}
EXPORT int getgroups(int size, gid_t list[]) {
  if (size == 0) return 1;
  if (size < 0) {
    errno = EINVAL;
    return -1;
  }
  list[0] = 0;
  return 1;
}
EXPORT int setuid(uid_t uid) { return (void)uid, 0; }
EXPORT int setgid(gid_t gid) { return (void)gid, 0; }
EXPORT int seteuid(uid_t uid) { return (void)uid, 0; }
EXPORT int setegid(gid_t gid) { return (void)gid, 0; }
EXPORT int setreuid(uid_t r, uid_t e) { return (void)r, (void)e, 0; }
EXPORT int setregid(gid_t r, gid_t e) { return (void)r, (void)e, 0; }
EXPORT int setresuid(uid_t r, uid_t e, uid_t s) { return (void)r, (void)e, (void)s, 0; }
EXPORT int setresgid(gid_t r, gid_t e, gid_t s) { return (void)r, (void)e, (void)s, 0; }
EXPORT int setgroups(size_t size, const gid_t *list) { return (void)size, (void)list, 0; }
EXPORT int setfsuid(uid_t uid) { return (void)uid, 0; }
EXPORT int setfsgid(gid_t gid) { return (void)gid, 0; }
