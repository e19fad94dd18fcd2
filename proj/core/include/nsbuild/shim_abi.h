/*
 * Constants shared between the builder and the preload shim that runs
 * inside build containers. Plain C so the shim can include it directly.
 *
 * Frame layout (all integers little-endian):
 *
 *   u32 length          bytes that follow this field
 *   u8  type            NSB_MSG_*
 *   u64 device
 *   u64 inode
 *   -- SET and MKNOD only --
 *   u32 uid
 *   u32 gid
 *   u32 mode            permission bits incl. setuid/setgid/sticky (07777)
 *   u8  kind            NSB_KIND_*
 *   u64 rdev            ignored unless kind is a device
 *
 * Reply: u8 status (NSB_STATUS_*). NSB_STATUS_PRESENT is followed by the
 * 21-byte record (uid, gid, mode, kind, rdev) in the layout above.
 */
#ifndef NSBUILD_SHIM_ABI_H
#define NSBUILD_SHIM_ABI_H

#define NSB_MSG_GET 1
#define NSB_MSG_SET 2
#define NSB_MSG_UNLINK 3
#define NSB_MSG_MKNOD 4

#define NSB_STATUS_ABSENT 0
#define NSB_STATUS_PRESENT 1
#define NSB_STATUS_OK 2
#define NSB_STATUS_MALFORMED 255

#define NSB_KIND_REGULAR 1
#define NSB_KIND_DIRECTORY 2
#define NSB_KIND_SYMLINK 3
#define NSB_KIND_CHAR_DEVICE 4
#define NSB_KIND_BLOCK_DEVICE 5
#define NSB_KIND_FIFO 6
#define NSB_KIND_SOCKET 7

#define NSB_IDENTITY_BYTES 16
#define NSB_RECORD_BYTES 21
#define NSB_FRAME_GET_LENGTH (1 + NSB_IDENTITY_BYTES)
#define NSB_FRAME_SET_LENGTH (1 + NSB_IDENTITY_BYTES + NSB_RECORD_BYTES)

/* Environment inside the container. */
#define NSB_ENV_PRELOAD "LD_PRELOAD"
#define NSB_ENV_OWNERDB "NSBUILD_OWNERDB_SOCKET"

/* Where the sandbox places the shim and the database socket. /dev is a
 * private tmpfs in every sandbox, so nothing lands in the image. */
#define NSB_CONTAINER_SHIM_DIR "/dev/.nsbuild"
#define NSB_CONTAINER_SHIM_PATH "/dev/.nsbuild/fakeshim.so"
#define NSB_CONTAINER_OWNERDB_PATH "/dev/.nsbuild/ownerdb.sock"

#endif /* NSBUILD_SHIM_ABI_H */
