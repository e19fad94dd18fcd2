/* Drops to the _apt sandbox user the way apt does before downloading.
   Inside a single-ID user namespace every call fails; the messages mimic
   apt's, which name the set*id call it meant rather than the one libc made. */
#define _GNU_SOURCE
#include <errno.h>
#include <grp.h>
#include <stdio.h>
#include <string.h>
#include <unistd.h>

static int failed = 0;

static void report(const char *what, unsigned id, int err) {
  printf("E: %s %u failed - %s (%d: %s)\n", what, id, what, err, strerror(err));
  failed = 1;
}

int main(void) {
  const gid_t gid = 65534;
  const uid_t uid = 100;
  if (setgroups(1, &gid) != 0) report("setgroups", gid, errno);
  if (setresgid(gid, gid, gid) != 0) report("setegid", gid, errno);
  if (setresuid(uid, uid, uid) != 0) report("seteuid", uid, errno);
  fflush(stdout);
  return failed ? 100 : 0;
}
