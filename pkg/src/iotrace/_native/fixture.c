/*
 * Workload helpers that reach libc through this object's own PLT/GOT, so
 * runtime attachment can observe them. Used by the checkpoint emulator and
 * by the interposition test fixtures.
 */
#define _GNU_SOURCE
#include <fcntl.h>
#include <stdint.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>
#include <unistd.h>

/* n positional reads of len bytes at consecutive offsets; returns bytes read */
long iotfx_pread_loop(const char *path, int n, long len)
{
    int fd = open(path, O_RDONLY);
    if (fd < 0)
        return -1;
    char *buf = malloc((size_t)len + 1);
    long total = 0;
    for (int i = 0; i < n; i++) {
        ssize_t r = pread(fd, buf, (size_t)len, (off_t)i * len);
        if (r < 0) {
            total = -1;
            break;
        }
        total += r;
    }
    free(buf);
    close(fd);
    return total;
}

/* stream the whole file with read() until it returns 0; returns bytes read */
long iotfx_read_file(const char *path, long chunk)
{
    int fd = open(path, O_RDONLY);
    if (fd < 0)
        return -1;
    char *buf = malloc((size_t)chunk);
    long total = 0;
    for (;;) {
        ssize_t r = read(fd, buf, (size_t)chunk);
        if (r <= 0)
            break;
        total += r;
    }
    free(buf);
    close(fd);
    return total;
}

/* FNV-1a of the file contents, read through read() */
uint64_t iotfx_checksum(const char *path)
{
    uint64_t h = 0xcbf29ce484222325ULL;
    int fd = open(path, O_RDONLY);
    if (fd < 0)
        return 0;
    unsigned char buf[8192];
    ssize_t r;
    while ((r = read(fd, buf, sizeof(buf))) > 0)
        for (ssize_t i = 0; i < r; i++) {
            h ^= buf[i];
            h *= 0x100000001b3ULL;
        }
    close(fd);
    return h;
}

/* pwrite len bytes at offset; returns bytes written */
long iotfx_pwrite_at(const char *path, long offset, long len)
{
    int fd = open(path, O_WRONLY | O_CREAT, 0644);
    if (fd < 0)
        return -1;
    char *buf = calloc(1, (size_t)(len ? len : 1));
    ssize_t r = pwrite(fd, buf, (size_t)len, (off_t)offset);
    free(buf);
    close(fd);
    return r;
}

/* one checkpoint: `writes` buffered fwrite calls of `nbytes` each */
long iotfx_checkpoint(const char *path, int writes, long nbytes)
{
    FILE *fp = fopen(path, "wb");
    if (!fp)
        return -1;
    char *buf = malloc((size_t)(nbytes ? nbytes : 1));
    memset(buf, 0x5a, (size_t)(nbytes ? nbytes : 1));
    long total = 0;
    for (int i = 0; i < writes; i++)
        total += (long)fwrite(buf, 1, (size_t)nbytes, fp) ;
    free(buf);
    if (fclose(fp) != 0)
        return -1;
    return total;
}

/* buffered read of a whole file with fread */
long iotfx_fread_file(const char *path, long chunk)
{
    FILE *fp = fopen(path, "rb");
    if (!fp)
        return -1;
    char *buf = malloc((size_t)chunk);
    long total = 0;
    size_t r;
    while ((r = fread(buf, 1, (size_t)chunk, fp)) > 0)
        total += (long)r;
    free(buf);
    fclose(fp);
    return total;
}
