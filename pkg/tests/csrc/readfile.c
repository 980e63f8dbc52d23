/* Reads a file twice: a read() loop to EOF, then pread() chunks. */
#include <fcntl.h>
#include <stdio.h>
#include <unistd.h>

int main(int argc, char **argv) {
    char buf[4096];
    long total = 0;
    ssize_t n;
    int fd;
    if (argc < 2)
        return 2;
    fd = open(argv[1], O_RDONLY);
    if (fd < 0)
        return 1;
    while ((n = read(fd, buf, sizeof buf)) > 0)
        total += n;
    close(fd);
    fd = open(argv[1], O_RDONLY);
    for (off_t off = 0; (n = pread(fd, buf, sizeof buf, off)) > 0; off += n)
        total += n;
    close(fd);
    printf("%ld\n", total);
    return 0;
}
