/*
 * libiotrace: instrumented POSIX/STDIO wrappers plus the per-file counter store.
 *
 * The same object serves both interposition routes:
 *   - preload: LD_PRELOAD places the exported wrappers ahead of libc;
 *   - attach:  the Python side dlopen()s this library RTLD_LOCAL and rewrites
 *              relocation slots of loaded objects to point at the wrappers.
 *
 * Wrappers never call catalog symbols directly; everything goes through the
 * real_* pointers so the library cannot recurse into itself.
 */
#define _GNU_SOURCE
#include <dlfcn.h>
#include <errno.h>
#include <fcntl.h>
#include <limits.h>
#include <pthread.h>
#include <stdarg.h>
#include <stdint.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>
#include <sys/mman.h>
#include <sys/syscall.h>
#include <sys/types.h>
#include <time.h>
#include <unistd.h>

#define IOT_VERSION 1

/* counter layout; mirrored by iotrace.collector.COUNTER_NAMES */
enum {
    C_OPENS, C_CLOSES, C_READS, C_WRITES,
    C_BYTES_READ, C_BYTES_WRITTEN, C_ZERO_READS,
    C_SEQ_READS, C_CONSEC_READS, C_SEQ_WRITES, C_CONSEC_WRITES,
    C_MAX_READ_OFFSET, C_MAX_WRITE_OFFSET,
    C_READ_HIST,
    C_WRITE_HIST = C_READ_HIST + 10,
    C_STDIO_OPENS = C_WRITE_HIST + 10,
    C_STDIO_READS, C_STDIO_WRITES, C_STDIO_BYTES_WRITTEN,
    NCOUNTERS
};
enum { T_FIRST_OPEN, T_FIRST_READ, T_LAST_READ, T_FIRST_WRITE, T_LAST_WRITE, NTIMES };

static const char *counter_names =
    "opens,closes,reads,writes,bytes_read,bytes_written,zero_reads,"
    "seq_reads,consec_reads,seq_writes,consec_writes,"
    "max_read_offset,max_write_offset,"
    "read_size_hist,read_size_hist,read_size_hist,read_size_hist,read_size_hist,"
    "read_size_hist,read_size_hist,read_size_hist,read_size_hist,read_size_hist,"
    "write_size_hist,write_size_hist,write_size_hist,write_size_hist,write_size_hist,"
    "write_size_hist,write_size_hist,write_size_hist,write_size_hist,write_size_hist,"
    "stdio_opens,stdio_reads,stdio_writes,stdio_bytes_written";

enum { FAM_POSIX = 0, FAM_STDIO = 1 };
enum { KIND_READ = 0, KIND_WRITE = 1 };

/* symbol catalog order; mirrored by iotrace.interpose.CATALOG */
enum {
    S_OPEN, S_OPEN64, S_CREAT, S_CLOSE, S_READ, S_PREAD, S_PREAD64,
    S_WRITE, S_PWRITE, S_PWRITE64, S_LSEEK, S_LSEEK64,
    S_FOPEN, S_FOPEN64, S_FCLOSE, S_FREAD, S_FWRITE, S_FSEEK,
    NSYMBOLS
};
static const char *symbol_names[NSYMBOLS] = {
    "open", "open64", "creat", "close", "read", "pread", "pread64",
    "write", "pwrite", "pwrite64", "lseek", "lseek64",
    "fopen", "fopen64", "fclose", "fread", "fwrite", "fseek",
};

typedef struct {
    uint64_t id;
    char *path;
    int64_t c[NCOUNTERS];
    double t[NTIMES];
    int64_t nseg;
    uint64_t gen; /* generation of the last change */
    int32_t truncated;
} iot_rec;

typedef struct {
    int64_t rec;
    int64_t seq;
    int32_t kind;
    int32_t pad;
    int64_t offset;
    int64_t length;
    double t_start;
    double t_end;
} iot_seg;

#define FD_READ_SEEN 1
#define FD_WRITE_SEEN 2

typedef struct {
    int64_t rec; /* -1: slot unused */
    int64_t offset;
    int64_t read_end;
    int64_t write_end;
    int32_t flags;
    int32_t pad;
} iot_fd;

typedef struct {
    int32_t fd;
    int32_t family;
    int64_t rec;
    int64_t offset;
} iot_fdout;

typedef struct {
    double t_mono;
    double t_wall;
    int64_t n_records;
    int64_t n_segments_total;
    int64_t seg_from;
    int64_t n_segs_out;
    int64_t n_fds;
    int64_t paths_from;
    int64_t paths_len;
    int32_t dxt_enabled;
    int32_t dxt_capacity;
    uint64_t gen;
    int64_t epoch;
    int64_t n_dirty;
    int64_t *dirty;
    uint64_t *ids;
    int64_t *counters;
    double *times;
    int32_t *truncated;
    iot_seg *segs;
    char *paths;
    iot_fdout *fds;
} iot_snapshot;

/* ---- store state, all guarded by store_lock ---- */
static pthread_mutex_t store_lock = PTHREAD_MUTEX_INITIALIZER;
static iot_rec *records;
static int64_t n_records, cap_records;
static int64_t *id_table; /* open addressing: record index + 1, 0 = empty */
static int64_t id_table_cap;
static iot_seg *segments;
static int64_t n_segments, cap_segments;
static iot_fd *fd_tables[2];
static int64_t fd_caps[2];
static int64_t fd_active[2]; /* bound entries, so scans can stop early */
static int64_t anon_rec = -1;
/* every snapshot closes a generation; changed records carry the open one */
static uint64_t g_gen = 1;
static int64_t g_epoch;

static volatile int g_enabled = 1;
static double g_t_start;
static volatile int g_dxt_enabled = 1;
static volatile int64_t g_dxt_capacity = 1024;
static volatile uint32_t g_symbol_mask = (1u << NSYMBOLS) - 1;
static pid_t g_pid;

/* ---- real function pointers ---- */
static int (*real_open)(const char *, int, ...);
static int (*real_open64)(const char *, int, ...);
static int (*real_creat)(const char *, mode_t);
static int (*real_close)(int);
static ssize_t (*real_read)(int, void *, size_t);
static ssize_t (*real_pread)(int, void *, size_t, off_t);
static ssize_t (*real_pread64)(int, void *, size_t, off64_t);
static ssize_t (*real_write)(int, const void *, size_t);
static ssize_t (*real_pwrite)(int, const void *, size_t, off_t);
static ssize_t (*real_pwrite64)(int, const void *, size_t, off64_t);
static off_t (*real_lseek)(int, off_t, int);
static off64_t (*real_lseek64)(int, off64_t, int);
static FILE *(*real_fopen)(const char *, const char *);
static FILE *(*real_fopen64)(const char *, const char *);
static int (*real_fclose)(FILE *);
static size_t (*real_fread)(void *, size_t, size_t, FILE *);
static size_t (*real_fwrite)(const void *, size_t, size_t, FILE *);
static int (*real_fseek)(FILE *, long, int);

static uint32_t unresolved_mask;
static pthread_once_t resolve_once = PTHREAD_ONCE_INIT;

static void *lookup_real(const char *name)
{
    void *p = dlsym(RTLD_NEXT, name);
    if (!p) {
        void *libc = dlopen("libc.so.6", RTLD_LAZY | RTLD_NOLOAD);
        if (libc)
            p = dlsym(libc, name);
    }
    return p;
}

static void resolve_all(void)
{
    void **slots[NSYMBOLS] = {
        (void **)&real_open, (void **)&real_open64, (void **)&real_creat,
        (void **)&real_close, (void **)&real_read, (void **)&real_pread,
        (void **)&real_pread64, (void **)&real_write, (void **)&real_pwrite,
        (void **)&real_pwrite64, (void **)&real_lseek, (void **)&real_lseek64,
        (void **)&real_fopen, (void **)&real_fopen64, (void **)&real_fclose,
        (void **)&real_fread, (void **)&real_fwrite, (void **)&real_fseek,
    };
    uint32_t missing = 0;
    g_pid = getpid();
    for (int i = 0; i < NSYMBOLS; i++) {
        *slots[i] = lookup_real(symbol_names[i]);
        if (!*slots[i])
            missing |= 1u << i;
    }
    unresolved_mask = missing;
}

#define RESOLVE() pthread_once(&resolve_once, resolve_all)

static inline double now_mono(void)
{
    struct timespec ts;
    clock_gettime(CLOCK_MONOTONIC, &ts);
    return (double)ts.tv_sec + (double)ts.tv_nsec * 1e-9;
}

static inline double now_wall(void)
{
    struct timespec ts;
    clock_gettime(CLOCK_REALTIME, &ts);
    return (double)ts.tv_sec + (double)ts.tv_nsec * 1e-9;
}

static inline int active(int sym)
{
    return g_enabled && (g_symbol_mask & (1u << sym));
}

/* ---- hashing and path canonicalization ---- */
#define FNV_OFFSET 0xcbf29ce484222325ULL
#define FNV_PRIME 0x100000001b3ULL
#define ID_STEP 0x9e3779b97f4a7c15ULL

static uint64_t fnv1a64(const char *s)
{
    uint64_t h = FNV_OFFSET;
    for (const unsigned char *p = (const unsigned char *)s; *p; p++) {
        h ^= *p;
        h *= FNV_PRIME;
    }
    return h;
}

/* Lexical absolute form: no symlink resolution, "." and ".." folded. */
static void canonicalize(const char *path, char *out, size_t outsz)
{
    char tmp[2 * PATH_MAX + 2];
    size_t n = 0;
    if (path[0] != '/') {
        if (!getcwd(tmp, PATH_MAX))
            tmp[0] = '\0';
        n = strlen(tmp);
        tmp[n++] = '/';
    }
    size_t plen = strnlen(path, PATH_MAX);
    memcpy(tmp + n, path, plen);
    tmp[n + plen] = '\0';

    size_t o = 0;
    char *save = NULL;
    for (char *tok = strtok_r(tmp, "/", &save); tok; tok = strtok_r(NULL, "/", &save)) {
        if (strcmp(tok, ".") == 0)
            continue;
        if (strcmp(tok, "..") == 0) {
            while (o > 0 && out[o - 1] != '/')
                o--;
            if (o > 0)
                o--;
            continue;
        }
        size_t tl = strlen(tok);
        if (o + tl + 2 >= outsz)
            break;
        out[o++] = '/';
        memcpy(out + o, tok, tl);
        o += tl;
    }
    if (o == 0)
        out[o++] = '/';
    out[o] = '\0';
}

static void id_table_insert(uint64_t id, int64_t idx)
{
    uint64_t mask = (uint64_t)id_table_cap - 1;
    uint64_t h = id & mask;
    while (id_table[h])
        h = (h + 1) & mask;
    id_table[h] = idx + 1;
}

static int64_t id_table_get(uint64_t id)
{
    if (!id_table_cap)
        return -1;
    uint64_t mask = (uint64_t)id_table_cap - 1;
    for (uint64_t h = id & mask; id_table[h]; h = (h + 1) & mask) {
        int64_t idx = id_table[h] - 1;
        if (records[idx].id == id)
            return idx;
    }
    return -1;
}

static int grow_id_table(void)
{
    int64_t ncap = id_table_cap ? id_table_cap * 2 : 1024;
    int64_t *nt = calloc((size_t)ncap, sizeof(int64_t));
    if (!nt)
        return -1;
    free(id_table);
    id_table = nt;
    id_table_cap = ncap;
    for (int64_t i = 0; i < n_records; i++)
        id_table_insert(records[i].id, i);
    return 0;
}

/* Caller holds store_lock. Returns -1 only on allocation failure. */
static int64_t record_for(const char *canon)
{
    uint64_t id = fnv1a64(canon);
    for (;;) {
        int64_t idx = id_table_get(id);
        if (idx < 0)
            break;
        if (strcmp(records[idx].path, canon) == 0)
            return idx;
        id += ID_STEP; /* 64-bit collision: step to the next candidate id */
    }
    if (n_records == cap_records) {
        int64_t ncap = cap_records ? cap_records * 2 : 256;
        iot_rec *nr = realloc(records, (size_t)ncap * sizeof(iot_rec));
        if (!nr)
            return -1;
        records = nr;
        cap_records = ncap;
    }
    if ((n_records + 1) * 2 > id_table_cap && grow_id_table() != 0)
        return -1;
    char *p = strdup(canon);
    if (!p)
        return -1;
    iot_rec *r = &records[n_records];
    memset(r, 0, sizeof(*r));
    r->id = id;
    r->path = p;
    r->gen = g_gen;
    id_table_insert(id, n_records);
    return n_records++;
}

static int64_t anonymous_record(void)
{
    if (anon_rec < 0)
        anon_rec = record_for("<anonymous>");
    return anon_rec;
}

static iot_fd *fd_slot(int family, int fd, int create)
{
    if (fd < 0)
        return NULL;
    if (fd >= fd_caps[family]) {
        if (!create)
            return NULL;
        int64_t ncap = fd_caps[family] ? fd_caps[family] : 256;
        while (ncap <= fd)
            ncap *= 2;
        iot_fd *nt = realloc(fd_tables[family], (size_t)ncap * sizeof(iot_fd));
        if (!nt)
            return NULL;
        for (int64_t i = fd_caps[family]; i < ncap; i++) {
            memset(&nt[i], 0, sizeof(iot_fd));
            nt[i].rec = -1;
        }
        fd_tables[family] = nt;
        fd_caps[family] = ncap;
    }
    return &fd_tables[family][fd];
}

static void fd_bind(int family, iot_fd *e, int64_t rec)
{
    if (e->rec < 0)
        fd_active[family]++;
    memset(e, 0, sizeof(*e));
    e->rec = rec;
}

static void fd_unbind(int family, iot_fd *e)
{
    if (e->rec >= 0)
        fd_active[family]--;
    e->rec = -1;
}

/* fd entry for an I/O call; unknown descriptors land on the anonymous record */
static iot_fd *fd_for_io(int family, int fd)
{
    iot_fd *e = fd_slot(family, fd, 1);
    if (!e)
        return NULL;
    if (e->rec < 0) {
        int64_t a = anonymous_record();
        if (a < 0)
            return NULL;
        fd_bind(family, e, a);
    }
    return e;
}

static int bucket_for(int64_t size)
{
    if (size <= 100) return 0;
    if (size <= 1024) return 1;
    if (size <= 10240) return 2;
    if (size <= 102400) return 3;
    if (size <= 1048576) return 4;
    if (size <= 4194304) return 5;
    if (size <= 10485760) return 6;
    if (size <= 104857600) return 7;
    if (size <= 1073741824) return 8;
    return 9;
}

static int append_segment(int64_t rec, int kind, int64_t off, int64_t len, double t0, double t1)
{
    iot_rec *r = &records[rec];
    if (r->nseg >= g_dxt_capacity) {
        r->truncated = 1;
        return 0;
    }
    if (n_segments == cap_segments) {
        int64_t ncap = cap_segments ? cap_segments * 2 : 4096;
        iot_seg *ns = realloc(segments, (size_t)ncap * sizeof(iot_seg));
        if (!ns)
            return -1;
        segments = ns;
        cap_segments = ncap;
    }
    iot_seg *s = &segments[n_segments++];
    s->rec = rec;
    s->seq = r->nseg++;
    s->kind = kind;
    s->pad = 0;
    s->offset = off;
    s->length = len;
    s->t_start = t0;
    s->t_end = t1;
    return 0;
}

/* ---- collector entry points (also callable from Python) ---- */

int64_t iotrace_on_open(const char *path, int fd, double t, int family)
{
    char canon[PATH_MAX + 1];
    if (!path || !*path)
        return -1;
    canonicalize(path, canon, sizeof(canon));
    pthread_mutex_lock(&store_lock);
    int64_t rec = record_for(canon);
    if (rec >= 0) {
        iot_rec *r = &records[rec];
        r->gen = g_gen;
        r->c[family == FAM_STDIO ? C_STDIO_OPENS : C_OPENS]++;
        if (r->t[T_FIRST_OPEN] == 0.0)
            r->t[T_FIRST_OPEN] = t;
        iot_fd *e = fd_slot(family, fd, 1);
        if (e)
            fd_bind(family, e, rec);
    }
    pthread_mutex_unlock(&store_lock);
    return rec;
}

void iotrace_on_close(int fd, double t, int family)
{
    (void)t;
    pthread_mutex_lock(&store_lock);
    if (family == FAM_POSIX) {
        iot_fd *e = fd_for_io(family, fd);
        if (e) {
            records[e->rec].c[C_CLOSES]++;
            records[e->rec].gen = g_gen;
            fd_unbind(family, e);
        }
    } else {
        iot_fd *e = fd_slot(family, fd, 0);
        if (e)
            fd_unbind(family, e);
    }
    pthread_mutex_unlock(&store_lock);
}

static void account(int family, int kind, int fd, int has_off, int64_t off,
                    int64_t len, double t0, double t1)
{
    pthread_mutex_lock(&store_lock);
    iot_fd *e = fd_for_io(family, fd);
    if (!e)
        goto out;
    iot_rec *r = &records[e->rec];
    r->gen = g_gen;
    if (family == FAM_STDIO) {
        if (kind == KIND_READ) {
            r->c[C_STDIO_READS]++;
        } else {
            r->c[C_STDIO_WRITES]++;
            r->c[C_STDIO_BYTES_WRITTEN] += len;
        }
        goto out;
    }
    int64_t offset = has_off ? off : e->offset;
    int64_t end = offset + len;
    int seen_flag = kind == KIND_READ ? FD_READ_SEEN : FD_WRITE_SEEN;
    int64_t *prev_end = kind == KIND_READ ? &e->read_end : &e->write_end;
    int ci_seq = kind == KIND_READ ? C_SEQ_READS : C_SEQ_WRITES;
    int ci_consec = kind == KIND_READ ? C_CONSEC_READS : C_CONSEC_WRITES;

    if (!(e->flags & seen_flag)) {
        r->c[ci_seq]++;
    } else if (len == 0 || offset == *prev_end) {
        r->c[ci_seq]++;
        r->c[ci_consec]++;
    } else if (offset > *prev_end) {
        r->c[ci_seq]++;
    }
    e->flags |= seen_flag;
    *prev_end = end;
    if (!has_off)
        e->offset = end;

    if (kind == KIND_READ) {
        r->c[C_READS]++;
        r->c[C_BYTES_READ] += len;
        if (len == 0)
            r->c[C_ZERO_READS]++;
        r->c[C_READ_HIST + bucket_for(len)]++;
        if (end > r->c[C_MAX_READ_OFFSET])
            r->c[C_MAX_READ_OFFSET] = end;
        if (r->t[T_FIRST_READ] == 0.0)
            r->t[T_FIRST_READ] = t0;
        r->t[T_LAST_READ] = t1;
    } else {
        r->c[C_WRITES]++;
        r->c[C_BYTES_WRITTEN] += len;
        r->c[C_WRITE_HIST + bucket_for(len)]++;
        if (end > r->c[C_MAX_WRITE_OFFSET])
            r->c[C_MAX_WRITE_OFFSET] = end;
        if (r->t[T_FIRST_WRITE] == 0.0)
            r->t[T_FIRST_WRITE] = t0;
        r->t[T_LAST_WRITE] = t1;
    }
    if (g_dxt_enabled)
        append_segment(e->rec, kind, offset, len, t0, t1);
out:
    pthread_mutex_unlock(&store_lock);
}

void iotrace_on_read(int fd, int has_off, int64_t off, int64_t len, double t0, double t1, int family)
{
    account(family, KIND_READ, fd, has_off, off, len, t0, t1);
}

void iotrace_on_write(int fd, int has_off, int64_t off, int64_t len, double t0, double t1, int family)
{
    account(family, KIND_WRITE, fd, has_off, off, len, t0, t1);
}

void iotrace_on_seek(int fd, int64_t new_offset)
{
    pthread_mutex_lock(&store_lock);
    iot_fd *e = fd_for_io(FAM_POSIX, fd);
    if (e)
        e->offset = new_offset;
    pthread_mutex_unlock(&store_lock);
}

/* ---- configuration and introspection ---- */

int iotrace_version(void) { return IOT_VERSION; }
const char *iotrace_counter_names(void) { return counter_names; }
int iotrace_ncounters(void) { return NCOUNTERS; }
double iotrace_now(void) { return now_mono(); }

void iotrace_set_enabled(int on) { g_enabled = on ? 1 : 0; }
int iotrace_get_enabled(void) { return g_enabled; }
void iotrace_set_symbol_mask(uint32_t mask) { g_symbol_mask = mask; }
uint32_t iotrace_get_symbol_mask(void) { return g_symbol_mask; }

void iotrace_set_dxt(int on, int64_t capacity)
{
    pthread_mutex_lock(&store_lock);
    g_dxt_enabled = on ? 1 : 0;
    if (capacity >= 0)
        g_dxt_capacity = capacity;
    pthread_mutex_unlock(&store_lock);
}

int iotrace_get_dxt(int64_t *capacity)
{
    if (capacity)
        *capacity = g_dxt_capacity;
    return g_dxt_enabled;
}

uint32_t iotrace_unresolved_mask(void)
{
    RESOLVE();
    return unresolved_mask;
}

int64_t iotrace_record_count(void)
{
    pthread_mutex_lock(&store_lock);
    int64_t n = n_records;
    pthread_mutex_unlock(&store_lock);
    return n;
}

/* Consistent cut of the store. Segments from index seg_from, paths and ids of
 * records from index paths_from onward, and counters of records changed after
 * generation since_gen are copied. A stale epoch or cursor yields everything. */
int iotrace_snapshot(int64_t seg_from, int64_t paths_from, uint64_t since_gen, int64_t epoch,
                     iot_snapshot *out)
{
    memset(out, 0, sizeof(*out));
    pthread_mutex_lock(&store_lock);
    out->t_mono = now_mono();
    out->t_wall = now_wall();
    out->n_records = n_records;
    out->n_segments_total = n_segments;
    out->dxt_enabled = g_dxt_enabled;
    out->dxt_capacity = (int32_t)g_dxt_capacity;
    if (epoch != g_epoch || paths_from < 0 || paths_from > n_records ||
        seg_from < 0 || seg_from > n_segments || since_gen >= g_gen) {
        seg_from = 0;
        paths_from = 0;
        since_gen = 0;
    }
    out->epoch = g_epoch;
    out->seg_from = seg_from;
    out->paths_from = paths_from;
    out->n_segs_out = n_segments - seg_from;
    out->n_fds = fd_active[0] + fd_active[1];

    int64_t ndirty = 0;
    for (int64_t i = 0; i < n_records; i++)
        if (records[i].gen > since_gen)
            ndirty++;
    out->n_dirty = ndirty;

    size_t plen = 0;
    for (int64_t i = paths_from; i < n_records; i++)
        plen += strlen(records[i].path) + 1;
    out->paths_len = (int64_t)plen;

    size_t nd = (size_t)(ndirty ? ndirty : 1);
    size_t nnew = (size_t)(n_records > paths_from ? n_records - paths_from : 1);
    out->dirty = malloc(nd * sizeof(int64_t));
    out->ids = malloc(nnew * sizeof(uint64_t));
    out->counters = malloc(nd * NCOUNTERS * sizeof(int64_t));
    out->times = malloc(nd * NTIMES * sizeof(double));
    out->truncated = malloc(nd * sizeof(int32_t));
    out->segs = malloc((size_t)(out->n_segs_out ? out->n_segs_out : 1) * sizeof(iot_seg));
    out->paths = malloc(plen ? plen : 1);
    out->fds = malloc((size_t)(out->n_fds ? out->n_fds : 1) * sizeof(iot_fdout));
    if (!out->dirty || !out->ids || !out->counters || !out->times || !out->truncated ||
        !out->segs || !out->paths || !out->fds) {
        pthread_mutex_unlock(&store_lock);
        return ENOMEM;
    }
    int64_t k = 0;
    for (int64_t i = 0; i < n_records; i++) {
        if (records[i].gen <= since_gen)
            continue;
        out->dirty[k] = i;
        memcpy(out->counters + k * NCOUNTERS, records[i].c, sizeof(records[i].c));
        memcpy(out->times + k * NTIMES, records[i].t, sizeof(records[i].t));
        out->truncated[k] = records[i].truncated;
        k++;
    }
    for (int64_t i = paths_from; i < n_records; i++)
        out->ids[i - paths_from] = records[i].id;
    if (out->n_segs_out)
        memcpy(out->segs, segments + seg_from, (size_t)out->n_segs_out * sizeof(iot_seg));
    char *p = out->paths;
    for (int64_t i = paths_from; i < n_records; i++) {
        size_t l = strlen(records[i].path) + 1;
        memcpy(p, records[i].path, l);
        p += l;
    }
    k = 0;
    for (int fam = 0; fam < 2; fam++)
        for (int64_t i = 0, left = fd_active[fam]; left > 0 && i < fd_caps[fam]; i++)
            if (fd_tables[fam][i].rec >= 0) {
                left--;
                out->fds[k].fd = (int32_t)i;
                out->fds[k].family = fam;
                out->fds[k].rec = fd_tables[fam][i].rec;
                out->fds[k].offset = fd_tables[fam][i].offset;
                k++;
            }
    out->gen = g_gen++;
    pthread_mutex_unlock(&store_lock);
    return 0;
}

void iotrace_snapshot_release(iot_snapshot *s)
{
    free(s->dirty);
    free(s->ids);
    free(s->counters);
    free(s->times);
    free(s->truncated);
    free(s->segs);
    free(s->paths);
    free(s->fds);
    memset(s, 0, sizeof(*s));
}

/* Rewrite one relocation slot. prot_after < 0 leaves the page writable. */
int iotrace_write_slot(uintptr_t slot, uintptr_t value, int prot_after, uintptr_t *old)
{
    long pagesz = sysconf(_SC_PAGESIZE);
    uintptr_t page = slot & ~((uintptr_t)pagesz - 1);
    size_t len = (slot + sizeof(void *) > page + (uintptr_t)pagesz) ? 2 * (size_t)pagesz : (size_t)pagesz;
    if (mprotect((void *)page, len, PROT_READ | PROT_WRITE) != 0)
        return errno ? errno : EACCES;
    uintptr_t prev = __atomic_exchange_n((uintptr_t *)slot, value, __ATOMIC_SEQ_CST);
    if (old)
        *old = prev;
    if (prot_after >= 0 && mprotect((void *)page, len, prot_after) != 0)
        return errno ? errno : EACCES;
    return 0;
}

uintptr_t iotrace_read_slot(uintptr_t slot)
{
    return __atomic_load_n((uintptr_t *)slot, __ATOMIC_SEQ_CST);
}

/* ---- NDJSON log emission (preload mode, at exit) ---- */

typedef struct {
    int fd;
    char buf[1 << 16];
    size_t n;
    int failed;
} outbuf;

static void ob_flush(outbuf *ob)
{
    size_t off = 0;
    while (off < ob->n) {
        ssize_t w = real_write(ob->fd, ob->buf + off, ob->n - off);
        if (w < 0) {
            if (errno == EINTR)
                continue;
            ob->failed = 1;
            break;
        }
        off += (size_t)w;
    }
    ob->n = 0;
}

static void ob_put(outbuf *ob, const char *s, size_t l)
{
    while (l) {
        size_t room = sizeof(ob->buf) - ob->n;
        size_t k = l < room ? l : room;
        memcpy(ob->buf + ob->n, s, k);
        ob->n += k;
        s += k;
        l -= k;
        if (ob->n == sizeof(ob->buf))
            ob_flush(ob);
    }
}

static void ob_printf(outbuf *ob, const char *fmt, ...)
{
    char tmp[512];
    va_list ap;
    va_start(ap, fmt);
    int k = vsnprintf(tmp, sizeof(tmp), fmt, ap);
    va_end(ap);
    if (k > 0)
        ob_put(ob, tmp, (size_t)k < sizeof(tmp) ? (size_t)k : sizeof(tmp) - 1);
}

static void ob_json_string(outbuf *ob, const char *s)
{
    ob_put(ob, "\"", 1);
    for (const unsigned char *p = (const unsigned char *)s; *p; p++) {
        if (*p == '"' || *p == '\\') {
            char e[2] = {'\\', (char)*p};
            ob_put(ob, e, 2);
        } else if (*p < 0x20) {
            ob_printf(ob, "\\u%04x", *p);
        } else {
            ob_put(ob, (const char *)p, 1);
        }
    }
    ob_put(ob, "\"", 1);
}

static const char *scalar_names[] = {
    "opens", "closes", "reads", "writes", "bytes_read", "bytes_written", "zero_reads",
    "seq_reads", "consec_reads", "seq_writes", "consec_writes",
    "max_read_offset", "max_write_offset",
};
static const char *time_names[NTIMES] = {
    "t_first_open", "t_first_read", "t_last_read", "t_first_write", "t_last_write",
};

static void write_record_line(outbuf *ob, int64_t i)
{
    iot_rec *r = &records[i];
    ob_printf(ob, "{\"type\":\"record\",\"record_id\":%llu,\"path\":", (unsigned long long)r->id);
    ob_json_string(ob, r->path);
    ob_put(ob, ",\"counters\":{", 13);
    for (int k = 0; k <= C_MAX_WRITE_OFFSET; k++)
        ob_printf(ob, "%s\"%s\":%lld", k ? "," : "", scalar_names[k], (long long)r->c[k]);
    for (int h = 0; h < 2; h++) {
        ob_printf(ob, ",\"%s\":[", h ? "write_size_hist" : "read_size_hist");
        int base = h ? C_WRITE_HIST : C_READ_HIST;
        for (int b = 0; b < 10; b++)
            ob_printf(ob, "%s%lld", b ? "," : "", (long long)r->c[base + b]);
        ob_put(ob, "]", 1);
    }
    ob_printf(ob, ",\"stdio_opens\":%lld,\"stdio_reads\":%lld,\"stdio_writes\":%lld,"
                  "\"stdio_bytes_written\":%lld",
              (long long)r->c[C_STDIO_OPENS], (long long)r->c[C_STDIO_READS],
              (long long)r->c[C_STDIO_WRITES], (long long)r->c[C_STDIO_BYTES_WRITTEN]);
    for (int t = 0; t < NTIMES; t++)
        ob_printf(ob, ",\"%s\":%.17g", time_names[t], r->t[t]);
    ob_printf(ob, "},\"truncated\":%s,\"open_fds\":[", r->truncated ? "true" : "false");
    int first = 1;
    for (int fam = 0; fam < 2; fam++)
        for (int64_t f = 0; f < fd_caps[fam]; f++)
            if (fd_tables[fam][f].rec == i) {
                ob_printf(ob, "%s[%lld,\"%s\",%lld]", first ? "" : ",", (long long)f,
                          fam ? "STDIO" : "POSIX", (long long)fd_tables[fam][f].offset);
                first = 0;
            }
    ob_put(ob, "]}\n", 3);
}

static void write_log(const char *templ)
{
    char path[PATH_MAX];
    size_t o = 0;
    for (const char *p = templ; *p && o + 24 < sizeof(path); p++) {
        if (p[0] == '%' && p[1] == 'p') {
            o += (size_t)snprintf(path + o, sizeof(path) - o, "%d", (int)getpid());
            p++;
        } else {
            path[o++] = *p;
        }
    }
    path[o] = '\0';

    static outbuf ob;
    ob.n = 0;
    ob.failed = 0;
    ob.fd = real_open(path, O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
    if (ob.fd < 0)
        return;
    char host[256] = "";
    gethostname(host, sizeof(host) - 1);

    pthread_mutex_lock(&store_lock);
    ob_printf(&ob, "{\"format\":\"iotrace-log\",\"version\":%d,\"hostname\":", IOT_VERSION);
    ob_json_string(&ob, host);
    ob_printf(&ob, ",\"pid\":%d,\"t_wall\":%.17g,\"t_mono\":%.17g,\"dxt_enabled\":%s,"
                   "\"dxt_capacity\":%lld,\"t_start\":%.17g}\n",
              (int)getpid(), now_wall(), now_mono(), g_dxt_enabled ? "true" : "false",
              (long long)g_dxt_capacity, g_t_start);
    for (int64_t i = 0; i < n_records; i++)
        write_record_line(&ob, i);
    for (int64_t s = 0; s < n_segments; s++) {
        iot_seg *g = &segments[s];
        ob_printf(&ob, "{\"type\":\"segment\",\"record_id\":%llu,\"seq\":%lld,\"kind\":\"%s\","
                       "\"offset\":%lld,\"length\":%lld,\"t_start\":%.17g,\"t_end\":%.17g}\n",
                  (unsigned long long)records[g->rec].id, (long long)g->seq,
                  g->kind == KIND_READ ? "READ" : "WRITE", (long long)g->offset,
                  (long long)g->length, g->t_start, g->t_end);
    }
    ob_printf(&ob, "{\"type\":\"end\",\"records\":%lld,\"segments\":%lld}\n",
              (long long)n_records, (long long)n_segments);
    pthread_mutex_unlock(&store_lock);
    ob_flush(&ob);
    real_close(ob.fd);
}

/* ---- lifecycle ---- */

static void atfork_prepare(void) { pthread_mutex_lock(&store_lock); }
static void atfork_parent(void) { pthread_mutex_unlock(&store_lock); }

static void atfork_child(void)
{
    /* the child starts with an empty store; inherited descriptors go anonymous */
    for (int64_t i = 0; i < n_records; i++)
        free(records[i].path);
    n_records = 0;
    n_segments = 0;
    anon_rec = -1;
    g_epoch++;
    if (id_table)
        memset(id_table, 0, (size_t)id_table_cap * sizeof(int64_t));
    for (int fam = 0; fam < 2; fam++) {
        for (int64_t i = 0; i < fd_caps[fam]; i++)
            fd_tables[fam][i].rec = -1;
        fd_active[fam] = 0;
    }
    g_pid = getpid();
    pthread_mutex_unlock(&store_lock);
}

static uint32_t mask_from_env(const char *list)
{
    uint32_t mask = 0;
    char buf[1024];
    snprintf(buf, sizeof(buf), "%s", list);
    char *save = NULL;
    for (char *tok = strtok_r(buf, ", ", &save); tok; tok = strtok_r(NULL, ", ", &save))
        for (int i = 0; i < NSYMBOLS; i++)
            if (strcmp(tok, symbol_names[i]) == 0)
                mask |= 1u << i;
    return mask;
}

__attribute__((constructor)) static void iot_init(void)
{
    g_t_start = now_mono();
    RESOLVE();
    const char *v = getenv("IOTRACE_ENABLE");
    if (v && *v)
        g_enabled = atoi(v) != 0;
    v = getenv("IOTRACE_SYMBOLS");
    if (v && *v)
        g_symbol_mask = mask_from_env(v);
    v = getenv("IOTRACE_DXT");
    if (v && *v)
        g_dxt_enabled = atoi(v) != 0;
    v = getenv("IOTRACE_DXT_CAPACITY");
    if (v && *v)
        g_dxt_capacity = atoll(v);
    pthread_atfork(atfork_prepare, atfork_parent, atfork_child);
}

__attribute__((destructor)) static void iot_fini(void)
{
    const char *log = getenv("IOTRACE_LOG");
    if (log && *log && g_enabled && !unresolved_mask)
        write_log(log);
}

/* In a vfork child the parent's store is shared memory; keep it untouched. */
static inline int same_process(void)
{
    return (pid_t)syscall(SYS_getpid) == g_pid;
}

/* ---- POSIX wrappers ---- */

#define SAVE_ERRNO int saved_errno_ = errno
#define RESTORE_ERRNO errno = saved_errno_

static int open_common(int sym, int (*real)(const char *, int, ...), const char *path,
                       int flags, mode_t mode)
{
    if (!real) {
        errno = ENOSYS;
        return -1;
    }
    if (!active(sym))
        return real(path, flags, mode);
    double t0 = now_mono();
    int fd = real(path, flags, mode);
    if (fd >= 0 && same_process()) {
        SAVE_ERRNO;
        iotrace_on_open(path, fd, t0, FAM_POSIX);
        RESTORE_ERRNO;
    }
    return fd;
}

static mode_t open_mode(int flags, va_list ap)
{
    if ((flags & O_CREAT) || (flags & O_TMPFILE) == O_TMPFILE)
        return (mode_t)va_arg(ap, int);
    return 0;
}

int open(const char *path, int flags, ...)
{
    RESOLVE();
    va_list ap;
    va_start(ap, flags);
    mode_t mode = open_mode(flags, ap);
    va_end(ap);
    return open_common(S_OPEN, real_open, path, flags, mode);
}

int open64(const char *path, int flags, ...)
{
    RESOLVE();
    va_list ap;
    va_start(ap, flags);
    mode_t mode = open_mode(flags, ap);
    va_end(ap);
    return open_common(S_OPEN64, real_open64, path, flags, mode);
}

int creat(const char *path, mode_t mode)
{
    RESOLVE();
    if (!real_creat) {
        errno = ENOSYS;
        return -1;
    }
    if (!active(S_CREAT))
        return real_creat(path, mode);
    double t0 = now_mono();
    int fd = real_creat(path, mode);
    if (fd >= 0 && same_process()) {
        SAVE_ERRNO;
        iotrace_on_open(path, fd, t0, FAM_POSIX);
        RESTORE_ERRNO;
    }
    return fd;
}

int close(int fd)
{
    RESOLVE();
    if (!real_close) {
        errno = ENOSYS;
        return -1;
    }
    if (!active(S_CLOSE) || !same_process())
        return real_close(fd);
    double t0 = now_mono();
    int r = real_close(fd);
    if (r == 0) {
        SAVE_ERRNO;
        iotrace_on_close(fd, t0, FAM_POSIX);
        RESTORE_ERRNO;
    }
    return r;
}

#define IO_WRAPPER(ret_t, name, sym, kind, has_off, off_expr, params, args)   \
    ret_t name params                                                          \
    {                                                                          \
        RESOLVE();                                                             \
        if (!real_##name) {                                                    \
            errno = ENOSYS;                                                    \
            return -1;                                                         \
        }                                                                      \
        if (!active(sym))                                                      \
            return real_##name args;                                           \
        double t0 = now_mono();                                                \
        ret_t r = real_##name args;                                            \
        double t1 = now_mono();                                                \
        if (r >= 0) {                                                          \
            SAVE_ERRNO;                                                        \
            account(FAM_POSIX, kind, fd, has_off, (int64_t)(off_expr),         \
                    (int64_t)r, t0, t1);                                       \
            RESTORE_ERRNO;                                                     \
        }                                                                      \
        return r;                                                              \
    }

IO_WRAPPER(ssize_t, read, S_READ, KIND_READ, 0, 0,
           (int fd, void *buf, size_t n), (fd, buf, n))
IO_WRAPPER(ssize_t, pread, S_PREAD, KIND_READ, 1, off,
           (int fd, void *buf, size_t n, off_t off), (fd, buf, n, off))
IO_WRAPPER(ssize_t, pread64, S_PREAD64, KIND_READ, 1, off,
           (int fd, void *buf, size_t n, off64_t off), (fd, buf, n, off))
IO_WRAPPER(ssize_t, write, S_WRITE, KIND_WRITE, 0, 0,
           (int fd, const void *buf, size_t n), (fd, buf, n))
IO_WRAPPER(ssize_t, pwrite, S_PWRITE, KIND_WRITE, 1, off,
           (int fd, const void *buf, size_t n, off_t off), (fd, buf, n, off))
IO_WRAPPER(ssize_t, pwrite64, S_PWRITE64, KIND_WRITE, 1, off,
           (int fd, const void *buf, size_t n, off64_t off), (fd, buf, n, off))

off_t lseek(int fd, off_t off, int whence)
{
    RESOLVE();
    if (!real_lseek) {
        errno = ENOSYS;
        return -1;
    }
    off_t r = real_lseek(fd, off, whence);
    if (r >= 0 && active(S_LSEEK)) {
        SAVE_ERRNO;
        iotrace_on_seek(fd, (int64_t)r);
        RESTORE_ERRNO;
    }
    return r;
}

off64_t lseek64(int fd, off64_t off, int whence)
{
    RESOLVE();
    if (!real_lseek64) {
        errno = ENOSYS;
        return -1;
    }
    off64_t r = real_lseek64(fd, off, whence);
    if (r >= 0 && active(S_LSEEK64)) {
        SAVE_ERRNO;
        iotrace_on_seek(fd, (int64_t)r);
        RESTORE_ERRNO;
    }
    return r;
}

/* ---- STDIO wrappers ---- */

static FILE *fopen_common(int sym, FILE *(*real)(const char *, const char *),
                          const char *path, const char *mode)
{
    if (!real) {
        errno = ENOSYS;
        return NULL;
    }
    if (!active(sym))
        return real(path, mode);
    double t0 = now_mono();
    FILE *fp = real(path, mode);
    if (fp && same_process()) {
        SAVE_ERRNO;
        iotrace_on_open(path, fileno(fp), t0, FAM_STDIO);
        RESTORE_ERRNO;
    }
    return fp;
}

FILE *fopen(const char *path, const char *mode)
{
    RESOLVE();
    return fopen_common(S_FOPEN, real_fopen, path, mode);
}

FILE *fopen64(const char *path, const char *mode)
{
    RESOLVE();
    return fopen_common(S_FOPEN64, real_fopen64, path, mode);
}

int fclose(FILE *fp)
{
    RESOLVE();
    if (!real_fclose) {
        errno = ENOSYS;
        return EOF;
    }
    if (!active(S_FCLOSE) || !fp)
        return real_fclose(fp);
    int fd = fileno(fp);
    double t0 = now_mono();
    int r = real_fclose(fp);
    SAVE_ERRNO;
    iotrace_on_close(fd, t0, FAM_STDIO);
    RESTORE_ERRNO;
    return r;
}

size_t fread(void *buf, size_t size, size_t nmemb, FILE *fp)
{
    RESOLVE();
    if (!real_fread)
        return 0;
    if (!active(S_FREAD))
        return real_fread(buf, size, nmemb, fp);
    double t0 = now_mono();
    size_t r = real_fread(buf, size, nmemb, fp);
    double t1 = now_mono();
    SAVE_ERRNO;
    account(FAM_STDIO, KIND_READ, fileno(fp), 0, 0, (int64_t)(r * size), t0, t1);
    RESTORE_ERRNO;
    return r;
}

size_t fwrite(const void *buf, size_t size, size_t nmemb, FILE *fp)
{
    RESOLVE();
    if (!real_fwrite)
        return 0;
    if (!active(S_FWRITE))
        return real_fwrite(buf, size, nmemb, fp);
    double t0 = now_mono();
    size_t r = real_fwrite(buf, size, nmemb, fp);
    double t1 = now_mono();
    SAVE_ERRNO;
    account(FAM_STDIO, KIND_WRITE, fileno(fp), 0, 0, (int64_t)(r * size), t0, t1);
    RESTORE_ERRNO;
    return r;
}

int fseek(FILE *fp, long off, int whence)
{
    RESOLVE();
    if (!real_fseek) {
        errno = ENOSYS;
        return -1;
    }
    return real_fseek(fp, off, whence);
}
