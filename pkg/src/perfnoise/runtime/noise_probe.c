/* Probe runtime: per-thread timing samples and noise buffers.
 *
 * Linkable from C, C++, or Fortran.  Each thread owns its sample storage,
 * so begin/end never contend on a lock; records are merged and sorted by
 * (region, thread, sample index) when noise_probe_dump() writes the CSV.
 * Dump runs at exit automatically and can also be called explicitly.
 *
 * The thread-local symbols below are read directly by injected assembly
 * through local-exec TLS sequences, which is why this file must be linked
 * into the executable rather than a shared library:
 *
 *   noise_tls_l1_buf   small buffer that stays L1-resident, zero filled
 *   noise_tls_chase    start pointers into the per-thread chase buffer
 *   noise_tls_spill    scratch slots for saving callee-saved registers
 *
 * The chase buffer is a single-cycle pseudo-random permutation over
 * cache-line-sized slots (Sattolo's algorithm, fixed compile-time seed):
 * following any start pointer touches every slot exactly once per lap in
 * an order that defeats stride prefetchers.  It is sized from the
 * NOISE_MEM_BUFFER_BYTES environment variable and allocated lazily, only
 * when that variable is set or noise_buffer_base() is called, so runs
 * without memory noise pay nothing.
 */
#define _GNU_SOURCE
#include <pthread.h>
#include <stdint.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>
#include <sys/mman.h>
#include <time.h>

#include "noise_anchor.h"

#define NOISE_L1_BUFFER_BYTES 4096
#define NOISE_CHASE_SLOTS 8
#define NOISE_SPILL_SLOTS 16
#define NOISE_CHASE_STRIDE 64
#define NOISE_CHASE_SEED 0x9e3779b97f4a7c15ull
#define NOISE_MEM_BUFFER_DEFAULT (256ull << 20)

__thread unsigned char noise_tls_l1_buf[NOISE_L1_BUFFER_BYTES]
    __attribute__((aligned(64)));
__thread void *noise_tls_chase[NOISE_CHASE_SLOTS];
__thread unsigned long long noise_tls_spill[NOISE_SPILL_SLOTS];

struct region_state {
    char *name;
    int active;
    uint64_t start_ns;
    uint32_t count;
    struct region_state *next;
};

struct sample {
    const char *region;
    uint32_t thread_id;
    uint32_t index;
    uint64_t duration_ns;
};

struct thread_record {
    uint32_t thread_id;
    struct region_state *regions;
    struct sample *samples;
    size_t n_samples, cap;
    unsigned char *mem_buf;
    size_t mem_bytes;
    struct thread_record *next;
};

static pthread_mutex_t g_lock = PTHREAD_MUTEX_INITIALIZER;
static struct thread_record *g_records;
static uint32_t g_next_thread_id;
static int g_atexit_armed;
static int g_mem_env_checked, g_mem_env_set;

static __thread struct thread_record *t_rec;

static uint64_t now_ns(void) {
    struct timespec ts;
    clock_gettime(CLOCK_MONOTONIC, &ts);
    return (uint64_t)ts.tv_sec * 1000000000ull + (uint64_t)ts.tv_nsec;
}

static struct thread_record *get_record(void) {
    if (t_rec)
        return t_rec;
    struct thread_record *rec = calloc(1, sizeof *rec);
    if (!rec) {
        fprintf(stderr, "noise probe: out of memory\n");
        abort();
    }
    pthread_mutex_lock(&g_lock);
    rec->thread_id = g_next_thread_id++;
    rec->next = g_records;
    g_records = rec;
    if (!g_atexit_armed) {
        g_atexit_armed = 1;
        atexit(noise_probe_dump);
    }
    if (!g_mem_env_checked) {
        g_mem_env_checked = 1;
        g_mem_env_set = getenv("NOISE_MEM_BUFFER_BYTES") != NULL;
    }
    pthread_mutex_unlock(&g_lock);
    t_rec = rec;
    return rec;
}

static uint64_t xorshift64(uint64_t *s) {
    uint64_t x = *s;
    x ^= x << 13;
    x ^= x >> 7;
    x ^= x << 17;
    *s = x;
    return x;
}

/* Lay a single-cycle permutation over the chase buffer and point the TLS
 * slots at evenly spaced positions on it. */
static void chase_init(struct thread_record *rec) {
    if (noise_tls_chase[0])
        return;
    const char *env = getenv("NOISE_MEM_BUFFER_BYTES");
    size_t bytes = env ? strtoull(env, NULL, 10) : NOISE_MEM_BUFFER_DEFAULT;
    size_t min_bytes = NOISE_CHASE_STRIDE * NOISE_CHASE_SLOTS * 2;
    if (bytes < min_bytes)
        bytes = min_bytes;
    size_t n = bytes / NOISE_CHASE_STRIDE;
    /* Hugepage-align and advise: injected loads are meant to cost one
     * memory access, and on 4 KiB pages every hop would pay a TLB walk
     * that contends with the measured program's own walks.  Best effort;
     * kernels without THP just ignore the hint. */
    size_t align = 2u << 20;
    size_t alloc = (n * NOISE_CHASE_STRIDE + align - 1) & ~(align - 1);
    unsigned char *buf = aligned_alloc(align, alloc);
#ifdef MADV_HUGEPAGE
    if (buf)
        madvise(buf, alloc, MADV_HUGEPAGE);
#endif
    size_t *perm = malloc(n * sizeof *perm);
    if (!buf || !perm) {
        fprintf(stderr, "noise probe: cannot allocate %zu byte chase buffer\n", bytes);
        abort();
    }
    for (size_t i = 0; i < n; i++)
        perm[i] = i;
    uint64_t seed = NOISE_CHASE_SEED;
    for (size_t i = n - 1; i >= 1; i--) { /* Sattolo: j strictly below i */
        size_t j = (size_t)(xorshift64(&seed) % i);
        size_t tmp = perm[i];
        perm[i] = perm[j];
        perm[j] = tmp;
    }
    for (size_t i = 0; i < n; i++)
        *(void **)(buf + i * NOISE_CHASE_STRIDE) = buf + perm[i] * NOISE_CHASE_STRIDE;
    free(perm);
    for (int s = 0; s < NOISE_CHASE_SLOTS; s++)
        noise_tls_chase[s] = buf + (n / NOISE_CHASE_SLOTS) * (size_t)s * NOISE_CHASE_STRIDE;
    rec->mem_buf = buf;
    rec->mem_bytes = n * NOISE_CHASE_STRIDE;
}

static struct region_state *find_region(struct thread_record *rec, const char *name) {
    for (struct region_state *rs = rec->regions; rs; rs = rs->next)
        if (strcmp(rs->name, name) == 0)
            return rs;
    return NULL;
}

void noise_probe_begin(const char *region_id) {
    struct thread_record *rec = get_record();
    if (g_mem_env_set)
        chase_init(rec);
    struct region_state *rs = find_region(rec, region_id);
    if (!rs) {
        rs = calloc(1, sizeof *rs);
        rs->name = strdup(region_id);
        rs->next = rec->regions;
        rec->regions = rs;
    }
    if (rs->active) {
        fprintf(stderr, "noise probe: nested begin of region '%s' ignored\n", region_id);
        return;
    }
    rs->active = 1;
    rs->start_ns = now_ns(); /* timestamp is the last action of begin */
}

void noise_probe_end(const char *region_id) {
    uint64_t t = now_ns(); /* timestamp is the first action of end */
    struct thread_record *rec = get_record();
    struct region_state *rs = find_region(rec, region_id);
    if (!rs || !rs->active) {
        fprintf(stderr, "noise probe: end of region '%s' without begin dropped\n",
                region_id);
        return;
    }
    rs->active = 0;
    if (rec->n_samples == rec->cap) {
        rec->cap = rec->cap ? rec->cap * 2 : 64;
        rec->samples = realloc(rec->samples, rec->cap * sizeof *rec->samples);
        if (!rec->samples) {
            fprintf(stderr, "noise probe: out of memory\n");
            abort();
        }
    }
    struct sample *sm = &rec->samples[rec->n_samples++];
    sm->region = rs->name;
    sm->thread_id = rec->thread_id;
    sm->index = rs->count++;
    sm->duration_ns = t - rs->start_ns;
}

static int sample_cmp(const void *a, const void *b) {
    const struct sample *x = a, *y = b;
    int c = strcmp(x->region, y->region);
    if (c)
        return c;
    if (x->thread_id != y->thread_id)
        return x->thread_id < y->thread_id ? -1 : 1;
    if (x->index != y->index)
        return x->index < y->index ? -1 : 1;
    return 0;
}

void noise_probe_dump(void) {
    pthread_mutex_lock(&g_lock);
    size_t total = 0;
    for (struct thread_record *rec = g_records; rec; rec = rec->next)
        total += rec->n_samples;
    struct sample *all = malloc((total ? total : 1) * sizeof *all);
    if (!all) {
        pthread_mutex_unlock(&g_lock);
        fprintf(stderr, "noise probe: out of memory in dump\n");
        return;
    }
    size_t n = 0;
    for (struct thread_record *rec = g_records; rec; rec = rec->next) {
        memcpy(all + n, rec->samples, rec->n_samples * sizeof *all);
        n += rec->n_samples;
    }
    pthread_mutex_unlock(&g_lock);
    qsort(all, n, sizeof *all, sample_cmp);

    const char *path = getenv("NOISE_PROBE_OUT");
    if (!path || !*path)
        path = "noise_samples.csv";
    FILE *f = fopen(path, "w");
    if (!f) {
        fprintf(stderr, "noise probe: cannot write '%s'\n", path);
        free(all);
        return;
    }
    fputs("region_id,thread_id,sample_index,duration_ns\n", f);
    for (size_t i = 0; i < n; i++)
        fprintf(f, "%s,%u,%u,%llu\n", all[i].region, all[i].thread_id,
                all[i].index, (unsigned long long)all[i].duration_ns);
    fclose(f);
    free(all);
}

void noise_thread_init(void) {
    struct thread_record *rec = get_record();
    /* The chase arena is only worth its footprint when memory noise is
     * actually being injected; the injector's driver always exports the
     * size variable in that case. */
    if (g_mem_env_set)
        chase_init(rec);
}

void *noise_buffer_base(void) {
    struct thread_record *rec = get_record();
    chase_init(rec);
    return rec->mem_buf;
}
