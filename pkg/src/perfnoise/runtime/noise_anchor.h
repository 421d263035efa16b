/* Instrumentation macros for noise injection targets.
 *
 * NOISE_ANCHOR(id) marks the loop body where payload instructions will be
 * spliced after compilation; it expands to an empty volatile asm statement
 * carrying only a comment, so it costs nothing at run time.  The "cc"
 * clobber tells the compiler not to keep condition flags live across the
 * splice point (some payload instructions write flags).
 *
 * NOISE_REGION_BEGIN/END(id) bracket the measured section with probe
 * runtime calls.  Keep them outside the loop being noised: begin, run the
 * loop, end.  For multithreaded sections, bracket the parallel construct
 * from the coordinating thread and have each worker call
 * noise_thread_init() before entering a memory-noised loop so its chase
 * buffer exists.
 *
 * Programs using memory_ld64 noise must size the per-thread chase buffer
 * with the NOISE_MEM_BUFFER_BYTES environment variable (the experiment
 * controller sets it from the plan) or accept the built-in default.
 */
#ifndef NOISE_ANCHOR_H
#define NOISE_ANCHOR_H

#ifdef __cplusplus
extern "C" {
#endif

void noise_probe_begin(const char *region_id);
void noise_probe_end(const char *region_id);
void noise_probe_dump(void);
void noise_thread_init(void);
void *noise_buffer_base(void);

#if defined(__aarch64__)
#define NOISE__ASM_COMMENT(text) __asm__ volatile("// " text ::: "cc")
#else
#define NOISE__ASM_COMMENT(text) __asm__ volatile("# " text ::: "cc")
#endif

#define NOISE_ANCHOR(region_id) NOISE__ASM_COMMENT("NOISE_ANCHOR:" region_id)

#define NOISE_REGION_BEGIN(region_id) noise_probe_begin(region_id)
#define NOISE_REGION_END(region_id) noise_probe_end(region_id)

#ifdef __cplusplus
}
#endif

#endif /* NOISE_ANCHOR_H */
