//! Allocator tuning for the training loop.
//!
//! Every batch builds and drops a tape of a few hundred megabytes. With
//! glibc's defaults those buffers are served by `mmap` and handed back to
//! the kernel on free, so the next batch pays for faulting them in again.

/// Keeps freed heap memory in the process instead of returning it to the OS.
/// Call once, before any large allocation. A no-op off glibc.
pub fn retain_freed_memory() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator thresholds.
    unsafe {
        // 32 MiB is the largest mmap threshold glibc accepts.
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
    }
}
