//! Process-level tuning for long compute runs.

use std::sync::Once;

/// Keep freed multi-megabyte buffers in the heap instead of handing them
/// back to the kernel. Training and inference allocate and drop feature maps
/// of a few MB at a high rate; with glibc's defaults each one is a fresh
/// `mmap` whose pages fault in again on first touch.
pub fn retain_freed_memory() {
    static ONCE: Once = Once::new();
    ONCE.call_once(|| {
        #[cfg(all(target_os = "linux", target_env = "gnu"))]
        // SAFETY: mallopt only adjusts allocator thresholds.
        unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
            libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
        }
    });
}

/// Size the global rayon pool from `FLOW4DSR_THREADS` when it is set to a
/// positive integer. Has no effect once the pool exists.
pub fn configure_threads() -> Option<usize> {
    let n: usize = std::env::var("FLOW4DSR_THREADS").ok()?.trim().parse().ok().filter(|&n| n > 0)?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().ok()?;
    Some(n)
}
