use crate::error::{Error, Result};

/// Sizes the global worker pool used by the kernels. Call once, before any
/// parallel work; results do not depend on the thread count.
pub fn set_threads(threads: usize) -> Result<()> {
    if threads == 0 {
        return Err(Error::Config("thread count must be >= 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Threads in the global worker pool.
pub fn threads() -> usize {
    rayon::current_num_threads()
}
