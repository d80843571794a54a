//! Data generation, file formats and experiment drivers around the core.

pub mod coco;
pub mod io;
pub mod store;
pub mod sweep;
pub mod synth;

use crate::error::{Error, Result};

pub const THREADS_ENV: &str = "SSOS_THREADS";

/// Thread count requested through `SSOS_THREADS`, if set.
pub fn requested_threads() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::InvalidArgument(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(None),
    }
}

/// Runs `f` inside a rayon pool sized by `SSOS_THREADS` (all cores when unset).
pub fn with_thread_pool<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = requested_threads()? {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}
