//! Thread-pool sizing from the `MOEC_THREADS` environment variable.

use crate::error::{Error, Result};

pub const THREADS_ENV: &str = "MOEC_THREADS";

/// Parses a `MOEC_THREADS` value; `None` or empty means "use rayon's default".
pub fn parse_thread_cap(value: Option<&str>) -> Result<Option<usize>> {
    match value.map(str::trim) {
        None | Some("") => Ok(None),
        Some(v) => match v.parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
    }
}

/// Configures the global rayon pool from `MOEC_THREADS`. Returns the thread
/// count in effect. Results never depend on it: work is split into fixed
/// chunks and reduced in order.
pub fn init_from_env() -> Result<usize> {
    let cap = parse_thread_cap(std::env::var(THREADS_ENV).ok().as_deref())?;
    if let Some(n) = cap {
        // a pool built earlier in the process wins; that is fine for tests
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(rayon::current_num_threads())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thread_cap_parsing() {
        assert_eq!(parse_thread_cap(None).unwrap(), None);
        assert_eq!(parse_thread_cap(Some("4")).unwrap(), Some(4));
        assert!(parse_thread_cap(Some("0")).is_err());
        assert!(parse_thread_cap(Some("many")).is_err());
    }
}
