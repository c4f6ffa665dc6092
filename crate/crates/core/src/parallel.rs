//! Thread budget shared by the data-parallel parts of the crate.

use std::sync::atomic::{AtomicUsize, Ordering};

/// Environment variable capping compute threads.
pub const THREADS_ENV: &str = "CWM_THREADS";

static OVERRIDE: AtomicUsize = AtomicUsize::new(0);

/// Thread budget: a value set with [`set_threads`], else `CWM_THREADS`,
/// else 1.
pub fn threads() -> usize {
    match OVERRIDE.load(Ordering::Relaxed) {
        0 => std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n > 0)
            .unwrap_or(1),
        n => n,
    }
}

pub fn set_threads(n: usize) {
    OVERRIDE.store(n, Ordering::Relaxed);
}

/// Maps `f` over `items`, preserving order, on up to [`threads`] workers.
pub fn par_map<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync,
{
    let workers = threads().min(items.len());
    if workers <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| {
                let f = &f;
                s.spawn(move || part.iter().map(f).collect::<Vec<_>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}
