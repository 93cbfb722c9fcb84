//! Bounded-parallelism helpers.
//!
//! `VSEAM_WORKERS` caps the pool; results are returned in input order so
//! every aggregation downstream is independent of scheduling.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

/// Worker count: `VSEAM_WORKERS` if set, otherwise available parallelism
/// capped at 4.
pub fn worker_count() -> usize {
    if let Ok(v) = std::env::var("VSEAM_WORKERS") {
        if let Ok(n) = v.parse::<usize>() {
            return n.max(1);
        }
    }
    std::thread::available_parallelism()
        .map(|n| n.get().min(4))
        .unwrap_or(1)
}

/// Apply `f` to every item, fanning out across up to `worker_count()`
/// scoped threads. Output order matches input order; the first error wins
/// deterministically (lowest input index).
pub fn par_map<T, R, F>(items: &[T], f: F) -> Result<Vec<R>, crate::error::VseamError>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R, crate::error::VseamError> + Sync,
{
    let workers = worker_count().min(items.len().max(1));
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }

    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<R, crate::error::VseamError>>>> =
        items.iter().map(|_| Mutex::new(None)).collect();

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::Relaxed);
                if idx >= items.len() {
                    break;
                }
                let result = f(&items[idx]);
                *slots[idx].lock().expect("worker slot poisoned") = Some(result);
            });
        }
    });

    let mut out = Vec::with_capacity(items.len());
    for slot in slots {
        let value = slot
            .into_inner()
            .expect("worker slot poisoned")
            .expect("worker skipped an item");
        out.push(value?);
    }
    Ok(out)
}
