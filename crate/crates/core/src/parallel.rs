//! Order-preserving parallel map over scoped threads.

/// Environment variable capping worker threads.
pub const WORKERS_ENV: &str = "PROMPTFL_WORKERS";

/// Worker count: the env cap when set and positive, otherwise the machine's
/// available parallelism.
pub fn workers() -> usize {
    let hw = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var(WORKERS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(n) if n > 0 => n,
        _ => hw,
    }
}

/// Applies `f` to every item and returns results in input order. Work is
/// split into contiguous chunks, so results never depend on scheduling.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let n = workers().min(items.len());
    if n <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let chunk = items.len().div_ceil(n);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                let f = &f;
                s.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(i, t)| f(c * chunk + i, t))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

#[cfg(test)]
mod tests {
    #[test]
    fn preserves_order() {
        let xs: Vec<usize> = (0..100).collect();
        let ys = super::map(&xs, |i, &x| (i, x * 2));
        assert!(ys.iter().enumerate().all(|(i, &(j, y))| i == j && y == 2 * i));
    }
}
