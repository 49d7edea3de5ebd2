//! Ordered parallel map: results come back in input order, so reductions
//! are bit-identical for any thread count.

/// Apply `f` to each item, using up to `threads` worker threads. Output
/// order matches input order.
pub fn ordered_parallel_map<T, U, F>(items: &[T], threads: usize, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync,
{
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 || items.len() < 2 {
        return items.iter().map(&f).collect();
    }
    let mut slots: Vec<Option<U>> = (0..items.len()).map(|_| None).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slot_ptr = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        let mut handles = Vec::with_capacity(threads);
        for _ in 0..threads {
            let f = &f;
            let next = &next;
            handles.push(scope.spawn(move || {
                let mut local: Vec<(usize, U)> = Vec::new();
                loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if i >= items.len() {
                        break;
                    }
                    local.push((i, f(&items[i])));
                }
                local
            }));
        }
        for handle in handles {
            let batch = handle.join().expect("worker thread panicked");
            let mut guard = slot_ptr.lock().unwrap();
            for (i, v) in batch {
                guard[i] = Some(v);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("every slot filled")).collect()
}
