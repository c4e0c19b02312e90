//! Minimal fixed-pool map over independent work items, used to fan
//! experiment cells out across threads without pulling in a runtime.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

/// Applies `f` to every item on up to `workers` threads and returns the
/// results in input order. `f` must be deterministic per item; scheduling
/// order is not.
pub fn parallel_map<T, R, F>(items: Vec<T>, workers: usize, f: F) -> Vec<R>
where
    T: Send + Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let n = items.len();
    if n == 0 {
        return Vec::new();
    }
    let workers = workers.max(1).min(n);
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, R)>();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let next = &next;
            let items = &items;
            let f = &f;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                if tx.send((i, f(&items[i]))).is_err() {
                    break;
                }
            });
        }
    });
    drop(tx);
    let mut slots: Vec<Option<R>> = (0..n).map(|_| None).collect();
    for (i, r) in rx {
        slots[i] = Some(r);
    }
    slots.into_iter().map(|s| s.expect("every index produced")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;
    use std::sync::Mutex;

    #[test]
    fn results_keep_input_order() {
        let items: Vec<u64> = (0..100).collect();
        let out = parallel_map(items, 8, |x| x * 2);
        assert_eq!(out, (0..100).map(|x| x * 2).collect::<Vec<_>>());
    }

    #[test]
    fn single_worker_matches_sequential() {
        let items = vec!["a", "bb", "ccc"];
        assert_eq!(parallel_map(items, 1, |s| s.len()), vec![1, 2, 3]);
    }

    #[test]
    fn zero_workers_behaves_like_one() {
        assert_eq!(parallel_map(vec![1, 2, 3], 0, |x| x + 1), vec![2, 3, 4]);
    }

    #[test]
    fn empty_input_yields_empty_output() {
        let out: Vec<i32> = parallel_map(Vec::<i32>::new(), 4, |x| *x);
        assert!(out.is_empty());
    }

    #[test]
    fn every_item_is_processed_exactly_once() {
        let seen = Mutex::new(HashSet::new());
        let items: Vec<usize> = (0..200).collect();
        parallel_map(items, 7, |x| {
            assert!(seen.lock().unwrap().insert(*x), "item {x} ran twice");
        });
        assert_eq!(seen.lock().unwrap().len(), 200);
    }

    #[test]
    fn more_workers_than_items_is_fine() {
        assert_eq!(parallel_map(vec![5], 16, |x| x * x), vec![25]);
    }
}
