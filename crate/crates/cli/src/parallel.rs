//! Order-preserving parallel map over records. Work is dealt out by index
//! from a shared counter and written back into a preallocated slot vector,
//! so the result order (and therefore every downstream reduction) is
//! identical for any worker count.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{anyhow, Result};

pub fn par_map<T, U, F>(items: &[T], workers: usize, f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> Result<U> + Sync,
{
    let workers = workers.max(1).min(items.len().max(1));
    if workers == 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<U>>>> =
        (0..items.len()).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                *slots[i].lock().unwrap() = Some(f(i, &items[i]));
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap().ok_or_else(|| anyhow!("worker dropped a slot"))?)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_order_for_any_worker_count() {
        let items: Vec<usize> = (0..97).collect();
        let serial = par_map(&items, 1, |i, &x| Ok(i * 1000 + x * x)).unwrap();
        for workers in [2, 3, 8, 200] {
            let par = par_map(&items, workers, |i, &x| Ok(i * 1000 + x * x)).unwrap();
            assert_eq!(par, serial);
        }
    }

    #[test]
    fn propagates_errors() {
        let items = vec![1, 2, 3];
        let r = par_map(&items, 2, |_, &x| {
            if x == 2 { Err(anyhow!("boom")) } else { Ok(x) }
        });
        assert!(r.is_err());
    }
}
