//! Bounded worker teams with static work partitioning.

use std::collections::HashMap;
use std::ops::Range;
use std::sync::{Arc, Mutex, OnceLock};

use rayon::{ThreadPool, ThreadPoolBuilder};

/// A fixed-size team of workers. Work is split into `threads` contiguous
/// ranges up front, so the assignment of items to workers never depends on
/// scheduling.
#[derive(Clone)]
pub struct Team {
    threads: usize,
    pool: Option<Arc<ThreadPool>>,
}

fn pool_for(threads: usize) -> Arc<ThreadPool> {
    static POOLS: OnceLock<Mutex<HashMap<usize, Arc<ThreadPool>>>> = OnceLock::new();
    let mut pools = POOLS
        .get_or_init(Default::default)
        .lock()
        .unwrap_or_else(|e| e.into_inner());
    pools
        .entry(threads)
        .or_insert_with(|| {
            Arc::new(
                ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .thread_name(|i| format!("convgemm-{i}"))
                    .build()
                    .expect("failed to start worker pool"),
            )
        })
        .clone()
}

impl Team {
    pub fn new(threads: usize) -> Self {
        let threads = threads.max(1);
        let pool = (threads > 1).then(|| pool_for(threads));
        Self { threads, pool }
    }

    pub fn threads(&self) -> usize {
        self.threads
    }

    /// Static partition of `0..n` into at most `threads` contiguous ranges.
    pub fn partition(&self, n: usize) -> Vec<Range<usize>> {
        let per = n.div_ceil(self.threads).max(1);
        (0..n).step_by(per).map(|start| start..(start + per).min(n)).collect()
    }

    /// Splits `data` into per-worker chunks of whole items (`item_len`
    /// elements each, the last chunk possibly short) and runs `f(items, chunk)`
    /// on each. Returns after every worker has finished.
    pub fn for_each_chunk_mut<T, F>(&self, data: &mut [T], n_items: usize, item_len: usize, f: F)
    where
        T: Send,
        F: Fn(Range<usize>, &mut [T]) + Sync,
    {
        let ranges = self.partition(n_items);
        match &self.pool {
            Some(pool) if ranges.len() > 1 => {
                let f = &f;
                let mut rest = data;
                pool.scope(|s| {
                    for r in ranges {
                        let take = ((r.end - r.start) * item_len).min(rest.len());
                        let (chunk, tail) = std::mem::take(&mut rest).split_at_mut(take);
                        rest = tail;
                        s.spawn(move |_| f(r, chunk));
                    }
                });
            }
            _ => {
                if n_items > 0 {
                    f(0..n_items, data)
                }
            }
        }
    }

    /// Runs `f` once per partition range of `0..n`.
    pub fn for_each_range<F>(&self, n: usize, f: F)
    where
        F: Fn(Range<usize>) + Sync,
    {
        let ranges = self.partition(n);
        match &self.pool {
            Some(pool) if ranges.len() > 1 => {
                let f = &f;
                pool.scope(|s| {
                    for r in ranges {
                        s.spawn(move |_| f(r));
                    }
                });
            }
            _ => {
                if n > 0 {
                    f(0..n)
                }
            }
        }
    }
}
