//! Shard execution strategy.
//!
//! With the `parallel` feature, [`Exec::Threads`] runs shard work on the
//! ambient rayon pool. Without it, both variants run sequentially. Results
//! are always returned in shard order, so reductions over them do not
//! depend on thread scheduling.

use serde::{Deserialize, Serialize};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Exec {
    Sequential,
    #[default]
    Threads,
}

impl Exec {
    /// Whether shard work actually runs on worker threads in this build.
    pub fn is_threaded(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Threads
    }

    pub(crate) fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Exec::Threads {
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Like [`map`](Self::map) with exclusive access to one item per index.
    pub(crate) fn map_mut<I, T, F>(self, items: &mut [I], f: F) -> Vec<T>
    where
        I: Send,
        T: Send,
        F: Fn(usize, &mut I) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Exec::Threads {
            return items
                .par_iter_mut()
                .enumerate()
                .map(|(i, item)| f(i, item))
                .collect();
        }
        items
            .iter_mut()
            .enumerate()
            .map(|(i, item)| f(i, item))
            .collect()
    }
}
