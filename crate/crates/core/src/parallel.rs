//! Data-parallel helpers. With the `parallel` feature these run on rayon;
//! without it every path is sequential. Results never depend on the choice.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Parallelism {
    Sequential,
    /// Worker count; `0` lets the pool decide.
    Threads(usize),
    #[default]
    Auto,
}

impl Parallelism {
    pub fn from_hint(threads: Option<usize>) -> Self {
        match threads {
            None | Some(0) => Parallelism::Auto,
            Some(1) => Parallelism::Sequential,
            Some(n) => Parallelism::Threads(n),
        }
    }

    /// `(0..n).map(f).collect()` preserving index order.
    pub fn map_collect<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            Parallelism::Sequential => (0..n).map(f).collect(),
            #[cfg(feature = "parallel")]
            Parallelism::Auto => {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(f).collect()
            }
            #[cfg(feature = "parallel")]
            Parallelism::Threads(t) => {
                use rayon::prelude::*;
                match rayon::ThreadPoolBuilder::new().num_threads(t).build() {
                    Ok(pool) => pool.install(|| (0..n).into_par_iter().map(f).collect()),
                    Err(_) => (0..n).map(f).collect(),
                }
            }
            #[cfg(not(feature = "parallel"))]
            _ => (0..n).map(f).collect(),
        }
    }

    /// Minimum of `f` over `0..n` and its first minimizing index. Ties go to
    /// the smaller index, so the result is order independent.
    pub fn min_by_index<F>(self, n: usize, f: F) -> (f64, usize)
    where
        F: Fn(usize) -> f64 + Sync + Send,
    {
        let values = self.map_collect(n, f);
        values.iter().enumerate().fold((f64::INFINITY, 0), |(bv, bi), (i, &v)| if v < bv { (v, i) } else { (bv, bi) })
    }
}
