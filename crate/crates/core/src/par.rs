//! Execution policy for the data-parallel loops.
//!
//! Every parallel loop in the crate goes through this module. Work is split
//! into independent items whose results are collected in input order, so the
//! sequential and parallel policies produce bit-identical output.

use std::sync::atomic::{AtomicU8, Ordering};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    Parallel,
}

const SEQ: u8 = 0;
const PAR: u8 = 1;

static POLICY: AtomicU8 = AtomicU8::new(if cfg!(feature = "parallel") { PAR } else { SEQ });

/// Current process-wide policy. Without the `parallel` feature this is
/// always `Sequential`.
pub fn exec() -> Exec {
    if cfg!(feature = "parallel") && POLICY.load(Ordering::Relaxed) == PAR {
        Exec::Parallel
    } else {
        Exec::Sequential
    }
}

pub fn set_exec(exec: Exec) {
    let v = match exec {
        Exec::Sequential => SEQ,
        Exec::Parallel => PAR,
    };
    POLICY.store(v, Ordering::Relaxed);
}

/// Minimum number of scalar multiply-adds before a kernel splits its rows.
#[cfg(feature = "parallel")]
pub(crate) const MIN_PAR_WORK: usize = 1 << 15;

/// Map `f` over `items`, preserving order.
pub fn map<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    match exec() {
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            items.into_par_iter().map(f).collect()
        }
        _ => items.into_iter().map(f).collect(),
    }
}

/// Apply `f(row_index, row)` to each `row_len`-sized chunk of `out`.
#[cfg_attr(not(feature = "parallel"), allow(unused_variables))]
pub(crate) fn for_rows<F>(out: &mut [f64], row_len: usize, work: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if row_len == 0 {
        return;
    }
    match exec() {
        #[cfg(feature = "parallel")]
        Exec::Parallel if work >= MIN_PAR_WORK => {
            use rayon::prelude::*;
            out.par_chunks_mut(row_len)
                .enumerate()
                .for_each(|(i, row)| f(i, row));
        }
        _ => out
            .chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row)),
    }
}
