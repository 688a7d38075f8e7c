//! Data-parallel execution switch.
//!
//! Inner loops that are independent per element (matmul rows, per-sample
//! evaluation, finite-difference coordinates, synthetic sample rendering)
//! go through [`map_range`]. With the `parallel` feature they run on the
//! rayon pool unless the process-wide mode is set to [`ExecMode::Sequential`];
//! without the feature everything is sequential. Every work item computes its
//! result with the same summation order in both modes, so the outputs are
//! bit-identical.

use std::sync::atomic::{AtomicU8, Ordering};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    Parallel,
}

static MODE: AtomicU8 = AtomicU8::new(1);

pub fn set_mode(mode: ExecMode) {
    MODE.store(
        match mode {
            ExecMode::Sequential => 0,
            ExecMode::Parallel => 1,
        },
        Ordering::Relaxed,
    );
}

/// Effective mode: always sequential when built without `parallel`.
pub fn mode() -> ExecMode {
    if cfg!(feature = "parallel") && MODE.load(Ordering::Relaxed) == 1 {
        ExecMode::Parallel
    } else {
        ExecMode::Sequential
    }
}

/// Evaluate `f` for every index in `0..n`, preserving index order in the output.
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    map_range_in(mode(), n, f)
}

pub fn map_range_in<T, F>(mode: ExecMode, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match mode {
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

/// Fill `out` in chunks of `chunk` elements; `f(chunk_index, slice)`.
pub fn for_each_chunk_mut<T, F>(out: &mut [T], chunk: usize, parallel: bool, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk == 0 {
        return;
    }
    match (mode(), parallel) {
        #[cfg(feature = "parallel")]
        (ExecMode::Parallel, true) => {
            use rayon::prelude::*;
            out.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
        }
        _ => out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree() {
        let f = |i: usize| (i as f64).sqrt().sin();
        let a = map_range_in(ExecMode::Sequential, 1000, f);
        let b = map_range_in(ExecMode::Parallel, 1000, f);
        assert_eq!(a, b);
    }
}
