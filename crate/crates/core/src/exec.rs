//! Execution strategy for the data-parallel loops.
//!
//! Scene generation, batch forward/backward passes, and probe featurization
//! are all independent per item. [`map_items`] runs them either sequentially
//! or on the rayon pool; outputs come back in input order and all reductions
//! happen sequentially afterwards, so the two modes produce bit-identical
//! results.
//!
//! Building with `--no-default-features` removes the rayon dependency
//! entirely, in which case `Parallel` silently degrades to `Sequential`.

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// How to run a data-parallel loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecMode {
    #[default]
    Parallel,
    Sequential,
}

impl ExecMode {
    pub fn parse(text: &str) -> Option<ExecMode> {
        match text {
            "parallel" => Some(ExecMode::Parallel),
            "sequential" => Some(ExecMode::Sequential),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ExecMode::Parallel => "parallel",
            ExecMode::Sequential => "sequential",
        }
    }
}

/// Map `f` over `items`, preserving input order in the output.
#[cfg(feature = "parallel")]
pub fn map_items<T, U, F>(mode: ExecMode, items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    match mode {
        ExecMode::Parallel => items.par_iter().map(f).collect(),
        ExecMode::Sequential => items.iter().map(f).collect(),
    }
}

#[cfg(not(feature = "parallel"))]
pub fn map_items<T, U, F>(_mode: ExecMode, items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Map `f` over an index range, preserving order.
#[cfg(feature = "parallel")]
pub fn map_range<U, F>(mode: ExecMode, n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    match mode {
        ExecMode::Parallel => (0..n).into_par_iter().map(f).collect(),
        ExecMode::Sequential => (0..n).map(f).collect(),
    }
}

#[cfg(not(feature = "parallel"))]
pub fn map_range<U, F>(_mode: ExecMode, n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree_and_preserve_order() {
        let items: Vec<u64> = (0..64).collect();
        let seq = map_items(ExecMode::Sequential, &items, |x| x * x + 1);
        let par = map_items(ExecMode::Parallel, &items, |x| x * x + 1);
        assert_eq!(seq, par);
        assert_eq!(seq[10], 101);
    }

    #[test]
    fn range_modes_agree() {
        let seq = map_range(ExecMode::Sequential, 33, |i| i as f64 * 0.5);
        let par = map_range(ExecMode::Parallel, 33, |i| i as f64 * 0.5);
        assert_eq!(seq, par);
    }
}
