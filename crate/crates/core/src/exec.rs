//! Data-parallel helpers. With the `parallel` feature these go through rayon,
//! otherwise they run sequentially. Output order is always the input order.

/// Execution strategy chosen at call sites that expose it (benches, sweeps).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Parallelism {
    Sequential,
    #[default]
    Parallel,
}

impl Parallelism {
    /// `Parallel` degrades to sequential when the crate is built without rayon.
    pub fn effective(self) -> Self {
        if cfg!(feature = "parallel") {
            self
        } else {
            Parallelism::Sequential
        }
    }
}

pub fn map<T, R, F>(items: &[T], mode: Parallelism, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match mode.effective() {
        Parallelism::Sequential => items.iter().map(f).collect(),
        Parallelism::Parallel => par_map_impl(items, f),
    }
}

pub fn map_range<R, F>(n: usize, mode: Parallelism, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    let idx: Vec<usize> = (0..n).collect();
    map(&idx, mode, |&i| f(i))
}

/// Fill `out[i] = f(i)` for every row.
pub fn fill_rows<R, F>(out: &mut [R], mode: Parallelism, f: F)
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match mode.effective() {
        Parallelism::Sequential => {
            for (i, slot) in out.iter_mut().enumerate() {
                *slot = f(i);
            }
        }
        Parallelism::Parallel => fill_rows_impl(out, f),
    }
}

#[cfg(feature = "parallel")]
fn par_map_impl<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn par_map_impl<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.iter().map(f).collect()
}

#[cfg(feature = "parallel")]
fn fill_rows_impl<R, F>(out: &mut [R], f: F)
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    use rayon::prelude::*;
    out.par_iter_mut().enumerate().with_min_len(64).for_each(|(i, slot)| *slot = f(i));
}

#[cfg(not(feature = "parallel"))]
fn fill_rows_impl<R, F>(out: &mut [R], f: F)
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    for (i, slot) in out.iter_mut().enumerate() {
        *slot = f(i);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree_and_keep_order() {
        let xs: Vec<u64> = (0..1000).collect();
        let a = map(&xs, Parallelism::Sequential, |x| x * x);
        let b = map(&xs, Parallelism::Parallel, |x| x * x);
        assert_eq!(a, b);
        let mut out = vec![0usize; 333];
        fill_rows(&mut out, Parallelism::Parallel, |i| 3 * i);
        assert!(out.iter().enumerate().all(|(i, v)| *v == 3 * i));
    }
}
