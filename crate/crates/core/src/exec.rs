//! Data-parallel helpers.
//!
//! Every parallel loop in the crate goes through this module so the
//! `parallel` feature can be switched off without touching call sites.
//! Results are always collected in index order, so parallel and sequential
//! execution produce identical output.

/// Execution policy for batch-style loops.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ExecPolicy {
    Sequential,
    /// Uses rayon when the `parallel` feature is enabled, otherwise sequential.
    #[default]
    Parallel,
}

impl ExecPolicy {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == ExecPolicy::Parallel
    }
}

/// `(0..n).map(f).collect()`, possibly in parallel.
pub fn map_range<T, F>(policy: ExecPolicy, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if policy.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = policy;
    (0..n).map(f).collect()
}

/// `items.iter().map(f).collect()`, possibly in parallel.
pub fn map_slice<I, T, F>(policy: ExecPolicy, items: &[I], f: F) -> Vec<T>
where
    I: Sync,
    T: Send,
    F: Fn(&I) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if policy.is_parallel() {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    let _ = policy;
    items.iter().map(f).collect()
}

/// Fills `out` in fixed-size chunks; `f(chunk_index, chunk)`.
pub fn fill_chunks<T, F>(policy: ExecPolicy, out: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    assert!(chunk > 0);
    #[cfg(feature = "parallel")]
    if policy.is_parallel() {
        use rayon::prelude::*;
        out.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = policy;
    out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policies_agree() {
        let a = map_range(ExecPolicy::Sequential, 1000, |i| i * i);
        let b = map_range(ExecPolicy::Parallel, 1000, |i| i * i);
        assert_eq!(a, b);

        let mut x = vec![0usize; 103];
        let mut y = vec![0usize; 103];
        fill_chunks(ExecPolicy::Sequential, &mut x, 10, |c, s| {
            s.iter_mut().enumerate().for_each(|(k, v)| *v = c * 10 + k)
        });
        fill_chunks(ExecPolicy::Parallel, &mut y, 10, |c, s| {
            s.iter_mut().enumerate().for_each(|(k, v)| *v = c * 10 + k)
        });
        assert_eq!(x, y);
        assert_eq!(x, (0..103).collect::<Vec<_>>());
    }
}
