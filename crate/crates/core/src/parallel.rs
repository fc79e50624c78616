//! Per-sample data parallelism with a sequential fallback.
//!
//! Batch loss evaluation and corpus decoding are embarrassingly
//! parallel across samples. `map_samples` fans out with rayon when the
//! `parallel` feature is enabled (the default) and otherwise runs
//! sequentially; results always come back in input order, and callers
//! reduce them in that fixed order, so enabling or disabling
//! parallelism never changes a single bit of output.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `items`, in parallel when the `parallel` feature is
/// on. Result order matches input order.
pub fn map_samples<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Always-sequential twin of [`map_samples`], kept for benchmarking the
/// parallel speedup and for pinning equality between the two paths.
pub fn map_samples_seq<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        let xs: Vec<f64> = (0..1000).map(|i| i as f64 * 0.37).collect();
        let f = |x: &f64| (x.sin() * x.exp()).to_bits();
        assert_eq!(map_samples(&xs, f), map_samples_seq(&xs, f));
    }

    #[test]
    fn order_is_preserved() {
        let xs: Vec<usize> = (0..512).collect();
        let out = map_samples(&xs, |&x| x * 2);
        for (i, v) in out.iter().enumerate() {
            assert_eq!(*v, i * 2);
        }
    }
}
