//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) these fan out over rayon; without it
//! they are plain loops. Results are index-ordered either way, and reductions
//! use order-independent combiners (max with index tie-break), so the output
//! is identical in both modes and for any thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `0..count`, collecting results in index order.
pub fn map_indexed<T, F>(count: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..count).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..count).map(f).collect()
    }
}

/// Maximum of `f` over `0..count` with the lowest index attaining it.
/// Returns (index, value); (usize::MAX, -inf) when count == 0.
pub fn max_indexed<F>(count: usize, f: F) -> (usize, f64)
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    let combine = |a: (usize, f64), b: (usize, f64)| {
        if b.1 > a.1 || (b.1 == a.1 && b.0 < a.0) {
            b
        } else {
            a
        }
    };
    #[cfg(feature = "parallel")]
    {
        (0..count)
            .into_par_iter()
            .map(|i| (i, f(i)))
            .reduce(|| (usize::MAX, f64::NEG_INFINITY), combine)
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..count)
            .map(|i| (i, f(i)))
            .fold((usize::MAX, f64::NEG_INFINITY), combine)
    }
}

/// Cap the global thread pool from the `REIFENBERG_THREADS` environment
/// variable. Call once at process start; later calls are no-ops.
pub fn init_threads() {
    #[cfg(feature = "parallel")]
    {
        if let Ok(v) = std::env::var("REIFENBERG_THREADS") {
            if let Ok(k) = v.trim().parse::<usize>() {
                if k >= 1 {
                    let _ = rayon::ThreadPoolBuilder::new().num_threads(k).build_global();
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let v = map_indexed(100, |i| i * i);
        assert_eq!(v[7], 49);
        assert_eq!(v.len(), 100);
    }

    #[test]
    fn max_ties_break_low() {
        let vals = [1.0, 5.0, 2.0, 5.0];
        let (i, m) = max_indexed(4, |k| vals[k]);
        assert_eq!(i, 1);
        assert_eq!(m, 5.0);
    }

    #[test]
    fn max_empty() {
        let (i, m) = max_indexed(0, |_| 0.0);
        assert_eq!(i, usize::MAX);
        assert_eq!(m, f64::NEG_INFINITY);
    }
}
