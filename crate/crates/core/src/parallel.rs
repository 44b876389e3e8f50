//! Switch between rayon and sequential execution.
//!
//! Per-document encodes, per-document backward recomputes and evaluation
//! examples are all independent, so they fan out over rayon when the
//! `parallel` feature (default) is on. Results are collected in input order,
//! which keeps every downstream reduction deterministic regardless of how
//! many worker threads ran.

#[cfg(feature = "parallel")]
pub fn map_collect<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_collect<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    items.iter().map(f).collect()
}

/// Always-sequential variant. The benches compare this against
/// [`map_collect`]; it is also what [`map_collect`] compiles down to when the
/// `parallel` feature is off.
pub fn map_collect_serial<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_serial_agree_in_order() {
        let xs: Vec<u64> = (0..257).collect();
        let a = map_collect(&xs, |x| x * 3 + 1);
        let b = map_collect_serial(&xs, |x| x * 3 + 1);
        assert_eq!(a, b);
    }
}
