//! Execution policy for the data-parallel kernels.
//!
//! Every kernel that maps over nodes, samples or profiles goes through
//! [`Exec::map`]. Results are collected in index order, so reductions done
//! afterwards are independent of the policy and of thread scheduling.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    #[cfg(feature = "parallel")]
    Parallel,
}

#[allow(clippy::derivable_impls)]
impl Default for Exec {
    fn default() -> Self {
        #[cfg(feature = "parallel")]
        {
            Exec::Parallel
        }
        #[cfg(not(feature = "parallel"))]
        {
            Exec::Sequential
        }
    }
}

impl Exec {
    pub fn map<T, F>(self, count: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            Exec::Sequential => (0..count).map(f).collect(),
            #[cfg(feature = "parallel")]
            Exec::Parallel => {
                use rayon::prelude::*;
                (0..count).into_par_iter().map(f).collect()
            }
        }
    }

    /// Maps over a slice of items, preserving order.
    pub fn map_slice<I, T, F>(self, items: &[I], f: F) -> Vec<T>
    where
        I: Sync,
        T: Send,
        F: Fn(&I) -> T + Sync + Send,
    {
        self.map(items.len(), |i| f(&items[i]))
    }
}

/// Max of a sequence with NaN treated as +inf, so a poisoned value is never hidden.
pub(crate) fn max_of(values: impl IntoIterator<Item = f64>) -> f64 {
    values.into_iter().fold(0.0_f64, |acc, v| if v.is_nan() || acc.is_nan() { f64::INFINITY } else { acc.max(v) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policies_agree() {
        let seq = Exec::Sequential.map(1000, |i| (i as f64).sqrt());
        let def = Exec::default().map(1000, |i| (i as f64).sqrt());
        assert_eq!(seq, def);
    }

    #[test]
    fn max_of_flags_nan() {
        assert_eq!(max_of([1.0, 3.0, 2.0]), 3.0);
        assert!(max_of([1.0, f64::NAN]).is_infinite());
        assert_eq!(max_of(std::iter::empty()), 0.0);
    }
}
