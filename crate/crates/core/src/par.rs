//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature the [`Execution::Parallel`] mode runs on the
//! rayon pool; without it both modes run sequentially. Results are always
//! returned in input order so downstream reductions stay bitwise
//! reproducible regardless of the mode.

macro_rules! if_rayon {
    ($rayon_value: expr, $else_value: expr) => {{
        #[cfg(feature = "parallel")]
        {
            ($rayon_value)
        }
        #[cfg(not(feature = "parallel"))]
        {
            ($else_value)
        }
    }};
}
#[allow(unused_imports)]
pub(crate) use if_rayon;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    #[default]
    Parallel,
    Sequential,
}

impl Execution {
    /// Map `f` over `items`, preserving order.
    pub fn map<I, O, F>(self, items: &[I], f: F) -> Vec<O>
    where
        I: Sync,
        O: Send,
        F: Fn(usize, &I) -> O + Sync + Send,
    {
        match self {
            Execution::Sequential => items.iter().enumerate().map(|(i, x)| f(i, x)).collect(),
            Execution::Parallel => if_rayon!(
                {
                    use rayon::prelude::*;
                    items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()
                },
                items.iter().enumerate().map(|(i, x)| f(i, x)).collect()
            ),
        }
    }

    /// Like [`Execution::map`] for fallible closures; the first error in
    /// input order wins.
    pub fn try_map<I, O, F, E>(self, items: &[I], f: F) -> Result<Vec<O>, E>
    where
        I: Sync,
        O: Send,
        E: Send,
        F: Fn(usize, &I) -> Result<O, E> + Sync + Send,
    {
        self.map(items, f).into_iter().collect()
    }

    pub fn is_parallel(self) -> bool {
        matches!(self, Execution::Parallel) && cfg!(feature = "parallel")
    }
}
