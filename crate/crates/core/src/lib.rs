//! Dynamic model identification and gravity compensation for a coupled
//! surgical manipulator.

pub mod baseparams;
pub mod dynamics;
pub mod error;
pub mod excitation;
pub mod expr;
pub mod ident;
pub mod kinematics;
pub mod linalg;
pub mod signals;
pub mod runtime;
pub mod sim;

pub use error::{Error, Result};

/// Order-preserving map that runs in parallel when the `parallel` feature is
/// enabled. Results never depend on the degree of parallelism.
pub(crate) fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}
