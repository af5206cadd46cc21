//! `par_iter` backed by rayon with the `parallel` feature, plain iteration
//! without it. Results are collected in order either way.

#[cfg(feature = "parallel")]
pub(crate) use rayon::prelude::*;

#[cfg(not(feature = "parallel"))]
pub(crate) trait IntoParallelRefIterator<'a> {
    type Iter: Iterator;
    fn par_iter(&'a self) -> Self::Iter;
}

#[cfg(not(feature = "parallel"))]
impl<'a, T: 'a> IntoParallelRefIterator<'a> for [T] {
    type Iter = std::slice::Iter<'a, T>;

    fn par_iter(&'a self) -> Self::Iter {
        self.iter()
    }
}
