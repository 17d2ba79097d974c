//! Order-independent moment accumulation.
//!
//! Parallel work is split into fixed-size blocks by index; each block is
//! accumulated sequentially and blocks are merged along a fixed pairwise tree,
//! so the floating-point result never depends on thread count or scheduling.

use rayon::prelude::*;

/// Number of work items per sequential block.
pub const BLOCK_SIZE: usize = 64;

/// Per-coordinate running mean and centered sum of squares.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub count: u64,
    pub mean: Vec<f64>,
    pub m2: Vec<f64>,
}

impl Moments {
    pub fn new(width: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; width],
            m2: vec![0.0; width],
        }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn push(&mut self, xs: &[f64]) {
        debug_assert_eq!(xs.len(), self.width());
        self.count += 1;
        let n = self.count as f64;
        for ((m, s), &x) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(xs) {
            let delta = x - *m;
            *m += delta / n;
            *s += delta * (x - *m);
        }
    }

    /// Chan et al. pairwise combination.
    pub fn merge(mut self, other: &Moments) -> Moments {
        if other.count == 0 {
            return self;
        }
        if self.count == 0 {
            return other.clone();
        }
        let na = self.count as f64;
        let nb = other.count as f64;
        let n = na + nb;
        for i in 0..self.width() {
            let delta = other.mean[i] - self.mean[i];
            self.mean[i] += delta * nb / n;
            self.m2[i] += other.m2[i] + delta * delta * na * nb / n;
        }
        self.count += other.count;
        self
    }

    /// Sample standard deviation divided by sqrt(count); zero for fewer than two samples.
    pub fn stderr(&self) -> Vec<f64> {
        if self.count < 2 {
            return vec![0.0; self.width()];
        }
        let n = self.count as f64;
        self.m2
            .iter()
            .map(|s| (s.max(0.0) / (n - 1.0)).sqrt() / n.sqrt())
            .collect()
    }
}

/// Merges items left to right in a balanced binary tree with a fixed shape.
pub fn tree_reduce<T: Clone>(mut items: Vec<T>, merge: impl Fn(T, &T) -> T) -> Option<T> {
    if items.is_empty() {
        return None;
    }
    while items.len() > 1 {
        let mut next = Vec::with_capacity(items.len().div_ceil(2));
        let mut it = items.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(merge(a, &b)),
                None => next.push(a),
            }
        }
        items = next;
    }
    items.pop()
}

/// Runs `work(i)` for every index in `0..count`, folding each fixed block
/// sequentially with `fold` and combining blocks with `merge` along a fixed tree.
///
/// The first error by block order wins, so failures are reported deterministically.
pub fn blocked_reduce<A, T, E, W, F, M>(
    count: usize,
    init: impl Fn() -> A + Sync,
    work: W,
    fold: F,
    merge: M,
) -> Result<Option<A>, E>
where
    A: Clone + Send,
    E: Send,
    W: Fn(usize) -> Result<T, E> + Sync,
    F: Fn(&mut A, T) + Sync,
    M: Fn(A, &A) -> A,
{
    let blocks = count.div_ceil(BLOCK_SIZE);
    let partials: Vec<Result<A, E>> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut acc = init();
            let lo = b * BLOCK_SIZE;
            let hi = ((b + 1) * BLOCK_SIZE).min(count);
            for i in lo..hi {
                fold(&mut acc, work(i)?);
            }
            Ok(acc)
        })
        .collect();
    let partials = partials.into_iter().collect::<Result<Vec<_>, E>>()?;
    Ok(tree_reduce(partials, merge))
}
