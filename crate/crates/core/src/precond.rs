//! Limited-memory BFGS preconditioner assembled from CG iterates.
//!
//! Pairs `s = x_{i+1} − x_i`, `y = r_{i+1} − r_i` are taken from the solver's
//! snapshots at evenly spaced positions across the run, and the resulting
//! inverse-Hessian approximation is applied with the two-loop recursion.

use std::collections::VecDeque;

use crate::krylov::{CgTrace, Preconditioner, Snapshot};
use crate::linalg::{axpy, dot, norm, sub};

/// Relative curvature threshold: a pair is kept only if `y·s > ADMIT_TOL·‖y‖‖s‖`.
pub const ADMIT_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct CurvaturePair {
    pub s: Vec<f64>,
    pub y: Vec<f64>,
    pub rho: f64,
}

impl CurvaturePair {
    /// Builds a pair, or `None` when `y·s` fails the admissibility test.
    pub fn new(s: Vec<f64>, y: Vec<f64>) -> Option<Self> {
        let ys = dot(&y, &s);
        if !(ys > ADMIT_TOL * norm(&y) * norm(&s)) {
            return None;
        }
        let rho = 1.0 / ys;
        rho.is_finite().then_some(CurvaturePair { s, y, rho })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LbfgsMemory {
    capacity: usize,
    pairs: VecDeque<CurvaturePair>,
    gamma: f64,
}

impl LbfgsMemory {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "L-BFGS memory needs a positive capacity");
        LbfgsMemory {
            capacity,
            pairs: VecDeque::with_capacity(capacity),
            gamma: 1.0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Oldest first.
    pub fn pairs(&self) -> impl Iterator<Item = &CurvaturePair> {
        self.pairs.iter()
    }

    /// Appends `(s, y)` if admissible, evicting the oldest pair beyond capacity.
    /// Returns whether the pair was kept.
    pub fn admit(&mut self, s: Vec<f64>, y: Vec<f64>) -> bool {
        match CurvaturePair::new(s, y) {
            Some(pair) => {
                self.push(pair);
                true
            }
            None => false,
        }
    }

    fn push(&mut self, pair: CurvaturePair) {
        self.gamma = 1.0 / (pair.rho * dot(&pair.y, &pair.y));
        if self.pairs.len() == self.capacity {
            self.pairs.pop_front();
        }
        self.pairs.push_back(pair);
    }

    /// `H·q` by the two-loop recursion, with `H⁰ = γI`.
    pub fn two_loop_apply(&self, q: &[f64]) -> Vec<f64> {
        let mut q = q.to_vec();
        let mut alphas = vec![0.0; self.pairs.len()];
        for (i, p) in self.pairs.iter().enumerate().rev() {
            let a = p.rho * dot(&p.s, &q);
            axpy(-a, &p.y, &mut q);
            alphas[i] = a;
        }
        let mut z = q;
        z.iter_mut().for_each(|v| *v *= self.gamma);
        for (p, a) in self.pairs.iter().zip(&alphas) {
            let beta = p.rho * dot(&p.y, &z);
            axpy(a - beta, &p.s, &mut z);
        }
        z
    }
}

impl Preconditioner for LbfgsMemory {
    fn apply(&self, r: &[f64]) -> Vec<f64> {
        self.two_loop_apply(r)
    }
}

/// Positions of the `min(m, available)` differences to harvest out of
/// `available`, evenly spaced with both ends included.
pub fn harvest_indices(available: usize, m: usize) -> Vec<usize> {
    let count = m.min(available);
    match count {
        0 => Vec::new(),
        1 => vec![available - 1],
        _ => {
            let span = (available - 1) as f64;
            let mut out: Vec<usize> = (0..count)
                .map(|j| (j as f64 * span / (count - 1) as f64).round() as usize)
                .collect();
            out.dedup();
            out
        }
    }
}

/// Curvature pairs from consecutive snapshots, evenly spread over the run.
pub fn harvest_from_snapshots(snapshots: &[Snapshot], m: usize) -> Vec<CurvaturePair> {
    if snapshots.len() < 2 {
        return Vec::new();
    }
    harvest_indices(snapshots.len() - 1, m)
        .into_iter()
        .filter_map(|i| {
            let (a, b) = (&snapshots[i], &snapshots[i + 1]);
            CurvaturePair::new(sub(&b.x, &a.x), sub(&b.r, &a.r))
        })
        .collect()
}

pub fn harvest_pairs(trace: &CgTrace, m: usize) -> Vec<CurvaturePair> {
    harvest_from_snapshots(&trace.snapshots, m)
}

/// L-BFGS preconditioner that rebuilds itself from the running CG trace every
/// `⌈m/2⌉` new snapshots, starting from a seed memory (typically the final
/// memory of the previous solve).
#[derive(Clone, Debug)]
pub struct AdaptiveLbfgs {
    seed: LbfgsMemory,
    current: LbfgsMemory,
    m: usize,
    seen_at_build: usize,
    rebuilds: usize,
}

impl AdaptiveLbfgs {
    pub fn new(m: usize, seed: Option<LbfgsMemory>) -> Self {
        let seed = seed.unwrap_or_else(|| LbfgsMemory::new(m));
        AdaptiveLbfgs {
            current: seed.clone(),
            seed,
            m,
            seen_at_build: 0,
            rebuilds: 0,
        }
    }

    pub fn rebuild_period(&self) -> usize {
        self.m.div_ceil(2)
    }

    pub fn rebuilds(&self) -> usize {
        self.rebuilds
    }

    pub fn current(&self) -> &LbfgsMemory {
        &self.current
    }

    fn build(&self, snapshots: &[Snapshot]) -> LbfgsMemory {
        let mut mem = self.seed.clone();
        for pair in harvest_from_snapshots(snapshots, self.m) {
            mem.push(pair);
        }
        mem
    }

    /// Memory built from every snapshot of the finished run, for carrying over.
    pub fn finish(&self, snapshots: &[Snapshot]) -> LbfgsMemory {
        self.build(snapshots)
    }
}

impl Preconditioner for AdaptiveLbfgs {
    fn apply(&self, r: &[f64]) -> Vec<f64> {
        self.current.two_loop_apply(r)
    }

    fn observe(&mut self, snapshots: &[Snapshot]) {
        if snapshots.len() >= self.seen_at_build + self.rebuild_period() {
            self.current = self.build(snapshots);
            self.seen_at_build = snapshots.len();
            self.rebuilds += 1;
        }
    }
}
