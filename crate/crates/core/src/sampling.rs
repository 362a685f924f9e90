//! How many utterances feed the gradient and the curvature products of each
//! HF iteration: everything, a geometric schedule, or a sample grown by a
//! gradient-variance test.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::linalg::{dot, scale};
use crate::model::{loss_and_gradient, NetworkSpec, ParamVector};

/// `min(⌈α^i·s0⌉, n_total)`.
pub fn geometric_size(i: u32, s0: usize, alpha: f64, n_total: usize) -> usize {
    let raw = (alpha.powi(i as i32) * s0 as f64).ceil();
    if raw >= n_total as f64 {
        n_total
    } else {
        raw as usize
    }
}

/// Gradient over the utterance divided by its frame count.
pub fn per_utterance_avg_grad(spec: &NetworkSpec, params: &ParamVector, utt: &Utterance) -> Result<ParamVector> {
    if utt.is_empty() {
        return Err(Error::Config(format!("utterance {} has no frames", utt.id)));
    }
    let (_, mut g) = loss_and_gradient(spec, params, utt.frames())?;
    scale(1.0 / utt.len() as f64, &mut g.0);
    Ok(g)
}

#[derive(Clone, Debug, PartialEq)]
pub struct VarianceStats {
    pub mean_grad: ParamVector,
    pub var_l1: f64,
    pub sample_utterances: usize,
}

impl VarianceStats {
    pub fn mean_norm_sq(&self) -> f64 {
        dot(&self.mean_grad.0, &self.mean_grad.0)
    }
}

/// Running mean and sum of squared deviations (Welford) of per-utterance
/// average gradients. Identical inputs give exactly zero variance.
#[derive(Clone, Debug)]
pub struct VarianceAccumulator {
    mean: Vec<f64>,
    m2: Vec<f64>,
    count: usize,
}

impl VarianceAccumulator {
    pub fn new(dim: usize) -> Self {
        VarianceAccumulator {
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
            count: 0,
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn add(&mut self, avg: &[f64]) {
        assert_eq!(avg.len(), self.mean.len());
        self.count += 1;
        let n = self.count as f64;
        for ((m, q), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(avg) {
            let delta = v - *m;
            *m += delta / n;
            *q += delta * (v - *m);
        }
    }

    pub fn finish(&self) -> Result<VarianceStats> {
        let s = self.count;
        if s < 2 {
            return Err(Error::InsufficientSample(s));
        }
        let var_l1 = self.m2.iter().map(|q| q / (s - 1) as f64).sum();
        Ok(VarianceStats {
            mean_grad: ParamVector(self.mean.clone()),
            var_l1,
            sample_utterances: s,
        })
    }
}

pub fn variance_estimate(avgs: &[ParamVector]) -> Result<VarianceStats> {
    let dim = avgs.first().map_or(0, ParamVector::len);
    let mut acc = VarianceAccumulator::new(dim);
    for a in avgs {
        if a.len() != dim {
            return Err(Error::Config("per-utterance gradients differ in length".into()));
        }
        acc.add(a.as_slice());
    }
    acc.finish()
}

/// `‖Var‖₁/S ≤ θ²‖mean‖²`.
pub fn variance_test(stats: &VarianceStats, theta_s: f64) -> bool {
    stats.var_l1 / stats.sample_utterances as f64 <= theta_s * theta_s * stats.mean_norm_sq()
}

/// Sample size that would make the test pass, limited by `growth_cap·S` and the corpus.
pub fn next_size(stats: &VarianceStats, theta_s: f64, n_total: usize, growth_cap: f64) -> usize {
    let s = stats.sample_utterances;
    let cap = ((growth_cap * s as f64).floor() as usize).min(n_total);
    let denom = theta_s * theta_s * stats.mean_norm_sq();
    if !(denom > 0.0) {
        return if stats.var_l1 > 0.0 { n_total } else { s.min(n_total) };
    }
    let want = (stats.var_l1 / denom).ceil();
    if want >= cap as f64 {
        cap
    } else {
        want as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeometricConfig {
    pub s0_fraction: f64,
    pub alpha_g: f64,
    pub alpha_cg: f64,
    /// Initial curvature sample as a fraction of the full-data curvature sample.
    pub cg_s0_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VarianceConfig {
    pub theta_s: f64,
    pub s0_fraction: f64,
    pub growth_cap: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum SamplerMode {
    Full,
    Geometric(GeometricConfig),
    Variance(VarianceConfig),
}

impl SamplerMode {
    pub fn name(&self) -> &'static str {
        match self {
            SamplerMode::Full => "full",
            SamplerMode::Geometric(_) => "geometric",
            SamplerMode::Variance(_) => "variance",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let frac_ok = |f: f64| f > 0.0 && f <= 1.0;
        let ok = match self {
            SamplerMode::Full => true,
            SamplerMode::Geometric(g) => {
                frac_ok(g.s0_fraction) && frac_ok(g.cg_s0_fraction) && g.alpha_g > 1.0 && g.alpha_cg > 1.0
            }
            SamplerMode::Variance(v) => {
                frac_ok(v.s0_fraction) && (0.0..1.0).contains(&v.theta_s) && v.growth_cap >= 1.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid {} sampler settings: {self:?}",
                self.name()
            )))
        }
    }
}

/// Train-utterance positions for one HF iteration. `cg` is a prefix of the
/// same shuffle as `grad`, so it is always a subset of it.
#[derive(Clone, Debug, PartialEq)]
pub struct Draw {
    pub grad: Vec<usize>,
    pub cg: Vec<usize>,
}

/// Per-run sample-size state.
///
/// The curvature sample of the full-data mode is `⌈cg_fraction·n⌉` utterances
/// drawn fresh each iteration; the sampled modes grow their curvature sample
/// towards that same size and never beyond the gradient sample.
#[derive(Clone, Debug)]
pub struct Sampler {
    mode: SamplerMode,
    n_total: usize,
    cg_full: usize,
    seed: u64,
    grad_size: usize,
    cg_size: usize,
}

impl Sampler {
    pub fn new(mode: SamplerMode, cg_fraction: f64, n_total: usize, seed: u64) -> Result<Self> {
        mode.validate()?;
        if !(cg_fraction > 0.0 && cg_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "cg_fraction must lie in (0, 1], got {cg_fraction}"
            )));
        }
        if n_total == 0 {
            return Err(Error::Config("no training utterances".into()));
        }
        let frac = |f: f64, of: usize| ((f * of as f64).ceil() as usize).clamp(1, of);
        let cg_full = frac(cg_fraction, n_total);
        let (grad_size, cg_size) = match &mode {
            SamplerMode::Full => (n_total, cg_full),
            SamplerMode::Geometric(g) => (frac(g.s0_fraction, n_total), frac(g.cg_s0_fraction, cg_full)),
            // the variance test needs two utterances in each sample
            SamplerMode::Variance(v) => (
                frac(v.s0_fraction, n_total).max(2).min(n_total),
                frac(v.s0_fraction, cg_full).max(2).min(cg_full),
            ),
        };
        Ok(Sampler {
            mode,
            n_total,
            cg_full,
            seed,
            grad_size,
            cg_size: cg_size.min(grad_size),
        })
    }

    pub fn mode(&self) -> &SamplerMode {
        &self.mode
    }

    pub fn needs_variance(&self) -> bool {
        matches!(self.mode, SamplerMode::Variance(_))
    }

    pub fn cg_full_size(&self) -> usize {
        self.cg_full
    }

    /// Gradient and curvature sample sizes for HF iteration `iter`.
    pub fn sizes(&self, iter: u32) -> (usize, usize) {
        match &self.mode {
            SamplerMode::Geometric(g) => {
                let grad = geometric_size(iter, self.grad_size, g.alpha_g, self.n_total);
                let cg = geometric_size(iter, self.cg_size, g.alpha_cg, self.cg_full);
                (grad, cg.min(grad))
            }
            _ => (self.grad_size, self.cg_size),
        }
    }

    pub fn draw(&self, iter: u32) -> Draw {
        let (g, c) = self.sizes(iter);
        let mut rng = ChaCha8Rng::seed_from_u64(iteration_seed(self.seed, iter));
        let mut perm: Vec<usize> = (0..self.n_total).collect();
        perm.shuffle(&mut rng);
        let mut grad = perm[..g].to_vec();
        let mut cg = perm[..c].to_vec();
        grad.sort_unstable();
        cg.sort_unstable();
        Draw { grad, cg }
    }

    /// Feeds the variance statistics of the iteration just run (variance mode only).
    pub fn observe(&mut self, grad_stats: &VarianceStats, cg_stats: Option<&VarianceStats>) {
        let SamplerMode::Variance(v) = &self.mode else {
            return;
        };
        if !variance_test(grad_stats, v.theta_s) {
            let next = next_size(grad_stats, v.theta_s, self.n_total, v.growth_cap);
            self.grad_size = self.grad_size.max(next);
        }
        if let Some(cs) = cg_stats {
            if !variance_test(cs, v.theta_s) {
                let next = next_size(cs, v.theta_s, self.cg_full, v.growth_cap);
                self.cg_size = self.cg_size.max(next);
            }
        }
        self.cg_size = self.cg_size.min(self.grad_size);
    }
}

/// Seed for the shuffle of iteration `iter`, derived from the run seed.
pub fn iteration_seed(seed: u64, iter: u32) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ (u64::from(iter) + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hand_case() -> VarianceStats {
        variance_estimate(&[ParamVector(vec![1.0, 0.0]), ParamVector(vec![0.0, 1.0])]).unwrap()
    }

    #[test]
    fn geometric_examples() {
        assert_eq!(geometric_size(0, 100, 1.2, 2000), 100);
        assert_eq!(geometric_size(5, 100, 1.2, 2000), 249);
        assert_eq!(geometric_size(50, 100, 1.3, 2000), 2000);
    }

    #[test]
    fn variance_hand_case() {
        let st = hand_case();
        assert_eq!(st.var_l1, 1.0);
        assert_eq!(st.mean_grad.0, vec![0.5, 0.5]);
        assert!(!variance_test(&st, 0.25));
        assert_eq!(next_size(&st, 0.25, 2000, 1e9), 32);
        assert_eq!(next_size(&st, 0.25, 2000, 4.0), 8);
        assert_eq!(next_size(&st, 0.25, 20, 1e9), 20);
    }

    #[test]
    fn identical_averages_have_no_variance() {
        let v = ParamVector(vec![0.3, -1.1, 7.7e-3]);
        let st = variance_estimate(&[v.clone(), v.clone(), v.clone(), v.clone()]).unwrap();
        assert_eq!(st.var_l1, 0.0);
        assert_eq!(st.mean_grad, v);
        assert!(variance_test(&st, 0.01));
    }

    #[test]
    fn variance_needs_two_utterances() {
        assert!(matches!(
            variance_estimate(&[ParamVector(vec![1.0])]),
            Err(Error::InsufficientSample(1))
        ));
    }

    #[test]
    fn zero_mean_gradient_asks_for_everything() {
        let st = variance_estimate(&[ParamVector(vec![1.0]), ParamVector(vec![-1.0])]).unwrap();
        assert_eq!(next_size(&st, 0.25, 500, 4.0), 500);
        assert!(!variance_test(&st, 0.0));
    }

    #[test]
    fn draws_are_reproducible_and_nested() {
        let mode = SamplerMode::Geometric(GeometricConfig {
            s0_fraction: 0.05,
            alpha_g: 1.2,
            alpha_cg: 1.3,
            cg_s0_fraction: 0.05,
        });
        let s = Sampler::new(mode, 0.01, 2000, 3).unwrap();
        for i in 0..20 {
            let d = s.draw(i);
            assert_eq!(d, s.draw(i));
            assert!(d.cg.iter().all(|c| d.grad.binary_search(c).is_ok()));
            assert!(d.cg.len() <= 20);
        }
        assert_eq!(s.draw(0).grad.len(), 100);
        assert_ne!(s.draw(0).grad, s.draw(1).grad[..100]);
    }

    #[test]
    fn full_mode_uses_everything_for_the_gradient() {
        let s = Sampler::new(SamplerMode::Full, 0.01, 2000, 3).unwrap();
        let d = s.draw(4);
        assert_eq!(d.grad, (0..2000).collect::<Vec<_>>());
        assert_eq!(d.cg.len(), 20);
        assert_ne!(d.cg, s.draw(5).cg);
    }

    #[test]
    fn variance_sampler_grows_by_the_cap() {
        let mode = SamplerMode::Variance(VarianceConfig {
            theta_s: 0.25,
            s0_fraction: 0.001,
            growth_cap: 4.0,
        });
        let mut s = Sampler::new(mode, 0.01, 2000, 1).unwrap();
        assert_eq!(s.sizes(0), (2, 2));
        s.observe(&hand_case(), Some(&hand_case()));
        assert_eq!(s.sizes(1), (8, 8));
    }

    #[test]
    fn invalid_modes_rejected() {
        let bad = SamplerMode::Geometric(GeometricConfig {
            s0_fraction: 0.0,
            alpha_g: 1.2,
            alpha_cg: 1.3,
            cg_s0_fraction: 0.05,
        });
        assert!(Sampler::new(bad, 0.01, 10, 0).is_err());
        let bad = SamplerMode::Variance(VarianceConfig {
            theta_s: 1.0,
            s0_fraction: 0.1,
            growth_cap: 4.0,
        });
        assert!(Sampler::new(bad, 0.01, 10, 0).is_err());
        assert!(Sampler::new(SamplerMode::Full, 0.0, 10, 0).is_err());
    }
}
