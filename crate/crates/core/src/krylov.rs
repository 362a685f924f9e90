//! Flexible preconditioned conjugate gradient on the damped quadratic model
//! `q(d) = g·d + ½ d·(G + λI) d`.
//!
//! The preconditioner is re-queried every iteration and may change between
//! iterations, so the direction update uses the Polak-Ribière form
//! `β = r_{i+1}·(z_{i+1} − z_i) / (r_i·z_i)`, which reduces to the usual
//! Fletcher-Reeves ratio when the preconditioner is fixed.
//!
//! Every iterate is snapshotted as `(x_i, ∇q(x_i))` so a preconditioner can
//! harvest curvature pairs from the run. Note the snapshot residual is the
//! gradient of the quadratic, `A x − b`, so that consecutive differences
//! satisfy `y = A s`.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::linalg::{self, axpy, dot, norm};

/// Symmetric linear operator `v ↦ A v`.
pub trait CurvatureOperator {
    fn dim(&self) -> usize;
    fn apply(&self, v: &[f64]) -> Result<Vec<f64>>;
}

/// Dense row-major symmetric matrix.
#[derive(Clone, Debug)]
pub struct DenseSymmetric {
    n: usize,
    a: Vec<f64>,
}

impl DenseSymmetric {
    pub fn new(n: usize, a: Vec<f64>) -> Result<Self> {
        if a.len() != n * n {
            return Err(Error::Config(format!("expected {} entries, got {}", n * n, a.len())));
        }
        Ok(DenseSymmetric { n, a })
    }

    pub fn diagonal(d: &[f64]) -> Self {
        let n = d.len();
        let mut a = vec![0.0; n * n];
        for (i, v) in d.iter().enumerate() {
            a[i * n + i] = *v;
        }
        DenseSymmetric { n, a }
    }

    pub fn identity(n: usize) -> Self {
        Self::diagonal(&vec![1.0; n])
    }

    pub fn entries(&self) -> &[f64] {
        &self.a
    }
}

impl CurvatureOperator for DenseSymmetric {
    fn dim(&self) -> usize {
        self.n
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.n {
            return Err(Error::Config(format!("vector length {} != {}", v.len(), self.n)));
        }
        Ok(self.a.chunks_exact(self.n).map(|row| dot(row, v)).collect())
    }
}

/// `q(d) = g·d + ½ d·A d` with `A` supplied by a curvature operator.
pub struct QuadraticModel<'a> {
    op: &'a dyn CurvatureOperator,
    grad: Vec<f64>,
}

impl<'a> QuadraticModel<'a> {
    pub fn new(op: &'a dyn CurvatureOperator, grad: Vec<f64>) -> Result<Self> {
        if grad.len() != op.dim() {
            return Err(Error::Config(format!(
                "gradient length {} does not match operator dimension {}",
                grad.len(),
                op.dim()
            )));
        }
        Ok(QuadraticModel { op, grad })
    }

    pub fn dim(&self) -> usize {
        self.grad.len()
    }

    pub fn gradient(&self) -> &[f64] {
        &self.grad
    }

    /// Right-hand side `b = −g` of `A d = b`.
    pub fn rhs(&self) -> Vec<f64> {
        self.grad.iter().map(|g| -g).collect()
    }

    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.op.apply(v)
    }
}

pub fn quadratic_value(model: &QuadraticModel<'_>, d: &[f64]) -> Result<f64> {
    let ad = model.apply(d)?;
    Ok(dot(&model.grad, d) + 0.5 * dot(d, &ad))
}

/// `M⁻¹`-application used by the solver. `observe` is called after every new
/// snapshot and may replace the operator for subsequent iterations.
pub trait Preconditioner {
    fn apply(&self, r: &[f64]) -> Vec<f64>;

    fn observe(&mut self, _snapshots: &[Snapshot]) {}
}

#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityPreconditioner;

impl Preconditioner for IdentityPreconditioner {
    fn apply(&self, r: &[f64]) -> Vec<f64> {
        r.to_vec()
    }
}

/// `z = diag(d) r`
#[derive(Clone, Debug)]
pub struct DiagonalPreconditioner(pub Vec<f64>);

impl Preconditioner for DiagonalPreconditioner {
    fn apply(&self, r: &[f64]) -> Vec<f64> {
        r.iter().zip(&self.0).map(|(a, b)| a * b).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CgConfig {
    pub max_iters: usize,
    pub trunc_eps: f64,
    pub trunc_min_window: usize,
    /// Stop once `‖r‖ ≤ residual_tol·‖b‖`. Zero leaves only the truncation rule
    /// (and exact convergence).
    pub residual_tol: f64,
    /// Iterates are stored at indices `⌈base^j⌉`.
    pub store_stride_base: f64,
    /// Disables the relative-improvement truncation rule.
    pub truncate: bool,
}

impl Default for CgConfig {
    fn default() -> Self {
        CgConfig {
            max_iters: 100,
            trunc_eps: 5e-4,
            trunc_min_window: 10,
            residual_tol: 0.0,
            store_stride_base: 1.3,
            truncate: true,
        }
    }
}

impl CgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::Config("cg max_iters must be positive".into()));
        }
        if !(self.trunc_eps > 0.0) || self.trunc_min_window == 0 {
            return Err(Error::Config("cg truncation constants must be positive".into()));
        }
        if !(self.residual_tol >= 0.0) {
            return Err(Error::Config("cg residual_tol must be nonnegative".into()));
        }
        if !(self.store_stride_base > 1.0) {
            return Err(Error::Config("cg store_stride_base must exceed 1".into()));
        }
        Ok(())
    }

    /// Iteration indices at which iterates are kept.
    pub fn store_indices(&self) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        for j in 0.. {
            let idx = self.store_stride_base.powi(j).ceil();
            if idx > self.max_iters as f64 {
                break;
            }
            out.insert(idx as usize);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    Truncated,
    MaxIters,
    ResidualTol,
    NegativeCurvature,
}

#[derive(Clone, Debug)]
pub struct StoredIterate {
    pub index: usize,
    pub d: Vec<f64>,
    pub q: f64,
}

/// Iterate `x_i` with the quadratic's gradient `A x_i − b` at that point.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub x: Vec<f64>,
    pub r: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct CgTrace {
    pub stored: Vec<StoredIterate>,
    /// `‖b − A x_i‖` for `i = 0..=iterations`.
    pub residual_norms: Vec<f64>,
    /// `q(x_i)` for `i = 0..=iterations`.
    pub q_values: Vec<f64>,
    pub snapshots: Vec<Snapshot>,
    pub iterations: usize,
    pub matvec_count: usize,
    pub termination: Termination,
}

impl CgTrace {
    /// The last CG iterate `d_N`.
    pub fn last(&self) -> &StoredIterate {
        self.stored.last().expect("trace always stores its final iterate")
    }
}

fn check_finite(v: &[f64], what: &str, iter: usize) -> Result<()> {
    if linalg::all_finite(v) {
        Ok(())
    } else {
        Err(Error::numeric(format!("non-finite {what} at CG iteration {iter}")))
    }
}

/// Minimises `model` from `d0`.
pub fn flexible_pcg(
    model: &QuadraticModel<'_>,
    d0: &[f64],
    precond: &mut dyn Preconditioner,
    cfg: &CgConfig,
) -> Result<CgTrace> {
    cfg.validate()?;
    let n = model.dim();
    if d0.len() != n {
        return Err(Error::Config(format!(
            "warm start has length {}, expected {n}",
            d0.len()
        )));
    }
    let store_at = cfg.store_indices();
    let b = model.rhs();
    let b_norm = norm(&b);
    let tol = cfg.residual_tol * b_norm;

    let mut x = d0.to_vec();
    let ax = model.apply(&x)?;
    let mut matvecs = 1;
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    check_finite(&r, "residual", 0)?;
    let q_of = |x: &[f64], r: &[f64]| -0.5 * x.iter().zip(&b).zip(r).map(|((x, b), r)| x * (b + r)).sum::<f64>();

    let mut trace = CgTrace {
        stored: Vec::new(),
        residual_norms: vec![norm(&r)],
        q_values: vec![q_of(&x, &r)],
        snapshots: vec![Snapshot {
            x: x.clone(),
            r: r.iter().map(|v| -v).collect(),
        }],
        iterations: 0,
        matvec_count: 0,
        termination: Termination::MaxIters,
    };
    precond.observe(&trace.snapshots);

    let finish = |mut trace: CgTrace, x: Vec<f64>, matvecs: usize, why: Termination| {
        let i = trace.iterations;
        if trace.stored.last().map(|s| s.index) != Some(i) {
            trace.stored.push(StoredIterate {
                index: i,
                d: x,
                q: trace.q_values[i],
            });
        }
        trace.matvec_count = matvecs;
        trace.termination = why;
        trace
    };

    if trace.residual_norms[0] <= tol {
        return Ok(finish(trace, x, matvecs, Termination::ResidualTol));
    }
    let mut z = precond.apply(&r);
    let mut rz = dot(&r, &z);
    if !(rz > 0.0) {
        if rz.is_nan() {
            return Err(Error::numeric("non-finite preconditioned residual at CG iteration 0"));
        }
        return Err(Error::PreconditionerNotSpd { rz });
    }
    let mut p = z.clone();

    for i in 1..=cfg.max_iters {
        let ap = model.apply(&p)?;
        matvecs += 1;
        let pap = dot(&p, &ap);
        if pap.is_nan() {
            return Err(Error::numeric(format!("non-finite curvature at CG iteration {i}")));
        }
        if pap <= 0.0 {
            return Ok(finish(trace, x, matvecs, Termination::NegativeCurvature));
        }
        let alpha = rz / pap;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &ap, &mut r);
        check_finite(&x, "iterate", i)?;
        check_finite(&r, "residual", i)?;

        let q = q_of(&x, &r);
        let r_norm = norm(&r);
        trace.iterations = i;
        trace.q_values.push(q);
        trace.residual_norms.push(r_norm);
        trace.snapshots.push(Snapshot {
            x: x.clone(),
            r: r.iter().map(|v| -v).collect(),
        });
        if store_at.contains(&i) {
            trace.stored.push(StoredIterate {
                index: i,
                d: x.clone(),
                q,
            });
        }
        precond.observe(&trace.snapshots);

        if r_norm <= tol {
            return Ok(finish(trace, x, matvecs, Termination::ResidualTol));
        }
        if cfg.truncate && i > cfg.trunc_min_window && q < 0.0 {
            let k = cfg.trunc_min_window.max((0.1 * i as f64).ceil() as usize);
            let q_old = trace.q_values[i - k];
            if (q_old - q) / q.abs() < k as f64 * cfg.trunc_eps {
                return Ok(finish(trace, x, matvecs, Termination::Truncated));
            }
        }
        if i == cfg.max_iters {
            break;
        }

        let z_new = precond.apply(&r);
        let rz_new = dot(&r, &z_new);
        if !(rz_new > 0.0) {
            if rz_new.is_nan() {
                return Err(Error::numeric(format!(
                    "non-finite preconditioned residual at CG iteration {i}"
                )));
            }
            if r_norm == 0.0 {
                return Ok(finish(trace, x, matvecs, Termination::ResidualTol));
            }
            return Err(Error::PreconditionerNotSpd { rz: rz_new });
        }
        let beta = r
            .iter()
            .zip(&z_new)
            .zip(&z)
            .map(|((r, zn), zo)| r * (zn - zo))
            .sum::<f64>()
            / rz;
        for (pi, zi) in p.iter_mut().zip(&z_new) {
            *pi = zi + beta * *pi;
        }
        z = z_new;
        rz = rz_new;
    }
    Ok(finish(trace, x, matvecs, Termination::MaxIters))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_indices_are_ceil_powers() {
        let cfg = CgConfig {
            max_iters: 40,
            ..CgConfig::default()
        };
        let idx: Vec<usize> = cfg.store_indices().into_iter().collect();
        assert_eq!(idx, vec![1, 2, 3, 4, 5, 7, 9, 11, 14, 18, 24, 31, 40]);
    }

    #[test]
    fn identity_system_converges_in_one_step() {
        let op = DenseSymmetric::identity(4);
        let g = vec![1.0, -2.0, 0.5, 3.0];
        let model = QuadraticModel::new(&op, g.clone()).unwrap();
        let trace = flexible_pcg(&model, &[0.0; 4], &mut IdentityPreconditioner, &CgConfig::default()).unwrap();
        assert_eq!(trace.iterations, 1);
        assert_eq!(trace.termination, Termination::ResidualTol);
        let b: Vec<f64> = g.iter().map(|v| -v).collect();
        assert_eq!(trace.last().d, b);
        assert_eq!(trace.matvec_count, 2);
    }

    #[test]
    fn exact_diagonal_preconditioner_solves_in_one_step() {
        let op = DenseSymmetric::diagonal(&[1.0, 10.0, 100.0]);
        let model = QuadraticModel::new(&op, vec![1.0, 1.0, 1.0]).unwrap();
        let mut pc = DiagonalPreconditioner(vec![1.0, 0.1, 0.01]);
        let cfg = CgConfig {
            residual_tol: 1e-12,
            ..CgConfig::default()
        };
        let trace = flexible_pcg(&model, &[0.0; 3], &mut pc, &cfg).unwrap();
        assert_eq!(trace.iterations, 1);
        assert!(trace.residual_norms[1] < 1e-12);
    }

    #[test]
    fn zero_rhs_and_zero_start_stops_immediately() {
        let op = DenseSymmetric::identity(3);
        let model = QuadraticModel::new(&op, vec![0.0; 3]).unwrap();
        let trace = flexible_pcg(&model, &[0.0; 3], &mut IdentityPreconditioner, &CgConfig::default()).unwrap();
        assert_eq!(trace.iterations, 0);
        assert_eq!(trace.stored.len(), 1);
        assert_eq!(trace.matvec_count, 1);
    }

    #[test]
    fn indefinite_operator_reports_negative_curvature() {
        let op = DenseSymmetric::diagonal(&[1.0, -1.0]);
        let model = QuadraticModel::new(&op, vec![0.0, 1.0]).unwrap();
        let trace = flexible_pcg(&model, &[0.0; 2], &mut IdentityPreconditioner, &CgConfig::default()).unwrap();
        assert_eq!(trace.termination, Termination::NegativeCurvature);
        assert_eq!(trace.iterations, 0);
        assert_eq!(trace.matvec_count, 2);
    }

    #[test]
    fn non_spd_preconditioner_is_an_error() {
        let op = DenseSymmetric::identity(2);
        let model = QuadraticModel::new(&op, vec![1.0, 0.0]).unwrap();
        let mut pc = DiagonalPreconditioner(vec![-1.0, 1.0]);
        let err = flexible_pcg(&model, &[0.0; 2], &mut pc, &CgConfig::default()).unwrap_err();
        assert!(matches!(err, Error::PreconditionerNotSpd { .. }));
    }

    #[test]
    fn wrong_warm_start_length_is_rejected() {
        let op = DenseSymmetric::identity(2);
        let model = QuadraticModel::new(&op, vec![1.0, 0.0]).unwrap();
        assert!(flexible_pcg(&model, &[0.0; 3], &mut IdentityPreconditioner, &CgConfig::default()).is_err());
    }

    #[test]
    fn quadratic_value_basics() {
        let op = DenseSymmetric::diagonal(&[2.0, 4.0]);
        let model = QuadraticModel::new(&op, vec![1.0, -1.0]).unwrap();
        assert_eq!(quadratic_value(&model, &[0.0, 0.0]).unwrap(), 0.0);
        // q(d) = d0 - d1 + d0² + 2 d1²
        assert_eq!(quadratic_value(&model, &[1.0, 1.0]).unwrap(), 3.0);
    }
}
