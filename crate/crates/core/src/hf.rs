//! The Hessian-free outer loop: gradient, CG on the damped Gauss-Newton model,
//! a backward line search over the stored CG iterates, Armijo scaling and
//! Levenberg-Marquardt damping, with the CG solution decayed into the next
//! warm start.

use std::cell::RefCell;

use crate::corpus::{sharded_reduce, Utterance, UtteranceCorpus};
use crate::error::{Error, Result};
use crate::krylov::{flexible_pcg, CgConfig, CurvatureOperator, IdentityPreconditioner, QuadraticModel, StoredIterate};
use crate::linalg::{all_finite, axpy, dot, scale};
use crate::model::{forward_loss, loss_and_gradient, GaussNewton, NetworkSpec, ParamVector};
use crate::precond::{AdaptiveLbfgs, LbfgsMemory};
use crate::sampling::{Draw, Sampler, SamplerMode, VarianceAccumulator, VarianceStats};

pub const RHO_LOW: f64 = 0.25;
pub const RHO_HIGH: f64 = 0.75;
pub const FACTOR_UP: f64 = 1.5;
pub const FACTOR_DOWN: f64 = 2.0 / 3.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DampingState {
    pub lambda: f64,
    /// Applies the ρ branch exactly as printed in the original algorithm
    /// listing: a poor model shrinks λ and a good one grows it.
    pub literal_paper_mode: bool,
}

impl DampingState {
    pub fn new(lambda0: f64, literal_paper_mode: bool) -> Result<Self> {
        if !(lambda0 > 0.0) || !lambda0.is_finite() {
            return Err(Error::Config(format!(
                "initial damping must be positive, got {lambda0}"
            )));
        }
        Ok(DampingState {
            lambda: lambda0,
            literal_paper_mode,
        })
    }

    fn reject(self) -> Self {
        DampingState {
            lambda: self.lambda * FACTOR_UP,
            ..self
        }
    }
}

pub fn update_damping(damping: DampingState, rho: f64) -> DampingState {
    let (low, high) = if damping.literal_paper_mode {
        (FACTOR_DOWN, FACTOR_UP)
    } else {
        (FACTOR_UP, FACTOR_DOWN)
    };
    let lambda = if rho < RHO_LOW {
        damping.lambda * low
    } else if rho > RHO_HIGH {
        damping.lambda * high
    } else {
        damping.lambda
    };
    DampingState { lambda, ..damping }
}

/// Actual over predicted reduction; `q_n = q(d_N)` is negative when the model
/// predicts a decrease.
pub fn reduction_ratio(loss_prev: f64, loss_best: f64, q_n: f64) -> f64 {
    (loss_prev - loss_best) / -q_n
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LineSearchConfig {
    pub armijo_c: f64,
    pub backtrack_factor: f64,
    pub max_backtracks: u32,
}

impl Default for LineSearchConfig {
    fn default() -> Self {
        LineSearchConfig {
            armijo_c: 1e-4,
            backtrack_factor: 0.5,
            max_backtracks: 10,
        }
    }
}

impl LineSearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.armijo_c > 0.0 && self.armijo_c < 1.0) {
            return Err(Error::Config(format!(
                "armijo_c must lie in (0, 1), got {}",
                self.armijo_c
            )));
        }
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            return Err(Error::Config("backtrack factor must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LineSearchChoice {
    /// Position in the list of stored iterates.
    pub position: usize,
    pub loss: f64,
    pub evaluations: usize,
}

/// Scans the stored iterates from the last one backwards while the loss keeps
/// improving. `loss_at` evaluates `𝓛(θ + d)`.
pub fn discrete_line_search(
    loss_at: &mut dyn FnMut(&[f64]) -> Result<f64>,
    stored: &[StoredIterate],
    loss_prev: f64,
) -> Result<LineSearchChoice> {
    let n = stored.len();
    if n == 0 {
        return Err(Error::Config("line search needs at least one iterate".into()));
    }
    let mut best = loss_at(&stored[n - 1].d)?;
    let mut pos = n - 1;
    let mut evaluations = 1;
    while pos > 0 {
        let curr = loss_at(&stored[pos - 1].d)?;
        evaluations += 1;
        if loss_prev >= best && curr >= best {
            break;
        }
        best = curr;
        pos -= 1;
    }
    Ok(LineSearchChoice {
        position: pos,
        loss: best,
        evaluations,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArmijoOutcome {
    pub alpha: f64,
    /// Loss at `θ + α d` (equal to the starting loss when `α = 0`).
    pub loss: f64,
    pub rejected: bool,
}

/// Largest `α ∈ {1, f, f², …}` with `𝓛(θ+αd) ≤ 𝓛(θ) + c·α·g·d`.
/// `loss_at_unit` may carry an already known `𝓛(θ + d)`.
pub fn armijo_scale(
    loss_at: &mut dyn FnMut(&[f64]) -> Result<f64>,
    params: &[f64],
    loss0: f64,
    g: &[f64],
    d: &[f64],
    cfg: &LineSearchConfig,
    loss_at_unit: Option<f64>,
) -> Result<ArmijoOutcome> {
    let slope = dot(g, d);
    let none = ArmijoOutcome {
        alpha: 0.0,
        loss: loss0,
        rejected: true,
    };
    if !(slope < 0.0) {
        return Ok(none);
    }
    let mut alpha = 1.0;
    for k in 0..=cfg.max_backtracks {
        let loss = match (k, loss_at_unit) {
            (0, Some(l)) => l,
            _ => {
                let mut trial = params.to_vec();
                axpy(alpha, d, &mut trial);
                loss_at(&trial)?
            }
        };
        if loss <= loss0 + cfg.armijo_c * alpha * slope {
            return Ok(ArmijoOutcome {
                alpha,
                loss,
                rejected: false,
            });
        }
        alpha *= cfg.backtrack_factor;
    }
    Ok(none)
}

/// Gradient of the training objective on the current sample, as a per-frame mean.
#[derive(Clone, Debug)]
pub struct GradientEval {
    pub grad: Vec<f64>,
    pub loss: f64,
    pub utterances: usize,
    pub frames: usize,
    pub variance: Option<VarianceStats>,
    pub cg_variance: Option<VarianceStats>,
}

/// Undamped curvature on the current curvature sample, as a per-frame mean.
pub struct Curvature<'a> {
    pub op: Box<dyn CurvatureOperator + 'a>,
    pub utterances: usize,
    pub frames: usize,
}

/// What the HF driver needs from a problem.
pub trait Objective {
    fn dim(&self) -> usize;
    fn gradient(&self, params: &ParamVector) -> Result<GradientEval>;
    fn curvature(&self, params: &ParamVector) -> Result<Curvature<'_>>;
    /// Loss that drives the line search and the reduction ratio.
    fn heldout_loss(&self, params: &[f64]) -> Result<f64>;
}

struct Damped<'a> {
    inner: &'a dyn CurvatureOperator,
    lambda: f64,
}

impl CurvatureOperator for Damped<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.inner.apply(v)?;
        axpy(self.lambda, v, &mut out);
        if !all_finite(&out) {
            return Err(Error::numeric("non-finite curvature product"));
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preconditioning {
    None,
    Lbfgs {
        m: usize,
        /// Seed each CG run with the memory left by the previous one.
        carryover: bool,
        /// Rebuild the memory from the running trace every `⌈m/2⌉` iterates.
        refresh: bool,
    },
}

impl Preconditioning {
    pub fn label(&self) -> String {
        match self {
            Preconditioning::None => "noPC".into(),
            Preconditioning::Lbfgs { m, .. } => format!("PC-{m}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HfConfig {
    pub cg: CgConfig,
    pub lambda0: f64,
    pub literal_paper_mode: bool,
    pub line_search: LineSearchConfig,
    pub warm_decay: f64,
    pub preconditioner: Preconditioning,
}

impl Default for HfConfig {
    fn default() -> Self {
        HfConfig {
            cg: CgConfig::default(),
            lambda0: 1.0,
            literal_paper_mode: false,
            line_search: LineSearchConfig::default(),
            warm_decay: 0.95,
            preconditioner: Preconditioning::Lbfgs {
                m: 32,
                carryover: true,
                refresh: false,
            },
        }
    }
}

impl HfConfig {
    pub fn validate(&self) -> Result<()> {
        self.cg.validate()?;
        self.line_search.validate()?;
        DampingState::new(self.lambda0, self.literal_paper_mode)?;
        if !(0.0..=1.0).contains(&self.warm_decay) {
            return Err(Error::Config(format!(
                "warm decay must lie in [0, 1], got {}",
                self.warm_decay
            )));
        }
        if let Preconditioning::Lbfgs { m: 0, .. } = self.preconditioner {
            return Err(Error::Config("L-BFGS memory size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct HfState {
    pub params: ParamVector,
    pub warm_start: Vec<f64>,
    pub damping: DampingState,
    pub loss_prev: f64,
    pub memory: Option<LbfgsMemory>,
}

impl HfState {
    pub fn new(params: ParamVector, objective: &dyn Objective, cfg: &HfConfig) -> Result<Self> {
        cfg.validate()?;
        if params.len() != objective.dim() {
            return Err(Error::Config(format!(
                "parameter vector has length {}, objective expects {}",
                params.len(),
                objective.dim()
            )));
        }
        let loss_prev = objective.heldout_loss(params.as_slice())?;
        Ok(HfState {
            warm_start: vec![0.0; params.len()],
            params,
            damping: DampingState::new(cfg.lambda0, cfg.literal_paper_mode)?,
            loss_prev,
            memory: None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub iter: u32,
    pub train_loss: f64,
    pub heldout_loss: f64,
    pub cg_iters: usize,
    pub cum_cg_iters: usize,
    pub grad_utts: usize,
    pub grad_frames: usize,
    pub cg_utts: usize,
    pub cg_frames: usize,
    pub matvecs: usize,
    pub accessed_points: u64,
    pub cum_accessed_points: u64,
    pub lambda: f64,
    pub rho: Option<f64>,
    pub alpha: f64,
    /// CG iteration index of the accepted iterate; `None` for a rejected step.
    pub accepted_index: Option<usize>,
    pub wall_ms: f64,
}

impl IterationRecord {
    pub fn accepted(&self) -> bool {
        self.accepted_index.is_some()
    }
}

/// One iteration of the outer loop. `cum_*` fields of the record are left at
/// this iteration's values; [`train`] accumulates them.
pub fn hf_step(state: &mut HfState, objective: &dyn Objective, cfg: &HfConfig, iter: u32) -> Result<IterationRecord> {
    let ctx = format!("HF iteration {iter}");
    step_inner(state, objective, cfg, iter).map_err(|e| e.with_context(&ctx))
}

fn step_inner(state: &mut HfState, objective: &dyn Objective, cfg: &HfConfig, iter: u32) -> Result<IterationRecord> {
    let clock = Clock::start();
    let geval = objective.gradient(&state.params)?;
    let curv = objective.curvature(&state.params)?;
    let damped = Damped {
        inner: curv.op.as_ref(),
        lambda: state.damping.lambda,
    };
    let model = QuadraticModel::new(&damped, geval.grad.clone())?;

    let (trace, memory) = match cfg.preconditioner {
        Preconditioning::None => (
            flexible_pcg(&model, &state.warm_start, &mut IdentityPreconditioner, &cfg.cg)?,
            None,
        ),
        Preconditioning::Lbfgs { m, carryover, refresh } => {
            let seed = if carryover { state.memory.take() } else { None };
            let mut pc = AdaptiveLbfgs::new(m, seed);
            let trace = if refresh {
                flexible_pcg(&model, &state.warm_start, &mut pc, &cfg.cg)?
            } else {
                let mut fixed = pc.current().clone();
                flexible_pcg(&model, &state.warm_start, &mut fixed, &cfg.cg)?
            };
            let memory = pc.finish(&trace.snapshots);
            (trace, Some(memory))
        }
    };
    state.memory = memory;

    let params = state.params.as_slice();
    let mut loss_at = |d: &[f64]| {
        let mut theta = params.to_vec();
        axpy(1.0, d, &mut theta);
        objective.heldout_loss(&theta)
    };
    let choice = discrete_line_search(&mut loss_at, &trace.stored, state.loss_prev)?;
    let d_n = &trace.last().d;
    let q_n = trace.last().q;

    let mut record = IterationRecord {
        iter,
        train_loss: geval.loss,
        heldout_loss: state.loss_prev,
        cg_iters: trace.iterations,
        cum_cg_iters: trace.iterations,
        grad_utts: geval.utterances,
        grad_frames: geval.frames,
        cg_utts: curv.utterances,
        cg_frames: curv.frames,
        matvecs: trace.matvec_count,
        accessed_points: 0,
        cum_accessed_points: 0,
        lambda: state.damping.lambda,
        rho: None,
        alpha: 0.0,
        accepted_index: None,
        wall_ms: 0.0,
    };
    record.accessed_points = (geval.frames + curv.frames * trace.matvec_count) as u64;
    record.cum_accessed_points = record.accessed_points;

    let reject = |state: &mut HfState, mut record: IterationRecord| {
        state.damping = state.damping.reject();
        state.warm_start.iter_mut().for_each(|v| *v = 0.0);
        record.lambda = state.damping.lambda;
        record.wall_ms = clock.elapsed_ms();
        record
    };

    if state.loss_prev < choice.loss {
        return Ok(reject(state, record));
    }
    let rho = reduction_ratio(state.loss_prev, choice.loss, q_n);
    let chosen = &trace.stored[choice.position];
    let armijo = armijo_scale(
        &mut loss_at,
        params,
        state.loss_prev,
        &geval.grad,
        &chosen.d,
        &cfg.line_search,
        Some(choice.loss),
    )?;
    record.rho = Some(rho);
    if armijo.rejected {
        return Ok(reject(state, record));
    }
    state.damping = update_damping(state.damping, rho);
    axpy(armijo.alpha, &chosen.d, &mut state.params.0);
    state.warm_start = d_n.clone();
    scale(cfg.warm_decay, &mut state.warm_start);
    state.loss_prev = armijo.loss;

    record.heldout_loss = state.loss_prev;
    record.lambda = state.damping.lambda;
    record.alpha = armijo.alpha;
    record.accepted_index = Some(chosen.index);
    record.wall_ms = clock.elapsed_ms();
    Ok(record)
}

/// Wall clock that reads zero where no monotonic clock exists.
#[derive(Clone, Copy)]
struct Clock {
    #[cfg(not(target_arch = "wasm32"))]
    start: std::time::Instant,
}

impl Clock {
    fn start() -> Self {
        Clock {
            #[cfg(not(target_arch = "wasm32"))]
            start: std::time::Instant::now(),
        }
    }

    fn elapsed_ms(&self) -> f64 {
        #[cfg(not(target_arch = "wasm32"))]
        {
            self.start.elapsed().as_secs_f64() * 1e3
        }
        #[cfg(target_arch = "wasm32")]
        {
            0.0
        }
    }
}

// ---------------------------------------------------------------------------
// Network objective over an utterance corpus

/// Network loss over sampled train utterances, with held-out loss from the
/// corpus' held-out section. Every data pass goes through [`sharded_reduce`].
pub struct NetObjective<'a> {
    spec: &'a NetworkSpec,
    heldout: Vec<&'a Utterance>,
    grad_sample: Vec<&'a Utterance>,
    cg_sample: Vec<&'a Utterance>,
    /// Marks gradient-sample positions that also belong to the curvature sample.
    in_cg: Vec<bool>,
    corpus: &'a UtteranceCorpus,
    workers: usize,
    want_variance: bool,
    last_variance: RefCell<Option<(VarianceStats, Option<VarianceStats>)>>,
}

impl<'a> NetObjective<'a> {
    pub fn new(spec: &'a NetworkSpec, corpus: &'a UtteranceCorpus, workers: usize) -> Result<Self> {
        spec.validate()?;
        if spec.input_dim() != corpus.feature_dim || spec.classes() != corpus.classes {
            return Err(Error::Config(format!(
                "network maps {} inputs to {} classes but the corpus has dim {} and {} classes",
                spec.input_dim(),
                spec.classes(),
                corpus.feature_dim,
                corpus.classes
            )));
        }
        if corpus.heldout.is_empty() {
            return Err(Error::Config("training needs a non-empty held-out set".into()));
        }
        let all: Vec<usize> = (0..corpus.train.len()).collect();
        let mut obj = NetObjective {
            spec,
            heldout: corpus.heldout_refs(),
            grad_sample: Vec::new(),
            cg_sample: Vec::new(),
            in_cg: Vec::new(),
            corpus,
            workers: workers.max(1),
            want_variance: false,
            last_variance: RefCell::new(None),
        };
        obj.set_draw(
            &Draw {
                grad: all.clone(),
                cg: all,
            },
            false,
        );
        Ok(obj)
    }

    pub fn set_draw(&mut self, draw: &Draw, want_variance: bool) {
        self.grad_sample = self.corpus.train_subset(&draw.grad);
        self.cg_sample = self.corpus.train_subset(&draw.cg);
        let mut cg_ids: Vec<u64> = self.cg_sample.iter().map(|u| u.id).collect();
        cg_ids.sort_unstable();
        self.in_cg = self
            .grad_sample
            .iter()
            .map(|u| cg_ids.binary_search(&u.id).is_ok())
            .collect();
        self.want_variance = want_variance;
    }

    pub fn spec(&self) -> &NetworkSpec {
        self.spec
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn accuracy(&self, params: &ParamVector, heldout: bool) -> Result<f64> {
        let utts = if heldout {
            self.heldout.clone()
        } else {
            self.corpus.train_refs()
        };
        let spec = self.spec;
        let out = sharded_reduce(
            &utts,
            self.workers,
            |_, u| crate::model::accuracy(spec, params, u.frames()).map(|a| a * u.len() as f64),
            0.0,
            |acc, _, hits| acc + hits,
        )?;
        Ok(if out.frames == 0 {
            0.0
        } else {
            out.value / out.frames as f64
        })
    }
}

struct GradAcc {
    loss: f64,
    grad: Vec<f64>,
    var: Option<VarianceAccumulator>,
    cg_var: Option<VarianceAccumulator>,
}

impl Objective for NetObjective<'_> {
    fn dim(&self) -> usize {
        crate::model::param_count(self.spec)
    }

    fn gradient(&self, params: &ParamVector) -> Result<GradientEval> {
        let n = self.dim();
        let spec = self.spec;
        let init = GradAcc {
            loss: 0.0,
            grad: vec![0.0; n],
            var: self.want_variance.then(|| VarianceAccumulator::new(n)),
            cg_var: self.want_variance.then(|| VarianceAccumulator::new(n)),
        };
        let in_cg = &self.in_cg;
        let out = sharded_reduce(
            &self.grad_sample,
            self.workers,
            |_, u| Ok((loss_and_gradient(spec, params, u.frames())?, u.len())),
            init,
            |mut acc, i, ((loss, g), len)| {
                acc.loss += loss.total;
                axpy(1.0, g.as_slice(), &mut acc.grad);
                if let Some(var) = acc.var.as_mut() {
                    let avg: Vec<f64> = g.0.iter().map(|v| v / len as f64).collect();
                    var.add(&avg);
                    if in_cg[i] {
                        acc.cg_var.as_mut().unwrap().add(&avg);
                    }
                }
                acc
            },
        )?;
        let frames = out.frames;
        let mut acc = out.value;
        if frames == 0 {
            return Err(Error::Config("gradient sample is empty".into()));
        }
        scale(1.0 / frames as f64, &mut acc.grad);
        let finish = |v: Option<VarianceAccumulator>| match v {
            Some(v) if v.count() >= 2 => v.finish().map(Some),
            _ => Ok(None),
        };
        let variance = finish(acc.var)?;
        let cg_variance = finish(acc.cg_var)?;
        if let Some(v) = &variance {
            *self.last_variance.borrow_mut() = Some((v.clone(), cg_variance.clone()));
        }
        Ok(GradientEval {
            grad: acc.grad,
            loss: acc.loss / frames as f64,
            utterances: self.grad_sample.len(),
            frames,
            variance,
            cg_variance,
        })
    }

    fn curvature(&self, params: &ParamVector) -> Result<Curvature<'_>> {
        let spec = self.spec;
        let built = sharded_reduce(
            &self.cg_sample,
            self.workers,
            |_, u| GaussNewton::new(spec, params, u.frames()),
            Vec::with_capacity(self.cg_sample.len()),
            |mut v, _, gn| {
                v.push(gn);
                v
            },
        )?;
        if built.frames == 0 {
            return Err(Error::Config("curvature sample is empty".into()));
        }
        let op = SampleCurvature {
            dim: self.dim(),
            parts: built.value,
            sample: &self.cg_sample,
            workers: self.workers,
            inv_frames: 1.0 / built.frames as f64,
        };
        Ok(Curvature {
            op: Box::new(op),
            utterances: self.cg_sample.len(),
            frames: built.frames,
        })
    }

    fn heldout_loss(&self, params: &[f64]) -> Result<f64> {
        let spec = self.spec;
        let theta = ParamVector(params.to_vec());
        let out = sharded_reduce(
            &self.heldout,
            self.workers,
            |_, u| forward_loss(spec, &theta, u.frames()),
            0.0,
            |acc, _, l| acc + l.total,
        )?;
        let mean = out.value / out.frames as f64;
        if !mean.is_finite() {
            return Err(Error::numeric("non-finite held-out loss"));
        }
        Ok(mean)
    }
}

/// Per-frame mean Gauss-Newton product over a sample, one cached forward pass
/// per utterance.
struct SampleCurvature<'s, 'a> {
    dim: usize,
    parts: Vec<GaussNewton<'s>>,
    sample: &'a [&'a Utterance],
    workers: usize,
    inv_frames: f64,
}

impl CurvatureOperator for SampleCurvature<'_, '_> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        let parts = &self.parts;
        let out = sharded_reduce(
            self.sample,
            self.workers,
            |i, _| parts[i].apply_undamped(v),
            vec![0.0; self.dim],
            |mut acc, _, gv| {
                axpy(1.0, &gv, &mut acc);
                acc
            },
        )?;
        let mut gv = out.value;
        scale(self.inv_frames, &mut gv);
        Ok(gv)
    }
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Clone, Debug, PartialEq)]
pub enum Method {
    HessianFree(HfConfig),
    /// Plain gradient descent on the sampled gradient, for reference curves.
    GradientDescent {
        learning_rate: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub sampler: SamplerMode,
    pub cg_fraction: f64,
    pub max_hf_iters: u32,
    /// Stop once the held-out loss improved by less than this (relative) over
    /// the last `stop_window` iterations.
    pub stop_tol: f64,
    pub stop_window: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::HessianFree(HfConfig::default()),
            sampler: SamplerMode::Full,
            cg_fraction: 0.01,
            max_hf_iters: 30,
            stop_tol: 1e-4,
            stop_window: 5,
            seed: 1,
        }
    }
}

/// Result of a run: per-iteration records and the final parameters.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub records: Vec<IterationRecord>,
    pub params: ParamVector,
    pub initial_heldout_loss: f64,
}

fn converged(records: &[IterationRecord], window: usize, tol: f64) -> bool {
    if window == 0 || records.len() < window + 1 {
        return false;
    }
    let now = records[records.len() - 1].heldout_loss;
    let then = records[records.len() - 1 - window].heldout_loss;
    (then - now) / then.abs().max(f64::MIN_POSITIVE) < tol
}

/// Runs the outer loop from `params`, calling `on_record` after every iteration.
pub fn train(
    objective: &mut NetObjective<'_>,
    params: ParamVector,
    cfg: &TrainConfig,
    mut on_record: impl FnMut(&IterationRecord),
) -> Result<TrainOutcome> {
    if !(cfg.stop_tol >= 0.0) {
        return Err(Error::Config("stop_tol must be nonnegative".into()));
    }
    let mut sampler = Sampler::new(
        cfg.sampler.clone(),
        cfg.cg_fraction,
        objective.corpus.train.len(),
        cfg.seed,
    )?;
    let hf_cfg = match &cfg.method {
        Method::HessianFree(h) => h.clone(),
        Method::GradientDescent { learning_rate } => {
            if !(*learning_rate > 0.0) {
                return Err(Error::Config("learning rate must be positive".into()));
            }
            HfConfig::default()
        }
    };
    let mut state = HfState::new(params, objective, &hf_cfg)?;
    let initial = state.loss_prev;
    let mut records: Vec<IterationRecord> = Vec::new();
    let (mut cum_cg, mut cum_points) = (0usize, 0u64);

    for iter in 0..cfg.max_hf_iters {
        objective.set_draw(&sampler.draw(iter), sampler.needs_variance());
        let mut rec = match &cfg.method {
            Method::HessianFree(h) => hf_step(&mut state, objective, h, iter)?,
            Method::GradientDescent { learning_rate } => gd_step(&mut state, objective, *learning_rate, iter)?,
        };
        if let Some(gs) = objective.last_variance.borrow_mut().take() {
            sampler.observe(&gs.0, gs.1.as_ref());
        }
        cum_cg += rec.cg_iters;
        cum_points += rec.accessed_points;
        rec.cum_cg_iters = cum_cg;
        rec.cum_accessed_points = cum_points;
        on_record(&rec);
        records.push(rec);
        if converged(&records, cfg.stop_window, cfg.stop_tol) {
            break;
        }
    }
    Ok(TrainOutcome {
        records,
        params: state.params,
        initial_heldout_loss: initial,
    })
}

fn gd_step(state: &mut HfState, objective: &dyn Objective, lr: f64, iter: u32) -> Result<IterationRecord> {
    let clock = Clock::start();
    let ctx = format!("iteration {iter}");
    let geval = objective.gradient(&state.params).map_err(|e| e.with_context(&ctx))?;
    axpy(-lr, &geval.grad, &mut state.params.0);
    state.loss_prev = objective
        .heldout_loss(state.params.as_slice())
        .map_err(|e| e.with_context(&ctx))?;
    Ok(IterationRecord {
        iter,
        train_loss: geval.loss,
        heldout_loss: state.loss_prev,
        cg_iters: 0,
        cum_cg_iters: 0,
        grad_utts: geval.utterances,
        grad_frames: geval.frames,
        cg_utts: 0,
        cg_frames: 0,
        matvecs: 0,
        accessed_points: geval.frames as u64,
        cum_accessed_points: geval.frames as u64,
        lambda: state.damping.lambda,
        rho: None,
        alpha: lr,
        accepted_index: Some(0),
        wall_ms: clock.elapsed_ms(),
    })
}
