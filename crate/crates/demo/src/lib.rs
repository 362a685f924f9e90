//! WebAssembly entry points for the browser demo in `www/`.
//!
//! Each export returns a flat `Float64Array`; the layout is documented on the
//! function. The plain Rust versions (`*_series`) carry the logic and are what
//! the native tests exercise.

// `!(x > 0.0)` is deliberate throughout: NaN must fail validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use hessfree::corpus::{generate, GenParams};
use hessfree::hf::{train, HfConfig, Method, NetObjective, Preconditioning, TrainConfig};
use hessfree::krylov::{flexible_pcg, CgConfig, DenseSymmetric, IdentityPreconditioner, QuadraticModel};
use hessfree::model::{init_params, NetworkSpec};
use hessfree::precond::{harvest_pairs, LbfgsMemory};
use hessfree::sampling::{geometric_size, GeometricConfig, SamplerMode, VarianceConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

/// Relative residual histories of plain CG and of CG preconditioned with an
/// L-BFGS memory harvested from the plain run, on a diagonal SPD system with
/// a log-spaced spectrum from 1 to `kappa`.
pub fn cg_series(dim: usize, kappa: f64, memory: usize, seed: u64) -> Result<(Vec<f64>, Vec<f64>), String> {
    if !(2..=2000).contains(&dim) || !(kappa > 1.0) || memory == 0 {
        return Err("need 2 ≤ dim ≤ 2000, kappa > 1 and memory ≥ 1".into());
    }
    let eigs: Vec<f64> = (0..dim).map(|i| kappa.powf(i as f64 / (dim - 1) as f64)).collect();
    let op = DenseSymmetric::diagonal(&eigs);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let model = QuadraticModel::new(&op, g).map_err(|e| e.to_string())?;
    let cfg = CgConfig {
        max_iters: 10 * dim,
        residual_tol: 1e-8,
        truncate: false,
        ..CgConfig::default()
    };
    let zero = vec![0.0; dim];
    let plain = flexible_pcg(&model, &zero, &mut IdentityPreconditioner, &cfg).map_err(|e| e.to_string())?;
    let mut mem = LbfgsMemory::new(memory);
    for p in harvest_pairs(&plain, memory) {
        mem.admit(p.s, p.y);
    }
    let pc = flexible_pcg(&model, &zero, &mut mem, &cfg).map_err(|e| e.to_string())?;
    let rel = |v: &[f64]| v.iter().map(|r| r / v[0]).collect::<Vec<_>>();
    Ok((rel(&plain.residual_norms), rel(&pc.residual_norms)))
}

/// Layout: `[n_plain, n_pc, plain residuals…, preconditioned residuals…]`.
#[wasm_bindgen]
pub fn cg_convergence(dim: usize, kappa: f64, memory: usize, seed: u32) -> Result<Vec<f64>, JsError> {
    let (a, b) = cg_series(dim, kappa, memory, seed as u64).map_err(|e| JsError::new(&e))?;
    Ok(pack(&[a, b]))
}

/// Gradient and curvature sample sizes of the geometric schedule for
/// `iters` iterations. The curvature schedule starts from `cg_fraction` of
/// the corpus scaled by `s0_fraction` and is capped at `cg_fraction` of it.
pub fn schedule_series(
    n_total: usize,
    s0_fraction: f64,
    alpha_g: f64,
    alpha_cg: f64,
    cg_fraction: f64,
    iters: u32,
) -> Result<(Vec<f64>, Vec<f64>), String> {
    if n_total == 0 || !(s0_fraction > 0.0 && s0_fraction <= 1.0) || !(cg_fraction > 0.0 && cg_fraction <= 1.0) {
        return Err("need n_total ≥ 1 and fractions in (0, 1]".into());
    }
    if !(alpha_g >= 1.0 && alpha_cg >= 1.0) {
        return Err("growth factors must be at least 1".into());
    }
    let s0 = ((s0_fraction * n_total as f64).ceil() as usize).clamp(1, n_total);
    let cg_full = ((cg_fraction * n_total as f64).ceil() as usize).clamp(1, n_total);
    let cg0 = ((s0_fraction * cg_full as f64).ceil() as usize).clamp(1, cg_full);
    let grad = (0..iters)
        .map(|i| geometric_size(i, s0, alpha_g, n_total) as f64)
        .collect();
    let cg = (0..iters)
        .map(|i| geometric_size(i, cg0, alpha_cg, cg_full) as f64)
        .collect();
    Ok((grad, cg))
}

/// Layout: `[iters, gradient sizes…, curvature sizes…]`.
#[wasm_bindgen]
pub fn sampling_schedule(
    n_total: usize,
    s0_fraction: f64,
    alpha_g: f64,
    alpha_cg: f64,
    cg_fraction: f64,
    iters: u32,
) -> Result<Vec<f64>, JsError> {
    let (g, c) =
        schedule_series(n_total, s0_fraction, alpha_g, alpha_cg, cg_fraction, iters).map_err(|e| JsError::new(&e))?;
    let mut out = vec![iters as f64];
    out.extend(g);
    out.extend(c);
    Ok(out)
}

/// A small Hessian-free run on a generated corpus. `sampler`: 0 full data,
/// 1 geometric, 2 variance. `memory` 0 turns preconditioning off. Returns the
/// held-out loss before training followed by one entry per iteration, and the
/// cumulative accessed points per iteration.
pub fn training_series(sampler: u8, memory: usize, iters: u32, seed: u64) -> Result<(Vec<f64>, Vec<f64>), String> {
    let corpus = generate(&GenParams {
        classes: 4,
        feature_dim: 8,
        train_utts: 200,
        heldout_utts: 40,
        min_len: 10,
        max_len: 40,
        seed,
        ..GenParams::default()
    })
    .map_err(|e| e.to_string())?;
    let spec = NetworkSpec::new(vec![8, 16, 4], seed).map_err(|e| e.to_string())?;
    let sampler = match sampler {
        0 => SamplerMode::Full,
        1 => SamplerMode::Geometric(GeometricConfig {
            s0_fraction: 0.05,
            alpha_g: 1.2,
            alpha_cg: 1.3,
            cg_s0_fraction: 0.2,
        }),
        2 => SamplerMode::Variance(VarianceConfig {
            theta_s: 0.25,
            s0_fraction: 0.05,
            growth_cap: 4.0,
        }),
        _ => return Err("sampler must be 0, 1 or 2".into()),
    };
    let preconditioner = if memory == 0 {
        Preconditioning::None
    } else {
        Preconditioning::Lbfgs {
            m: memory,
            carryover: true,
            refresh: false,
        }
    };
    let cfg = TrainConfig {
        method: Method::HessianFree(HfConfig {
            preconditioner,
            ..HfConfig::default()
        }),
        sampler,
        cg_fraction: 0.1,
        max_hf_iters: iters,
        stop_window: 0,
        seed,
        ..TrainConfig::default()
    };
    let mut objective = NetObjective::new(&spec, &corpus, 1).map_err(|e| e.to_string())?;
    let out = train(&mut objective, init_params(&spec), &cfg, |_| {}).map_err(|e| e.to_string())?;
    let mut loss = vec![out.initial_heldout_loss];
    loss.extend(out.records.iter().map(|r| r.heldout_loss));
    let accessed = out.records.iter().map(|r| r.cum_accessed_points as f64).collect();
    Ok((loss, accessed))
}

/// Layout: `[n_loss, n_accessed, losses…, cumulative accessed points…]`.
#[wasm_bindgen]
pub fn training_curve(sampler: u8, memory: usize, iters: u32, seed: u32) -> Result<Vec<f64>, JsError> {
    let (l, a) = training_series(sampler, memory, iters, seed as u64).map_err(|e| JsError::new(&e))?;
    Ok(pack(&[l, a]))
}

fn pack(parts: &[Vec<f64>]) -> Vec<f64> {
    let mut out: Vec<f64> = parts.iter().map(|p| p.len() as f64).collect();
    parts.iter().for_each(|p| out.extend_from_slice(p));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preconditioned_cg_converges_faster() {
        let (plain, pc) = cg_series(200, 1e4, 32, 1).unwrap();
        assert_eq!(plain[0], 1.0);
        assert!(*plain.last().unwrap() <= 1e-8 && *pc.last().unwrap() <= 1e-8);
        assert!(pc.len() < plain.len(), "{} vs {}", pc.len(), plain.len());
        assert!(cg_series(1, 10.0, 4, 1).is_err());
    }

    #[test]
    fn schedule_grows_to_the_caps() {
        let (g, c) = schedule_series(2000, 0.05, 1.2, 1.3, 0.01, 30).unwrap();
        assert_eq!((g[0], c[0]), (100.0, 1.0));
        assert_eq!(g[5], 249.0);
        assert_eq!(*g.last().unwrap(), 2000.0);
        assert_eq!(*c.last().unwrap(), 20.0);
        assert!(g.windows(2).all(|w| w[1] >= w[0]) && c.windows(2).all(|w| w[1] >= w[0]));
        assert!(schedule_series(10, 0.0, 1.2, 1.3, 0.1, 3).is_err());
    }

    #[test]
    fn training_reduces_heldout_loss() {
        for sampler in 0..3 {
            let (loss, accessed) = training_series(sampler, 8, 6, 3).unwrap();
            assert_eq!((loss.len(), accessed.len()), (7, 6));
            assert!(loss.last().unwrap() < &loss[0], "sampler {sampler}: {loss:?}");
            assert!(accessed.windows(2).all(|w| w[1] >= w[0]));
        }
        assert!(training_series(7, 0, 2, 1).is_err());
    }

    #[test]
    fn packing_prefixes_lengths() {
        assert_eq!(pack(&[vec![1.0], vec![2.0, 3.0]]), vec![1.0, 2.0, 1.0, 2.0, 3.0]);
    }
}
