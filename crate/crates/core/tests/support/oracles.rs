//! Reference implementations used only by tests. Nothing here calls into the
//! library's numerical paths: these are deliberately naive loops over dense
//! matrices so they can serve as independent oracles.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller, kept local so the oracle does not share code with the crate.
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| gaussian(rng)).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// max_i |a_i − b_i| / max_i |b_i|
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    diff / max_abs(b).max(1e-300)
}

// ---------------------------------------------------------------------------
// Network oracles

/// Logits of every frame by plain nested loops over the flat layout.
pub fn naive_logits(sizes: &[usize], theta: &[f64], x: &[f64], frames: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for f in 0..frames {
        let mut a: Vec<f64> = x[f * sizes[0]..(f + 1) * sizes[0]].to_vec();
        let mut off = 0;
        for l in 0..sizes.len() - 1 {
            let (ni, no) = (sizes[l], sizes[l + 1]);
            let mut z = vec![0.0; no];
            for j in 0..no {
                let mut s = theta[off + ni * no + j];
                for i in 0..ni {
                    s += theta[off + j * ni + i] * a[i];
                }
                z[j] = s;
            }
            off += (ni + 1) * no;
            if l + 2 < sizes.len() {
                a = z.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
            } else {
                a = z;
            }
        }
        out.extend(a);
    }
    out
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn naive_loss(sizes: &[usize], theta: &[f64], x: &[f64], labels: &[u16]) -> f64 {
    let k = *sizes.last().unwrap();
    let logits = naive_logits(sizes, theta, x, labels.len());
    labels
        .iter()
        .enumerate()
        .map(|(f, &y)| -softmax(&logits[f * k..(f + 1) * k])[y as usize].ln())
        .sum()
}

/// Central finite differences of a scalar function.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, theta: &[f64], h: f64) -> Vec<f64> {
    let mut t = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            t[i] = theta[i] + h;
            let fp = f(&t);
            t[i] = theta[i] - h;
            let fm = f(&t);
            t[i] = theta[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Dense `Σ_f J_fᵀ H_f J_f + λI` with `J` from central differences of the
/// naive logits. Returned row-major `n × n`.
pub fn dense_gauss_newton(sizes: &[usize], theta: &[f64], x: &[f64], frames: usize, lambda: f64) -> Vec<f64> {
    let n = theta.len();
    let k = *sizes.last().unwrap();
    let h = 1e-6;
    // jac[f][c][p]
    let mut jac = vec![0.0; frames * k * n];
    let mut t = theta.to_vec();
    for p in 0..n {
        t[p] = theta[p] + h;
        let zp = naive_logits(sizes, &t, x, frames);
        t[p] = theta[p] - h;
        let zm = naive_logits(sizes, &t, x, frames);
        t[p] = theta[p];
        for f in 0..frames {
            for c in 0..k {
                jac[(f * k + c) * n + p] = (zp[f * k + c] - zm[f * k + c]) / (2.0 * h);
            }
        }
    }
    let logits = naive_logits(sizes, theta, x, frames);
    let mut g = vec![0.0; n * n];
    for f in 0..frames {
        let p = softmax(&logits[f * k..(f + 1) * k]);
        for a in 0..k {
            for b in 0..k {
                let hab = if a == b { p[a] - p[a] * p[b] } else { -p[a] * p[b] };
                if hab == 0.0 {
                    continue;
                }
                for i in 0..n {
                    let ja = jac[(f * k + a) * n + i];
                    if ja == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        g[i * n + j] += ja * hab * jac[(f * k + b) * n + j];
                    }
                }
            }
        }
    }
    for i in 0..n {
        g[i * n + i] += lambda;
    }
    g
}

// ---------------------------------------------------------------------------
// Dense linear algebra oracles

pub fn matvec(a: &[f64], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..a.len() / n).map(|i| dot(&a[i * n..(i + 1) * n], x)).collect()
}

pub fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            for j in 0..n {
                c[i * n + j] += a[i * n + k] * b[k * n + j];
            }
        }
    }
    c
}

/// Random orthogonal matrix from Gram-Schmidt on a Gaussian matrix.
pub fn random_orthogonal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(n);
    while q.len() < n {
        let mut v = random_vec(rng, n);
        for _ in 0..2 {
            for u in &q {
                let c = dot(&v, u);
                for (vi, ui) in v.iter_mut().zip(u) {
                    *vi -= c * ui;
                }
            }
        }
        let nv = norm(&v);
        if nv > 1e-8 {
            v.iter_mut().for_each(|x| *x /= nv);
            q.push(v);
        }
    }
    q.concat()
}

/// `Q diag(eigs) Qᵀ`
pub fn spd_with_spectrum(rng: &mut ChaCha8Rng, eigs: &[f64]) -> Vec<f64> {
    let n = eigs.len();
    let q = random_orthogonal(rng, n);
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..n {
                s += q[k * n + i] * eigs[k] * q[k * n + j];
            }
            a[i * n + j] = s;
        }
    }
    // exact symmetry
    for i in 0..n {
        for j in 0..i {
            let m = 0.5 * (a[i * n + j] + a[j * n + i]);
            a[i * n + j] = m;
            a[j * n + i] = m;
        }
    }
    a
}

pub fn log_spaced(n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let t = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
            (lo.ln() + t * (hi.ln() - lo.ln())).exp()
        })
        .collect()
}

pub fn cholesky_solve(a: &[f64], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                assert!(s > 0.0, "matrix not SPD");
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    x
}

/// Textbook preconditioned CG (fixed preconditioner, β = r_{k+1}·z_{k+1} / r_k·z_k)
/// from x0 = 0. Returns every iterate x_1..x_iters.
pub fn textbook_pcg(a: &[f64], b: &[f64], m_inv: &[f64], iters: usize) -> Vec<Vec<f64>> {
    let n = b.len();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z = matvec(m_inv, &r);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut out = Vec::new();
    for _ in 0..iters {
        let ap = matvec(a, &p);
        let alpha = rz / dot(&p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        out.push(x.clone());
        z = matvec(m_inv, &r);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    out
}

/// Dense inverse-Hessian BFGS recursion:
/// H ← (I − ρ s yᵀ) H (I − ρ y sᵀ) + ρ s sᵀ over the pairs in order, from H₀ = γI.
pub fn dense_bfgs(pairs: &[(Vec<f64>, Vec<f64>)], gamma: f64, n: usize) -> Vec<f64> {
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        h[i * n + i] = gamma;
    }
    for (s, y) in pairs {
        let rho = 1.0 / dot(y, s);
        let mut left = vec![0.0; n * n];
        let mut right = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let id = if i == j { 1.0 } else { 0.0 };
                left[i * n + j] = id - rho * s[i] * y[j];
                right[i * n + j] = id - rho * y[i] * s[j];
            }
        }
        let mut next = matmul(&matmul(&left, &h, n), &right, n);
        for i in 0..n {
            for j in 0..n {
                next[i * n + j] += rho * s[i] * s[j];
            }
        }
        h = next;
    }
    h
}
