//! Experiment configuration files.
//!
//! One `key = value` pair per line, `#` starts a comment. Values are numbers,
//! booleans, comma lists (`20,64,64,10`) or calls (`lbfgs(32)`,
//! `geometric(0.05,1.2,1.3)`). Keys not listed in [`KEYS`] are rejected.
//! Every key has a default taken from the `bn-desk` preset.

use std::path::{Path, PathBuf};

use hessfree::hf::{HfConfig, Method, Preconditioning, TrainConfig};
use hessfree::sampling::{GeometricConfig, SamplerMode, VarianceConfig};
use hessfree::{Error, Result};

pub const KEYS: &[&str] = &[
    "preset",
    "corpus",
    "output",
    "label",
    "layer_sizes",
    "seed",
    "method",
    "preconditioner",
    "lbfgs_carryover",
    "lbfgs_refresh",
    "sampler",
    "cg_fraction",
    "cg_max_iters",
    "cg_trunc_eps",
    "cg_trunc_window",
    "cg_residual_tol",
    "cg_store_base",
    "cg_truncate",
    "lambda0",
    "literal_paper_mode",
    "armijo_c",
    "backtrack_factor",
    "max_backtracks",
    "warm_decay",
    "max_hf_iters",
    "stop_tol",
    "stop_window",
    "workers",
];

#[derive(Clone, Debug, PartialEq)]
pub enum MethodKind {
    HessianFree,
    GradientDescent(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub corpus: PathBuf,
    pub output: Option<PathBuf>,
    pub label: Option<String>,
    pub layer_sizes: Vec<usize>,
    pub seed: u64,
    pub method: MethodKind,
    pub hf: HfConfig,
    pub sampler: SamplerMode,
    pub cg_fraction: f64,
    pub max_hf_iters: u32,
    pub stop_tol: f64,
    pub stop_window: usize,
    pub workers: Option<usize>,
}

impl RunConfig {
    /// 20-64-64-10 sigmoid net, full-data sampling, PC-32, 40 HF iterations.
    pub fn bn_desk(corpus: impl Into<PathBuf>) -> Self {
        RunConfig {
            corpus: corpus.into(),
            output: None,
            label: None,
            layer_sizes: vec![20, 64, 64, 10],
            seed: 1,
            method: MethodKind::HessianFree,
            hf: HfConfig::default(),
            sampler: SamplerMode::Full,
            cg_fraction: 0.01,
            max_hf_iters: 40,
            stop_tol: 1e-4,
            stop_window: 5,
            workers: None,
        }
    }

    pub fn geometric_preset() -> SamplerMode {
        SamplerMode::Geometric(GeometricConfig {
            s0_fraction: 0.05,
            alpha_g: 1.2,
            alpha_cg: 1.3,
            cg_s0_fraction: 0.05,
        })
    }

    pub fn variance_preset() -> SamplerMode {
        SamplerMode::Variance(VarianceConfig {
            theta_s: 0.25,
            s0_fraction: 0.05,
            growth_cap: 4.0,
        })
    }

    /// Name used in reports: preconditioner and sampler, unless overridden.
    pub fn label(&self) -> String {
        if let Some(l) = &self.label {
            return l.clone();
        }
        let head = match self.method {
            MethodKind::HessianFree => self.hf.preconditioner.label(),
            MethodKind::GradientDescent(_) => "GD".into(),
        };
        format!("{head} {}", self.sampler.name())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            method: match self.method {
                MethodKind::HessianFree => Method::HessianFree(self.hf.clone()),
                MethodKind::GradientDescent(lr) => Method::GradientDescent { learning_rate: lr },
            },
            sampler: self.sampler.clone(),
            cg_fraction: self.cg_fraction,
            max_hf_iters: self.max_hf_iters,
            stop_tol: self.stop_tol,
            stop_window: self.stop_window,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.hf.validate()?;
        self.sampler.validate()?;
        if self.layer_sizes.len() < 2 || self.layer_sizes.contains(&0) {
            return Err(cfg_err("layer_sizes needs at least two positive sizes"));
        }
        if !(self.cg_fraction > 0.0 && self.cg_fraction <= 1.0) {
            return Err(cfg_err("cg_fraction must lie in (0, 1]"));
        }
        if !(self.stop_tol >= 0.0) {
            return Err(cfg_err("stop_tol must be nonnegative"));
        }
        if let MethodKind::GradientDescent(lr) = self.method {
            if !(lr > 0.0) {
                return Err(cfg_err("gd learning rate must be positive"));
            }
        }
        if self.workers == Some(0) {
            return Err(cfg_err("workers must be positive"));
        }
        Ok(())
    }

    /// Parses config text. Relative paths are resolved against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg = RunConfig::bn_desk(PathBuf::new());
        let mut corpus_set = false;
        let mut seen: Vec<&str> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| cfg_err(&format!("line {}: {msg}", n + 1));
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| at(format!("expected `key = value`, got `{line}`")))?;
            let Some(&key) = KEYS.iter().find(|k| **k == key) else {
                return Err(at(format!("unknown key `{key}`")));
            };
            if seen.contains(&key) {
                return Err(at(format!("duplicate key `{key}`")));
            }
            seen.push(key);
            cfg.set(key, value, base_dir).map_err(|e| at(e.to_string()))?;
            corpus_set |= key == "corpus";
        }
        if !corpus_set {
            return Err(cfg_err("missing required key `corpus`"));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| cfg_err(&format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    fn set(&mut self, key: &str, v: &str, base: &Path) -> std::result::Result<(), String> {
        let cg = &mut self.hf.cg;
        match key {
            "preset" => {
                if v != "bn-desk" {
                    return Err(format!("unknown preset `{v}`"));
                }
            }
            "corpus" => self.corpus = base.join(v),
            "output" => self.output = Some(base.join(v)),
            "label" => self.label = Some(v.to_string()),
            "layer_sizes" => self.layer_sizes = list(v)?,
            "seed" => self.seed = num(v)?,
            "method" => {
                let (name, args) = call(v)?;
                self.method = match (name, args.as_slice()) {
                    ("hf", []) => MethodKind::HessianFree,
                    ("gd", [lr]) => MethodKind::GradientDescent(num(lr)?),
                    _ => return Err(format!("method must be `hf` or `gd(lr)`, got `{v}`")),
                }
            }
            "preconditioner" => {
                let (carryover, refresh) = match self.hf.preconditioner {
                    Preconditioning::Lbfgs { carryover, refresh, .. } => (carryover, refresh),
                    Preconditioning::None => (true, false),
                };
                let (name, args) = call(v)?;
                self.hf.preconditioner = match (name, args.as_slice()) {
                    ("none", []) => Preconditioning::None,
                    ("lbfgs", [m]) => Preconditioning::Lbfgs {
                        m: num(m)?,
                        carryover,
                        refresh,
                    },
                    _ => return Err(format!("preconditioner must be `none` or `lbfgs(m)`, got `{v}`")),
                }
            }
            "lbfgs_carryover" | "lbfgs_refresh" => {
                let flag = boolean(v)?;
                match &mut self.hf.preconditioner {
                    Preconditioning::Lbfgs { carryover, refresh, .. } => {
                        if key == "lbfgs_carryover" {
                            *carryover = flag;
                        } else {
                            *refresh = flag;
                        }
                    }
                    Preconditioning::None => {
                        return Err(format!("`{key}` needs an lbfgs preconditioner set before it"))
                    }
                }
            }
            "sampler" => self.sampler = sampler(v)?,
            "cg_fraction" => self.cg_fraction = num(v)?,
            "cg_max_iters" => cg.max_iters = num(v)?,
            "cg_trunc_eps" => cg.trunc_eps = num(v)?,
            "cg_trunc_window" => cg.trunc_min_window = num(v)?,
            "cg_residual_tol" => cg.residual_tol = num(v)?,
            "cg_store_base" => cg.store_stride_base = num(v)?,
            "cg_truncate" => cg.truncate = boolean(v)?,
            "lambda0" => self.hf.lambda0 = num(v)?,
            "literal_paper_mode" => self.hf.literal_paper_mode = boolean(v)?,
            "armijo_c" => self.hf.line_search.armijo_c = num(v)?,
            "backtrack_factor" => self.hf.line_search.backtrack_factor = num(v)?,
            "max_backtracks" => self.hf.line_search.max_backtracks = num(v)?,
            "warm_decay" => self.hf.warm_decay = num(v)?,
            "max_hf_iters" => self.max_hf_iters = num(v)?,
            "stop_tol" => self.stop_tol = num(v)?,
            "stop_window" => self.stop_window = num(v)?,
            "workers" => self.workers = Some(num(v)?),
            _ => unreachable!("key list and setter disagree on `{key}`"),
        }
        Ok(())
    }

    /// Renders the configuration back to the file format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        put("corpus", self.corpus.display().to_string());
        if let Some(o) = &self.output {
            put("output", o.display().to_string());
        }
        if let Some(l) = &self.label {
            put("label", l.clone());
        }
        put(
            "layer_sizes",
            self.layer_sizes
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        put("seed", self.seed.to_string());
        put(
            "method",
            match self.method {
                MethodKind::HessianFree => "hf".into(),
                MethodKind::GradientDescent(lr) => format!("gd({lr})"),
            },
        );
        match self.hf.preconditioner {
            Preconditioning::None => put("preconditioner", "none".into()),
            Preconditioning::Lbfgs { m, carryover, refresh } => {
                put("preconditioner", format!("lbfgs({m})"));
                put("lbfgs_carryover", carryover.to_string());
                put("lbfgs_refresh", refresh.to_string());
            }
        }
        put(
            "sampler",
            match &self.sampler {
                SamplerMode::Full => "full".into(),
                SamplerMode::Geometric(g) => format!(
                    "geometric({},{},{},{})",
                    g.s0_fraction, g.alpha_g, g.alpha_cg, g.cg_s0_fraction
                ),
                SamplerMode::Variance(v) => format!("variance({},{},{})", v.theta_s, v.s0_fraction, v.growth_cap),
            },
        );
        let cg = &self.hf.cg;
        put("cg_fraction", self.cg_fraction.to_string());
        put("cg_max_iters", cg.max_iters.to_string());
        put("cg_trunc_eps", cg.trunc_eps.to_string());
        put("cg_trunc_window", cg.trunc_min_window.to_string());
        put("cg_residual_tol", cg.residual_tol.to_string());
        put("cg_store_base", cg.store_stride_base.to_string());
        put("cg_truncate", cg.truncate.to_string());
        put("lambda0", self.hf.lambda0.to_string());
        put("literal_paper_mode", self.hf.literal_paper_mode.to_string());
        put("armijo_c", self.hf.line_search.armijo_c.to_string());
        put("backtrack_factor", self.hf.line_search.backtrack_factor.to_string());
        put("max_backtracks", self.hf.line_search.max_backtracks.to_string());
        put("warm_decay", self.hf.warm_decay.to_string());
        put("max_hf_iters", self.max_hf_iters.to_string());
        put("stop_tol", self.stop_tol.to_string());
        put("stop_window", self.stop_window.to_string());
        if let Some(w) = self.workers {
            put("workers", w.to_string());
        }
        out
    }
}

fn cfg_err(msg: &str) -> Error {
    Error::Config(msg.to_string())
}

fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.trim().parse().map_err(|_| format!("cannot parse `{v}` as a number"))
}

fn boolean(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(format!("expected a boolean, got `{v}`")),
    }
}

fn list(v: &str) -> std::result::Result<Vec<usize>, String> {
    v.split(',').map(num).collect()
}

/// Splits `name(a,b,c)` into its name and arguments; a bare word has none.
fn call(v: &str) -> std::result::Result<(&str, Vec<&str>), String> {
    match v.split_once('(') {
        None => Ok((v, Vec::new())),
        Some((name, rest)) => {
            let inner = rest
                .strip_suffix(')')
                .ok_or_else(|| format!("unbalanced parentheses in `{v}`"))?;
            let args = if inner.trim().is_empty() {
                Vec::new()
            } else {
                inner.split(',').map(str::trim).collect()
            };
            Ok((name.trim(), args))
        }
    }
}

fn sampler(v: &str) -> std::result::Result<SamplerMode, String> {
    let (name, args) = call(v)?;
    let nums: Vec<f64> = args.iter().map(|a| num(a)).collect::<std::result::Result<_, _>>()?;
    let mode = match (name, nums.as_slice()) {
        ("full", []) => SamplerMode::Full,
        ("geometric", []) => RunConfig::geometric_preset(),
        ("geometric", &[s0, ag, acg]) => SamplerMode::Geometric(GeometricConfig {
            s0_fraction: s0,
            alpha_g: ag,
            alpha_cg: acg,
            cg_s0_fraction: s0,
        }),
        ("geometric", &[s0, ag, acg, cg0]) => SamplerMode::Geometric(GeometricConfig {
            s0_fraction: s0,
            alpha_g: ag,
            alpha_cg: acg,
            cg_s0_fraction: cg0,
        }),
        ("variance", []) => RunConfig::variance_preset(),
        ("variance", &[theta, s0]) => SamplerMode::Variance(VarianceConfig {
            theta_s: theta,
            s0_fraction: s0,
            growth_cap: 4.0,
        }),
        ("variance", &[theta, s0, cap]) => SamplerMode::Variance(VarianceConfig {
            theta_s: theta,
            s0_fraction: s0,
            growth_cap: cap,
        }),
        _ => {
            return Err(format!(
                "sampler must be `full`, `geometric(s0,αg,αcg[,cg_s0])` or `variance(θs,s0[,cap])`, got `{v}`"
            ))
        }
    };
    mode.validate().map_err(|e| e.to_string())?;
    Ok(mode)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::parse(text, Path::new("/exp"))
    }

    #[test]
    fn defaults_are_the_bn_desk_preset() {
        let cfg = parse("corpus = c.hfuc\n").unwrap();
        assert_eq!(cfg, RunConfig::bn_desk("/exp/c.hfuc"));
        assert_eq!(cfg.label(), "PC-32 full");
    }

    #[test]
    fn full_syntax() {
        let cfg = parse(
            "# experiment\n\
             corpus = data/c.hfuc   # relative to the config\n\
             layer_sizes = 20, 32, 10\n\
             preconditioner = lbfgs(16)\n\
             lbfgs_refresh = true\n\
             sampler = geometric(0.1, 1.2, 1.3)\n\
             literal_paper_mode = true\n\
             max_hf_iters = 7\n",
        )
        .unwrap();
        assert_eq!(cfg.corpus, PathBuf::from("/exp/data/c.hfuc"));
        assert_eq!(cfg.layer_sizes, vec![20, 32, 10]);
        assert_eq!(
            cfg.hf.preconditioner,
            Preconditioning::Lbfgs {
                m: 16,
                carryover: true,
                refresh: true
            }
        );
        assert!(matches!(cfg.sampler, SamplerMode::Geometric(ref g) if g.s0_fraction == 0.1 && g.alpha_cg == 1.3));
        assert!(cfg.hf.literal_paper_mode);
        assert_eq!(cfg.max_hf_iters, 7);
        assert_eq!(cfg.label(), "PC-16 geometric");
    }

    #[test]
    fn round_trips_through_text() {
        let mut cfg = parse("corpus = c.hfuc\nsampler = variance(0.25,0.05)\npreconditioner = none\n").unwrap();
        cfg.output = Some("/exp/out".into());
        assert_eq!(parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "corpus = c\nbogus = 1\n",
            "corpus = c\nseed = x\n",
            "corpus = c\nseed = 1\nseed = 2\n",
            "corpus = c\nsampler = geometric(0.1)\n",
            "corpus = c\nsampler = variance(1.5,0.1)\n",
            "corpus = c\npreconditioner = lbfgs(0)\n",
            "corpus = c\nlambda0 = 0\n",
            "corpus = c\nlayer_sizes = 20\n",
            "corpus = c\njust words\n",
            "seed = 3\n",
        ] {
            assert!(matches!(parse(text), Err(Error::Config(_))), "{text:?} accepted");
        }
    }
}
