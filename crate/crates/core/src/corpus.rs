//! Synthetic utterance corpora, the HFUC file format, and the sharded
//! map-reduce every data pass runs through.
//!
//! Labels inside an utterance follow a sticky Markov chain, so frames of one
//! utterance are strongly correlated and per-utterance gradient averages vary
//! much more than per-frame ones would.
//!
//! HFUC layout (little-endian):
//!
//! ```text
//! "HFUC" | u32 version=1 | u32 K | u32 feature_dim | u32 train_count | u32 heldout_count
//! per utterance: u64 id | u32 L | L*feature_dim f32 | L u16 labels
//! ```
//! Train utterances come first, then held-out ones.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{Frames, Label};

pub const MAGIC: &[u8; 4] = b"HFUC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: u64,
    pub dim: usize,
    /// `L × dim`, row-major. Values are exactly representable as `f32`.
    pub features: Vec<f64>,
    pub labels: Vec<Label>,
}

impl Utterance {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn frames(&self) -> Frames<'_> {
        Frames {
            features: &self.features,
            labels: &self.labels,
            dim: self.dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenParams {
    pub classes: usize,
    pub feature_dim: usize,
    pub train_utts: usize,
    pub heldout_utts: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub p_stay: f64,
    /// Standard deviation of the class means around the origin.
    pub mean_scale: f64,
    /// Per-class noise scales are drawn uniformly from this range.
    pub noise_range: (f64, f64),
    pub seed: u64,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            classes: 10,
            feature_dim: 20,
            train_utts: 2000,
            heldout_utts: 200,
            min_len: 20,
            max_len: 100,
            p_stay: 0.9,
            mean_scale: 1.0,
            noise_range: (0.7, 1.3),
            seed: 7,
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.classes < 2 || self.classes > Label::MAX as usize + 1 {
            return bad("class count must be in [2, 65536]");
        }
        if self.feature_dim == 0 {
            return bad("feature dim must be positive");
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad("utterance length range must satisfy 1 <= min <= max");
        }
        if self.max_len > u32::MAX as usize {
            return bad("utterance length does not fit the file format");
        }
        if !(0.0..=1.0).contains(&self.p_stay) {
            return bad("p_stay must lie in [0, 1]");
        }
        if !(self.mean_scale >= 0.0) || !(self.noise_range.0 > 0.0) || self.noise_range.0 > self.noise_range.1 {
            return bad("mean scale must be nonnegative and noise range positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceCorpus {
    pub classes: usize,
    pub feature_dim: usize,
    pub train: Vec<Utterance>,
    pub heldout: Vec<Utterance>,
}

impl UtteranceCorpus {
    pub fn train_frames(&self) -> usize {
        self.train.iter().map(Utterance::len).sum()
    }

    pub fn heldout_frames(&self) -> usize {
        self.heldout.iter().map(Utterance::len).sum()
    }

    pub fn train_refs(&self) -> Vec<&Utterance> {
        sorted_refs(self.train.iter())
    }

    pub fn heldout_refs(&self) -> Vec<&Utterance> {
        sorted_refs(self.heldout.iter())
    }

    /// Train utterances at the given positions, ordered by id.
    pub fn train_subset(&self, positions: &[usize]) -> Vec<&Utterance> {
        sorted_refs(positions.iter().map(|&i| &self.train[i]))
    }
}

fn sorted_refs<'a>(it: impl Iterator<Item = &'a Utterance>) -> Vec<&'a Utterance> {
    let mut v: Vec<&Utterance> = it.collect();
    v.sort_by_key(|u| u.id);
    v
}

pub fn generate(p: &GenParams) -> Result<UtteranceCorpus> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let (k, d) = (p.classes, p.feature_dim);
    let means: Vec<f64> = (0..k * d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            p.mean_scale * z
        })
        .collect();
    let scales: Vec<f64> = (0..k)
        .map(|_| rng.random_range(p.noise_range.0..=p.noise_range.1))
        .collect();

    let make = |id: u64, rng: &mut ChaCha8Rng| {
        let len = rng.random_range(p.min_len..=p.max_len);
        let mut labels = Vec::with_capacity(len);
        let mut y = rng.random_range(0..k);
        for t in 0..len {
            if t > 0 && !rng.random_bool(p.p_stay) {
                // move to one of the other k-1 classes
                let step = rng.random_range(1..k);
                y = (y + step) % k;
            }
            labels.push(y as Label);
        }
        let mut features = Vec::with_capacity(len * d);
        for &y in &labels {
            let y = y as usize;
            for j in 0..d {
                let noise: f64 = StandardNormal.sample(rng);
                let v = means[y * d + j] + scales[y] * noise;
                features.push(v as f32 as f64);
            }
        }
        Utterance {
            id,
            dim: d,
            features,
            labels,
        }
    };

    let train = (0..p.train_utts as u64).map(|id| make(id, &mut rng)).collect();
    let heldout = (0..p.heldout_utts as u64)
        .map(|i| make(p.train_utts as u64 + i, &mut rng))
        .collect();
    Ok(UtteranceCorpus {
        classes: k,
        feature_dim: d,
        train,
        heldout,
    })
}

// ---------------------------------------------------------------------------
// HFUC file format

pub fn to_bytes(c: &UtteranceCorpus) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(24 + (c.train_frames() + c.heldout_frames()) * (4 * c.feature_dim + 2));
    let u32_of =
        |v: usize, what: &str| u32::try_from(v).map_err(|_| Error::Config(format!("{what} {v} does not fit in u32")));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32_of(c.classes, "class count")?.to_le_bytes());
    out.extend_from_slice(&u32_of(c.feature_dim, "feature dim")?.to_le_bytes());
    out.extend_from_slice(&u32_of(c.train.len(), "train count")?.to_le_bytes());
    out.extend_from_slice(&u32_of(c.heldout.len(), "heldout count")?.to_le_bytes());
    for u in c.train.iter().chain(&c.heldout) {
        if u.dim != c.feature_dim || u.features.len() != u.len() * u.dim {
            return Err(Error::Config(format!("utterance {} has inconsistent dimensions", u.id)));
        }
        out.extend_from_slice(&u.id.to_le_bytes());
        out.extend_from_slice(&u32_of(u.len(), "utterance length")?.to_le_bytes());
        for &v in &u.features {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for &y in &u.labels {
            out.extend_from_slice(&y.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.buf.len() as u64,
                message: format!("truncated while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn fail(&self, at: usize, message: String) -> Error {
        Error::Format {
            offset: at as u64,
            message,
        }
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<UtteranceCorpus> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(r.fail(0, "bad magic, expected \"HFUC\"".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.fail(4, format!("unsupported version {version}")));
    }
    let classes = r.u32("class count")? as usize;
    let dim = r.u32("feature dim")? as usize;
    if classes < 2 || classes > Label::MAX as usize + 1 || dim == 0 {
        return Err(r.fail(8, format!("invalid header: {classes} classes, dim {dim}")));
    }
    let n_train = r.u32("train count")? as usize;
    let n_heldout = r.u32("heldout count")? as usize;

    let read_utt = |r: &mut Reader<'_>| -> Result<Utterance> {
        let start = r.pos;
        let id = r.u64("utterance id")?;
        let len = r.u32("utterance length")? as usize;
        if len == 0 {
            return Err(r.fail(start + 8, format!("utterance {id} is empty")));
        }
        let raw = r.take(len.saturating_mul(dim).saturating_mul(4), "frames")?;
        let features = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        let label_at = r.pos;
        let raw = r.take(len * 2, "labels")?;
        let mut labels = Vec::with_capacity(len);
        for (i, b) in raw.chunks_exact(2).enumerate() {
            let y = u16::from_le_bytes(b.try_into().unwrap());
            if y as usize >= classes {
                return Err(r.fail(label_at + 2 * i, format!("label {y} outside [0, {classes})")));
            }
            labels.push(y);
        }
        Ok(Utterance {
            id,
            dim,
            features,
            labels,
        })
    };
    let train = (0..n_train).map(|_| read_utt(&mut r)).collect::<Result<Vec<_>>>()?;
    let heldout = (0..n_heldout).map(|_| read_utt(&mut r)).collect::<Result<Vec<_>>>()?;
    if r.pos != buf.len() {
        return Err(r.fail(r.pos, format!("{} trailing bytes", buf.len() - r.pos)));
    }
    let mut ids: Vec<u64> = train.iter().chain(&heldout).map(|u| u.id).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(r.fail(24, "duplicate utterance ids".into()));
    }
    Ok(UtteranceCorpus {
        classes,
        feature_dim: dim,
        train,
        heldout,
    })
}

pub fn save(c: &UtteranceCorpus, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(c)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<UtteranceCorpus> {
    from_bytes(&std::fs::read(path)?)
}

// ---------------------------------------------------------------------------
// Sharded reduction

/// Contiguous, balanced assignment of `n` sorted sample positions to workers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShardPlan {
    pub shards: Vec<Range<usize>>,
}

impl ShardPlan {
    pub fn new(n: usize, workers: usize) -> Self {
        let w = workers.max(1).min(n.max(1));
        let (base, extra) = (n / w, n % w);
        let mut start = 0;
        let shards = (0..w)
            .map(|i| {
                let len = base + usize::from(i < extra);
                let r = start..start + len;
                start += len;
                r
            })
            .collect();
        ShardPlan { shards }
    }

    pub fn workers(&self) -> usize {
        self.shards.len()
    }
}

/// Result of a reduction plus the number of frames touched.
#[derive(Clone, Debug, PartialEq)]
pub struct Reduced<A> {
    pub value: A,
    pub frames: usize,
}

/// Evaluates `map` on every utterance of `sample` (sorted by id) across
/// `workers` shards and folds the results strictly in sample order, so the
/// outcome is bitwise independent of the worker count and of timing.
pub fn sharded_reduce<T, A, M, F>(
    sample: &[&Utterance],
    workers: usize,
    map: M,
    init: A,
    mut fold: F,
) -> Result<Reduced<A>>
where
    T: Send,
    M: Fn(usize, &Utterance) -> Result<T> + Sync,
    F: FnMut(A, usize, T) -> A,
{
    debug_assert!(
        sample.windows(2).all(|w| w[0].id < w[1].id),
        "sample must be sorted by id"
    );
    let frames = sample.iter().map(|u| u.len()).sum();
    let plan = ShardPlan::new(sample.len(), workers);
    let shard_of = |i: usize| plan.shards.iter().position(|r| r.contains(&i)).unwrap_or(0);

    if plan.workers() <= 1 {
        let mut acc = init;
        for (i, u) in sample.iter().enumerate() {
            let t = map(i, u).map_err(|e| Error::Shard {
                shard: 0,
                source: Box::new(e),
            })?;
            acc = fold(acc, i, t);
        }
        return Ok(Reduced { value: acc, frames });
    }

    let cancel = AtomicBool::new(false);
    let (tx, rx) = mpsc::sync_channel::<(usize, Result<T>)>(2 * plan.workers());
    std::thread::scope(|scope| {
        for range in plan.shards.iter().cloned() {
            let tx = tx.clone();
            let (map, cancel) = (&map, &cancel);
            scope.spawn(move || {
                for i in range {
                    if cancel.load(Ordering::Relaxed) {
                        break;
                    }
                    let out = map(i, sample[i]);
                    let failed = out.is_err();
                    if tx.send((i, out)).is_err() || failed {
                        break;
                    }
                }
            });
        }
        drop(tx);

        let mut acc = Some(init);
        let mut next = 0;
        let mut pending = BTreeMap::new();
        let mut error = None;
        for (i, out) in rx {
            match out {
                Ok(t) if error.is_none() => {
                    pending.insert(i, t);
                    while let Some(t) = pending.remove(&next) {
                        acc = Some(fold(acc.take().unwrap(), next, t));
                        next += 1;
                    }
                }
                Ok(_) => {}
                Err(e) => {
                    cancel.store(true, Ordering::Relaxed);
                    if error.is_none() {
                        error = Some(Error::Shard {
                            shard: shard_of(i),
                            source: Box::new(e),
                        });
                    }
                }
            }
        }
        match error {
            Some(e) => Err(e),
            None => {
                debug_assert_eq!(next, sample.len());
                Ok(Reduced {
                    value: acc.unwrap(),
                    frames,
                })
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenParams {
        GenParams {
            train_utts: 30,
            heldout_utts: 5,
            min_len: 2,
            max_len: 9,
            feature_dim: 3,
            classes: 4,
            ..GenParams::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
        let other = GenParams { seed: 8, ..small() };
        assert_ne!(generate(&small()).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn absorbing_chain_gives_single_label_utterances() {
        let c = generate(&GenParams { p_stay: 1.0, ..small() }).unwrap();
        for u in c.train.iter().chain(&c.heldout) {
            assert!(u.labels.iter().all(|&y| y == u.labels[0]));
        }
    }

    #[test]
    fn generated_shapes_and_ids() {
        let c = generate(&small()).unwrap();
        assert_eq!(c.train.len(), 30);
        assert_eq!(c.heldout.len(), 5);
        for u in c.train.iter().chain(&c.heldout) {
            assert!((2..=9).contains(&u.len()));
            assert_eq!(u.features.len(), u.len() * 3);
            assert!(u.labels.iter().all(|&y| y < 4));
        }
        assert!(c.train.iter().all(|u| u.id < 30));
        assert!(c.heldout.iter().all(|u| u.id >= 30));
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(generate(&GenParams { classes: 1, ..small() }).is_err());
        assert!(generate(&GenParams {
            feature_dim: 0,
            ..small()
        })
        .is_err());
        assert!(generate(&GenParams {
            min_len: 5,
            max_len: 4,
            ..small()
        })
        .is_err());
    }

    #[test]
    fn bytes_round_trip_including_empty_heldout() {
        let c = generate(&small()).unwrap();
        assert_eq!(from_bytes(&to_bytes(&c).unwrap()).unwrap(), c);
        let no_heldout = generate(&GenParams {
            heldout_utts: 0,
            ..small()
        })
        .unwrap();
        assert_eq!(from_bytes(&to_bytes(&no_heldout).unwrap()).unwrap(), no_heldout);
    }

    #[test]
    fn malformed_files_report_offsets() {
        let c = generate(&small()).unwrap();
        let bytes = to_bytes(&c).unwrap();
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(from_bytes(&bad_magic), Err(Error::Format { offset: 0, .. })));
        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(matches!(from_bytes(&bad_version), Err(Error::Format { offset: 4, .. })));
        // cut in the middle of the first utterance's frames
        let cut = &bytes[..24 + 12 + 5];
        match from_bytes(cut) {
            Err(Error::Format { offset, message }) => {
                assert_eq!(offset, cut.len() as u64);
                assert!(message.contains("frames"), "{message}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(from_bytes(&trailing).is_err());
    }

    #[test]
    fn shard_plan_is_balanced_and_contiguous() {
        for n in [0usize, 1, 7, 64, 101] {
            for w in [1usize, 3, 8] {
                let plan = ShardPlan::new(n, w);
                let mut next = 0;
                for r in &plan.shards {
                    assert_eq!(r.start, next);
                    next = r.end;
                }
                assert_eq!(next, n);
                let sizes: Vec<usize> = plan.shards.iter().map(|r| r.len()).collect();
                let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
                assert!(hi - lo <= 1);
            }
        }
    }

    #[test]
    fn reduce_folds_in_sample_order_for_any_worker_count() {
        let c = generate(&small()).unwrap();
        let refs = c.train_refs();
        for w in [1, 2, 5, 8] {
            let out = sharded_reduce(
                &refs,
                w,
                |_, u| Ok(u.id),
                Vec::new(),
                |mut v, _, id| {
                    v.push(id);
                    v
                },
            )
            .unwrap();
            assert_eq!(out.value, (0..30).collect::<Vec<u64>>());
            assert_eq!(out.frames, c.train_frames());
        }
    }

    #[test]
    fn empty_sample_reduces_to_init() {
        let out = sharded_reduce(&[], 4, |_, _| Ok(1.0), 0.0, |a, _, b: f64| a + b).unwrap();
        assert_eq!(out.value, 0.0);
        assert_eq!(out.frames, 0);
    }

    #[test]
    fn worker_failure_names_its_shard() {
        let c = generate(&small()).unwrap();
        let refs = c.train_refs();
        let res = sharded_reduce(
            &refs,
            3,
            |i, _| if i == 25 { Err(Error::numeric("boom")) } else { Ok(1u32) },
            0u32,
            |a, _, b| a + b,
        );
        match res {
            Err(Error::Shard { shard, source }) => {
                assert_eq!(shard, 2);
                assert!(source.is_numeric());
            }
            other => panic!("expected shard error, got {other:?}"),
        }
    }
}
