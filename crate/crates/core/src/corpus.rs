//! Dataset manifests (JSON lines), the caption-quality filter, caption
//! scoring under a next-token model, and split/batch planning.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use crate::denoiser::CaptionSource;
use crate::error::{Error, Result};
use crate::hsa::tokenize;

pub const DEFAULT_TAU: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Caption {
    pub text: String,
    pub source: CaptionSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mm_dist: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub motion_path: String,
    #[serde(default)]
    pub captions: Vec<Caption>,
    pub split: Split,
    /// Set when filtering removed every caption; the motion stays for
    /// unconditional training.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub uncaptioned: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn new(records: Vec<ManifestRecord>) -> Result<Self> {
        let m = Self { records };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for r in &self.records {
            if !seen.insert(&r.motion_path) {
                return Err(Error::invalid(format!("duplicate motion path {:?}", r.motion_path)));
            }
            for c in &r.captions {
                if let Some(d) = c.mm_dist {
                    if !(d >= 0.0) {
                        return Err(Error::invalid(format!("negative caption score {d} in {:?}", r.motion_path)));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(&line)
                .map_err(|e| Error::format("manifest", format!("line {}: {e}", i + 1)))?;
            records.push(rec);
        }
        Self::new(records)
    }

    pub fn write_jsonl<W: Write>(&self, w: &mut W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut *w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_jsonl(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn num_captions(&self) -> usize {
        self.records.iter().map(|r| r.captions.len()).sum()
    }
}

/// Motion and caption features in a shared space, used to score captions.
pub trait PairedFeatureSource {
    fn motion(&self, record: &ManifestRecord) -> Result<Vec<f64>>;
    fn text(&self, text: &str) -> Result<Vec<f64>>;
}

/// Scores every caption by the distance between its features and its
/// motion's features, keeps those at or below `tau`, and flags motions left
/// without captions. Returns the filtered manifest and the removal count.
pub fn filter_captions(
    manifest: &DatasetManifest,
    features: &dyn PairedFeatureSource,
    tau: f64,
) -> Result<(DatasetManifest, usize)> {
    let mut removed = 0;
    let mut out = Vec::with_capacity(manifest.records.len());
    for rec in &manifest.records {
        let mut rec = rec.clone();
        if rec.captions.is_empty() {
            out.push(rec);
            continue;
        }
        let m = features.motion(&rec)?;
        let mut kept = Vec::with_capacity(rec.captions.len());
        for mut c in rec.captions.drain(..) {
            let t = features.text(&c.text)?;
            if t.len() != m.len() {
                return Err(Error::DimensionMismatch {
                    expected: m.len(),
                    actual: t.len(),
                    context: "caption feature width",
                });
            }
            let d = m.iter().zip(&t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            c.mm_dist = Some(d);
            if d <= tau {
                kept.push(c);
            } else {
                removed += 1;
            }
        }
        rec.uncaptioned = kept.is_empty();
        rec.captions = kept;
        out.push(rec);
    }
    Ok((DatasetManifest { records: out }, removed))
}

/// `p(next | context)` over caption words.
pub trait NextTokenModel {
    fn prob(&self, context: &[String], next: &str) -> f64;
}

impl<F: Fn(&[String], &str) -> f64> NextTokenModel for F {
    fn prob(&self, context: &[String], next: &str) -> f64 {
        self(context, next)
    }
}

pub struct UniformModel {
    pub vocab_size: usize,
}

impl NextTokenModel for UniformModel {
    fn prob(&self, _: &[String], _: &str) -> f64 {
        1.0 / self.vocab_size as f64
    }
}

/// Add-`k` smoothed word bigram model with an unknown-word slot.
#[derive(Debug, Clone, PartialEq)]
pub struct BigramModel {
    counts: BTreeMap<(String, String), f64>,
    context_totals: BTreeMap<String, f64>,
    vocab: BTreeSet<String>,
    smoothing: f64,
}

const START: &str = "<s>";

impl BigramModel {
    pub fn fit<'a>(texts: impl IntoIterator<Item = &'a str>, smoothing: f64) -> Self {
        let mut m = Self {
            counts: BTreeMap::new(),
            context_totals: BTreeMap::new(),
            vocab: BTreeSet::new(),
            smoothing,
        };
        for text in texts {
            let words = tokenize(text);
            let mut prev = START.to_string();
            for w in words {
                m.vocab.insert(w.clone());
                *m.counts.entry((prev.clone(), w.clone())).or_default() += 1.0;
                *m.context_totals.entry(prev).or_default() += 1.0;
                prev = w;
            }
        }
        m
    }
}

impl NextTokenModel for BigramModel {
    fn prob(&self, context: &[String], next: &str) -> f64 {
        let prev = context.last().map_or(START, String::as_str);
        let v = self.vocab.len() as f64 + 1.0;
        let c = self.counts.get(&(prev.to_string(), next.to_string())).copied().unwrap_or(0.0);
        let total = self.context_totals.get(prev).copied().unwrap_or(0.0);
        (c + self.smoothing) / (total + self.smoothing * v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaptionNll {
    /// Mean negative log-probability per token; `+∞` when some token has
    /// zero probability.
    pub value: f64,
    pub zero_probability: bool,
}

/// `-(1/|t|) Σ_i log p(t_i | t_<i)`.
pub fn caption_nll(tokens: &[String], model: &dyn NextTokenModel) -> Result<CaptionNll> {
    if tokens.is_empty() {
        return Err(Error::invalid("caption has no tokens"));
    }
    let mut sum = 0.0;
    for i in 0..tokens.len() {
        let p = model.prob(&tokens[..i], &tokens[i]);
        if !(p > 0.0) {
            return Ok(CaptionNll {
                value: f64::INFINITY,
                zero_probability: true,
            });
        }
        sum -= p.ln();
    }
    Ok(CaptionNll {
        value: sum / tokens.len() as f64,
        zero_probability: false,
    })
}

/// One training example drawn from a record: the chosen caption (if any)
/// and its source tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchEntry {
    pub record: usize,
    pub caption: Option<usize>,
    pub source: CaptionSource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitPlan {
    /// Split assigned to each record, in manifest order.
    pub splits: Vec<Split>,
    /// Training batches; only the last may be short.
    pub batches: Vec<Vec<BatchEntry>>,
}

impl SplitPlan {
    /// Manifest with the planned split tags written back.
    pub fn apply(&self, manifest: &DatasetManifest) -> DatasetManifest {
        let mut m = manifest.clone();
        for (r, s) in m.records.iter_mut().zip(&self.splits) {
            r.split = *s;
        }
        m
    }
}

/// Shuffles records into train/val/test by `ratios` (two entries mean
/// train/test), draws one caption per training record, and batches the
/// training examples with curated and wild sources interleaved in
/// proportion.
pub fn split_and_batch<R: Rng + ?Sized>(
    manifest: &DatasetManifest,
    ratios: &[f64],
    batch_size: usize,
    rng: &mut R,
) -> Result<SplitPlan> {
    let n = manifest.records.len();
    if n == 0 {
        return Err(Error::invalid("empty manifest"));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be >= 1"));
    }
    let ratios: [f64; 3] = match *ratios {
        [a, b] => [a, 0.0, b],
        [a, b, c] => [a, b, c],
        _ => return Err(Error::invalid("ratios need two or three entries")),
    };
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split ratios {ratios:?} must be >= 0 and sum to 1")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let n_train = (ratios[0] * n as f64).round() as usize;
    let n_val = ((ratios[1] * n as f64).round() as usize).min(n - n_train);
    let mut splits = vec![Split::Test; n];
    for (pos, &r) in order.iter().enumerate() {
        splits[r] = if pos < n_train {
            Split::Train
        } else if pos < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    let mut curated = Vec::new();
    let mut wild = Vec::new();
    for &r in order.iter().take(n_train) {
        let rec = &manifest.records[r];
        let entry = if rec.captions.is_empty() {
            BatchEntry {
                record: r,
                caption: None,
                source: CaptionSource::Wild,
            }
        } else {
            let c = rng.random_range(0..rec.captions.len());
            BatchEntry {
                record: r,
                caption: Some(c),
                source: rec.captions[c].source,
            }
        };
        match entry.source {
            CaptionSource::Curated => curated.push(entry),
            CaptionSource::Wild => wild.push(entry),
        }
    }
    let examples = interleave(&curated, &wild);
    let batches = examples.chunks(batch_size).map(<[BatchEntry]>::to_vec).collect();
    Ok(SplitPlan { splits, batches })
}

/// Merges two lists so that each prefix holds both in proportion to their
/// totals.
pub fn interleave<T: Copy>(a: &[T], b: &[T]) -> Vec<T> {
    let (na, nb) = (a.len(), b.len());
    let mut out = Vec::with_capacity(na + nb);
    let (mut i, mut j) = (0, 0);
    while i < na || j < nb {
        // take from `a` while its share of the output lags behind
        if j >= nb || (i < na && (i + 1) * nb <= (j + 1) * na) {
            out.push(a[i]);
            i += 1;
        } else {
            out.push(b[j]);
            j += 1;
        }
    }
    out
}
