//! Multi-layer text features and their learnable fusion into one condition
//! vector: `c = Σ_i a_i F_i(e_i)`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::{expect_magic, read_f32s, read_u32, write_f32s, write_u32};
use crate::nn::{Activation, Linear, Mat, Parameters};

/// Layer indices of the default text-encoder tap points.
pub const DEFAULT_LAYERS: [usize; 4] = [7, 9, 11, 12];
pub const DEFAULT_COND_DIM: usize = 256;
const EMB_VERSION: u32 = 1;

/// One pooled feature vector per selected layer.
pub type LayerFeatureSet = BTreeMap<usize, Vec<f64>>;

/// The condition fed to the denoiser; `Null` is the unconditional `∅`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ConditionEmbedding {
    Null,
    Vector(Vec<f64>),
}

impl ConditionEmbedding {
    pub fn is_null(&self) -> bool {
        matches!(self, Self::Null)
    }

    pub fn as_slice(&self) -> Option<&[f64]> {
        match self {
            Self::Null => None,
            Self::Vector(v) => Some(v),
        }
    }
}

/// Lowercased words with surrounding punctuation stripped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Anything that turns a caption into per-layer features.
pub trait TextEncoderProvider {
    fn layers(&self) -> Vec<usize>;
    fn width(&self, layer: usize) -> Option<usize>;
    fn embed(&self, text: &str) -> Result<LayerFeatureSet>;
}

/// Built-in provider: the r-th selected layer (r = 1, 2, ...) mean-pools
/// seeded Gaussian vectors of the caption's r-grams, so deeper layers see
/// longer word windows. Captions shorter than r words contribute one gram
/// made of all their words.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NgramProvider {
    pub seed: u64,
    pub layers: Vec<usize>,
    pub width: usize,
}

impl Default for NgramProvider {
    fn default() -> Self {
        Self {
            seed: 0,
            layers: DEFAULT_LAYERS.to_vec(),
            width: 64,
        }
    }
}

impl NgramProvider {
    pub fn new(seed: u64, layers: Vec<usize>, width: usize) -> Self {
        Self { seed, layers, width }
    }

    /// Gram length used at the given selected layer.
    pub fn depth(&self, layer: usize) -> Option<usize> {
        self.layers.iter().position(|&l| l == layer).map(|p| p + 1)
    }

    /// The projection column of one gram at one depth.
    pub fn gram_vector(&self, depth: usize, gram: &[String]) -> Vec<f64> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update((depth as u64).to_le_bytes());
        for w in gram {
            h.update((w.len() as u64).to_le_bytes());
            h.update(w.as_bytes());
        }
        let digest: [u8; 32] = h.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(digest);
        let scale = 1.0 / (self.width as f64).sqrt();
        (0..self.width)
            .map(|_| {
                let g: f64 = StandardNormal.sample(&mut rng);
                scale * g
            })
            .collect()
    }

    pub fn grams(words: &[String], depth: usize) -> Vec<&[String]> {
        if words.len() < depth {
            vec![words]
        } else {
            words.windows(depth).collect()
        }
    }
}

impl TextEncoderProvider for NgramProvider {
    fn layers(&self) -> Vec<usize> {
        self.layers.clone()
    }

    fn width(&self, layer: usize) -> Option<usize> {
        self.depth(layer).map(|_| self.width)
    }

    fn embed(&self, text: &str) -> Result<LayerFeatureSet> {
        let words = tokenize(text);
        if words.is_empty() {
            return Err(Error::invalid("cannot embed empty text"));
        }
        let mut out = LayerFeatureSet::new();
        for (r, &layer) in self.layers.iter().enumerate() {
            let grams = Self::grams(&words, r + 1);
            let mut acc = vec![0.0; self.width];
            for g in &grams {
                for (a, v) in acc.iter_mut().zip(self.gram_vector(r + 1, g)) {
                    *a += v;
                }
            }
            let n = grams.len() as f64;
            out.insert(layer, acc.into_iter().map(|v| v / n).collect());
        }
        Ok(out)
    }
}

/// Features precomputed by an external encoder, stored in an `EMB1` file.
///
/// Layout: `EMB1`, `u32` version, `u32` record count M, `u32` |S|, |S| pairs
/// of `u32` (layer, width), then M records of `u32` text length, UTF-8 text
/// and the f32 vectors of every layer in order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PrecomputedProvider {
    pub layers: Vec<(usize, usize)>,
    pub records: BTreeMap<String, LayerFeatureSet>,
}

impl PrecomputedProvider {
    pub fn new(layers: Vec<(usize, usize)>) -> Self {
        Self {
            layers,
            records: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, text: &str, feats: LayerFeatureSet) -> Result<()> {
        for &(layer, width) in &self.layers {
            match feats.get(&layer) {
                None => return Err(Error::MissingLayer(layer)),
                Some(v) if v.len() != width => {
                    return Err(Error::DimensionMismatch {
                        expected: width,
                        actual: v.len(),
                        context: "precomputed layer width",
                    })
                }
                Some(_) => {}
            }
        }
        self.records.insert(text.to_string(), feats);
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(b"EMB1")?;
        write_u32(w, EMB_VERSION)?;
        write_u32(w, self.records.len() as u32)?;
        write_u32(w, self.layers.len() as u32)?;
        for &(layer, width) in &self.layers {
            write_u32(w, layer as u32)?;
            write_u32(w, width as u32)?;
        }
        for (text, feats) in &self.records {
            write_u32(w, text.len() as u32)?;
            w.write_all(text.as_bytes())?;
            for (layer, _) in &self.layers {
                write_f32s(w, feats[layer].iter().copied())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        const F: &str = "EMB1";
        expect_magic(r, b"EMB1", F)?;
        let version = read_u32(r)?;
        if version != EMB_VERSION {
            return Err(Error::format(F, format!("unsupported version {version}")));
        }
        let m = read_u32(r)? as usize;
        let s = read_u32(r)? as usize;
        let mut layers = Vec::with_capacity(s);
        for _ in 0..s {
            layers.push((read_u32(r)? as usize, read_u32(r)? as usize));
        }
        let mut out = Self::new(layers);
        for _ in 0..m {
            let len = read_u32(r)? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf)?;
            let text = String::from_utf8(buf).map_err(|e| Error::format(F, e.to_string()))?;
            let mut feats = LayerFeatureSet::new();
            for &(layer, width) in &out.layers {
                feats.insert(layer, read_f32s(r, width)?);
            }
            out.records.insert(text, feats);
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

impl TextEncoderProvider for PrecomputedProvider {
    fn layers(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.0).collect()
    }

    fn width(&self, layer: usize) -> Option<usize> {
        self.layers.iter().find(|l| l.0 == layer).map(|l| l.1)
    }

    fn embed(&self, text: &str) -> Result<LayerFeatureSet> {
        if tokenize(text).is_empty() {
            return Err(Error::invalid("cannot embed empty text"));
        }
        self.records
            .get(text)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("no precomputed features for {text:?}")))
    }
}

/// `F_i`: affine, nonlinearity, affine.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionBlock {
    pub first: Linear,
    pub second: Linear,
    pub activation: Activation,
}

impl ProjectionBlock {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, activation: Activation, rng: &mut R) -> Self {
        Self {
            first: Linear::new(input, hidden, rng),
            second: Linear::new(hidden, output, rng),
            activation,
        }
    }

    /// Identity map when the activation is [`Activation::Identity`].
    pub fn identity(width: usize, activation: Activation) -> Self {
        Self {
            first: Linear::identity(width),
            second: Linear::identity(width),
            activation,
        }
    }

    pub fn forward(&self, x: &Mat) -> (Mat, Mat) {
        let pre = self.first.forward(x);
        let out = self.second.forward(&self.activation.forward(&pre));
        (pre, out)
    }

    fn backward(&self, x: &Mat, pre: &Mat, grad_out: &Mat, grad: &mut ProjectionBlock) {
        let act = self.activation.forward(pre);
        let g_act = self.second.backward(&act, grad_out, &mut grad.second);
        let g_pre = self.activation.backward(pre, &g_act);
        self.first.backward(x, &g_pre, &mut grad.first);
    }
}

/// Learnable weights `a` (`1 × |S|`) and one projection block per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregator {
    pub layers: Vec<usize>,
    pub weights: Mat,
    pub blocks: Vec<ProjectionBlock>,
}

/// Intermediate values of one aggregation, for the backward pass.
#[derive(Debug, Clone)]
pub struct AggregateTrace {
    inputs: Vec<Mat>,
    pre: Vec<Mat>,
    outputs: Vec<Mat>,
}

impl Aggregator {
    /// `a_i = 1/|S|`, hidden width `2 × cond_dim`.
    pub fn new<R: Rng + ?Sized>(layers: &[(usize, usize)], cond_dim: usize, activation: Activation, rng: &mut R) -> Self {
        let s = layers.len();
        Self {
            layers: layers.iter().map(|l| l.0).collect(),
            weights: Mat::from_element(1, s, 1.0 / s.max(1) as f64),
            blocks: layers
                .iter()
                .map(|&(_, w)| ProjectionBlock::new(w, 2 * cond_dim, cond_dim, activation, rng))
                .collect(),
        }
    }

    /// Builds an aggregator matching a provider's layers and widths.
    pub fn for_provider<P: TextEncoderProvider + ?Sized, R: Rng + ?Sized>(
        provider: &P,
        cond_dim: usize,
        rng: &mut R,
    ) -> Self {
        let layers: Vec<(usize, usize)> = provider
            .layers()
            .into_iter()
            .map(|l| (l, provider.width(l).unwrap_or(0)))
            .collect();
        Self::new(&layers, cond_dim, Activation::Silu, rng)
    }

    pub fn cond_dim(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.second.output_dim())
    }

    pub fn layer_widths(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .zip(&self.blocks)
            .map(|(&l, b)| (l, b.first.input_dim()))
            .collect()
    }

    pub fn forward(&self, feats: &LayerFeatureSet) -> Result<(Vec<f64>, AggregateTrace)> {
        let mut c = Mat::zeros(1, self.cond_dim());
        let mut trace = AggregateTrace {
            inputs: Vec::new(),
            pre: Vec::new(),
            outputs: Vec::new(),
        };
        for (i, (&layer, block)) in self.layers.iter().zip(&self.blocks).enumerate() {
            let v = feats.get(&layer).ok_or(Error::MissingLayer(layer))?;
            if v.len() != block.first.input_dim() {
                return Err(Error::DimensionMismatch {
                    expected: block.first.input_dim(),
                    actual: v.len(),
                    context: "layer feature width",
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numerical(format!("non-finite features at layer {layer}")));
            }
            let x = Mat::from_row_slice(1, v.len(), v);
            let (pre, out) = block.forward(&x);
            c += &out * self.weights[(0, i)];
            trace.inputs.push(x);
            trace.pre.push(pre);
            trace.outputs.push(out);
        }
        Ok((c.iter().copied().collect(), trace))
    }

    /// `c = Σ_i a_i F_i(feats[i])`.
    pub fn aggregate(&self, feats: &LayerFeatureSet) -> Result<ConditionEmbedding> {
        Ok(ConditionEmbedding::Vector(self.forward(feats)?.0))
    }

    /// Accumulates parameter gradients given `dL/dc`.
    pub fn backward(&self, trace: &AggregateTrace, grad_c: &[f64], grads: &mut Aggregator) {
        let g = Mat::from_row_slice(1, grad_c.len(), grad_c);
        for (i, block) in self.blocks.iter().enumerate() {
            grads.weights[(0, i)] += trace.outputs[i].dot(&g);
            let g_out = &g * self.weights[(0, i)];
            block.backward(&trace.inputs[i], &trace.pre[i], &g_out, &mut grads.blocks[i]);
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.fill_zero();
        g
    }
}

impl Parameters for Aggregator {
    fn tensors(&self) -> Vec<(String, &Mat)> {
        let mut out = vec![("hsa.weights".to_string(), &self.weights)];
        for (layer, b) in self.layers.iter().zip(&self.blocks) {
            out.push((format!("hsa.layer{layer}.first.weight"), &b.first.weight));
            out.push((format!("hsa.layer{layer}.first.bias"), &b.first.bias));
            out.push((format!("hsa.layer{layer}.second.weight"), &b.second.weight));
            out.push((format!("hsa.layer{layer}.second.bias"), &b.second.bias));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut out = vec![&mut self.weights];
        for b in &mut self.blocks {
            let [w1, b1] = b.first.tensors_mut();
            let [w2, b2] = b.second.tensors_mut();
            out.extend([w1, b1, w2, b2]);
        }
        out
    }
}
