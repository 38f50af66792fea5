//! Motion tokenizer: a strided temporal encoder, a nearest-neighbour
//! codebook with EMA statistics and dead-code reset, and a mirrored decoder.

use std::io::{Read, Write};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::diffusion::Token;
use crate::error::{Error, Result};
use crate::io::{read_checkpoint, write_checkpoint};
use crate::motion_repr::MotionClip;
use crate::nn::{Activation, Linear, Mat, Optimizer, OptimizerConfig, Parameters};

/// Frames folded into one token: two stride-2 blocks.
pub const STRIDE: usize = 4;
const COUNT_EPS: f64 = 1e-10;

/// `K` code vectors with their EMA assignment counts and sums.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    /// `K × d`
    pub entries: Mat,
    pub ema_counts: Vec<f64>,
    /// `K × d`
    pub ema_sums: Mat,
}

impl Codebook {
    /// Fresh codebook; every code starts with unit count and its own vector
    /// as the running sum.
    pub fn new(entries: Mat) -> Result<Self> {
        if entries.nrows() < 1 || entries.ncols() < 1 {
            return Err(Error::invalid("codebook needs at least one code of width >= 1"));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("codebook entries must be finite"));
        }
        Ok(Self {
            ema_counts: vec![1.0; entries.nrows()],
            ema_sums: entries.clone(),
            entries,
        })
    }

    pub fn num_codes(&self) -> usize {
        self.entries.nrows()
    }

    pub fn dim(&self) -> usize {
        self.entries.ncols()
    }

    /// One EMA step:
    /// `N_k ← λ N_k + (1-λ) n_k`, `S_k ← λ S_k + (1-λ) Σ z_i`,
    /// `c_k ← S_k / max(N_k, ε)`.
    pub fn ema_update(&mut self, z: &Mat, tokens: &[Token], decay: f64) -> Result<()> {
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::invalid(format!("EMA decay {decay} outside (0, 1)")));
        }
        if z.ncols() != self.dim() || z.nrows() != tokens.len() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: z.ncols(),
                context: "EMA batch",
            });
        }
        let k = self.num_codes();
        let mut counts = vec![0.0; k];
        let mut sums = Mat::zeros(k, self.dim());
        for (i, &tok) in tokens.iter().enumerate() {
            let t = tok as usize;
            if t >= k {
                return Err(Error::invalid(format!("token {tok} outside codebook")));
            }
            counts[t] += 1.0;
            let mut row = sums.row_mut(t);
            row += z.row(i);
        }
        for c in 0..k {
            self.ema_counts[c] = decay * self.ema_counts[c] + (1.0 - decay) * counts[c];
            let mut s = self.ema_sums.row_mut(c);
            s *= decay;
            s += sums.row(c) * (1.0 - decay);
            let denom = self.ema_counts[c].max(COUNT_EPS);
            let entry = self.ema_sums.row(c) / denom;
            self.entries.row_mut(c).copy_from(&entry);
        }
        Ok(())
    }

    /// Re-seeds every code whose EMA count is below `threshold` with a
    /// uniformly drawn row of `z`, resetting its statistics to count 1.
    /// Returns the number of codes reset.
    pub fn reset_dead_codes<R: Rng + ?Sized>(&mut self, z: &Mat, threshold: f64, rng: &mut R) -> Result<usize> {
        if z.nrows() == 0 {
            return Err(Error::invalid("reset needs a non-empty batch"));
        }
        if z.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: z.ncols(),
                context: "reset batch width",
            });
        }
        let mut resets = 0;
        for c in 0..self.num_codes() {
            if self.ema_counts[c] < threshold {
                let r = rng.random_range(0..z.nrows());
                let row = z.row(r).clone_owned();
                self.entries.row_mut(c).copy_from(&row);
                self.ema_sums.row_mut(c).copy_from(&row);
                self.ema_counts[c] = 1.0;
                resets += 1;
            }
        }
        Ok(resets)
    }
}

/// Nearest-code assignment of every row of `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizationResult {
    pub tokens: Vec<Token>,
    /// `n × d`
    pub quantized: Mat,
    /// Euclidean distances, `n × K`.
    pub distances: Mat,
}

/// Maps each row of `z` to its nearest codebook entry (ties go to the lowest index).
pub fn quantize(z: &Mat, book: &Codebook) -> Result<QuantizationResult> {
    if z.ncols() != book.dim() {
        return Err(Error::DimensionMismatch {
            expected: book.dim(),
            actual: z.ncols(),
            context: "quantizer input width",
        });
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite encoder output".into()));
    }
    let (n, k) = (z.nrows(), book.num_codes());
    let mut distances = Mat::zeros(n, k);
    let mut tokens = Vec::with_capacity(n);
    let mut quantized = Mat::zeros(n, book.dim());
    for i in 0..n {
        let mut best = (f64::INFINITY, 0usize);
        for c in 0..k {
            let d2: f64 = z
                .row(i)
                .iter()
                .zip(book.entries.row(c).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            distances[(i, c)] = d2.sqrt();
            if d2 < best.0 {
                best = (d2, c);
            }
        }
        tokens.push(best.1 as Token);
        quantized.row_mut(i).copy_from(&book.entries.row(best.1));
    }
    Ok(QuantizationResult {
        tokens,
        quantized,
        distances,
    })
}

/// The four terms of the tokenizer objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VqLoss {
    pub total: f64,
    /// Mean absolute reconstruction error.
    pub recon: f64,
    /// Mean squared `z - sg[z_q]`; its gradient reaches the encoder only.
    pub embed: f64,
    /// `β ×` mean squared `sg[z] - z_q`; its gradient would reach the codebook only.
    pub commit: f64,
}

pub fn vq_loss(m: &Mat, reconstruction: &Mat, z: &Mat, zq: &Mat, beta: f64) -> Result<VqLoss> {
    if m.shape() != reconstruction.shape() || z.shape() != zq.shape() {
        return Err(Error::invalid("vq_loss operands must have matching shapes"));
    }
    let recon = if m.is_empty() {
        0.0
    } else {
        (m - reconstruction).abs().sum() / m.len() as f64
    };
    let sq = if z.is_empty() {
        0.0
    } else {
        (z - zq).norm_squared() / z.len() as f64
    };
    let embed = sq;
    let commit = beta * sq;
    Ok(VqLoss {
        total: recon + embed + commit,
        recon,
        embed,
        commit,
    })
}

/// Pairs consecutive rows: `(2M) × w → M × 2w`.
fn fold_pairs(x: &Mat) -> Mat {
    let (rows, w) = (x.nrows() / 2, x.ncols());
    Mat::from_fn(rows, 2 * w, |i, j| x[(2 * i + j / w, j % w)])
}

/// Inverse of [`fold_pairs`]: `M × 2w → (2M) × w`.
fn unfold_pairs(y: &Mat, w: usize) -> Mat {
    Mat::from_fn(2 * y.nrows(), w, |i, j| y[(i / 2, (i % 2) * w + j)])
}

/// Encoder, decoder and fixed input normalization of the tokenizer.
#[derive(Debug, Clone, PartialEq)]
pub struct VqModel {
    pub enc_in: Linear,
    pub enc_out: Linear,
    pub dec_in: Linear,
    pub dec_out: Linear,
    pub activation: Activation,
    /// `1 × D` per-channel mean and scale applied before encoding.
    pub norm_mean: Mat,
    pub norm_std: Mat,
}

/// Activations kept for the backward pass.
pub struct EncoderTrace {
    x: Mat,
    pre1: Mat,
    folded1: Mat,
    pub z: Mat,
}

pub struct DecoderTrace {
    zq: Mat,
    pre1: Mat,
    act1: Mat,
    pub output: Mat,
}

impl VqModel {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, hidden: usize, code_dim: usize, rng: &mut R) -> Self {
        Self {
            enc_in: Linear::new(2 * input_dim, hidden, rng),
            enc_out: Linear::new(2 * hidden, code_dim, rng),
            dec_in: Linear::new(code_dim, 2 * hidden, rng),
            dec_out: Linear::new(hidden, 2 * input_dim, rng),
            activation: Activation::Silu,
            norm_mean: Mat::zeros(1, input_dim),
            norm_std: Mat::from_element(1, input_dim, 1.0),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.norm_mean.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.enc_in.output_dim()
    }

    pub fn code_dim(&self) -> usize {
        self.enc_out.output_dim()
    }

    /// Tokens per frame.
    pub fn downsample_rate(&self) -> f64 {
        1.0 / STRIDE as f64
    }

    /// Sets the normalization from corpus statistics; near-constant
    /// channels keep unit scale.
    pub fn fit_normalization(&mut self, clips: &[MotionClip]) {
        let d = self.input_dim();
        let mut sum = vec![0.0; d];
        let mut sq = vec![0.0; d];
        let mut n = 0.0;
        for c in clips {
            for row in c.features.row_iter() {
                for (j, v) in row.iter().enumerate() {
                    sum[j] += v;
                    sq[j] += v * v;
                }
                n += 1.0;
            }
        }
        if n == 0.0 {
            return;
        }
        for j in 0..d {
            let mean = sum[j] / n;
            let var = (sq[j] / n - mean * mean).max(0.0);
            self.norm_mean[(0, j)] = mean;
            self.norm_std[(0, j)] = if var.sqrt() > 1e-3 { var.sqrt() } else { 1.0 };
        }
    }

    pub fn normalize(&self, x: &Mat) -> Mat {
        Mat::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - self.norm_mean[(0, j)]) / self.norm_std[(0, j)])
    }

    pub fn denormalize(&self, x: &Mat) -> Mat {
        Mat::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] * self.norm_std[(0, j)] + self.norm_mean[(0, j)])
    }

    /// Encodes normalized frames; `x.nrows()` must be a multiple of [`STRIDE`].
    pub fn encode_trace(&self, x: &Mat) -> EncoderTrace {
        let pre1 = self.enc_in.forward(&fold_pairs(x));
        let folded1 = fold_pairs(&self.activation.forward(&pre1));
        let z = self.enc_out.forward(&folded1);
        EncoderTrace {
            x: x.clone(),
            pre1,
            folded1,
            z,
        }
    }

    /// Decodes code vectors into normalized frames.
    pub fn decode_trace(&self, zq: &Mat) -> DecoderTrace {
        let pre1 = unfold_pairs(&self.dec_in.forward(zq), self.hidden());
        let act1 = self.activation.forward(&pre1);
        let output = unfold_pairs(&self.dec_out.forward(&act1), self.input_dim());
        DecoderTrace {
            zq: zq.clone(),
            pre1,
            act1,
            output,
        }
    }

    /// Returns `dL/dz_q` given `dL/doutput`.
    pub fn decoder_backward(&self, trace: &DecoderTrace, grad_out: &Mat, grads: &mut VqModel) -> Mat {
        let g = fold_pairs(grad_out);
        let g_act = self.dec_out.backward(&trace.act1, &g, &mut grads.dec_out);
        let g_pre = self.activation.backward(&trace.pre1, &g_act);
        self.dec_in.backward(&trace.zq, &fold_pairs(&g_pre), &mut grads.dec_in)
    }

    pub fn encoder_backward(&self, trace: &EncoderTrace, grad_z: &Mat, grads: &mut VqModel) {
        let g_folded = self.enc_out.backward(&trace.folded1, grad_z, &mut grads.enc_out);
        let g_act = unfold_pairs(&g_folded, self.hidden());
        let g_pre = self.activation.backward(&trace.pre1, &g_act);
        let x_folded = fold_pairs(&trace.x);
        self.enc_in.backward(&x_folded, &g_pre, &mut grads.enc_in);
    }

    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.fill_zero();
        g
    }

    /// Encoder output for a clip (normalization applied, trailing frames
    /// beyond a multiple of [`STRIDE`] dropped).
    pub fn encode(&self, clip: &MotionClip) -> Result<Mat> {
        let x = self.prepare(clip)?;
        Ok(self.encode_trace(&x).z)
    }

    fn prepare(&self, clip: &MotionClip) -> Result<Mat> {
        if clip.dim() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: clip.dim(),
                context: "tokenizer input width",
            });
        }
        if clip.len() < STRIDE {
            return Err(Error::invalid(format!(
                "clip of {} frames is shorter than one {STRIDE}-frame window",
                clip.len()
            )));
        }
        let usable = clip.len() / STRIDE * STRIDE;
        Ok(self.normalize(&clip.features.rows(0, usable).into_owned()))
    }

    pub fn write_to<W: Write>(&self, book: &Codebook, w: &mut W) -> Result<()> {
        let header = json!({
            "format": "MVQ1",
            "K": book.num_codes(),
            "d": book.dim(),
            "eta": self.downsample_rate(),
            "input_dim": self.input_dim(),
            "hidden": self.hidden(),
            "activation": self.activation,
        });
        let counts = Mat::from_row_slice(1, book.num_codes(), &book.ema_counts);
        let mut tensors = self.tensors();
        tensors.push(("norm_mean".into(), &self.norm_mean));
        tensors.push(("norm_std".into(), &self.norm_std));
        tensors.push(("codebook.entries".into(), &book.entries));
        tensors.push(("codebook.ema_counts".into(), &counts));
        tensors.push(("codebook.ema_sums".into(), &book.ema_sums));
        write_checkpoint(w, b"MVQ1", header, &tensors)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<(Self, Codebook)> {
        const F: &str = "MVQ1";
        let mut ck = read_checkpoint(r, b"MVQ1", F)?;
        let activation: Activation = serde_json::from_value(
            ck.header
                .get("activation")
                .cloned()
                .ok_or_else(|| Error::format(F, "missing activation"))?,
        )?;
        let mut lin = |name: &str| -> Result<Linear> {
            Ok(Linear {
                weight: ck.take(&format!("{name}.weight"), F)?,
                bias: ck.take(&format!("{name}.bias"), F)?,
            })
        };
        let model = VqModel {
            enc_in: lin("enc_in")?,
            enc_out: lin("enc_out")?,
            dec_in: lin("dec_in")?,
            dec_out: lin("dec_out")?,
            activation,
            norm_mean: ck.take("norm_mean", F)?,
            norm_std: ck.take("norm_std", F)?,
        };
        let counts = ck.take("codebook.ema_counts", F)?;
        let book = Codebook {
            entries: ck.take("codebook.entries", F)?,
            ema_counts: counts.iter().copied().collect(),
            ema_sums: ck.take("codebook.ema_sums", F)?,
        };
        if book.dim() != model.code_dim() || ck.usize_field("K", F)? != book.num_codes() {
            return Err(Error::format(F, "codebook shape disagrees with header"));
        }
        Ok((model, book))
    }
}

impl Parameters for VqModel {
    fn tensors(&self) -> Vec<(String, &Mat)> {
        let mut out = Vec::new();
        for (name, l) in [
            ("enc_in", &self.enc_in),
            ("enc_out", &self.enc_out),
            ("dec_in", &self.dec_in),
            ("dec_out", &self.dec_out),
        ] {
            out.push((format!("{name}.weight"), &l.weight));
            out.push((format!("{name}.bias"), &l.bias));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut out = Vec::new();
        for l in [&mut self.enc_in, &mut self.enc_out, &mut self.dec_in, &mut self.dec_out] {
            let [w, b] = l.tensors_mut();
            out.push(w);
            out.push(b);
        }
        out
    }
}

/// Tokenizes a clip: `floor(N / 4)` codes.
pub fn encode_to_tokens(clip: &MotionClip, model: &VqModel, book: &Codebook) -> Result<Vec<Token>> {
    Ok(quantize(&model.encode(clip)?, book)?.tokens)
}

/// Decodes codes back to a clip of `4 n` frames at `fps`.
pub fn decode_from_tokens(tokens: &[Token], model: &VqModel, book: &Codebook, fps: u32) -> Result<MotionClip> {
    if tokens.is_empty() {
        return Err(Error::invalid("empty token sequence"));
    }
    let mut zq = Mat::zeros(tokens.len(), book.dim());
    for (i, &t) in tokens.iter().enumerate() {
        if t as usize >= book.num_codes() {
            return Err(Error::MaskToken { position: i });
        }
        zq.row_mut(i).copy_from(&book.entries.row(t as usize));
    }
    let out = model.decode_trace(&zq).output;
    Ok(MotionClip::new(model.denormalize(&out), fps))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VqTrainConfig {
    pub num_codes: usize,
    pub code_dim: usize,
    pub hidden: usize,
    /// Weight of the commitment term (reported; the codebook learns by EMA).
    pub beta: f64,
    pub ema_decay: f64,
    pub reset_threshold: f64,
    pub reset_every: usize,
    pub steps: usize,
    pub batch_size: usize,
    /// Frames per training window (rounded down to a multiple of 4).
    pub window: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for VqTrainConfig {
    fn default() -> Self {
        Self {
            num_codes: 512,
            code_dim: 512,
            hidden: 512,
            beta: 0.25,
            ema_decay: 0.99,
            reset_threshold: 1.0,
            reset_every: 20,
            steps: 2000,
            batch_size: 16,
            window: 64,
            optimizer: OptimizerConfig::adam(2e-3, 0.0),
            seed: 0,
        }
    }
}

impl VqTrainConfig {
    /// Small profile for desk-scale runs.
    pub fn toy() -> Self {
        Self {
            num_codes: 32,
            code_dim: 16,
            hidden: 64,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VqLossRecord {
    pub step: usize,
    pub loss: VqLoss,
    pub resets: usize,
}

#[derive(Debug, Clone)]
pub struct VqTrainOutcome {
    pub model: VqModel,
    pub codebook: Codebook,
    pub curve: Vec<VqLossRecord>,
}

fn sample_window<R: Rng + ?Sized>(clips: &[&MotionClip], window: usize, rng: &mut R) -> Mat {
    let clip = clips.choose(rng).expect("non-empty corpus");
    let len = (clip.len().min(window) / STRIDE) * STRIDE;
    let start = rng.random_range(0..=clip.len() - len);
    clip.features.rows(start, len).into_owned()
}

/// One forward/backward pass over a batch of normalized windows. Returns
/// the averaged loss, the stacked encoder outputs and their tokens.
pub fn batch_gradient(
    model: &VqModel,
    book: &Codebook,
    windows: &[Mat],
    beta: f64,
    grads: &mut VqModel,
) -> Result<(VqLoss, Mat, Vec<Token>)> {
    let b = windows.len() as f64;
    let mut total = VqLoss {
        total: 0.0,
        recon: 0.0,
        embed: 0.0,
        commit: 0.0,
    };
    let mut all_z = Vec::new();
    let mut all_tokens = Vec::new();
    for x in windows {
        let enc = model.encode_trace(x);
        let q = quantize(&enc.z, book)?;
        let dec = model.decode_trace(&q.quantized);
        let loss = vq_loss(x, &dec.output, &enc.z, &q.quantized, beta)?;
        total.total += loss.total / b;
        total.recon += loss.recon / b;
        total.embed += loss.embed / b;
        total.commit += loss.commit / b;

        let n_out = x.len() as f64;
        let g_out = (&dec.output - x).map(|d| d.signum() / (n_out * b));
        // straight-through: the decoder's input gradient is handed to z
        let mut g_z = model.decoder_backward(&dec, &g_out, grads);
        g_z += (&enc.z - &q.quantized) * (2.0 / (enc.z.len() as f64 * b));
        model.encoder_backward(&enc, &g_z, grads);

        all_z.push(enc.z);
        all_tokens.extend(q.tokens);
    }
    let d = book.dim();
    let rows: usize = all_z.iter().map(Mat::nrows).sum();
    let mut stacked = Mat::zeros(rows, d);
    let mut r = 0;
    for z in all_z {
        stacked.rows_mut(r, z.nrows()).copy_from(&z);
        r += z.nrows();
    }
    Ok((total, stacked, all_tokens))
}

/// Trains encoder and decoder by gradient descent with straight-through
/// quantization while the codebook follows EMA updates and periodic resets.
pub fn train_toy_vq(corpus: &[MotionClip], config: &VqTrainConfig) -> Result<VqTrainOutcome> {
    let usable: Vec<&MotionClip> = corpus.iter().filter(|c| c.len() >= STRIDE).collect();
    if usable.is_empty() {
        return Err(Error::invalid("training corpus has no clip of at least 4 frames"));
    }
    if config.num_codes < 1 || config.batch_size < 1 || config.window < STRIDE {
        return Err(Error::invalid("invalid tokenizer training configuration"));
    }
    let dim = usable[0].dim();
    if usable.iter().any(|c| c.dim() != dim) {
        return Err(Error::invalid("corpus clips differ in feature width"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = VqModel::new(dim, config.hidden, config.code_dim, &mut rng);
    model.fit_normalization(corpus);

    // seed the codebook from encoder outputs of a first batch
    let init: Vec<Mat> = (0..config.batch_size)
        .map(|_| model.normalize(&sample_window(&usable, config.window, &mut rng)))
        .collect();
    let z0: Vec<Mat> = init.iter().map(|x| model.encode_trace(x).z).collect();
    let pool: Vec<Vec<f64>> = z0
        .iter()
        .flat_map(|z| z.row_iter().map(|r| r.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>())
        .collect();
    let entries = Mat::from_fn(config.num_codes, config.code_dim, |_, _| 0.0);
    let mut book = Codebook::new(entries)?;
    for c in 0..config.num_codes {
        let row = pool.choose(&mut rng).expect("non-empty pool");
        for (j, v) in row.iter().enumerate() {
            book.entries[(c, j)] = *v;
            book.ema_sums[(c, j)] = *v;
        }
    }

    let mut optimizer = Optimizer::new(config.optimizer, &model);
    let mut grads = model.zeros_like();
    let mut curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let windows: Vec<Mat> = (0..config.batch_size)
            .map(|_| model.normalize(&sample_window(&usable, config.window, &mut rng)))
            .collect();
        grads.fill_zero();
        let (loss, z, tokens) = batch_gradient(&model, &book, &windows, config.beta, &mut grads)?;
        if !loss.total.is_finite() || !grads.all_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!(
                    "loss {:?}, last finite loss {:?}",
                    loss,
                    curve.last().map(|r: &VqLossRecord| r.loss.total)
                ),
            });
        }
        optimizer.step(&mut model, &grads);
        if config.num_codes > 1 {
            book.ema_update(&z, &tokens, config.ema_decay)?;
        }
        let mut resets = 0;
        if config.num_codes > 1 && config.reset_every > 0 && (step + 1) % config.reset_every == 0 {
            resets = book.reset_dead_codes(&z, config.reset_threshold, &mut rng)?;
        }
        curve.push(VqLossRecord { step, loss, resets });
    }
    Ok(VqTrainOutcome {
        model,
        codebook: book,
        curve,
    })
}

/// Mean absolute reconstruction error (original units) of
/// `decode(encode(clip))` over the usable frames of each clip.
pub fn reconstruction_error(model: &VqModel, book: &Codebook, clips: &[MotionClip]) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for clip in clips {
        let tokens = encode_to_tokens(clip, model, book)?;
        let rec = decode_from_tokens(&tokens, model, book, clip.fps)?;
        let orig = clip.features.rows(0, rec.len());
        sum += (orig - &rec.features).abs().sum();
        count += rec.features.len();
    }
    Ok(sum / count.max(1) as f64)
}
