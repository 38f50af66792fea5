//! Conditional denoiser over token sequences.
//!
//! The network predicts `p(u_0 | u_t, c)`; the reverse step
//! `p(u_{t-1} | u_t, c)` is its mixture with the analytic posterior. A small
//! residual network with local neighbour mixing stands in for a transformer.

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::diffusion::{CategoricalState, NoiseSchedule, PosteriorColumns, Token, PROB_FLOOR};
use crate::error::{Error, Result};
use crate::hsa::{AggregateTrace, Aggregator, ConditionEmbedding, LayerFeatureSet, NgramProvider};
use crate::io::{read_checkpoint, write_checkpoint};
use crate::nn::{relative_error, Activation, Linear, Mat, Optimizer, OptimizerConfig, Parameters};

pub const AUX_WEIGHT: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptionSource {
    Curated,
    Wild,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub num_codes: usize,
    pub hidden: usize,
    pub cond_dim: usize,
    pub blocks: usize,
    /// Neighbours on each side mixed by every block.
    pub radius: usize,
    /// Training step count `T`; time is embedded as `t / T`.
    pub steps: usize,
    pub activation: Activation,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            num_codes: 512,
            hidden: 64,
            cond_dim: 256,
            blocks: 2,
            radius: 2,
            steps: 100,
            activation: Activation::Silu,
        }
    }
}

/// `x ← x + out(act(mix(window(x))))`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixBlock {
    pub mix: Linear,
    pub out: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiser {
    pub config: DenoiserConfig,
    /// `(K+1) × h`; the last row embeds the mask token.
    pub token_emb: Mat,
    pub time_proj: Linear,
    pub cond_proj: Linear,
    /// `1 × h` stand-in for the projected condition when it is `∅`.
    pub null_cond: Mat,
    pub blocks: Vec<MixBlock>,
    /// `h × K`: no output column for the mask token.
    pub head: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserInput {
    pub tokens: Vec<Token>,
    pub t: usize,
    pub cond: ConditionEmbedding,
}

/// Sinusoidal embedding of `1000 t / T`.
pub fn time_embedding(t: usize, steps: usize, width: usize) -> Vec<f64> {
    let pos = 1000.0 * t as f64 / steps as f64;
    let half = width / 2;
    let mut out = vec![0.0; width];
    for i in 0..half {
        let f = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (pos * f).sin();
        out[half + i] = (pos * f).cos();
    }
    out
}

/// Activations of one packed forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    offsets: Vec<usize>,
    tokens: Vec<Token>,
    temb: Mat,
    cond_rows: Mat,
    cond_index: Vec<Option<usize>>,
    xs: Vec<Mat>,
    windows: Vec<Mat>,
    pres: Vec<Mat>,
    acts: Vec<Mat>,
    /// `N × K` softmax output over the packed positions.
    pub p0: Mat,
}

impl ForwardTrace {
    pub fn sequence(&self, s: usize) -> std::ops::Range<usize> {
        self.offsets[s]..self.offsets[s + 1]
    }

    pub fn num_sequences(&self) -> usize {
        self.offsets.len() - 1
    }
}

fn window(x: &Mat, offsets: &[usize], radius: usize) -> Mat {
    let h = x.ncols();
    let span = 2 * radius + 1;
    let mut w = Mat::zeros(x.nrows(), span * h);
    for s in 0..offsets.len() - 1 {
        let (lo, hi) = (offsets[s], offsets[s + 1]);
        for i in lo..hi {
            for o in 0..span {
                let j = i as isize + o as isize - radius as isize;
                if j >= lo as isize && j < hi as isize {
                    w.view_mut((i, o * h), (1, h)).copy_from(&x.row(j as usize));
                }
            }
        }
    }
    w
}

fn window_backward(gw: &Mat, offsets: &[usize], radius: usize, h: usize) -> Mat {
    let span = 2 * radius + 1;
    let mut gx = Mat::zeros(gw.nrows(), h);
    for s in 0..offsets.len() - 1 {
        let (lo, hi) = (offsets[s], offsets[s + 1]);
        for i in lo..hi {
            for o in 0..span {
                let j = i as isize + o as isize - radius as isize;
                if j >= lo as isize && j < hi as isize {
                    let mut row = gx.row_mut(j as usize);
                    row += gw.view((i, o * h), (1, h));
                }
            }
        }
    }
    gx
}

fn softmax_rows(logits: &Mat) -> Mat {
    let mut p = logits.clone();
    for mut row in p.row_iter_mut() {
        let m = row.max();
        row.apply(|v| *v = (*v - m).exp());
        let z = row.sum();
        row /= z;
    }
    p
}

impl ToyDenoiser {
    pub fn new<R: Rng + ?Sized>(config: DenoiserConfig, rng: &mut R) -> Result<Self> {
        if config.num_codes < 1 || config.hidden < 1 || config.steps < 1 {
            return Err(Error::invalid("denoiser needs K >= 1, h >= 1 and T >= 1"));
        }
        let h = config.hidden;
        let span = 2 * config.radius + 1;
        let emb = Linear::uniform(config.num_codes + 1, h, 1.0, rng).weight;
        let blocks = (0..config.blocks)
            .map(|_| MixBlock {
                mix: Linear::new(span * h, h, rng),
                out: Linear::uniform(h, h, 0.5 / (h as f64).sqrt(), rng),
            })
            .collect();
        Ok(Self {
            config,
            token_emb: emb,
            time_proj: Linear::new(h, h, rng),
            cond_proj: Linear::new(config.cond_dim.max(1), h, rng),
            null_cond: Mat::zeros(1, h),
            blocks,
            head: Linear::new(h, config.num_codes, rng),
        })
    }

    pub fn num_codes(&self) -> usize {
        self.config.num_codes
    }

    fn validate(&self, input: &DenoiserInput) -> Result<()> {
        if input.t < 1 || input.t > self.config.steps {
            return Err(Error::invalid(format!(
                "step {} outside 1..={}",
                input.t, self.config.steps
            )));
        }
        if input.tokens.is_empty() {
            return Err(Error::invalid("empty token sequence"));
        }
        if let Some(p) = input.tokens.iter().position(|&t| t as usize > self.num_codes()) {
            return Err(Error::invalid(format!("token {} at {p} outside vocabulary", input.tokens[p])));
        }
        if let ConditionEmbedding::Vector(v) = &input.cond {
            if v.len() != self.config.cond_dim {
                return Err(Error::DimensionMismatch {
                    expected: self.config.cond_dim,
                    actual: v.len(),
                    context: "condition width",
                });
            }
        }
        Ok(())
    }

    /// Packed forward pass over several sequences.
    pub fn forward(&self, inputs: &[DenoiserInput]) -> Result<ForwardTrace> {
        if inputs.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        for input in inputs {
            self.validate(input)?;
        }
        let h = self.config.hidden;
        let mut offsets = vec![0];
        let mut tokens = Vec::new();
        for input in inputs {
            tokens.extend_from_slice(&input.tokens);
            offsets.push(tokens.len());
        }
        let temb = Mat::from_fn(inputs.len(), h, |s, j| time_embedding(inputs[s].t, self.config.steps, h)[j]);
        let tp = self.time_proj.forward(&temb);
        let mut cond_index = Vec::with_capacity(inputs.len());
        let mut conds: Vec<&[f64]> = Vec::new();
        for input in inputs {
            match &input.cond {
                ConditionEmbedding::Null => cond_index.push(None),
                ConditionEmbedding::Vector(v) => {
                    cond_index.push(Some(conds.len()));
                    conds.push(v);
                }
            }
        }
        let cond_rows = Mat::from_fn(conds.len(), self.config.cond_dim, |r, j| conds[r][j]);
        let cp = self.cond_proj.forward(&cond_rows);

        let n = tokens.len();
        let mut x = Mat::zeros(n, h);
        for s in 0..inputs.len() {
            let c = match cond_index[s] {
                Some(r) => cp.row(r).clone_owned(),
                None => self.null_cond.row(0).clone_owned(),
            };
            let shift = tp.row(s) + c;
            for i in offsets[s]..offsets[s + 1] {
                let mut row = x.row_mut(i);
                row.copy_from(&self.token_emb.row(tokens[i] as usize));
                row += &shift;
            }
        }
        let mut xs = vec![x];
        let mut windows = Vec::new();
        let mut pres = Vec::new();
        let mut acts = Vec::new();
        for b in &self.blocks {
            let cur = xs.last().expect("input present");
            let w = window(cur, &offsets, self.config.radius);
            let pre = b.mix.forward(&w);
            let act = self.config.activation.forward(&pre);
            let next = cur + b.out.forward(&act);
            windows.push(w);
            pres.push(pre);
            acts.push(act);
            xs.push(next);
        }
        let logits = self.head.forward(xs.last().expect("output present"));
        Ok(ForwardTrace {
            offsets,
            tokens,
            temb,
            cond_rows,
            cond_index,
            xs,
            windows,
            pres,
            acts,
            p0: softmax_rows(&logits),
        })
    }

    /// Backpropagates `dL/dlogits`; returns `dL/dc` for every conditioned
    /// sequence (`None` for `∅`).
    pub fn backward(&self, trace: &ForwardTrace, dlogits: &Mat, grads: &mut ToyDenoiser) -> Vec<Option<Vec<f64>>> {
        let mut g = self.head.backward(trace.xs.last().expect("output"), dlogits, &mut grads.head);
        for (i, b) in self.blocks.iter().enumerate().rev() {
            let g_act = b.out.backward(&trace.acts[i], &g, &mut grads.blocks[i].out);
            let g_pre = self.config.activation.backward(&trace.pres[i], &g_act);
            let g_w = b.mix.backward(&trace.windows[i], &g_pre, &mut grads.blocks[i].mix);
            g += window_backward(&g_w, &trace.offsets, self.config.radius, self.config.hidden);
        }
        for (i, &tok) in trace.tokens.iter().enumerate() {
            let mut row = grads.token_emb.row_mut(tok as usize);
            row += g.row(i);
        }
        let s_count = trace.num_sequences();
        let h = self.config.hidden;
        let mut g_shift = Mat::zeros(s_count, h);
        for s in 0..s_count {
            for i in trace.sequence(s) {
                let mut row = g_shift.row_mut(s);
                row += g.row(i);
            }
        }
        self.time_proj.backward(&trace.temb, &g_shift, &mut grads.time_proj);
        let mut g_cp = Mat::zeros(trace.cond_rows.nrows(), h);
        for s in 0..s_count {
            match trace.cond_index[s] {
                Some(r) => g_cp.row_mut(r).copy_from(&g_shift.row(s)),
                None => {
                    let mut row = grads.null_cond.row_mut(0);
                    row += g_shift.row(s);
                }
            }
        }
        let g_c = self.cond_proj.backward(&trace.cond_rows, &g_cp, &mut grads.cond_proj);
        trace
            .cond_index
            .iter()
            .map(|idx| idx.map(|r| g_c.row(r).iter().copied().collect()))
            .collect()
    }

    /// `p(u_0 | u_t, c)`, `n × K`.
    pub fn predict_x0(&self, input: &DenoiserInput) -> Result<CategoricalState> {
        let trace = self.forward(std::slice::from_ref(input))?;
        Ok(CategoricalState { probs: trace.p0 })
    }

    /// `p(u_{t-1} | u_t, c)`, `n × (K+1)`.
    pub fn model_reverse(&self, input: &DenoiserInput, schedule: &NoiseSchedule) -> Result<CategoricalState> {
        let p0 = self.predict_x0(input)?;
        let mut cache = PosteriorCache::default();
        reverse_from_x0(&p0.probs, &input.tokens, input.t, schedule, &mut cache)
    }

    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.fill_zero();
        g
    }
}

impl Parameters for ToyDenoiser {
    fn tensors(&self) -> Vec<(String, &Mat)> {
        let mut out = vec![
            ("token_emb".to_string(), &self.token_emb),
            ("time_proj.weight".to_string(), &self.time_proj.weight),
            ("time_proj.bias".to_string(), &self.time_proj.bias),
            ("cond_proj.weight".to_string(), &self.cond_proj.weight),
            ("cond_proj.bias".to_string(), &self.cond_proj.bias),
            ("null_cond".to_string(), &self.null_cond),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.mix.weight"), &b.mix.weight));
            out.push((format!("block{i}.mix.bias"), &b.mix.bias));
            out.push((format!("block{i}.out.weight"), &b.out.weight));
            out.push((format!("block{i}.out.bias"), &b.out.bias));
        }
        out.push(("head.weight".to_string(), &self.head.weight));
        out.push(("head.bias".to_string(), &self.head.bias));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut out = vec![&mut self.token_emb];
        let [w, b] = self.time_proj.tensors_mut();
        out.extend([w, b]);
        let [w, b] = self.cond_proj.tensors_mut();
        out.extend([w, b]);
        out.push(&mut self.null_cond);
        for blk in &mut self.blocks {
            let [w1, b1] = blk.mix.tensors_mut();
            let [w2, b2] = blk.out.tensors_mut();
            out.extend([w1, b1, w2, b2]);
        }
        let [w, b] = self.head.tensors_mut();
        out.extend([w, b]);
        out
    }
}

/// Memoized [`NoiseSchedule::posterior_columns`] keyed by `(t, u_t)`.
#[derive(Debug, Default)]
pub struct PosteriorCache {
    map: HashMap<(usize, Token), PosteriorColumns>,
}

impl PosteriorCache {
    pub fn get(&mut self, schedule: &NoiseSchedule, u_t: Token, t: usize) -> &PosteriorColumns {
        self.map
            .entry((t, u_t))
            .or_insert_with(|| schedule.posterior_columns(u_t, t))
    }
}

/// Mixes clean-token predictions with the analytic posterior:
/// `p(u_{t-1}) = Σ_j q(u_{t-1} | u_t, u_0 = j) w_j`, where `w` is `p0`
/// restricted to clean tokens that can produce `u_t` and renormalised.
pub fn reverse_from_x0(
    p0: &Mat,
    u_t: &[Token],
    t: usize,
    schedule: &NoiseSchedule,
    cache: &mut PosteriorCache,
) -> Result<CategoricalState> {
    let k = schedule.num_codes();
    if p0.ncols() != k || p0.nrows() != u_t.len() {
        return Err(Error::DimensionMismatch {
            expected: u_t.len() * k,
            actual: p0.len(),
            context: "clean-token prediction shape",
        });
    }
    if t < 1 || t > schedule.steps() {
        return Err(Error::invalid(format!("step {t} outside 1..={}", schedule.steps())));
    }
    let mut out = Mat::zeros(u_t.len(), k + 1);
    for (i, &xt) in u_t.iter().enumerate() {
        let cols = cache.get(schedule, xt, t);
        let w = restricted_weights(p0, i, &cols.possible).ok_or(Error::ImpossiblePosterior {
            position: i,
            token_t: xt,
            token_0: k as Token,
            step: t,
        })?;
        out.row_mut(i).copy_from(&(&cols.probs * &w).transpose());
    }
    Ok(CategoricalState { probs: out })
}

fn restricted_weights(p0: &Mat, row: usize, possible: &[bool]) -> Option<nalgebra::DVector<f64>> {
    let z: f64 = (0..possible.len()).filter(|&j| possible[j]).map(|j| p0[(row, j)]).sum();
    if z <= 0.0 {
        return None;
    }
    Some(nalgebra::DVector::from_fn(possible.len(), |j, _| {
        if possible[j] {
            p0[(row, j)] / z
        } else {
            0.0
        }
    }))
}

/// Loss terms of one batch, each averaged over positions and sequences.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub loss: f64,
    pub kl_term: f64,
    pub aux_term: f64,
}

/// A corrupted training sequence with its (possibly dropped) condition.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedExample {
    pub u0: Vec<Token>,
    pub u_t: Vec<Token>,
    pub t: usize,
    pub features: Option<LayerFeatureSet>,
}

/// Per-position loss and `dL/dlogits` for one position.
fn position_loss(
    p0: &Mat,
    row: usize,
    cols: &PosteriorColumns,
    x0: Token,
    xt: Token,
    t: usize,
    aux_weight: f64,
    scale: f64,
    dlogits: &mut Mat,
) -> Result<(f64, f64)> {
    let k = p0.ncols();
    let x0u = x0 as usize;
    if !cols.possible[x0u] {
        return Err(Error::ImpossiblePosterior {
            position: row,
            token_t: xt,
            token_0: x0,
            step: t,
        });
    }
    let w = restricted_weights(p0, row, &cols.possible).ok_or(Error::Numerical(format!(
        "prediction has no mass on feasible clean tokens at position {row}"
    )))?;
    let z: f64 = (0..k).filter(|&j| cols.possible[j]).map(|j| p0[(row, j)]).sum();
    let p = &cols.probs * &w;
    let mut gp = vec![0.0; k + 1];
    let kl = if t == 1 {
        let v = p[x0u];
        if v > PROB_FLOOR {
            gp[x0u] = -1.0 / v;
        }
        -v.max(PROB_FLOOR).ln()
    } else {
        let mut acc = 0.0;
        for i in 0..=k {
            let q = cols.probs[(i, x0u)];
            if q > 0.0 {
                acc += q * (q.ln() - p[i].max(PROB_FLOOR).ln());
                if p[i] > PROB_FLOOR {
                    gp[i] = -q / p[i];
                }
            }
        }
        acc
    };
    let gw: Vec<f64> = (0..k).map(|j| (0..=k).map(|i| gp[i] * cols.probs[(i, j)]).sum()).collect();
    let gw_mean: f64 = (0..k).map(|j| gw[j] * w[j]).sum();
    let gp0: Vec<f64> = (0..k)
        .map(|j| if cols.possible[j] { (gw[j] - gw_mean) / z } else { 0.0 })
        .collect();
    let inner: f64 = (0..k).map(|j| p0[(row, j)] * gp0[j]).sum();
    let aux = -p0[(row, x0u)].max(PROB_FLOOR).ln();
    for j in 0..k {
        let pj = p0[(row, j)];
        let onehot = if j == x0u { 1.0 } else { 0.0 };
        dlogits[(row, j)] = scale * (pj * (gp0[j] - inner) + aux_weight * (pj - onehot));
    }
    Ok((kl, aux))
}

/// Denoiser plus condition aggregator, trained jointly.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    pub net: ToyDenoiser,
    pub aggregator: Aggregator,
}

impl Parameters for DenoiserModel {
    fn tensors(&self) -> Vec<(String, &Mat)> {
        let mut out = self.net.tensors();
        out.extend(self.aggregator.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut out = self.net.tensors_mut();
        out.extend(self.aggregator.tensors_mut());
        out
    }
}

impl DenoiserModel {
    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.fill_zero();
        g
    }

    pub fn condition(&self, features: Option<&LayerFeatureSet>) -> Result<ConditionEmbedding> {
        match features {
            None => Ok(ConditionEmbedding::Null),
            Some(f) => self.aggregator.aggregate(f),
        }
    }

    /// Averaged loss of a prepared batch; accumulates parameter gradients
    /// into `grads` when given.
    pub fn loss_and_gradient(
        &self,
        batch: &[PreparedExample],
        schedule: &NoiseSchedule,
        aux_weight: f64,
        cache: &mut PosteriorCache,
        grads: Option<&mut DenoiserModel>,
    ) -> Result<LossParts> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        if schedule.num_codes() != self.net.num_codes() {
            return Err(Error::DimensionMismatch {
                expected: self.net.num_codes(),
                actual: schedule.num_codes(),
                context: "schedule vocabulary",
            });
        }
        let mut agg_traces: Vec<Option<AggregateTrace>> = Vec::with_capacity(batch.len());
        let mut inputs = Vec::with_capacity(batch.len());
        for ex in batch {
            let cond = match &ex.features {
                None => {
                    agg_traces.push(None);
                    ConditionEmbedding::Null
                }
                Some(f) => {
                    let (c, tr) = self.aggregator.forward(f)?;
                    agg_traces.push(Some(tr));
                    ConditionEmbedding::Vector(c)
                }
            };
            inputs.push(DenoiserInput {
                tokens: ex.u_t.clone(),
                t: ex.t,
                cond,
            });
        }
        let trace = self.net.forward(&inputs)?;
        let mut dlogits = Mat::zeros(trace.p0.nrows(), trace.p0.ncols());
        let b = batch.len() as f64;
        let mut kl_sum = 0.0;
        let mut aux_sum = 0.0;
        for (s, ex) in batch.iter().enumerate() {
            if ex.u0.len() != ex.u_t.len() {
                return Err(Error::DimensionMismatch {
                    expected: ex.u0.len(),
                    actual: ex.u_t.len(),
                    context: "corrupted sequence length",
                });
            }
            let n = ex.u0.len() as f64;
            let scale = 1.0 / (n * b);
            for (i, row) in trace.sequence(s).enumerate() {
                let cols = cache.get(schedule, ex.u_t[i], ex.t);
                let (kl, aux) = position_loss(
                    &trace.p0,
                    row,
                    cols,
                    ex.u0[i],
                    ex.u_t[i],
                    ex.t,
                    aux_weight,
                    scale,
                    &mut dlogits,
                )?;
                kl_sum += kl * scale;
                aux_sum += aux * scale;
            }
        }
        if let Some(grads) = grads {
            let g_c = self.net.backward(&trace, &dlogits, &mut grads.net);
            for (s, gc) in g_c.iter().enumerate() {
                if let (Some(gc), Some(tr)) = (gc, &agg_traces[s]) {
                    self.aggregator.backward(tr, gc, &mut grads.aggregator);
                }
            }
        }
        Ok(LossParts {
            loss: kl_sum + aux_weight * aux_sum,
            kl_term: kl_sum,
            aux_term: aux_sum,
        })
    }

    pub fn write_to<W: Write>(&self, schedule: &NoiseSchedule, provider: &NgramProvider, w: &mut W) -> Result<()> {
        let c = &self.net.config;
        let schedule_json: serde_json::Value = serde_json::from_str(&schedule.to_json()?)?;
        let header = json!({
            "format": "MDN1",
            "h": c.hidden,
            "K": c.num_codes,
            "T": c.steps,
            "cond_dim": c.cond_dim,
            "blocks": c.blocks,
            "config": c,
            "hsa_layers": self.aggregator.layer_widths(),
            "hsa_activation": self.aggregator.blocks.first().map(|b| b.activation).unwrap_or_default(),
            "hsa_weights": self.aggregator.weights.iter().collect::<Vec<_>>(),
            "schedule": schedule_json,
            "provider": provider,
        });
        write_checkpoint(w, b"MDN1", header, &self.tensors())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<(Self, NoiseSchedule, NgramProvider)> {
        const F: &str = "MDN1";
        let mut ck = read_checkpoint(r, b"MDN1", F)?;
        let field = |k: &str| ck.header.get(k).cloned().ok_or_else(|| Error::format(F, format!("missing {k}")));
        let config: DenoiserConfig = serde_json::from_value(field("config")?)?;
        let layers: Vec<(usize, usize)> = serde_json::from_value(field("hsa_layers")?)?;
        let activation: Activation = serde_json::from_value(field("hsa_activation")?)?;
        let schedule = NoiseSchedule::from_json(&field("schedule")?.to_string())?;
        let provider: NgramProvider = serde_json::from_value(field("provider")?)?;
        let mut lin = |name: &str| -> Result<Linear> {
            Ok(Linear {
                weight: ck.take(&format!("{name}.weight"), F)?,
                bias: ck.take(&format!("{name}.bias"), F)?,
            })
        };
        let time_proj = lin("time_proj")?;
        let cond_proj = lin("cond_proj")?;
        let mut blocks = Vec::new();
        for i in 0..config.blocks {
            blocks.push(MixBlock {
                mix: lin(&format!("block{i}.mix"))?,
                out: lin(&format!("block{i}.out"))?,
            });
        }
        let head = lin("head")?;
        let mut agg_blocks = Vec::new();
        for &(l, _) in &layers {
            agg_blocks.push(crate::hsa::ProjectionBlock {
                first: lin(&format!("hsa.layer{l}.first"))?,
                second: lin(&format!("hsa.layer{l}.second"))?,
                activation,
            });
        }
        let net = ToyDenoiser {
            config,
            token_emb: ck.take("token_emb", F)?,
            time_proj,
            cond_proj,
            null_cond: ck.take("null_cond", F)?,
            blocks,
            head,
        };
        let aggregator = Aggregator {
            layers: layers.iter().map(|l| l.0).collect(),
            weights: ck.take("hsa.weights", F)?,
            blocks: agg_blocks,
        };
        Ok((DenoiserModel { net, aggregator }, schedule, provider))
    }
}

/// Condition dropout probability per caption source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DropoutMap {
    pub curated: f64,
    pub wild: f64,
}

impl Default for DropoutMap {
    fn default() -> Self {
        Self { curated: 0.1, wild: 0.3 }
    }
}

impl DropoutMap {
    pub fn uniform(p: f64) -> Self {
        Self { curated: p, wild: p }
    }

    pub fn get(&self, source: CaptionSource) -> f64 {
        match source {
            CaptionSource::Curated => self.curated,
            CaptionSource::Wild => self.wild,
        }
    }

    fn validate(&self) -> Result<()> {
        for p in [self.curated, self.wild] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("dropout probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// A clean sequence with its caption features (`None` when uncaptioned).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub tokens: Vec<Token>,
    pub source: CaptionSource,
    pub features: Option<LayerFeatureSet>,
}

/// Draws `t`, corrupts `u_0` and applies condition dropout. The RNG is
/// consumed in a fixed order per example: step, corruption, dropout.
pub fn prepare_batch<R: Rng + ?Sized>(
    batch: &[TrainingExample],
    schedule: &NoiseSchedule,
    dropout: &DropoutMap,
    rng: &mut R,
) -> Result<Vec<PreparedExample>> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    dropout.validate()?;
    batch
        .iter()
        .map(|ex| {
            let t = rng.random_range(1..=schedule.steps());
            let u_t = schedule.sample_marginal(&ex.tokens, t, rng)?;
            let drop = rng.random::<f64>() < dropout.get(ex.source);
            Ok(PreparedExample {
                u0: ex.tokens.clone(),
                u_t,
                t,
                features: if drop { None } else { ex.features.clone() },
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub loss: f64,
    pub kl_term: f64,
    pub aux_term: f64,
    pub dropped: usize,
}

/// Owns a model, its optimizer state and the training RNG.
pub struct Trainer<R: Rng> {
    pub model: DenoiserModel,
    pub schedule: NoiseSchedule,
    pub dropout: DropoutMap,
    pub aux_weight: f64,
    optimizer: Optimizer,
    grads: DenoiserModel,
    cache: PosteriorCache,
    rng: R,
    step: usize,
}

impl<R: Rng> Trainer<R> {
    pub fn new(model: DenoiserModel, schedule: NoiseSchedule, optimizer: OptimizerConfig, dropout: DropoutMap, rng: R) -> Self {
        Self {
            optimizer: Optimizer::new(optimizer, &model),
            grads: model.zeros_like(),
            model,
            schedule,
            dropout,
            aux_weight: AUX_WEIGHT,
            cache: PosteriorCache::default(),
            rng,
            step: 0,
        }
    }

    pub fn optimizer_mut(&mut self) -> &mut Optimizer {
        &mut self.optimizer
    }

    /// One gradient update on `batch`.
    pub fn train_step(&mut self, batch: &[TrainingExample]) -> Result<StepReport> {
        let prepared = prepare_batch(batch, &self.schedule, &self.dropout, &mut self.rng)?;
        let dropped = prepared
            .iter()
            .zip(batch)
            .filter(|(p, b)| p.features.is_none() && b.features.is_some())
            .count();
        self.grads.fill_zero();
        let parts = self.model.loss_and_gradient(
            &prepared,
            &self.schedule,
            self.aux_weight,
            &mut self.cache,
            Some(&mut self.grads),
        )?;
        if !parts.loss.is_finite() || !self.grads.all_finite() {
            return Err(Error::Diverged {
                step: self.step,
                detail: format!("loss {:?}", parts),
            });
        }
        self.optimizer.step(&mut self.model, &self.grads);
        let report = StepReport {
            step: self.step,
            loss: parts.loss,
            kl_term: parts.kl_term,
            aux_term: parts.aux_term,
            dropped,
        };
        self.step += 1;
        Ok(report)
    }
}

/// Settings for [`train_denoiser`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Anneal the learning rate to zero along a half cosine.
    pub cosine_decay: bool,
    pub aux_weight: f64,
    pub dropout: DropoutMap,
    pub seed: u64,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 32,
            optimizer: OptimizerConfig::momentum(1e-3, 0.9, 4.5e-2),
            cosine_decay: false,
            aux_weight: AUX_WEIGHT,
            dropout: DropoutMap::default(),
            seed: 0,
        }
    }
}

impl DenoiserTrainConfig {
    /// Adam with cosine decay; the setting that trains the small toy
    /// networks within a few thousand steps.
    pub fn toy() -> Self {
        Self {
            steps: 4000,
            optimizer: OptimizerConfig::adam(3e-3, 4.5e-2),
            cosine_decay: true,
            ..Self::default()
        }
    }

    pub fn learning_rate_at(&self, step: usize) -> f64 {
        let lr = self.optimizer.learning_rate;
        if self.cosine_decay && self.steps > 0 {
            0.5 * lr * (1.0 + (std::f64::consts::PI * step as f64 / self.steps as f64).cos())
        } else {
            lr
        }
    }
}

#[derive(Debug, Clone)]
pub struct DenoiserTrainOutcome {
    pub model: DenoiserModel,
    pub reports: Vec<StepReport>,
}

/// Trains on `examples` for `config.steps` updates. Each epoch shuffles the
/// curated and wild examples separately and interleaves them, so every batch
/// mixes both sources in proportion.
pub fn train_denoiser(
    model: DenoiserModel,
    schedule: &NoiseSchedule,
    examples: &[TrainingExample],
    config: &DenoiserTrainConfig,
) -> Result<DenoiserTrainOutcome> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    if examples.is_empty() {
        return Err(Error::invalid("no training examples"));
    }
    if config.batch_size == 0 {
        return Err(Error::invalid("batch size must be >= 1"));
    }
    let mut train_rng = ChaCha8Rng::seed_from_u64(config.seed);
    train_rng.set_stream(1);
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    order_rng.set_stream(2);
    let mut trainer = Trainer::new(model, schedule.clone(), config.optimizer, config.dropout, train_rng);
    trainer.aux_weight = config.aux_weight;

    let (curated, wild): (Vec<usize>, Vec<usize>) =
        (0..examples.len()).partition(|&i| examples[i].source == CaptionSource::Curated);
    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut reports = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        if batches.is_empty() {
            let mut c = curated.clone();
            let mut w = wild.clone();
            c.shuffle(&mut order_rng);
            w.shuffle(&mut order_rng);
            let order = crate::corpus::interleave(&c, &w);
            batches = order.chunks(config.batch_size).rev().map(<[usize]>::to_vec).collect();
        }
        let idx = batches.pop().expect("refilled above");
        let batch: Vec<TrainingExample> = idx.iter().map(|&i| examples[i].clone()).collect();
        trainer.optimizer_mut().set_learning_rate(config.learning_rate_at(step));
        reports.push(trainer.train_step(&batch)?);
    }
    Ok(DenoiserTrainOutcome {
        model: trainer.model,
        reports,
    })
}

/// Largest relative error between analytic and central finite-difference
/// gradients (step `1e-4`) over a spread of parameter indices.
pub fn gradient_check(model: &DenoiserModel, example: &PreparedExample, schedule: &NoiseSchedule) -> Result<f64> {
    gradient_check_with(model, std::slice::from_ref(example), schedule, AUX_WEIGHT, 1e-4, 64)
}

/// As [`gradient_check`], checking at most `per_tensor` entries of each
/// tensor (all of them when the tensor is smaller).
pub fn gradient_check_with(
    model: &DenoiserModel,
    batch: &[PreparedExample],
    schedule: &NoiseSchedule,
    aux_weight: f64,
    step: f64,
    per_tensor: usize,
) -> Result<f64> {
    let mut cache = PosteriorCache::default();
    let mut grads = model.zeros_like();
    model.loss_and_gradient(batch, schedule, aux_weight, &mut cache, Some(&mut grads))?;
    let analytic = grads.flatten();
    let mut indices = Vec::new();
    let mut offset = 0;
    for (_, t) in model.tensors() {
        let n = t.len();
        let stride = n.div_ceil(per_tensor.max(1)).max(1);
        indices.extend((0..n).step_by(stride).map(|i| offset + i));
        offset += n;
    }
    let mut failure = None;
    let numeric = crate::nn::finite_difference(model, step, &indices, |m| {
        match m.loss_and_gradient(batch, schedule, aux_weight, &mut cache, None) {
            Ok(p) => p.loss,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(indices
        .iter()
        .zip(&numeric)
        .map(|(&i, &n)| relative_error(analytic[i], n, 1e-6))
        .fold(0.0, f64::max))
}

/// CSV with columns `step,loss,kl_term,aux_term`.
pub fn write_loss_csv<W: Write>(w: &mut W, reports: &[StepReport]) -> Result<()> {
    writeln!(w, "step,loss,kl_term,aux_term")?;
    for r in reports {
        writeln!(w, "{},{},{},{}", r.step, r.loss, r.kl_term, r.aux_term)?;
    }
    Ok(())
}
