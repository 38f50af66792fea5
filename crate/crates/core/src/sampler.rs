//! Reverse-process generation with classifier-free guidance and Gumbel-max
//! sampling.

use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{reverse_from_x0, DenoiserInput, DenoiserModel, PosteriorCache};
use crate::diffusion::{CategoricalState, NoiseSchedule, Token};
use crate::error::{Error, Result};
use crate::hsa::{ConditionEmbedding, TextEncoderProvider};
use crate::motion_repr::MotionClip;
use crate::nn::Mat;
use crate::vq::{decode_from_tokens, Codebook, VqModel};

/// Scale favouring text consistency.
pub const QUALITY_SCALE: f64 = 2.0;
/// Scale favouring sample diversity.
pub const DIVERSITY_SCALE: f64 = 1.0;
pub const DEFAULT_INFERENCE_STEPS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    pub scale: f64,
    pub steps: usize,
    pub seed: u64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            scale: QUALITY_SCALE,
            steps: DEFAULT_INFERENCE_STEPS,
            seed: 0,
        }
    }
}

/// `(1+s) p_cond - s p_uncond`, negatives clamped to zero, rows renormalised.
pub fn apply_guidance(p_cond: &CategoricalState, p_uncond: &CategoricalState, scale: f64) -> Result<CategoricalState> {
    if p_cond.probs.shape() != p_uncond.probs.shape() {
        return Err(Error::invalid("guidance operands differ in shape"));
    }
    if !(scale >= 0.0) || !scale.is_finite() {
        return Err(Error::invalid(format!("guidance scale {scale} must be finite and >= 0")));
    }
    let mut out = Mat::zeros(p_cond.len(), p_cond.num_states());
    for i in 0..p_cond.len() {
        let mut z = 0.0;
        for j in 0..p_cond.num_states() {
            let v = ((1.0 + scale) * p_cond.probs[(i, j)] - scale * p_uncond.probs[(i, j)]).max(0.0);
            out[(i, j)] = v;
            z += v;
        }
        if !(z > 0.0) {
            return Err(Error::DegenerateGuidance { row: i });
        }
        let mut row = out.row_mut(i);
        row /= z;
    }
    Ok(CategoricalState { probs: out })
}

/// Per row, `argmax_k (log p_k + G_k)` with independent standard Gumbel noise.
pub fn gumbel_sample<R: Rng + ?Sized>(state: &CategoricalState, rng: &mut R) -> Vec<Token> {
    (0..state.len())
        .map(|i| {
            let mut best = (f64::NEG_INFINITY, 0usize);
            for (k, &p) in state.probs.row(i).iter().enumerate() {
                let u: f64 = rng.sample(Open01);
                if p <= 0.0 {
                    continue;
                }
                let score = p.ln() - (-u.ln()).ln();
                if score > best.0 {
                    best = (score, k);
                }
            }
            best.1 as Token
        })
        .collect()
}

/// RNG stream for generation call `index` under `seed`.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Network time index for inference step `t` of `steps` when the network
/// was trained with `trained` steps.
pub fn network_step(t: usize, steps: usize, trained: usize) -> usize {
    if steps == trained {
        t
    } else {
        (t * trained).div_ceil(steps).clamp(1, trained)
    }
}

/// Schedule used at inference: `schedule` itself, or the same profile
/// rebuilt for `steps`.
pub fn inference_schedule(schedule: &NoiseSchedule, steps: usize) -> Result<NoiseSchedule> {
    if steps == schedule.steps() {
        Ok(schedule.clone())
    } else {
        NoiseSchedule::build(steps, schedule.num_codes(), &schedule.profile().to_string())
    }
}

/// Generates one sequence per condition, each with its own RNG stream
/// `(cfg.seed, first_index + i)`; all sequences are denoised together.
pub fn generate_batch(
    model: &DenoiserModel,
    conds: &[ConditionEmbedding],
    cfg: &GuidanceConfig,
    length: usize,
    schedule: &NoiseSchedule,
    first_index: u64,
) -> Result<Vec<Vec<Token>>> {
    if length < 1 {
        return Err(Error::invalid("sequence length must be >= 1"));
    }
    if conds.is_empty() {
        return Ok(Vec::new());
    }
    if !(cfg.scale >= 0.0) {
        return Err(Error::invalid(format!("guidance scale {} must be >= 0", cfg.scale)));
    }
    if schedule.num_codes() != model.net.num_codes() {
        return Err(Error::DimensionMismatch {
            expected: model.net.num_codes(),
            actual: schedule.num_codes(),
            context: "schedule vocabulary",
        });
    }
    let sched = inference_schedule(schedule, cfg.steps)?;
    let trained = model.net.config.steps;
    let mut rngs: Vec<ChaCha8Rng> = (0..conds.len())
        .map(|i| stream_rng(cfg.seed, first_index + i as u64))
        .collect();
    let prior = CategoricalState {
        probs: Mat::from_fn(length, sched.num_states(), |_, j| sched.prior()[j]),
    };
    let mut seqs: Vec<Vec<Token>> = rngs.iter_mut().map(|r| gumbel_sample(&prior, r)).collect();
    let mut cache = PosteriorCache::default();
    let guided: Vec<bool> = conds.iter().map(|c| !c.is_null() && cfg.scale > 0.0).collect();
    for t in (1..=sched.steps()).rev() {
        let t_net = network_step(t, sched.steps(), trained);
        let mut inputs = Vec::new();
        for (u, c) in seqs.iter().zip(conds) {
            inputs.push(DenoiserInput {
                tokens: u.clone(),
                t: t_net,
                cond: c.clone(),
            });
        }
        for (u, g) in seqs.iter().zip(&guided) {
            if *g {
                inputs.push(DenoiserInput {
                    tokens: u.clone(),
                    t: t_net,
                    cond: ConditionEmbedding::Null,
                });
            }
        }
        let trace = model.net.forward(&inputs)?;
        let mut uncond_slot = conds.len();
        for s in 0..conds.len() {
            let p0 = trace.p0.rows(trace.sequence(s).start, length).into_owned();
            let p_cond = reverse_from_x0(&p0, &seqs[s], t, &sched, &mut cache)?;
            let state = if guided[s] {
                let p0u = trace.p0.rows(trace.sequence(uncond_slot).start, length).into_owned();
                uncond_slot += 1;
                let p_uncond = reverse_from_x0(&p0u, &seqs[s], t, &sched, &mut cache)?;
                apply_guidance(&p_cond, &p_uncond, cfg.scale)?
            } else {
                p_cond
            };
            state.validate(1e-9)?;
            seqs[s] = gumbel_sample(&state, &mut rngs[s]);
        }
    }
    let mask = sched.mask_token();
    for u in &seqs {
        if let Some(p) = u.iter().position(|&x| x == mask) {
            return Err(Error::MaskToken { position: p });
        }
    }
    Ok(seqs)
}

/// Generates `length` tokens from the prior chain under `cond`.
pub fn generate(
    model: &DenoiserModel,
    cond: &ConditionEmbedding,
    cfg: &GuidanceConfig,
    length: usize,
    schedule: &NoiseSchedule,
) -> Result<Vec<Token>> {
    Ok(generate_batch(model, std::slice::from_ref(cond), cfg, length, schedule, 0)?.remove(0))
}

/// Everything needed to go from a caption to motion features.
pub struct PipelineBundle<'a> {
    pub vq: &'a VqModel,
    pub codebook: &'a Codebook,
    pub denoiser: &'a DenoiserModel,
    pub schedule: &'a NoiseSchedule,
    pub provider: &'a dyn TextEncoderProvider,
    pub fps: u32,
}

/// Caption → layer features → condition → tokens → motion clip. `None`
/// generates unconditionally.
pub fn generate_motion(text: Option<&str>, bundle: &PipelineBundle<'_>, cfg: &GuidanceConfig, length: usize) -> Result<MotionClip> {
    let cond = match text {
        None => ConditionEmbedding::Null,
        Some(t) => bundle.denoiser.aggregator.aggregate(&bundle.provider.embed(t)?)?,
    };
    let tokens = generate(bundle.denoiser, &cond, cfg, length, bundle.schedule)?;
    decode_from_tokens(&tokens, bundle.vq, bundle.codebook, bundle.fps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{DenoiserConfig, ToyDenoiser};
    use crate::hsa::Aggregator;
    use crate::nn::{Activation, Linear};
    use proptest::prelude::*;
    use rand::Rng;

    fn state(rows: &[&[f64]]) -> CategoricalState {
        let k = rows[0].len();
        CategoricalState {
            probs: Mat::from_fn(rows.len(), k, |i, j| rows[i][j]),
        }
    }

    #[test]
    fn zero_scale_is_identity() {
        let c = state(&[&[0.6, 0.4], &[0.1, 0.9]]);
        let u = state(&[&[0.5, 0.5], &[0.7, 0.3]]);
        assert_eq!(apply_guidance(&c, &u, 0.0).unwrap(), c);
    }

    #[test]
    fn worked_examples() {
        let g = apply_guidance(&state(&[&[0.6, 0.4]]), &state(&[&[0.5, 0.5]]), 1.0).unwrap();
        assert!((g.probs[(0, 0)] - 0.7).abs() < 1e-12 && (g.probs[(0, 1)] - 0.3).abs() < 1e-12);
        let g = apply_guidance(&state(&[&[0.2, 0.8]]), &state(&[&[0.6, 0.4]]), 1.0).unwrap();
        assert_eq!((g.probs[(0, 0)], g.probs[(0, 1)]), (0.0, 1.0));
    }

    #[test]
    fn degenerate_guidance_is_reported() {
        let c = state(&[&[0.5, 0.5], &[0.0, 1.0]]);
        let u = state(&[&[0.5, 0.5], &[0.0, 1.0]]);
        assert!(apply_guidance(&c, &u, 3.0).is_ok());
        let mut bad = state(&[&[0.5, 0.5], &[0.0, 0.0]]);
        bad.probs[(1, 1)] = 0.0;
        assert!(matches!(apply_guidance(&bad, &bad, 1.0), Err(Error::DegenerateGuidance { row: 1 })));
        assert!(apply_guidance(&c, &u, -1.0).is_err());
    }

    proptest! {
        #[test]
        fn equal_branches_collapse(seed in 0u64..1000, s in 0.0f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let raw = Mat::from_fn(3, 5, |_, _| rng.random_range(0.0..1.0));
            let p = CategoricalState { probs: Mat::from_fn(3, 5, |i, j| raw[(i, j)] / raw.row(i).sum()) };
            let g = apply_guidance(&p, &p, s).unwrap();
            prop_assert!((g.probs - p.probs).amax() < 1e-12);
        }

        #[test]
        fn favoured_category_grows_with_scale(c in 0.05f64..0.95, u in 0.05f64..0.95, s1 in 0.0f64..5.0, ds in 0.0f64..5.0) {
            prop_assume!(c > u);
            let pc = state(&[&[c, 1.0 - c]]);
            let pu = state(&[&[u, 1.0 - u]]);
            let a = apply_guidance(&pc, &pu, s1).unwrap().probs[(0, 0)];
            let b = apply_guidance(&pc, &pu, s1 + ds).unwrap().probs[(0, 0)];
            prop_assert!(b >= a - 1e-12);
        }
    }

    #[test]
    fn point_mass_is_always_drawn() {
        let s = state(&[&[0.0, 1.0, 0.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            assert_eq!(gumbel_sample(&s, &mut rng), vec![1]);
        }
    }

    #[test]
    fn uniform_row_frequencies() {
        let s = state(&[&[0.25; 4]]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut counts = [0usize; 4];
        let n = 100_000;
        for _ in 0..n {
            counts[gumbel_sample(&s, &mut rng)[0] as usize] += 1;
        }
        let sd = (n as f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 / 4.0).abs() < 3.0 * sd);
        }
    }

    fn toy_model(k: usize, steps: usize) -> DenoiserModel {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let config = DenoiserConfig {
            num_codes: k,
            hidden: 8,
            cond_dim: 4,
            blocks: 1,
            radius: 1,
            steps,
            activation: Activation::Silu,
        };
        DenoiserModel {
            net: ToyDenoiser::new(config, &mut rng).unwrap(),
            aggregator: Aggregator::new(&[(1, 3)], 4, Activation::Silu, &mut rng),
        }
    }

    #[test]
    fn single_step_with_point_mass_returns_it() {
        let mut m = toy_model(5, 1);
        // the head ignores its input and always prefers token 3
        m.net.head = Linear::zeros(8, 5);
        m.net.head.bias[(0, 3)] = 60.0;
        let s = NoiseSchedule::build(1, 5, "mask-and-replace").unwrap();
        let cfg = GuidanceConfig { scale: 0.0, steps: 1, seed: 4 };
        assert_eq!(generate(&m, &ConditionEmbedding::Null, &cfg, 6, &s).unwrap(), vec![3; 6]);
    }

    #[test]
    fn generation_is_deterministic_and_mask_free() {
        let m = toy_model(6, 10);
        let s = NoiseSchedule::build(10, 6, "mask-and-replace").unwrap();
        let cond = ConditionEmbedding::Vector(vec![0.3, -0.2, 0.1, 0.9]);
        let cfg = GuidanceConfig { scale: 2.0, steps: 10, seed: 5 };
        let a = generate(&m, &cond, &cfg, 12, &s).unwrap();
        assert_eq!(a, generate(&m, &cond, &cfg, 12, &s).unwrap());
        assert!(a.iter().all(|&x| x < 6));
        let other = GuidanceConfig { seed: 6, ..cfg };
        assert_ne!(a, generate(&m, &cond, &other, 12, &s).unwrap());
    }

    #[test]
    fn batch_streams_match_single_calls() {
        let m = toy_model(4, 5);
        let s = NoiseSchedule::build(5, 4, "uniform").unwrap();
        let cfg = GuidanceConfig { scale: 1.0, steps: 5, seed: 7 };
        let conds = vec![ConditionEmbedding::Vector(vec![0.1; 4]), ConditionEmbedding::Null];
        let batch = generate_batch(&m, &conds, &cfg, 8, &s, 0).unwrap();
        assert_eq!(batch[0], generate(&m, &conds[0], &cfg, 8, &s).unwrap());
        let second = generate_batch(&m, &conds[1..], &cfg, 8, &s, 1).unwrap();
        assert_eq!(batch[1], second[0]);
    }

    #[test]
    fn inference_steps_may_differ_from_training() {
        let m = toy_model(4, 20);
        let s = NoiseSchedule::build(20, 4, "mask-and-replace").unwrap();
        let cfg = GuidanceConfig { scale: 0.0, steps: 7, seed: 8 };
        let u = generate(&m, &ConditionEmbedding::Null, &cfg, 5, &s).unwrap();
        assert_eq!(u.len(), 5);
        assert_eq!(network_step(7, 7, 20), 20);
        assert_eq!(network_step(1, 7, 20), 3);
        assert_eq!(network_step(4, 4, 4), 4);
    }

    #[test]
    fn zero_length_is_rejected() {
        let m = toy_model(4, 3);
        let s = NoiseSchedule::build(3, 4, "mask-and-replace").unwrap();
        assert!(generate(&m, &ConditionEmbedding::Null, &GuidanceConfig::default(), 0, &s).is_err());
    }
}
