//! The forward corruption chain over code tokens and its closed forms.
//!
//! Tokens are zero-based: codes are `0..K` and the absorbing mask token is
//! `K`. Step `t` runs over `1..=T`; `t = 0` is clean data. One step moves a
//! non-mask token `j` to
//!
//! * `j` with probability `α_t + β_t / K`,
//! * any other code with probability `β_t / K`,
//! * the mask with probability `γ_t = 1 - α_t - β_t`,
//!
//! and leaves the mask where it is. With `γ ≡ 0` this is the uniform
//! resampling kernel with keep probability `1 - β_t (K-1)/K`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Mat;

pub type Token = u32;

/// Floor applied to model probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScheduleProfile {
    #[serde(rename = "uniform")]
    Uniform,
    #[serde(rename = "mask-and-replace")]
    MaskAndReplace,
    #[serde(rename = "custom")]
    Custom,
}

impl fmt::Display for ScheduleProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleProfile::Uniform => "uniform",
            ScheduleProfile::MaskAndReplace => "mask-and-replace",
            ScheduleProfile::Custom => "custom",
        })
    }
}

impl FromStr for ScheduleProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(ScheduleProfile::Uniform),
            "mask-and-replace" => Ok(ScheduleProfile::MaskAndReplace),
            "custom" => Ok(ScheduleProfile::Custom),
            other => Err(Error::UnknownProfile(other.to_string())),
        }
    }
}

/// Per-step keep/replace/mask probabilities and their cumulative forms.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    num_codes: usize,
    profile: ScheduleProfile,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    gamma: Vec<f64>,
    alpha_bar: Vec<f64>,
    beta_bar: Vec<f64>,
    gamma_bar: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ScheduleFile {
    #[serde(rename = "T")]
    steps: usize,
    #[serde(rename = "K")]
    num_codes: usize,
    profile: ScheduleProfile,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    gamma: Vec<f64>,
}

/// Per-step values recovered from cumulative keep mass `ᾱ` and cumulative
/// mask mass `γ̄` (both indexed `0..=T`).
fn steps_from_cumulative(alpha_bar: &[f64], gamma_bar: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let steps = alpha_bar.len() - 1;
    let mut alpha = Vec::with_capacity(steps);
    let mut beta = Vec::with_capacity(steps);
    let mut gamma = Vec::with_capacity(steps);
    for t in 1..=steps {
        let a = if alpha_bar[t - 1] > 0.0 {
            alpha_bar[t] / alpha_bar[t - 1]
        } else {
            0.0
        };
        let alive = if 1.0 - gamma_bar[t - 1] > 0.0 {
            (1.0 - gamma_bar[t]) / (1.0 - gamma_bar[t - 1])
        } else {
            0.0
        };
        let a = a.clamp(0.0, alive.clamp(0.0, 1.0));
        alpha.push(a);
        gamma.push(1.0 - alive.clamp(0.0, 1.0));
        beta.push((alive.clamp(0.0, 1.0) - a).max(0.0));
    }
    (alpha, beta, gamma)
}

impl NoiseSchedule {
    /// Builds a named schedule.
    ///
    /// * `uniform`: `γ ≡ 0`, cumulative keep mass `ᾱ_t = 1 - t/T`.
    /// * `mask-and-replace`: cumulative mask mass `t/T` and a small uniform
    ///   leak `β̄_t = 0.1 (t/T)(1 - t/T) K/(K-1)`, so `u_T` is fully masked.
    pub fn build(steps: usize, num_codes: usize, profile: &str) -> Result<Self> {
        let profile: ScheduleProfile = profile.parse()?;
        if steps < 1 {
            return Err(Error::invalid("schedule needs T >= 1"));
        }
        if num_codes < 2 {
            return Err(Error::invalid("schedule needs K >= 2"));
        }
        let k = num_codes as f64;
        let (alpha, beta, gamma) = match profile {
            ScheduleProfile::Uniform => {
                let alpha_bar: Vec<f64> = (0..=steps).map(|t| 1.0 - t as f64 / steps as f64).collect();
                let gamma_bar = vec![0.0; steps + 1];
                steps_from_cumulative(&alpha_bar, &gamma_bar)
            }
            ScheduleProfile::MaskAndReplace => {
                let leak = 0.1 * k / (k - 1.0);
                let mut alpha_bar = Vec::with_capacity(steps + 1);
                let mut gamma_bar = Vec::with_capacity(steps + 1);
                for t in 0..=steps {
                    let x = t as f64 / steps as f64;
                    let beta_bar = leak * x * (1.0 - x);
                    gamma_bar.push(x);
                    alpha_bar.push(((1.0 - x) - beta_bar).max(0.0));
                }
                steps_from_cumulative(&alpha_bar, &gamma_bar)
            }
            ScheduleProfile::Custom => {
                return Err(Error::invalid("custom schedules are built with from_steps"))
            }
        };
        Self::from_steps(num_codes, profile, alpha, beta, gamma)
    }

    /// Builds a schedule from explicit per-step values (index `t - 1`).
    pub fn from_steps(
        num_codes: usize,
        profile: ScheduleProfile,
        alpha: Vec<f64>,
        beta: Vec<f64>,
        gamma: Vec<f64>,
    ) -> Result<Self> {
        let steps = alpha.len();
        if steps == 0 || beta.len() != steps || gamma.len() != steps {
            return Err(Error::invalid("alpha, beta, gamma must share a non-zero length"));
        }
        if num_codes < 2 {
            return Err(Error::invalid("schedule needs K >= 2"));
        }
        for t in 0..steps {
            let (a, b, g) = (alpha[t], beta[t], gamma[t]);
            if ![a, b, g].iter().all(|v| (0.0..=1.0).contains(v)) {
                return Err(Error::invalid(format!("step {} has a probability outside [0, 1]", t + 1)));
            }
            if (a + b + g - 1.0).abs() > 1e-12 {
                return Err(Error::invalid(format!("step {}: alpha + beta + gamma != 1", t + 1)));
            }
        }
        let mut alpha_bar = vec![1.0];
        let mut alive = vec![1.0];
        for t in 0..steps {
            alpha_bar.push(alpha_bar[t] * alpha[t]);
            alive.push(alive[t] * (1.0 - gamma[t]));
        }
        let gamma_bar: Vec<f64> = alive.iter().map(|a| 1.0 - a).collect();
        let beta_bar = alive
            .iter()
            .zip(&alpha_bar)
            .map(|(l, a)| (l - a).max(0.0))
            .collect();
        Ok(Self {
            num_codes,
            profile,
            alpha,
            beta,
            gamma,
            alpha_bar,
            beta_bar,
            gamma_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    pub fn num_codes(&self) -> usize {
        self.num_codes
    }

    /// Number of states including the mask.
    pub fn num_states(&self) -> usize {
        self.num_codes + 1
    }

    pub fn mask_token(&self) -> Token {
        self.num_codes as Token
    }

    pub fn profile(&self) -> ScheduleProfile {
        self.profile
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn gamma(&self, t: usize) -> f64 {
        self.gamma[t - 1]
    }

    /// Cumulative keep mass `Π α_i`, `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Cumulative uniform-replacement mass.
    pub fn beta_bar(&self, t: usize) -> f64 {
        self.beta_bar[t]
    }

    /// Cumulative mask mass.
    pub fn gamma_bar(&self, t: usize) -> f64 {
        self.gamma_bar[t]
    }

    /// True when `u_T` is fully masked (up to 1e-6).
    pub fn is_mask_terminal(&self) -> bool {
        self.gamma_bar[self.steps()] >= 1.0 - 1e-6
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(format!("step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[Token], allow_mask: bool) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::invalid("empty token sequence"));
        }
        let limit = if allow_mask { self.num_codes } else { self.num_codes - 1 };
        for (i, &tok) in tokens.iter().enumerate() {
            if tok as usize == self.num_codes && !allow_mask {
                return Err(Error::MaskToken { position: i });
            }
            if tok as usize > limit {
                return Err(Error::invalid(format!("token {tok} at position {i} out of range")));
            }
        }
        Ok(())
    }

    /// `q(u_t = to | u_{t-1} = from)`.
    pub fn transition_prob(&self, t: usize, from: Token, to: Token) -> f64 {
        let mask = self.mask_token();
        if from == mask {
            return if to == mask { 1.0 } else { 0.0 };
        }
        let k = self.num_codes as f64;
        if to == mask {
            self.gamma(t)
        } else if to == from {
            self.alpha(t) + self.beta(t) / k
        } else {
            self.beta(t) / k
        }
    }

    /// `(K+1) × (K+1)` one-step kernel; row = source state.
    pub fn transition_matrix(&self, t: usize) -> Result<Mat> {
        self.check_step(t)?;
        let s = self.num_states();
        Ok(Mat::from_fn(s, s, |i, j| self.transition_prob(t, i as Token, j as Token)))
    }

    /// `q(u_t = x | u_0 = x0)` for non-mask `x0`, `t` in `0..=T`.
    pub fn marginal_prob(&self, t: usize, x0: Token, x: Token) -> f64 {
        if x == self.mask_token() {
            self.gamma_bar[t]
        } else if x == x0 {
            self.alpha_bar[t] + self.beta_bar[t] / self.num_codes as f64
        } else {
            self.beta_bar[t] / self.num_codes as f64
        }
    }

    /// Closed-form `q(u_t | u_0)` per position.
    pub fn marginal(&self, u0: &[Token], t: usize) -> Result<CategoricalState> {
        self.check_tokens(u0, false)?;
        if t > self.steps() {
            return Err(Error::invalid(format!("step {t} outside 0..={}", self.steps())));
        }
        let s = self.num_states();
        Ok(CategoricalState {
            probs: Mat::from_fn(u0.len(), s, |i, x| self.marginal_prob(t, u0[i], x as Token)),
        })
    }

    /// One forward step applied independently at every position.
    pub fn forward_sample<R: Rng + ?Sized>(&self, u_prev: &[Token], t: usize, rng: &mut R) -> Result<Vec<Token>> {
        self.check_step(t)?;
        self.check_tokens(u_prev, true)?;
        let mask = self.mask_token();
        let k = self.num_codes as f64;
        Ok(u_prev
            .iter()
            .map(|&tok| {
                if tok == mask {
                    return mask;
                }
                let u: f64 = rng.random();
                if u < self.gamma(t) {
                    mask
                } else if u < self.gamma(t) + self.beta(t) {
                    rng.random_range(0..self.num_codes) as Token
                } else {
                    tok
                }
            })
            .inspect(|_| debug_assert!(k > 0.0))
            .collect())
    }

    /// Draws `u_t ~ q(u_t | u_0)` directly.
    pub fn sample_marginal<R: Rng + ?Sized>(&self, u0: &[Token], t: usize, rng: &mut R) -> Result<Vec<Token>> {
        self.check_tokens(u0, false)?;
        if t > self.steps() {
            return Err(Error::invalid(format!("step {t} outside 0..={}", self.steps())));
        }
        let mask = self.mask_token();
        let (gb, bb) = (self.gamma_bar[t], self.beta_bar[t]);
        Ok(u0
            .iter()
            .map(|&tok| {
                let u: f64 = rng.random();
                if u < gb {
                    mask
                } else if u < gb + bb {
                    rng.random_range(0..self.num_codes) as Token
                } else {
                    tok
                }
            })
            .collect())
    }

    /// Unnormalized Bayes weights `q(u_t | u_{t-1} = k) q(u_{t-1} = k | u_0)`
    /// over `k` in `0..=K`, and their sum.
    fn posterior_weights(&self, u_t: Token, x0: Token, t: usize) -> (Vec<f64>, f64) {
        let w: Vec<f64> = (0..self.num_states() as Token)
            .map(|k| self.transition_prob(t, k, u_t) * self.marginal_prob(t - 1, x0, k))
            .collect();
        let z = w.iter().sum();
        (w, z)
    }

    /// `q(u_{t-1} | u_t, u_0)` for one position, or `None` when the pair
    /// `(u_t, u_0)` has zero probability under the schedule.
    pub fn posterior_probs(&self, u_t: Token, x0: Token, t: usize) -> Option<Vec<f64>> {
        let (mut w, z) = self.posterior_weights(u_t, x0, t);
        if z <= 0.0 {
            return None;
        }
        w.iter_mut().for_each(|v| *v /= z);
        Some(w)
    }

    /// Per-position posterior `q(u_{t-1} | u_t, u_0)`.
    pub fn posterior(&self, u_t: &[Token], u0: &[Token], t: usize) -> Result<CategoricalState> {
        self.check_step(t)?;
        self.check_tokens(u_t, true)?;
        self.check_tokens(u0, false)?;
        if u_t.len() != u0.len() {
            return Err(Error::DimensionMismatch {
                expected: u0.len(),
                actual: u_t.len(),
                context: "posterior sequence length",
            });
        }
        let mut probs = Mat::zeros(u0.len(), self.num_states());
        for (i, (&xt, &x0)) in u_t.iter().zip(u0).enumerate() {
            let row = self.posterior_probs(xt, x0, t).ok_or(Error::ImpossiblePosterior {
                position: i,
                token_t: xt,
                token_0: x0,
                step: t,
            })?;
            probs.row_mut(i).copy_from_slice(&row);
        }
        Ok(CategoricalState { probs })
    }

    /// Posterior for every candidate clean token at once: column `j` is
    /// `q(u_{t-1} | u_t, u_0 = j)`; `possible[j]` is false (and the column
    /// zero) when `u_t` cannot arise from `j`.
    pub fn posterior_columns(&self, u_t: Token, t: usize) -> PosteriorColumns {
        let k = self.num_codes;
        let mut probs = Mat::zeros(k + 1, k);
        let mut possible = vec![false; k];
        for j in 0..k {
            let (w, z) = self.posterior_weights(u_t, j as Token, t);
            if z > 0.0 {
                possible[j] = true;
                for (r, v) in w.iter().enumerate() {
                    probs[(r, j)] = v / z;
                }
            }
        }
        PosteriorColumns { probs, possible }
    }

    /// Prior over `u_T` the reverse chain starts from: the mask for the
    /// masked share of the terminal mass, uniform codes for the rest.
    pub fn prior(&self) -> Vec<f64> {
        let g = self.gamma_bar[self.steps()];
        let mut p = vec![(1.0 - g) / self.num_codes as f64; self.num_states()];
        p[self.num_codes] = g;
        p
    }

    /// `KL(q(u_T | u_0) || p(u_T))` summed over positions. Independent of
    /// any model parameters.
    pub fn prior_loss(&self, u0: &[Token]) -> Result<f64> {
        let q = self.marginal(u0, self.steps())?;
        let p = self.prior();
        Ok((0..u0.len())
            .map(|i| {
                let row: Vec<f64> = q.probs.row(i).iter().copied().collect();
                kl_divergence(&row, &p)
            })
            .sum())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ScheduleFile {
            steps: self.steps(),
            num_codes: self.num_codes,
            profile: self.profile,
            alpha: self.alpha.clone(),
            beta: self.beta.clone(),
            gamma: self.gamma.clone(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: ScheduleFile = serde_json::from_str(s)?;
        if f.alpha.len() != f.steps {
            return Err(Error::format("schedule JSON", "T does not match array lengths"));
        }
        Self::from_steps(f.num_codes, f.profile, f.alpha, f.beta, f.gamma)
    }
}

/// See [`NoiseSchedule::posterior_columns`].
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorColumns {
    pub probs: Mat,
    pub possible: Vec<bool>,
}

/// A distribution over states at every position (`n × C`, rows sum to 1).
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalState {
    pub probs: Mat,
}

impl CategoricalState {
    pub fn new(probs: Mat) -> Result<Self> {
        let s = Self { probs };
        s.validate(1e-9)?;
        Ok(s)
    }

    pub fn one_hot(tokens: &[Token], states: usize) -> Self {
        let mut probs = Mat::zeros(tokens.len(), states);
        for (i, &t) in tokens.iter().enumerate() {
            probs[(i, t as usize)] = 1.0;
        }
        Self { probs }
    }

    pub fn len(&self) -> usize {
        self.probs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.nrows() == 0
    }

    pub fn num_states(&self) -> usize {
        self.probs.ncols()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.probs.row(i).iter().copied().collect()
    }

    /// Checks non-negativity and unit row sums within `tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        for (i, row) in self.probs.row_iter().enumerate() {
            if row.iter().any(|&v| !(v >= 0.0)) {
                return Err(Error::Numerical(format!("row {i} has a negative or NaN entry")));
            }
            let s = row.sum();
            if (s - 1.0).abs() > tol {
                return Err(Error::Numerical(format!("row {i} sums to {s}")));
            }
        }
        Ok(())
    }
}

/// `Σ q log(q / max(p, floor))`, skipping `q = 0` terms.
pub fn kl_divergence(q: &[f64], p: &[f64]) -> f64 {
    q.iter()
        .zip(p)
        .filter(|(&qi, _)| qi > 0.0)
        .map(|(&qi, &pi)| qi * (qi.ln() - pi.max(PROB_FLOOR).ln()))
        .sum()
}

/// Variational bound term for reversing step `t` (in `1..=T`), summed over
/// positions.
///
/// `t = 1` is the reconstruction term `-log p(u_0 | u_1)`; `t >= 2` is
/// `KL(q(u_{t-1} | u_t, u_0) || p(u_{t-1} | u_t))`. The prior term for
/// `u_T` is [`NoiseSchedule::prior_loss`].
pub fn vlb_loss(
    model_posterior: &CategoricalState,
    u_t: &[Token],
    u0: &[Token],
    schedule: &NoiseSchedule,
    t: usize,
) -> Result<f64> {
    schedule.check_step(t)?;
    if model_posterior.len() != u0.len() || model_posterior.num_states() != schedule.num_states() {
        return Err(Error::DimensionMismatch {
            expected: u0.len() * schedule.num_states(),
            actual: model_posterior.probs.len(),
            context: "model posterior shape",
        });
    }
    if t == 1 {
        schedule.check_tokens(u0, false)?;
        return Ok(u0
            .iter()
            .enumerate()
            .map(|(i, &x0)| -model_posterior.probs[(i, x0 as usize)].max(PROB_FLOOR).ln())
            .sum());
    }
    let q = schedule.posterior(u_t, u0, t)?;
    Ok((0..u0.len())
        .map(|i| kl_divergence(&q.row(i), &model_posterior.row(i)))
        .sum())
}
