//! Synthetic fixtures: procedural skeleton motion, sinusoid feature clips
//! and token sequences drawn from known bigram chains.

use nalgebra::Matrix3;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::motion_repr::{rotation_y, JointMotion, MotionClip, Skeleton, Vec3};
use crate::nn::Mat;

fn rotation_x(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

/// A walking cycle along a circular arc.
///
/// `speed` is in m/s, `heading` the initial facing (radians from +Z toward
/// +X), `turn_rate` the heading change in rad/s.
pub fn walking_motion(
    skeleton: &Skeleton,
    frames: usize,
    fps: u32,
    speed: f64,
    heading: f64,
    turn_rate: f64,
) -> JointMotion {
    let stride_hz = 0.9 + 0.3 * speed;
    let omega = std::f64::consts::TAU * stride_hz;
    let out = (0..frames)
        .map(|f| {
            let tau = f as f64 / fps as f64;
            let h = heading + turn_rate * tau;
            let (x, z) = if turn_rate.abs() < 1e-12 {
                (speed * tau * heading.sin(), speed * tau * heading.cos())
            } else {
                (
                    speed / turn_rate * (heading.cos() - h.cos()),
                    speed / turn_rate * (h.sin() - heading.sin()),
                )
            };
            let bob = 0.02 * (2.0 * omega * tau).sin();
            let swing = 0.45 * (omega * tau).sin();
            let knee_l = 0.5 * (omega * tau).sin().max(0.0);
            let knee_r = 0.5 * (-(omega * tau).sin()).max(0.0);

            let mut pose = skeleton.rest_pose(Vec3::new(0.0, 0.93 + bob, 0.0));
            pose_leg(&mut pose, skeleton, [1, 4, 7, 10], swing, knee_l);
            pose_leg(&mut pose, skeleton, [2, 5, 8, 11], -swing, knee_r);
            pose_arm(&mut pose, skeleton, [16, 18, 20], -0.6 * swing);
            pose_arm(&mut pose, skeleton, [17, 19, 21], 0.6 * swing);

            let world = rotation_y(h);
            let root = pose[0];
            pose.iter()
                .map(|p| world * (p - Vec3::new(root.x, 0.0, root.z)) + Vec3::new(x, 0.0, z))
                .collect()
        })
        .collect();
    JointMotion { frames: out, fps }
}

fn pose_leg(pose: &mut [Vec3], sk: &Skeleton, chain: [usize; 4], hip_angle: f64, knee_angle: f64) {
    let [hip, knee, ankle, foot] = chain;
    let thigh = rotation_x(-hip_angle);
    let shin = rotation_x(-hip_angle + knee_angle);
    pose[knee] = pose[hip] + thigh * sk.rest_offsets[knee];
    pose[ankle] = pose[knee] + shin * sk.rest_offsets[ankle];
    pose[foot] = pose[ankle] + thigh * sk.rest_offsets[foot];
}

fn pose_arm(pose: &mut [Vec3], sk: &Skeleton, chain: [usize; 3], angle: f64) {
    let [shoulder, elbow, wrist] = chain;
    let droop = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let side = if sk.rest_offsets[elbow].x > 0.0 { droop } else { droop.transpose() };
    let r = rotation_x(-angle) * side;
    pose[elbow] = pose[shoulder] + r * sk.rest_offsets[elbow];
    pose[wrist] = pose[elbow] + r * sk.rest_offsets[wrist];
}

/// Multi-channel sinusoid clips at period 16 frames: channel `c` is
/// `0.5 sin(2π t / 16 + φ + cπ / C)`, with the phase `φ` drawn per clip.
pub fn sinusoid_clips<R: Rng + ?Sized>(count: usize, frames: usize, channels: usize, rng: &mut R) -> Vec<MotionClip> {
    let phase = Uniform::new(0.0, std::f64::consts::TAU).expect("valid range");
    let pi = std::f64::consts::PI;
    (0..count)
        .map(|_| {
            let p = phase.sample(rng);
            let m = Mat::from_fn(frames, channels, |t, c| {
                0.5 * (2.0 * pi * t as f64 / 16.0 + p + c as f64 * pi / channels as f64).sin()
            });
            MotionClip::new(m, 20)
        })
        .collect()
}

/// A first-order Markov chain over `0..K`.
#[derive(Debug, Clone, PartialEq)]
pub struct BigramChain {
    pub initial: Vec<f64>,
    /// Row-stochastic `K × K`.
    pub transition: Mat,
}

impl BigramChain {
    pub fn num_states(&self) -> usize {
        self.initial.len()
    }

    pub fn sample<R: Rng + ?Sized>(&self, length: usize, rng: &mut R) -> Vec<u32> {
        let mut out = Vec::with_capacity(length);
        let mut state = draw(&self.initial, rng);
        out.push(state as u32);
        for _ in 1..length {
            let row: Vec<f64> = self.transition.row(state).iter().copied().collect();
            state = draw(&row, rng);
            out.push(state as u32);
        }
        out
    }

    /// Log-likelihood of a sequence, with `floor` guarding zero entries.
    pub fn log_likelihood(&self, seq: &[u32], floor: f64) -> f64 {
        let mut ll = self.initial[seq[0] as usize].max(floor).ln();
        for w in seq.windows(2) {
            ll += self.transition[(w[0] as usize, w[1] as usize)].max(floor).ln();
        }
        ll
    }

    /// Stationary distribution by power iteration.
    pub fn stationary(transition: &Mat) -> Vec<f64> {
        let k = transition.nrows();
        let mut p = vec![1.0 / k as f64; k];
        for _ in 0..10_000 {
            let mut next = vec![0.0; k];
            for (i, &pi) in p.iter().enumerate() {
                for (j, n) in next.iter_mut().enumerate() {
                    *n += pi * transition[(i, j)];
                }
            }
            let delta: f64 = next.iter().zip(&p).map(|(a, b)| (a - b).abs()).sum();
            p = next;
            if delta < 1e-15 {
                break;
            }
        }
        p
    }

    /// Expected frequency of each adjacent pair `(a, b)` over the `length - 1`
    /// transitions of a sequence.
    pub fn expected_pair_frequencies(&self, length: usize) -> Mat {
        let k = self.num_states();
        let mut marginal = self.initial.clone();
        let mut out = Mat::zeros(k, k);
        for _ in 0..length.saturating_sub(1) {
            let mut next = vec![0.0; k];
            for a in 0..k {
                for b in 0..k {
                    let m = marginal[a] * self.transition[(a, b)];
                    out[(a, b)] += m;
                    next[b] += m;
                }
            }
            marginal = next;
        }
        out / (length.saturating_sub(1).max(1) as f64)
    }
}

/// Two chains over `K` states sharing a common backbone (`+1, +2` steps) and
/// differing in a class-specific component of weight `class_weight`.
pub fn two_class_chains(num_states: usize, class_weight: f64) -> [BigramChain; 2] {
    let k = num_states;
    let build = |offsets: &[(usize, f64)]| {
        let mut t = Mat::zeros(k, k);
        for a in 0..k {
            for &(off, w) in [(1usize, 0.55), (2, 0.35), (k - 1, 0.10)].iter() {
                t[(a, (a + off) % k)] += (1.0 - class_weight) * w;
            }
            for &(off, w) in offsets {
                t[(a, (a + off) % k)] += class_weight * w;
            }
        }
        let initial = BigramChain::stationary(&t);
        BigramChain { initial, transition: t }
    };
    [
        build(&[(3, 0.7), (4, 0.3)]),
        build(&[(k - 2, 0.7), (k - 3, 0.3)]),
    ]
}

fn draw<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Row-wise standard normal noise; used by metric fixtures.
pub fn gaussian_rows<R: Rng + ?Sized>(rows: usize, cols: usize, mean: f64, std: f64, rng: &mut R) -> Mat {
    let n = Normal::new(mean, std).expect("valid normal");
    Mat::from_fn(rows, cols, |_, _| n.sample(rng))
}
