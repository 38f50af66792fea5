//! Joint-position motion, its canonical framing, and the redundant per-frame
//! pose feature used throughout the pipeline.
//!
//! Feature layout for a `j`-joint skeleton (263 values for `j = 22`):
//!
//! | slice            | width      | content                                   |
//! |------------------|------------|-------------------------------------------|
//! | `0`              | 1          | root angular velocity about +Y (rad/frame) |
//! | `1..3`           | 2          | root velocity in the facing frame (x, z)   |
//! | `3`              | 1          | root height                                |
//! | positions        | 3(j-1)     | root-relative joint positions, root excluded |
//! | velocities       | 3j         | joint velocities in the facing frame       |
//! | rotations        | 6(j-1)     | 6D bone rotations, root excluded           |
//! | contacts         | 4          | left heel, left toe, right heel, right toe |
//!
//! A clip of `N` joint frames encodes to `N - 1` feature frames: the last
//! frame has no successor to difference against and is dropped.

use std::io::{Read, Write};

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::io::{expect_magic, read_f32s, read_u32, write_f32s, write_u32};
use crate::nn::Mat;

pub type Vec3 = Vector3<f64>;

pub const NUM_JOINTS: usize = 22;
pub const TARGET_FPS: u32 = 20;
pub const MAX_FRAMES: usize = 196;
pub const DEFAULT_CONTACT_THRESHOLD: f64 = 0.002;
pub const FORMAT_VERSION: u32 = 1;

/// Width of the pose feature for a `joints`-joint skeleton.
pub const fn feature_dim(joints: usize) -> usize {
    4 + 3 * (joints - 1) + 3 * joints + 6 * (joints - 1) + 4
}

pub const FEATURE_DIM: usize = feature_dim(NUM_JOINTS);

/// Kinematic tree plus rest-pose bone offsets (meters).
#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    pub parents: Vec<Option<usize>>,
    pub rest_offsets: Vec<Vec3>,
    pub left_hip: usize,
    pub right_hip: usize,
    /// Left heel, left toe, right heel, right toe.
    pub feet: [usize; 4],
}

impl Skeleton {
    /// The 22-joint body template (SMPL joint order, +Y up, facing +Z).
    pub fn humanml3d() -> Self {
        let parents = [
            -1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19,
        ];
        let offsets: [[f64; 3]; NUM_JOINTS] = [
            [0.0, 0.0, 0.0],
            [0.10, -0.08, 0.0],  // left hip
            [-0.10, -0.08, 0.0], // right hip
            [0.0, 0.12, 0.0],    // spine1
            [0.0, -0.40, 0.0],   // left knee
            [0.0, -0.40, 0.0],   // right knee
            [0.0, 0.14, 0.0],    // spine2
            [0.0, -0.40, 0.0],   // left ankle
            [0.0, -0.40, 0.0],   // right ankle
            [0.0, 0.05, 0.0],    // spine3
            [0.0, -0.05, 0.12],  // left foot
            [0.0, -0.05, 0.12],  // right foot
            [0.0, 0.20, 0.0],    // neck
            [0.08, 0.12, 0.0],   // left collar
            [-0.08, 0.12, 0.0],  // right collar
            [0.0, 0.10, 0.03],   // head
            [0.12, 0.0, 0.0],    // left shoulder
            [-0.12, 0.0, 0.0],   // right shoulder
            [0.26, 0.0, 0.0],    // left elbow
            [-0.26, 0.0, 0.0],   // right elbow
            [0.25, 0.0, 0.0],    // left wrist
            [-0.25, 0.0, 0.0],   // right wrist
        ];
        Self {
            parents: parents
                .iter()
                .map(|&p| if p < 0 { None } else { Some(p as usize) })
                .collect(),
            rest_offsets: offsets.iter().map(|o| Vec3::new(o[0], o[1], o[2])).collect(),
            left_hip: 1,
            right_hip: 2,
            feet: [7, 10, 8, 11],
        }
    }

    pub fn num_joints(&self) -> usize {
        self.parents.len()
    }

    /// Rest pose joint positions with the root at `root`.
    pub fn rest_pose(&self, root: Vec3) -> Vec<Vec3> {
        let mut out = vec![root; self.num_joints()];
        for j in 1..self.num_joints() {
            let p = self.parents[j].expect("non-root joint has a parent");
            out[j] = out[p] + self.rest_offsets[j];
        }
        out
    }
}

/// Positions of every joint at every frame.
#[derive(Debug, Clone, PartialEq)]
pub struct JointMotion {
    pub frames: Vec<Vec<Vec3>>,
    pub fps: u32,
}

impl JointMotion {
    pub fn new(frames: Vec<Vec<Vec3>>, fps: u32) -> Result<Self> {
        let m = Self { frames, fps };
        m.validate()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn num_joints(&self) -> usize {
        self.frames.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.fps == 0 {
            return Err(Error::invalid("fps must be positive"));
        }
        let j = self.num_joints();
        for (i, f) in self.frames.iter().enumerate() {
            if f.len() != j {
                return Err(Error::DimensionMismatch {
                    expected: j,
                    actual: f.len(),
                    context: "joints per frame",
                });
            }
            if f.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
                return Err(Error::invalid(format!("non-finite coordinate in frame {i}")));
            }
        }
        Ok(())
    }

    /// Applies `p -> R_y(angle) p + offset` to every joint of every frame.
    pub fn transformed(&self, angle: f64, offset: Vec3) -> Self {
        let rot = rotation_y(angle);
        Self {
            frames: self
                .frames
                .iter()
                .map(|f| f.iter().map(|p| rot * p + offset).collect())
                .collect(),
            fps: self.fps,
        }
    }

    pub fn max_abs_diff(&self, other: &JointMotion) -> f64 {
        self.frames
            .iter()
            .zip(&other.frames)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q).amax()))
            .fold(0.0, f64::max)
    }

    /// Writes the `JNTM` format: magic, version, fps, frame count, joint
    /// count, then `N × j × 3` little-endian `f32`.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(b"JNTM")?;
        write_u32(w, FORMAT_VERSION)?;
        write_u32(w, self.fps)?;
        write_u32(w, self.len() as u32)?;
        write_u32(w, self.num_joints() as u32)?;
        for f in &self.frames {
            write_f32s(w, f.iter().flat_map(|p| p.iter().copied()))?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        expect_magic(r, b"JNTM", "JNTM")?;
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(Error::format("JNTM", format!("unsupported version {version}")));
        }
        let fps = read_u32(r)?;
        let n = read_u32(r)? as usize;
        let j = read_u32(r)? as usize;
        let values = read_f32s(r, n * j * 3)?;
        let frames = values
            .chunks_exact(j * 3)
            .map(|f| f.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect())
            .collect();
        JointMotion::new(frames, fps)
    }
}

/// A sequence of feature frames (`N × D`) at a fixed frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionClip {
    pub features: Mat,
    pub fps: u32,
}

impl MotionClip {
    pub fn new(features: Mat, fps: u32) -> Self {
        Self { features, fps }
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn pose(&self, frame: usize, joints: usize) -> Result<PoseFeature> {
        let row: Vec<f64> = self.features.row(frame).iter().copied().collect();
        PoseFeature::from_slice(&row, joints)
    }

    /// Writes the `MCLP` format: magic, version, fps, N, D, then `N × D`
    /// little-endian `f32`, row-major.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(b"MCLP")?;
        write_u32(w, FORMAT_VERSION)?;
        write_u32(w, self.fps)?;
        write_u32(w, self.len() as u32)?;
        write_u32(w, self.dim() as u32)?;
        for i in 0..self.len() {
            write_f32s(w, self.features.row(i).iter().copied())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        expect_magic(r, b"MCLP", "MCLP")?;
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(Error::format("MCLP", format!("unsupported version {version}")));
        }
        let fps = read_u32(r)?;
        let n = read_u32(r)? as usize;
        let d = read_u32(r)? as usize;
        let values = read_f32s(r, n * d)?;
        Ok(Self::new(Mat::from_row_slice(n, d, &values), fps))
    }
}

/// One frame of the redundant pose representation.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseFeature {
    pub root_angular_velocity: f64,
    pub root_velocity_xz: [f64; 2],
    pub root_height: f64,
    pub local_positions: Vec<f64>,
    pub local_velocities: Vec<f64>,
    pub local_rotations: Vec<f64>,
    pub foot_contacts: [f64; 4],
}

impl PoseFeature {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(4 + self.local_positions.len() * 4 + 4);
        v.push(self.root_angular_velocity);
        v.extend_from_slice(&self.root_velocity_xz);
        v.push(self.root_height);
        v.extend_from_slice(&self.local_positions);
        v.extend_from_slice(&self.local_velocities);
        v.extend_from_slice(&self.local_rotations);
        v.extend_from_slice(&self.foot_contacts);
        v
    }

    pub fn from_slice(v: &[f64], joints: usize) -> Result<Self> {
        if joints < 2 {
            return Err(Error::invalid("pose feature needs at least two joints"));
        }
        if v.len() != feature_dim(joints) {
            return Err(Error::DimensionMismatch {
                expected: feature_dim(joints),
                actual: v.len(),
                context: "pose feature width",
            });
        }
        let p = 4;
        let vel = p + 3 * (joints - 1);
        let rot = vel + 3 * joints;
        let fc = rot + 6 * (joints - 1);
        Ok(Self {
            root_angular_velocity: v[0],
            root_velocity_xz: [v[1], v[2]],
            root_height: v[3],
            local_positions: v[p..vel].to_vec(),
            local_velocities: v[vel..rot].to_vec(),
            local_rotations: v[rot..fc].to_vec(),
            foot_contacts: [v[fc], v[fc + 1], v[fc + 2], v[fc + 3]],
        })
    }
}

/// Rotation about +Y by `angle` (right-handed; +Z turns toward +X).
pub fn rotation_y(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut a = a % two_pi;
    if a > std::f64::consts::PI {
        a -= two_pi;
    } else if a <= -std::f64::consts::PI {
        a += two_pi;
    }
    a
}

/// Heading of a pose: angle of its forward direction measured from +Z
/// toward +X. Forward is `up × (right_hip - left_hip)` projected on XZ.
pub fn heading(pose: &[Vec3], skeleton: &Skeleton) -> f64 {
    let across = pose[skeleton.right_hip] - pose[skeleton.left_hip];
    let forward = Vec3::y().cross(&across);
    if forward.x.hypot(forward.z) < 1e-12 {
        return 0.0;
    }
    forward.x.atan2(forward.z)
}

/// Shortest-arc rotation taking unit vector `from` onto unit vector `to`.
pub fn shortest_arc(from: &Vec3, to: &Vec3) -> Matrix3<f64> {
    let v = from.cross(to);
    let c = from.dot(to);
    if c > -1.0 + 1e-9 {
        let k = v.cross_matrix();
        Matrix3::identity() + k + k * k / (1.0 + c)
    } else {
        // Half turn about any axis orthogonal to `from`.
        let helper = if from.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
        let u = from.cross(&helper).normalize();
        2.0 * u * u.transpose() - Matrix3::identity()
    }
}

/// First two columns of a rotation matrix, column-major.
pub fn rotation_to_6d(r: &Matrix3<f64>) -> [f64; 6] {
    [r[(0, 0)], r[(1, 0)], r[(2, 0)], r[(0, 1)], r[(1, 1)], r[(2, 1)]]
}

/// Rebuilds a rotation from its 6D form by Gram–Schmidt.
pub fn rotation_from_6d(v: &[f64; 6]) -> Matrix3<f64> {
    let a = Vec3::new(v[0], v[1], v[2]).normalize();
    let b = Vec3::new(v[3], v[4], v[5]);
    let b = (b - a * a.dot(&b)).normalize();
    let c = a.cross(&b);
    Matrix3::from_columns(&[a, b, c])
}

/// Output of [`canonicalize`].
#[derive(Debug, Clone, PartialEq)]
pub struct Canonicalized {
    pub motion: JointMotion,
    /// Set when the source rate was not an integer multiple of the target
    /// and frames had to be interpolated.
    pub resampled: bool,
}

fn lerp_frame(a: &[Vec3], b: &[Vec3], w: f64) -> Vec<Vec3> {
    a.iter().zip(b).map(|(p, q)| p * (1.0 - w) + q * w).collect()
}

/// Brings a clip to the common frame: `target_fps`, at most `max_frames`
/// frames (the leading ones are kept), frame-0 root over the XZ origin and
/// frame-0 facing +Z.
pub fn canonicalize(
    motion: &JointMotion,
    skeleton: &Skeleton,
    target_fps: u32,
    max_frames: usize,
) -> Result<Canonicalized> {
    motion.validate()?;
    if motion.len() < 2 {
        return Err(Error::invalid("canonicalize needs at least 2 frames"));
    }
    if target_fps == 0 || motion.fps < target_fps {
        return Err(Error::invalid(format!(
            "cannot raise {} fps to {target_fps} fps",
            motion.fps
        )));
    }
    if motion.num_joints() != skeleton.num_joints() {
        return Err(Error::DimensionMismatch {
            expected: skeleton.num_joints(),
            actual: motion.num_joints(),
            context: "skeleton joint count",
        });
    }

    let resampled = motion.fps % target_fps != 0;
    let mut frames: Vec<Vec<Vec3>> = if !resampled {
        let stride = (motion.fps / target_fps) as usize;
        motion.frames.iter().step_by(stride).cloned().collect()
    } else {
        let ratio = motion.fps as f64 / target_fps as f64;
        let last = (motion.len() - 1) as f64;
        let count = (last / ratio).floor() as usize + 1;
        (0..count)
            .map(|k| {
                let src = k as f64 * ratio;
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(motion.len() - 1);
                lerp_frame(&motion.frames[lo], &motion.frames[hi], src - lo as f64)
            })
            .collect()
    };
    frames.truncate(max_frames);

    let root0 = frames[0][0];
    let shift = Vec3::new(-root0.x, 0.0, -root0.z);
    let angle = -heading(&frames[0], skeleton);
    let rot = rotation_y(angle);
    for f in frames.iter_mut() {
        for p in f.iter_mut() {
            *p = rot * (*p + shift);
        }
    }
    Ok(Canonicalized {
        motion: JointMotion {
            frames,
            fps: target_fps,
        },
        resampled,
    })
}

/// Per-frame heel/toe contact flags; entry is 1 when that joint moves less
/// than `threshold` meters to the next frame.
pub fn detect_foot_contacts(motion: &JointMotion, skeleton: &Skeleton, threshold: f64) -> Vec<[f64; 4]> {
    motion
        .frames
        .windows(2)
        .map(|w| {
            let mut c = [0.0; 4];
            for (slot, &j) in c.iter_mut().zip(&skeleton.feet) {
                if (w[1][j] - w[0][j]).norm() < threshold {
                    *slot = 1.0;
                }
            }
            c
        })
        .collect()
}

/// Encodes a canonicalized motion into `N - 1` feature frames.
pub fn encode_features(motion: &JointMotion, skeleton: &Skeleton, contact_threshold: f64) -> Result<MotionClip> {
    motion.validate()?;
    let j = motion.num_joints();
    if j != skeleton.num_joints() {
        return Err(Error::DimensionMismatch {
            expected: skeleton.num_joints(),
            actual: j,
            context: "skeleton joint count",
        });
    }
    if motion.len() < 2 {
        return Err(Error::invalid("encoding needs at least 2 frames"));
    }
    let rest_dirs: Vec<Vec3> = skeleton
        .rest_offsets
        .iter()
        .map(|o| if o.norm() > 0.0 { o.normalize() } else { Vec3::y() })
        .collect();
    let headings: Vec<f64> = motion.frames.iter().map(|f| heading(f, skeleton)).collect();
    let contacts = detect_foot_contacts(motion, skeleton, contact_threshold);

    let n = motion.len() - 1;
    let dim = feature_dim(j);
    let mut out = Mat::zeros(n, dim);
    for i in 0..n {
        let cur = &motion.frames[i];
        let next = &motion.frames[i + 1];
        let to_local = rotation_y(-headings[i]);
        let root = cur[0];

        let mut feat = PoseFeature {
            root_angular_velocity: wrap_angle(headings[i + 1] - headings[i]),
            root_velocity_xz: [0.0; 2],
            root_height: root.y,
            local_positions: Vec::with_capacity(3 * (j - 1)),
            local_velocities: Vec::with_capacity(3 * j),
            local_rotations: Vec::with_capacity(6 * (j - 1)),
            foot_contacts: contacts[i],
        };
        let v = to_local * (next[0] - root);
        feat.root_velocity_xz = [v.x, v.z];

        for k in 1..j {
            let rel = Vec3::new(cur[k].x - root.x, cur[k].y, cur[k].z - root.z);
            feat.local_positions.extend((to_local * rel).iter());
        }
        for k in 0..j {
            feat.local_velocities.extend((to_local * (next[k] - cur[k])).iter());
        }
        for k in 1..j {
            let parent = skeleton.parents[k].expect("non-root joint has a parent");
            let bone = to_local * (cur[k] - cur[parent]);
            let r = if bone.norm() > 1e-12 {
                shortest_arc(&rest_dirs[k], &bone.normalize())
            } else {
                Matrix3::identity()
            };
            feat.local_rotations.extend(rotation_to_6d(&r));
        }
        out.row_mut(i).copy_from_slice(&feat.to_vec());
    }
    Ok(MotionClip::new(out, motion.fps))
}

/// Recovers joint positions from feature frames. The first frame is placed
/// with its root over the origin facing +Z, matching a canonicalized input.
pub fn decode_features(clip: &MotionClip, joints: usize) -> Result<JointMotion> {
    if clip.dim() != feature_dim(joints) {
        return Err(Error::DimensionMismatch {
            expected: feature_dim(joints),
            actual: clip.dim(),
            context: "pose feature width",
        });
    }
    let mut frames = Vec::with_capacity(clip.len());
    let mut angle = 0.0;
    let mut root_xz = Vec3::zeros();
    for i in 0..clip.len() {
        let pose = clip.pose(i, joints)?;
        let to_world = rotation_y(angle);
        let root = Vec3::new(root_xz.x, pose.root_height, root_xz.z);
        let mut frame = Vec::with_capacity(joints);
        frame.push(root);
        for c in pose.local_positions.chunks_exact(3) {
            let p = to_world * Vec3::new(c[0], c[1], c[2]);
            frame.push(Vec3::new(p.x + root.x, p.y, p.z + root.z));
        }
        frames.push(frame);

        let step = to_world * Vec3::new(pose.root_velocity_xz[0], 0.0, pose.root_velocity_xz[1]);
        root_xz += Vec3::new(step.x, 0.0, step.z);
        angle += pose.root_angular_velocity;
    }
    JointMotion::new(frames, clip.fps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::walking_motion;
    use nalgebra::{Rotation3, Unit};

    fn skel() -> Skeleton {
        Skeleton::humanml3d()
    }

    fn still(frames: usize, fps: u32) -> JointMotion {
        let pose = skel().rest_pose(Vec3::new(0.0, 0.93, 0.0));
        JointMotion::new(vec![pose; frames], fps).unwrap()
    }

    #[test]
    fn feature_width_is_263() {
        assert_eq!(FEATURE_DIM, 263);
        assert_eq!(4 + 63 + 66 + 126 + 4, FEATURE_DIM);
    }

    #[test]
    fn rest_pose_faces_plus_z() {
        let pose = skel().rest_pose(Vec3::zeros());
        assert!(heading(&pose, &skel()).abs() < 1e-12);
    }

    #[test]
    fn canonical_input_is_unchanged() {
        let m = still(10, 20);
        let c = canonicalize(&m, &skel(), 20, MAX_FRAMES).unwrap();
        assert!(!c.resampled);
        assert!(c.motion.max_abs_diff(&m) < 1e-15);
        assert_eq!(c.motion.len(), 10);
    }

    #[test]
    fn forty_fps_is_decimated_and_cropped() {
        let m = walking_motion(&skel(), 400, 40, 1.2, 0.3, 0.0);
        let c = canonicalize(&m, &skel(), 20, MAX_FRAMES).unwrap();
        assert_eq!(c.motion.fps, 20);
        assert_eq!(c.motion.len(), 196);
        assert!(!c.resampled);
    }

    #[test]
    fn non_integer_rate_is_interpolated_and_flagged() {
        let m = walking_motion(&skel(), 90, 30, 1.0, 0.0, 0.0);
        let c = canonicalize(&m, &skel(), 20, MAX_FRAMES).unwrap();
        assert!(c.resampled);
        // 89 frames at 30 fps span 2.9666 s -> 60 frames at 20 fps
        assert_eq!(c.motion.len(), 60);
    }

    #[test]
    fn too_short_or_too_slow_is_rejected() {
        assert!(canonicalize(&still(1, 20), &skel(), 20, 196).is_err());
        assert!(canonicalize(&still(5, 10), &skel(), 20, 196).is_err());
    }

    #[test]
    fn offset_clip_facing_minus_x_is_recentred() {
        // rest pose faces +Z; turning by -pi/2 makes it face -X
        let base = still(3, 20);
        let mut m = base.transformed(-std::f64::consts::FRAC_PI_2, Vec3::new(1.0, 0.0, 2.0));
        // give the later frames some motion so the shared transform is visible
        for (i, f) in m.frames.iter_mut().enumerate() {
            for p in f.iter_mut() {
                p.x -= 0.1 * i as f64;
            }
        }
        assert!((heading(&m.frames[0], &skel()) + std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        let c = canonicalize(&m, &skel(), 20, 196).unwrap().motion;
        let root = c.frames[0][0];
        assert!((root - Vec3::new(0.0, 0.93, 0.0)).amax() < 1e-12);
        assert!(heading(&c.frames[0], &skel()).abs() < 1e-12);

        // by hand: p -> R_y(+pi/2) (p - (1, 0, 2)); R_y(pi/2) maps (x, y, z) to (z, y, -x)
        for (fi, f) in m.frames.iter().enumerate() {
            for (ji, p) in f.iter().enumerate() {
                let q = Vec3::new(p.x - 1.0, p.y, p.z - 2.0);
                let expected = Vec3::new(q.z, q.y, -q.x);
                assert!((c.frames[fi][ji] - expected).amax() < 1e-12);
            }
        }
    }

    #[test]
    fn standing_still_has_zero_velocity_and_full_contact() {
        let clip = encode_features(&still(6, 20), &skel(), DEFAULT_CONTACT_THRESHOLD).unwrap();
        assert_eq!(clip.len(), 5);
        for i in 0..clip.len() {
            let p = clip.pose(i, NUM_JOINTS).unwrap();
            assert_eq!(p.root_angular_velocity, 0.0);
            assert_eq!(p.root_velocity_xz, [0.0, 0.0]);
            assert!(p.local_velocities.iter().all(|&v| v == 0.0));
            assert_eq!(p.foot_contacts, [1.0; 4]);
        }
    }

    #[test]
    fn uniform_translation_along_z() {
        let v = 0.05;
        let pose = skel().rest_pose(Vec3::new(0.0, 0.93, 0.0));
        let frames = (0..5)
            .map(|i| pose.iter().map(|p| p + Vec3::new(0.0, 0.0, v * i as f64)).collect())
            .collect();
        let m = JointMotion::new(frames, 20).unwrap();
        let clip = encode_features(&m, &skel(), DEFAULT_CONTACT_THRESHOLD).unwrap();
        for i in 0..clip.len() {
            let p = clip.pose(i, NUM_JOINTS).unwrap();
            assert!((p.root_velocity_xz[1] - v).abs() < 1e-12);
            assert!(p.root_velocity_xz[0].abs() < 1e-12);
            assert!(p.root_angular_velocity.abs() < 1e-12);
            assert_eq!(p.foot_contacts, [0.0; 4]);
        }
    }

    /// Independent reference: headings via atan2 on the hip axis, local
    /// frames via nalgebra rotations, bone rotations via axis-angle.
    fn reference_features(m: &JointMotion, sk: &Skeleton, thr: f64) -> Vec<Vec<f64>> {
        let yaw = |f: &Vec<Vec3>| {
            let a = f[sk.right_hip] - f[sk.left_hip];
            // forward = (a.z, 0, -a.x)
            a.z.atan2(-a.x)
        };
        let mut rows = Vec::new();
        for i in 0..m.len() - 1 {
            let (cur, next) = (&m.frames[i], &m.frames[i + 1]);
            let h0 = yaw(cur);
            let h1 = yaw(next);
            let inv = Rotation3::from_axis_angle(&Vec3::y_axis(), -h0);
            let mut row = vec![];
            let mut dh = h1 - h0;
            while dh > std::f64::consts::PI {
                dh -= std::f64::consts::TAU;
            }
            while dh <= -std::f64::consts::PI {
                dh += std::f64::consts::TAU;
            }
            row.push(dh);
            let rv = inv * (next[0] - cur[0]);
            row.extend([rv.x, rv.z, cur[0].y]);
            for k in 1..cur.len() {
                let mut rel = cur[k] - cur[0];
                rel.y = cur[k].y;
                row.extend((inv * rel).iter());
            }
            for k in 0..cur.len() {
                row.extend((inv * (next[k] - cur[k])).iter());
            }
            for k in 1..cur.len() {
                let p = sk.parents[k].unwrap();
                let bone = (inv * (cur[k] - cur[p])).normalize();
                let rest = sk.rest_offsets[k].normalize();
                let axis = rest.cross(&bone);
                let angle = axis.norm().atan2(rest.dot(&bone));
                let r = if axis.norm() < 1e-12 {
                    Rotation3::identity()
                } else {
                    Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle)
                };
                let mat = r.matrix();
                // Gram-Schmidt on the two stored columns must give the same frame back
                let a = mat.column(0).into_owned();
                let b = mat.column(1).into_owned();
                let b = (b - a * a.dot(&b)).normalize();
                row.extend(a.iter());
                row.extend(b.iter());
            }
            for &f in &sk.feet {
                row.push(if (next[f] - cur[f]).norm() < thr { 1.0 } else { 0.0 });
            }
            rows.push(row);
        }
        rows
    }

    #[test]
    fn walking_fixture_matches_reference() {
        let sk = skel();
        let m = walking_motion(&sk, 5, 20, 1.1, 0.4, 0.35);
        let m = canonicalize(&m, &sk, 20, 196).unwrap().motion;
        let clip = encode_features(&m, &sk, DEFAULT_CONTACT_THRESHOLD).unwrap();
        let reference = reference_features(&m, &sk, DEFAULT_CONTACT_THRESHOLD);
        assert_eq!(clip.len(), 4);
        for (i, row) in reference.iter().enumerate() {
            for (k, &v) in row.iter().enumerate() {
                let got = clip.features[(i, k)];
                assert!((got - v).abs() < 1e-10, "frame {i} col {k}: {got} vs {v}");
            }
        }
    }

    #[test]
    fn six_d_roundtrip() {
        let r = Rotation3::from_euler_angles(0.3, -1.1, 2.0).into_inner();
        let back = rotation_from_6d(&rotation_to_6d(&r));
        assert!((back - r).amax() < 1e-12);
    }

    #[test]
    fn shortest_arc_handles_opposite_vectors() {
        let a = Vec3::y();
        let r = shortest_arc(&a, &-a);
        assert!((r * a + a).amax() < 1e-12);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn decode_inverts_encode() {
        let sk = skel();
        let m = canonicalize(&walking_motion(&sk, 60, 20, 1.3, 0.8, 0.2), &sk, 20, 196)
            .unwrap()
            .motion;
        let clip = encode_features(&m, &sk, DEFAULT_CONTACT_THRESHOLD).unwrap();
        let back = decode_features(&clip, NUM_JOINTS).unwrap();
        assert_eq!(back.len(), m.len() - 1);
        let trimmed = JointMotion {
            frames: m.frames[..m.len() - 1].to_vec(),
            fps: 20,
        };
        assert!(back.max_abs_diff(&trimmed) < 1e-4);
    }

    #[test]
    fn zero_velocity_clip_decodes_to_constant_pose() {
        let clip = encode_features(&still(5, 20), &skel(), DEFAULT_CONTACT_THRESHOLD).unwrap();
        let back = decode_features(&clip, NUM_JOINTS).unwrap();
        for f in &back.frames {
            for (p, q) in f.iter().zip(&back.frames[0]) {
                assert!((p - q).amax() < 1e-15);
            }
        }
    }

    #[test]
    fn single_frame_clip_decodes_at_root_height() {
        let full = encode_features(&still(2, 20), &skel(), DEFAULT_CONTACT_THRESHOLD).unwrap();
        assert_eq!(full.len(), 1);
        let back = decode_features(&full, NUM_JOINTS).unwrap();
        assert_eq!(back.len(), 1);
        assert!((back.frames[0][0].y - 0.93).abs() < 1e-15);
    }

    #[test]
    fn contacts_static_and_fast() {
        let sk = skel();
        assert!(detect_foot_contacts(&still(4, 20), &sk, 0.002)
            .iter()
            .all(|c| *c == [1.0; 4]));
        let pose = sk.rest_pose(Vec3::zeros());
        let moving = JointMotion::new(
            (0..4)
                .map(|i| pose.iter().map(|p| p + Vec3::new(0.02 * i as f64, 0.0, 0.0)).collect())
                .collect(),
            20,
        )
        .unwrap();
        assert!(detect_foot_contacts(&moving, &sk, 0.002)
            .iter()
            .all(|c| *c == [0.0; 4]));
    }

    #[test]
    fn contacts_with_one_planted_foot() {
        // left foot planted, right foot swinging 1 cm/frame then stopping
        let sk = skel();
        let pose = sk.rest_pose(Vec3::new(0.0, 0.93, 0.0));
        let right_offsets = [0.0, 0.01, 0.02, 0.0205];
        let frames: Vec<Vec<Vec3>> = right_offsets
            .iter()
            .map(|&dz| {
                let mut f = pose.clone();
                f[8].z += dz;
                f[11].z += dz;
                f
            })
            .collect();
        let m = JointMotion::new(frames, 20).unwrap();
        let c = detect_foot_contacts(&m, &sk, 0.002);
        // speeds of the right heel/toe: 0.01, 0.01, 0.0005
        assert_eq!(c, vec![[1.0, 1.0, 0.0, 0.0], [1.0, 1.0, 0.0, 0.0], [1.0, 1.0, 1.0, 1.0]]);
    }

    #[test]
    fn non_finite_coordinates_are_rejected() {
        let mut m = still(3, 20);
        m.frames[1][4].x = f64::NAN;
        assert!(encode_features(&m, &skel(), 0.002).is_err());
    }

    #[test]
    fn binary_formats_roundtrip() {
        let sk = skel();
        let m = walking_motion(&sk, 8, 20, 1.0, 0.0, 0.0);
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"JNTM");
        assert_eq!(buf.len(), 20 + 8 * 22 * 3 * 4);
        let back = JointMotion::read_from(&mut buf.as_slice()).unwrap();
        assert!(back.max_abs_diff(&m) < 1e-6);

        let clip = encode_features(&m, &sk, 0.002).unwrap();
        let mut buf = Vec::new();
        clip.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"MCLP");
        assert_eq!(buf.len(), 20 + 7 * 263 * 4);
        let back = MotionClip::read_from(&mut buf.as_slice()).unwrap();
        assert!((back.features - &clip.features).amax() < 1e-5);
    }
}
