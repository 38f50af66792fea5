//! Procedural walking corpus with curated and wild captions.

use mdd_core::corpus::{Caption, CaptionSource, DatasetManifest, ManifestRecord, Split};
use mdd_core::motion_repr::{JointMotion, Skeleton, Vec3};
use mdd_core::synth::walking_motion;
use rand::seq::IndexedRandom;
use rand::Rng;

use crate::config::SyntheticConfig;

const GAITS: [(f64, &str, &str); 3] = [(0.6, "walks slowly", "strolls"), (1.2, "walks", "moves"), (2.0, "jogs", "runs")];
const TURNS: [(f64, &str, &str); 3] = [
    (0.0, "in a straight line", "straight ahead"),
    (0.5, "while turning left", "curving to the left"),
    (-0.5, "while turning right", "curving to the right"),
];
const OFF_TOPIC: [&str; 4] = [
    "a person waves both arms above the head",
    "someone sits down on a chair",
    "the figure throws a ball overhand",
    "a man kneels and ties a shoe",
];

/// One motion of the corpus with its captions.
pub struct SyntheticItem {
    pub name: String,
    pub motion: JointMotion,
    pub captions: Vec<Caption>,
}

pub fn make_corpus<R: Rng + ?Sized>(cfg: &SyntheticConfig, rng: &mut R) -> Vec<SyntheticItem> {
    let sk = Skeleton::humanml3d();
    let fps_choices = if cfg.source_fps.is_empty() { vec![20] } else { cfg.source_fps.clone() };
    (0..cfg.motions)
        .map(|i| {
            let (speed, gait, wild_gait) = GAITS[i % GAITS.len()];
            let (turn, path, wild_path) = TURNS[(i / GAITS.len()) % TURNS.len()];
            let fps = fps_choices[i % fps_choices.len()];
            let frames20 = rng.random_range(cfg.min_frames..=cfg.max_frames.max(cfg.min_frames));
            let frames = (frames20 * fps as usize).div_ceil(20) + 1;
            let heading = rng.random_range(0.0..std::f64::consts::TAU);
            let speed = speed * rng.random_range(0.9..1.1);
            let motion = walking_motion(&sk, frames, fps, speed, heading, turn)
                .transformed(0.0, Vec3::new(rng.random_range(-3.0..3.0), 0.0, rng.random_range(-3.0..3.0)));
            let mut captions = vec![Caption {
                text: format!("a person {gait} {path}"),
                source: CaptionSource::Curated,
                mm_dist: None,
            }];
            for prefix in ["someone", "the figure"] {
                let text = if rng.random::<f64>() < cfg.off_topic {
                    OFF_TOPIC.choose(rng).expect("non-empty").to_string()
                } else {
                    format!("{prefix} {wild_gait} {wild_path}")
                };
                captions.push(Caption {
                    text,
                    source: CaptionSource::Wild,
                    mm_dist: None,
                });
            }
            SyntheticItem {
                name: format!("m{i:04}"),
                motion,
                captions,
            }
        })
        .collect()
}

pub fn manifest_for(items: &[SyntheticItem], extension: &str) -> DatasetManifest {
    DatasetManifest {
        records: items
            .iter()
            .map(|it| ManifestRecord {
                motion_path: format!("{}.{extension}", it.name),
                captions: it.captions.clone(),
                split: Split::Train,
                uncaptioned: false,
            })
            .collect(),
    }
}
