//! Synthetic scene generation and the action-unit annotation rule.
//!
//! Stands in for a real group-affect corpus at desk scale: feature
//! vectors are drawn from class-dependent Gaussian clusters instead of
//! coming out of the face extractor, and face boxes are laid out so
//! spatial clustering can recover the intended groups. Two flavors:
//!
//! * **Group samples** (still images): the class direction enters with
//!   a random per-group sign, so the class signal lives in the group's
//!   joint structure rather than in any single member's mean — pooling
//!   or concatenating members and fitting a linear classifier gets
//!   nothing, while a fusion model that couples members can separate.
//! * **Videos**: frames carry a weaker, fixed-sign version of the same
//!   signal and frame labels flip with small probability, so evidence
//!   has to be integrated across time.
//!
//! All generators are pure functions of their configuration and seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{GroupRegion, SceneRecord};
use crate::error::{Error, Result};
use crate::grouping::{FaceBox, GroupedFeature};
use crate::metrics::{FaceLabel, GroupLabel, GROUP_LABELS};
use crate::tensor::{standard_normal, Tensor};

/// Prototypical action units per face-level category. Order matters:
/// it is the tie-break when two patterns of equal size both match.
pub const AU_TABLE: &[(FaceLabel, &[u32])] = &[
    (FaceLabel::Happy, &[12, 25]),
    (FaceLabel::Sad, &[4, 15]),
    (FaceLabel::Fearful, &[1, 4, 20, 25]),
    (FaceLabel::Angry, &[4, 7, 24]),
    (FaceLabel::Surprised, &[1, 2, 25, 26]),
    (FaceLabel::Disgusted, &[9, 10, 17]),
    (FaceLabel::Awed, &[1, 2, 5, 25]),
    (FaceLabel::Neutral, &[]),
];

/// Map a set of observed action units to the face category whose full
/// pattern is contained in it, preferring the largest matched pattern;
/// ties break by table order. No match (including the empty set) lands
/// on Neutral via its empty pattern. Total and deterministic.
pub fn au_to_emotion(aus: &[u32]) -> FaceLabel {
    let mut best = FaceLabel::Neutral;
    let mut best_size = 0usize;
    for &(label, pattern) in AU_TABLE {
        if pattern.iter().all(|a| aus.contains(a)) && pattern.len() > best_size {
            best = label;
            best_size = pattern.len();
        }
    }
    // Neutral's empty pattern matches everything at size zero, so a
    // best_size of zero is exactly the no-match case.
    let _ = best_size;
    best
}

/// Face categories carrying each group-level valence.
pub fn faces_for_valence(label: GroupLabel) -> &'static [FaceLabel] {
    match label {
        GroupLabel::Positive => &[FaceLabel::Happy, FaceLabel::Surprised, FaceLabel::Awed],
        GroupLabel::Negative => &[
            FaceLabel::Sad,
            FaceLabel::Fearful,
            FaceLabel::Angry,
            FaceLabel::Disgusted,
        ],
        GroupLabel::Neutral => &[FaceLabel::Neutral],
    }
}

/// Cluster-mean magnitude along the class axis for a given separation:
/// two different-class cluster means sit `separation` apart in R^M.
fn class_gain(separation: f64) -> f64 {
    separation / 2f64.sqrt()
}

/// Draw one member feature: unit Gaussian noise plus `sign * gain` on
/// the coordinate indexed by the class.
fn member_feature(
    m: usize,
    class: GroupLabel,
    gain: f64,
    sign: f64,
    rng: &mut impl Rng,
) -> Tensor {
    let mut data: Vec<f64> = (0..m).map(|_| standard_normal(rng)).collect();
    data[class as usize % m] += sign * gain;
    Tensor::from_vec(&[m], data).expect("vector shape")
}

/// Generate one grouped sample for still-image classification: `n`
/// members in an `m × n_max` grid, padded columns zero and masked out.
/// The class direction enters with a random shared sign per sample, so
/// the marginal mean over samples carries no class information.
pub fn gen_group_sample(
    class: GroupLabel,
    n: usize,
    n_max: usize,
    m: usize,
    separation: f64,
    seed: u64,
) -> Result<(GroupedFeature, GroupLabel)> {
    if n == 0 || n > n_max {
        return Err(Error::invalid(
            "gen_group_sample",
            format!("member count {n} outside 1..={n_max}"),
        ));
    }
    if m == 0 {
        return Err(Error::invalid("gen_group_sample", "feature dim 0"));
    }
    if separation < 0.0 {
        return Err(Error::invalid(
            "gen_group_sample",
            format!("negative separation {separation}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let gain = class_gain(separation);
    let mut s = Tensor::zeros(&[m, n_max]);
    for j in 0..n {
        let feature = member_feature(m, class, gain, sign, &mut rng);
        for i in 0..m {
            s.set2(i, j, feature.data()[i]);
        }
    }
    let mut mask = vec![false; n_max];
    mask[..n].fill(true);
    Ok((
        GroupedFeature {
            s,
            mask,
            group_id: 0,
            member_order: (0..n).collect(),
        },
        class,
    ))
}

/// Knobs for scene/video generation, recorded in run manifests so any
/// dataset can be regenerated exactly.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    /// Number of videos; with `frames_per_video` 1 these are still images.
    pub videos: usize,
    pub frames_per_video: usize,
    pub groups_per_frame: usize,
    pub members_per_group: usize,
    /// Feature vector length M.
    pub feature_dim: usize,
    /// Distance between different-class cluster means in R^M.
    pub separation: f64,
    /// Per-frame probability that the frame label deviates from the
    /// video label.
    pub flip_probability: f64,
    /// Random per-group sign on the class direction (group-sample
    /// datasets); `false` keeps the sign fixed (video datasets).
    pub bimodal: bool,
    pub seed: u64,
}

impl GenConfig {
    /// Still-image group dataset defaults.
    pub fn group_defaults() -> GenConfig {
        GenConfig {
            videos: 300,
            frames_per_video: 1,
            groups_per_frame: 1,
            members_per_group: 4,
            feature_dim: 8,
            separation: 3.0,
            flip_probability: 0.0,
            bimodal: true,
            seed: 0,
        }
    }

    /// Video dataset defaults.
    pub fn video_defaults() -> GenConfig {
        GenConfig {
            videos: 300,
            frames_per_video: 5,
            groups_per_frame: 2,
            members_per_group: 3,
            feature_dim: 8,
            separation: 1.2,
            flip_probability: 0.1,
            bimodal: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames_per_video == 0
            || self.groups_per_frame == 0
            || self.members_per_group == 0
            || self.feature_dim == 0
        {
            return Err(Error::invalid(
                "gen_config",
                "frames, groups, members, and feature dim must be positive",
            ));
        }
        if self.separation < 0.0 {
            return Err(Error::invalid(
                "gen_config",
                format!("negative separation {}", self.separation),
            ));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::invalid(
                "gen_config",
                format!("flip probability {} outside [0, 1]", self.flip_probability),
            ));
        }
        Ok(())
    }
}

/// Group centers far enough apart that spatial clustering is trivially
/// recoverable against the member scatter below.
const GROUP_SPACING: f64 = 600.0;
const GROUP_JITTER: f64 = 50.0;
const MEMBER_SCATTER: f64 = 40.0;

fn other_labels(label: GroupLabel) -> [GroupLabel; 2] {
    let mut out = [GroupLabel::Neutral; 2];
    let mut k = 0;
    for cand in GROUP_LABELS {
        if cand != label {
            out[k] = cand;
            k += 1;
        }
    }
    out
}

/// Lay out one frame: `groups_per_frame` groups of
/// `members_per_group` faces each, all groups carrying `frame_label`.
fn gen_scene(
    cfg: &GenConfig,
    frame_label: GroupLabel,
    frame_id: u64,
    video_id: &str,
    video_label: GroupLabel,
    rng: &mut impl Rng,
) -> SceneRecord {
    let gain = class_gain(cfg.separation);
    let mut faces = Vec::new();
    let mut groups = Vec::new();
    for g in 0..cfg.groups_per_frame {
        let sign = if cfg.bimodal {
            if rng.random::<bool>() {
                1.0
            } else {
                -1.0
            }
        } else {
            1.0
        };
        let gx = 500.0
            + GROUP_SPACING * (g % 3) as f64
            + rng.random_range(-GROUP_JITTER..GROUP_JITTER);
        let gy = 500.0
            + GROUP_SPACING * (g / 3) as f64
            + rng.random_range(-GROUP_JITTER..GROUP_JITTER);
        let palette = faces_for_valence(frame_label);
        let mut members = Vec::new();
        for _ in 0..cfg.members_per_group {
            let face_label = palette[rng.random_range(0..palette.len())];
            let side = rng.random_range(80.0..120.0);
            members.push(faces.len());
            faces.push(FaceBox {
                center: (
                    gx + rng.random_range(-MEMBER_SCATTER..MEMBER_SCATTER),
                    gy + rng.random_range(-MEMBER_SCATTER..MEMBER_SCATTER),
                ),
                size: (side, side),
                feature: member_feature(cfg.feature_dim, frame_label, gain, sign, rng),
                face_label: Some(face_label),
            });
        }
        groups.push(GroupRegion {
            members,
            label: frame_label,
        });
    }
    SceneRecord {
        frame_id,
        faces,
        groups,
        frame_label,
        video_id: video_id.to_string(),
        video_label,
    }
}

/// Generate one video: `frames_per_video` scenes whose frame labels
/// follow the video label except for independent per-frame flips to a
/// uniformly chosen other class.
pub fn gen_video(
    cfg: &GenConfig,
    class: GroupLabel,
    video_id: &str,
    seed: u64,
) -> Result<Vec<SceneRecord>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frames = Vec::with_capacity(cfg.frames_per_video);
    for t in 0..cfg.frames_per_video {
        let frame_label = if rng.random::<f64>() < cfg.flip_probability {
            let others = other_labels(class);
            others[rng.random_range(0..2)]
        } else {
            class
        };
        frames.push(gen_scene(cfg, frame_label, t as u64, video_id, class, &mut rng));
    }
    Ok(frames)
}

/// Per-video seed derivation so generation can shard by video index.
fn video_seed(base: u64, index: u64) -> u64 {
    // splitmix64 step over base + index: well-spread, deterministic.
    let mut z = base
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generate a full dataset: `cfg.videos` videos with classes cycling
/// positive, negative, neutral, concatenated in video order.
pub fn gen_dataset(cfg: &GenConfig) -> Result<Vec<SceneRecord>> {
    cfg.validate()?;
    let mut records = Vec::with_capacity(cfg.videos * cfg.frames_per_video);
    for i in 0..cfg.videos {
        let class = GROUP_LABELS[i % 3];
        let video_id = format!("vid{i:05}");
        let frames = gen_video(cfg, class, &video_id, video_seed(cfg.seed, i as u64))?;
        records.extend(frames);
    }
    Ok(records)
}
