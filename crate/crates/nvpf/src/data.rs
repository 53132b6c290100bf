//! Dataset records and the line-delimited file format.
//!
//! A dataset is a text file with one JSON object per line, each a
//! [`SceneRecord`]: the faces detected in one frame, how they are
//! partitioned into groups, and the labels at every level. Readers
//! report malformed input by line number and validate the structural
//! invariant that every face belongs to exactly one group.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grouping::FaceBox;
use crate::metrics::{FaceLabel, GroupLabel};

/// One spatial group within a frame: member indices into the frame's
/// face list plus the group-level label.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GroupRegion {
    pub members: Vec<usize>,
    pub label: GroupLabel,
}

/// Everything known about one annotated frame.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SceneRecord {
    pub frame_id: u64,
    pub faces: Vec<FaceBox>,
    pub groups: Vec<GroupRegion>,
    pub frame_label: GroupLabel,
    pub video_id: String,
    pub video_label: GroupLabel,
}

impl SceneRecord {
    /// Check the partition invariant: every face index appears in
    /// exactly one group, all indices in range, no empty groups.
    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.faces.len()];
        for (gi, group) in self.groups.iter().enumerate() {
            if group.members.is_empty() {
                return Err(Error::invalid(
                    "scene_record",
                    format!("group {gi} has no members"),
                ));
            }
            for &idx in &group.members {
                if idx >= self.faces.len() {
                    return Err(Error::invalid(
                        "scene_record",
                        format!(
                            "group {gi} references face {idx} but the frame has {}",
                            self.faces.len()
                        ),
                    ));
                }
                if seen[idx] {
                    return Err(Error::invalid(
                        "scene_record",
                        format!("face {idx} appears in more than one group"),
                    ));
                }
                seen[idx] = true;
            }
        }
        if let Some(orphan) = seen.iter().position(|&s| !s) {
            return Err(Error::invalid(
                "scene_record",
                format!("face {orphan} belongs to no group"),
            ));
        }
        Ok(())
    }
}

/// Majority-valence rule deriving a group label from member face
/// labels; ties go to neutral.
pub fn group_label_from_members(labels: &[FaceLabel]) -> GroupLabel {
    let mut counts = [0usize; 3];
    for label in labels {
        counts[label.valence() as usize] += 1;
    }
    let top = *counts.iter().max().unwrap_or(&0);
    let winners: Vec<usize> = (0..3).filter(|&c| counts[c] == top).collect();
    if winners.len() == 1 {
        crate::metrics::GROUP_LABELS[winners[0]]
    } else {
        GroupLabel::Neutral
    }
}

/// Write records one JSON object per line.
pub fn write_dataset(path: &Path, records: &[SceneRecord]) -> Result<()> {
    let mut out = Vec::new();
    for record in records {
        let line = serde_json::to_string(record)?;
        out.extend_from_slice(line.as_bytes());
        out.push(b'\n');
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    file.flush()?;
    Ok(())
}

/// Parse and validate line-delimited records already in memory.
/// `origin` labels error messages (the file path for disk reads).
/// Errors carry the 1-based line number of the offending record.
pub fn parse_dataset(text: &str, origin: &str) -> Result<Vec<SceneRecord>> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: SceneRecord =
            serde_json::from_str(line).map_err(|e| Error::MalformedRecord {
                path: origin.to_string(),
                line: i + 1,
                msg: e.to_string(),
            })?;
        record.validate().map_err(|e| Error::MalformedRecord {
            path: origin.to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Read and validate a line-delimited dataset file.
pub fn read_dataset(path: &Path) -> Result<Vec<SceneRecord>> {
    let text = fs::read_to_string(path)?;
    parse_dataset(&text, &path.display().to_string())
}

/// Split records by video id: unique ids are sorted, shuffled with the
/// seed, and the first `train_fraction` of videos (rounded) become the
/// training set. No video straddles the boundary.
pub fn split_by_video(
    records: &[SceneRecord],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<SceneRecord>, Vec<SceneRecord>)> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::invalid(
            "split_by_video",
            format!("train fraction {train_fraction} outside [0, 1]"),
        ));
    }
    let mut ids: Vec<&str> = records.iter().map(|r| r.video_id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n_train = (ids.len() as f64 * train_fraction).round() as usize;
    let train_ids: std::collections::HashSet<&str> = ids[..n_train].iter().copied().collect();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for record in records {
        if train_ids.contains(record.video_id.as_str()) {
            train.push(record.clone());
        } else {
            test.push(record.clone());
        }
    }
    Ok((train, test))
}
