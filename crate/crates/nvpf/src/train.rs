//! Dataset adapters, training loops, and evaluation runners.
//!
//! One generic loop drives every model family (flow, recurrent, and the
//! two reference baselines): shuffled minibatches, Adam updates through
//! the visitor, a per-step loss curve, and final/best snapshots. Runs
//! are pure functions of (config, data), so fixed seeds give bit-exact
//! checkpoints.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::baseline::{classify_concat, predict_video_vote, ConcatSoftmax, FrameVoteBaseline};
use crate::config::RunConfig;
use crate::data::SceneRecord;
use crate::error::{Error, Result};
use crate::flow::{classify_group, FlowModel};
use crate::grouping::{stack_group, GroupedFeature};
use crate::metrics::{evaluate_predictions, EvalReport, GroupLabel, RuntimeStats};
use crate::optim::{Adam, AdamConfig};
use crate::tape::Tape;
use crate::temporal::{predict_video, FrameSequence, TemporalModel, VideoAggregation};
use crate::tensor::Tensor;

/// Decorrelates the minibatch-shuffle stream from model initialization,
/// which consumes the raw seed.
const SHUFFLE_STREAM: u64 = 0xD1B5_4A32_D192_ED03;

// ---------------------------------------------------------------------
// Dataset adapters
// ---------------------------------------------------------------------

/// Flatten every recorded group region into a padded grid plus its
/// label. Group ids restart per record, mirroring the grouping stage.
pub fn groups_from_records(
    records: &[SceneRecord],
    n_max: usize,
) -> Result<Vec<(GroupedFeature, GroupLabel)>> {
    let mut out = Vec::new();
    for record in records {
        for (gid, region) in record.groups.iter().enumerate() {
            let members: Vec<_> = region
                .members
                .iter()
                .map(|&i| record.faces[i].clone())
                .collect();
            out.push((stack_group(&members, n_max, gid)?, region.label));
        }
    }
    Ok(out)
}

/// Reassemble per-video sequences: frames ordered by `frame_id`, one
/// grid per recorded group. Returns `(video_id, sequence)` pairs in
/// video-id order.
pub fn sequences_from_records(
    records: &[SceneRecord],
    n_max: usize,
) -> Result<Vec<(String, FrameSequence)>> {
    let mut by_video: BTreeMap<&str, Vec<&SceneRecord>> = BTreeMap::new();
    for record in records {
        by_video.entry(&record.video_id).or_default().push(record);
    }
    let mut out = Vec::with_capacity(by_video.len());
    for (id, mut frames) in by_video {
        frames.sort_by_key(|r| r.frame_id);
        for pair in frames.windows(2) {
            if pair[0].frame_id == pair[1].frame_id {
                return Err(Error::invalid(
                    "sequences_from_records",
                    format!("video {id} repeats frame {}", pair[0].frame_id),
                ));
            }
        }
        let video_label = frames[0].video_label;
        if frames.iter().any(|r| r.video_label != video_label) {
            return Err(Error::invalid(
                "sequences_from_records",
                format!("video {id} carries conflicting video labels"),
            ));
        }
        let mut grids = Vec::with_capacity(frames.len());
        let mut frame_labels = Vec::with_capacity(frames.len());
        for record in &frames {
            let mut frame = Vec::with_capacity(record.groups.len());
            for (gid, region) in record.groups.iter().enumerate() {
                let members: Vec<_> = region
                    .members
                    .iter()
                    .map(|&i| record.faces[i].clone())
                    .collect();
                frame.push(stack_group(&members, n_max, gid)?);
            }
            grids.push(frame);
            frame_labels.push(record.frame_label);
        }
        let seq = FrameSequence {
            frames: grids,
            frame_labels,
            video_label,
        };
        seq.validate()?;
        out.push((id.to_string(), seq));
    }
    Ok(out)
}

/// The first `t` frames of a video (the whole video when shorter).
pub fn truncate_sequence(seq: &FrameSequence, t: usize) -> FrameSequence {
    FrameSequence {
        frames: seq.frames.iter().take(t).cloned().collect(),
        frame_labels: seq.frame_labels.iter().take(t).copied().collect(),
        video_label: seq.video_label,
    }
}

// ---------------------------------------------------------------------
// The generic loop
// ---------------------------------------------------------------------

/// Outcome of one training run.
#[derive(Clone, Debug)]
pub struct Trained<M> {
    /// Parameters after the last step.
    pub model: M,
    /// Snapshot from the epoch with the lowest mean training loss (the
    /// initialization when no epoch ran).
    pub best: M,
    /// `(step, loss)` per minibatch, in step order.
    pub curve: Vec<(usize, f64)>,
}

/// Shuffled-minibatch Adam training. `compute` builds the batch loss on
/// a fresh tape and returns its value plus gradients in visit order;
/// the loop owns shuffling, stepping, the curve, and best tracking.
fn training_loop<M: Clone>(
    mut model: M,
    cfg: &RunConfig,
    n_samples: usize,
    visit_mut: fn(&mut M, &mut dyn FnMut(&str, &mut Tensor)),
    compute: &dyn Fn(&M, &[usize], usize) -> Result<(f64, Vec<Tensor>)>,
) -> Result<Trained<M>> {
    if n_samples == 0 {
        return Err(Error::invalid("train", "empty dataset"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut shapes = Vec::new();
    visit_mut(&mut model, &mut |_, t| shapes.push(t.shape().to_vec()));
    let mut adam = Adam::new(AdamConfig::new(cfg.learning_rate, cfg.momentum), &shapes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM);

    let mut order: Vec<usize> = (0..n_samples).collect();
    let mut curve = Vec::new();
    let mut best: Option<(f64, M)> = None;
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (loss, grads) = compute(&model, chunk, epoch)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    context: "training loss",
                    step: Some(step),
                });
            }
            if grads.len() != shapes.len() {
                return Err(Error::invalid(
                    "train",
                    "gradient count drifted from parameter count",
                ));
            }
            adam.begin_step();
            let mut i = 0;
            let mut failed = None;
            visit_mut(&mut model, &mut |_, t| {
                if failed.is_none() {
                    if let Err(e) = adam.update(i, t, &grads[i]) {
                        failed = Some(e);
                    }
                }
                i += 1;
            });
            if let Some(e) = failed {
                return Err(e);
            }
            curve.push((step, loss));
            sum += loss;
            batches += 1;
            step += 1;
        }
        let mean = sum / batches as f64;
        if best.as_ref().map_or(true, |(b, _)| mean < *b) {
            best = Some((mean, model.clone()));
        }
    }
    let best_model = match best {
        Some((_, m)) => m,
        None => model.clone(),
    };
    Ok(Trained {
        model,
        best: best_model,
        curve,
    })
}

fn grads_of(vars: &[crate::tape::Var]) -> Vec<Tensor> {
    vars.iter()
        .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape())))
        .collect()
}

fn check_grid_dims(op: &'static str, grid: &GroupedFeature, cfg: &RunConfig) -> Result<()> {
    if grid.rows() != cfg.feature_dim || grid.cols() != cfg.n_max {
        return Err(Error::invalid(
            op,
            format!(
                "dataset grids are {}x{} but the config says feature_dim {} / n_max {}",
                grid.rows(),
                grid.cols(),
                cfg.feature_dim,
                cfg.n_max
            ),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------
// Model-family entry points
// ---------------------------------------------------------------------

/// Train the group-level flow under the likelihood loss (plus the
/// softmax-head loss when the config attaches a head).
pub fn train_flow(
    cfg: &RunConfig,
    data: &[(GroupedFeature, GroupLabel)],
) -> Result<Trained<FlowModel>> {
    if let Some((grid, _)) = data.first() {
        check_grid_dims("train-nvpf", grid, cfg)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = FlowModel::new(
        cfg.feature_dim,
        cfg.n_max,
        cfg.units,
        cfg.feature_maps,
        cfg.with_head,
        &mut rng,
    )?;
    let with_head = cfg.with_head;
    let compute = |m: &FlowModel, idx: &[usize], _epoch: usize| {
        let tape = Tape::new();
        let bound = m.bind(&tape, true);
        let batch: Vec<(&GroupedFeature, GroupLabel)> =
            idx.iter().map(|&i| (&data[i].0, data[i].1)).collect();
        let mut loss = bound.nvpf_loss(&batch)?;
        if with_head {
            loss = loss.add(&bound.head_loss(&batch)?)?;
        }
        let value = loss.value().item();
        tape.backward(&loss)?;
        Ok((value, grads_of(&bound.vars())))
    };
    training_loop(model, cfg, data.len(), FlowModel::visit_mut, &compute)
}

/// Train the recurrent model on whole videos. Sequences are truncated
/// to the first `cfg.t` frames, or to `curriculum.start_t` during the
/// warmup epochs.
pub fn train_temporal(cfg: &RunConfig, seqs: &[FrameSequence]) -> Result<Trained<TemporalModel>> {
    if let Some(grid) = seqs.first().and_then(|s| s.frames.first()).and_then(|f| f.first()) {
        check_grid_dims("train-tnvpf", grid, cfg)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = TemporalModel::new(
        cfg.feature_dim,
        cfg.n_max,
        cfg.frame_cols,
        cfg.units,
        cfg.frame_units,
        cfg.feature_maps,
        cfg.d_h,
        &mut rng,
    )?;
    let compute = |m: &TemporalModel, idx: &[usize], epoch: usize| {
        let t_limit = match &cfg.curriculum {
            Some(c) if epoch < c.switch_epoch => c.start_t.min(cfg.t),
            _ => cfg.t,
        };
        let truncated: Vec<FrameSequence> = idx
            .iter()
            .map(|&i| truncate_sequence(&seqs[i], t_limit))
            .collect();
        let refs: Vec<&FrameSequence> = truncated.iter().collect();
        let tape = Tape::new();
        let bound = m.bind(&tape, true);
        let loss = bound.batch_loss(&refs)?;
        let value = loss.value().item();
        tape.backward(&loss)?;
        Ok((value, grads_of(&bound.vars())))
    };
    training_loop(model, cfg, seqs.len(), TemporalModel::visit_mut, &compute)
}

/// Train the concatenation+softmax reference under the identical
/// optimizer and batch schedule as [`train_flow`].
pub fn train_concat_baseline(
    cfg: &RunConfig,
    data: &[(GroupedFeature, GroupLabel)],
) -> Result<Trained<ConcatSoftmax>> {
    if let Some((grid, _)) = data.first() {
        check_grid_dims("train-baseline", grid, cfg)?;
    }
    let model = ConcatSoftmax::new(cfg.feature_dim, cfg.n_max);
    let compute = |m: &ConcatSoftmax, idx: &[usize], _epoch: usize| {
        let tape = Tape::new();
        let bound = m.bind(&tape, true);
        let batch: Vec<(&GroupedFeature, GroupLabel)> =
            idx.iter().map(|&i| (&data[i].0, data[i].1)).collect();
        let loss = bound.batch_loss(&batch)?;
        let value = loss.value().item();
        tape.backward(&loss)?;
        Ok((value, grads_of(&bound.vars())))
    };
    training_loop(model, cfg, data.len(), ConcatSoftmax::visit_mut, &compute)
}

/// Train the per-frame-vote reference under the identical optimizer and
/// batch schedule as [`train_temporal`].
pub fn train_frame_vote(
    cfg: &RunConfig,
    seqs: &[FrameSequence],
) -> Result<Trained<FrameVoteBaseline>> {
    if let Some(grid) = seqs.first().and_then(|s| s.frames.first()).and_then(|f| f.first()) {
        check_grid_dims("train-baseline", grid, cfg)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = FrameVoteBaseline::new(
        cfg.feature_dim,
        cfg.n_max,
        cfg.frame_cols,
        cfg.units,
        cfg.frame_units,
        cfg.feature_maps,
        &mut rng,
    )?;
    let compute = |m: &FrameVoteBaseline, idx: &[usize], epoch: usize| {
        let t_limit = match &cfg.curriculum {
            Some(c) if epoch < c.switch_epoch => c.start_t.min(cfg.t),
            _ => cfg.t,
        };
        let truncated: Vec<FrameSequence> = idx
            .iter()
            .map(|&i| truncate_sequence(&seqs[i], t_limit))
            .collect();
        let refs: Vec<&FrameSequence> = truncated.iter().collect();
        let tape = Tape::new();
        let bound = m.bind(&tape, true);
        let loss = bound.batch_loss(&refs)?;
        let value = loss.value().item();
        tape.backward(&loss)?;
        Ok((value, grads_of(&bound.vars())))
    };
    training_loop(model, cfg, seqs.len(), FrameVoteBaseline::visit_mut, &compute)
}

// ---------------------------------------------------------------------
// Evaluation runners
// ---------------------------------------------------------------------

/// Classify every group with a frozen flow and score the predictions.
pub fn eval_flow(
    model: &FlowModel,
    data: &[(GroupedFeature, GroupLabel)],
    by_head: bool,
) -> Result<EvalReport> {
    let start = Instant::now();
    let mut predictions = Vec::with_capacity(data.len());
    let mut truths = Vec::with_capacity(data.len());
    for (grid, label) in data {
        predictions.push(classify_group(model, grid, by_head)?.label);
        truths.push(*label);
    }
    let runtime = RuntimeStats {
        samples: data.len(),
        seconds: start.elapsed().as_secs_f64(),
    };
    evaluate_predictions(&predictions, &truths, runtime)
}

/// Classify every video with a frozen recurrent model (first `t` frames,
/// the configured aggregation) and score the predictions.
pub fn eval_temporal(
    model: &TemporalModel,
    seqs: &[FrameSequence],
    t: usize,
    aggregation: VideoAggregation,
) -> Result<EvalReport> {
    let start = Instant::now();
    let mut predictions = Vec::with_capacity(seqs.len());
    let mut truths = Vec::with_capacity(seqs.len());
    for seq in seqs {
        let seq = truncate_sequence(seq, t);
        predictions.push(predict_video(model, &seq, aggregation)?.label);
        truths.push(seq.video_label);
    }
    let runtime = RuntimeStats {
        samples: seqs.len(),
        seconds: start.elapsed().as_secs_f64(),
    };
    evaluate_predictions(&predictions, &truths, runtime)
}

/// Score the concatenation+softmax reference.
pub fn eval_concat_baseline(
    model: &ConcatSoftmax,
    data: &[(GroupedFeature, GroupLabel)],
) -> Result<EvalReport> {
    let start = Instant::now();
    let mut predictions = Vec::with_capacity(data.len());
    let mut truths = Vec::with_capacity(data.len());
    for (grid, label) in data {
        predictions.push(classify_concat(model, grid)?);
        truths.push(*label);
    }
    let runtime = RuntimeStats {
        samples: data.len(),
        seconds: start.elapsed().as_secs_f64(),
    };
    evaluate_predictions(&predictions, &truths, runtime)
}

/// Score the per-frame-vote reference.
pub fn eval_frame_vote(
    model: &FrameVoteBaseline,
    seqs: &[FrameSequence],
    t: usize,
) -> Result<EvalReport> {
    let start = Instant::now();
    let mut predictions = Vec::with_capacity(seqs.len());
    let mut truths = Vec::with_capacity(seqs.len());
    for seq in seqs {
        let seq = truncate_sequence(seq, t);
        predictions.push(predict_video_vote(model, &seq)?);
        truths.push(seq.video_label);
    }
    let runtime = RuntimeStats {
        samples: seqs.len(),
        seconds: start.elapsed().as_secs_f64(),
    };
    evaluate_predictions(&predictions, &truths, runtime)
}

// ---------------------------------------------------------------------
// Loss curve file
// ---------------------------------------------------------------------

/// Write the per-step curve as two-column plain text: `step loss`.
pub fn write_curve(path: &Path, curve: &[(usize, f64)]) -> Result<()> {
    let mut text = String::with_capacity(curve.len() * 24);
    for (step, loss) in curve {
        text.push_str(&format!("{step} {loss}\n"));
    }
    std::fs::write(path, text)?;
    Ok(())
}
