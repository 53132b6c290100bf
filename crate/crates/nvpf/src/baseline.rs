//! Reference baselines the fusion models are measured against.
//!
//! * [`ConcatSoftmax`]: a linear softmax classifier on the flattened
//!   group grid — what "concatenate the members and classify" buys
//!   without any coupling between them.
//! * [`FrameVoteBaseline`]: the identical per-frame flow pipeline as
//!   the recurrent model but with a linear per-frame head instead of a
//!   recurrence, predicting videos by plurality vote over frames. The
//!   gap to the recurrent model isolates what temporal integration
//!   adds, because the frame representation is shared code.

use rand::Rng;

use crate::error::{Error, Result};
use crate::flow::{BoundFlow, FlowModel};
use crate::grouping::GroupedFeature;
use crate::metrics::{argmax_class, GroupLabel, GROUP_LABELS};
use crate::params::param_block;
use crate::tape::{log_softmax, Tape, Var};
use crate::temporal::{build_frame_grid, FrameSequence};
use crate::tensor::Tensor;

param_block! {
    /// Linear head: `logits = w · x + b`, zero-initialized so training
    /// starts from the uniform predictor.
    pub struct LinearHead / BoundLinearHead { w, b }
}

impl LinearHead {
    pub fn new(d_in: usize) -> LinearHead {
        LinearHead {
            w: Tensor::zeros(&[GROUP_LABELS.len(), d_in]),
            b: Tensor::zeros(&[GROUP_LABELS.len(), 1]),
        }
    }
}

impl BoundLinearHead {
    pub fn logits(&self, x: &Var) -> Result<Var> {
        self.w.matmul(x)?.add(&self.b)
    }
}

/// Cross-entropy of one logits column against a label.
fn cross_entropy(tape: &Tape, logits: &Var, label: GroupLabel) -> Result<Var> {
    let log_probs = log_softmax(logits)?;
    let mut pick = Tensor::zeros(&[GROUP_LABELS.len(), 1]);
    pick.data_mut()[label.index()] = 1.0;
    let picked = log_probs.mul(&tape.constant(pick))?.sum();
    Ok(picked.neg())
}

/// Softmax classifier on the flattened `rows × cols` group grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ConcatSoftmax {
    pub rows: usize,
    pub cols: usize,
    pub head: LinearHead,
}

impl ConcatSoftmax {
    pub fn new(rows: usize, cols: usize) -> ConcatSoftmax {
        ConcatSoftmax {
            rows,
            cols,
            head: LinearHead::new(rows * cols),
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.head.visit(&mut |name, t| f(name, t));
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.head.visit_mut(&mut |name, t| f(name, t));
    }

    pub fn bind(&self, tape: &Tape, trainable: bool) -> BoundConcatSoftmax {
        BoundConcatSoftmax {
            tape: tape.clone(),
            rows: self.rows,
            cols: self.cols,
            head: self.head.bind(tape, trainable),
        }
    }
}

pub struct BoundConcatSoftmax {
    tape: Tape,
    rows: usize,
    cols: usize,
    pub head: BoundLinearHead,
}

impl BoundConcatSoftmax {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        self.head.vars(&mut out);
        out
    }

    pub fn logits(&self, group: &GroupedFeature) -> Result<Var> {
        if group.s.shape() != [self.rows, self.cols] {
            return Err(Error::shapes(
                "concat_softmax",
                group.s.shape(),
                &[self.rows, self.cols],
            ));
        }
        let x = self
            .tape
            .constant(group.s.clone())
            .reshape(&[self.rows * self.cols, 1])?;
        self.head.logits(&x)
    }

    /// Mean cross-entropy over a batch of labeled groups.
    pub fn batch_loss(&self, batch: &[(&GroupedFeature, GroupLabel)]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::invalid("concat_softmax", "empty batch"));
        }
        let mut total = self.tape.scalar(0.0);
        for (group, label) in batch {
            let logits = self.logits(group)?;
            total = total.add(&cross_entropy(&self.tape, &logits, *label)?)?;
        }
        Ok(total.cmul(1.0 / batch.len() as f64))
    }
}

/// Predicted class for one group, ties to the lowest class index.
pub fn classify_concat(model: &ConcatSoftmax, group: &GroupedFeature) -> Result<GroupLabel> {
    let tape = Tape::new();
    let bound = model.bind(&tape, false);
    let logits = bound.logits(group)?.value();
    let mut scores = [0.0; 3];
    scores.copy_from_slice(logits.data());
    Ok(argmax_class(&scores))
}

/// Per-frame flow pipeline with a linear head; videos are predicted by
/// plurality vote over the per-frame argmax (ties to the lowest class).
#[derive(Clone, Debug, PartialEq)]
pub struct FrameVoteBaseline {
    pub group_flow: FlowModel,
    pub frame_flow: FlowModel,
    pub head: LinearHead,
}

impl FrameVoteBaseline {
    pub fn new(
        rows: usize,
        group_cols: usize,
        frame_cols: usize,
        group_units: usize,
        frame_units: usize,
        feature_maps: usize,
        rng: &mut impl Rng,
    ) -> Result<FrameVoteBaseline> {
        let group_flow = FlowModel::new(rows, group_cols, group_units, feature_maps, false, rng)?;
        let frame_flow = FlowModel::new(rows, frame_cols, frame_units, feature_maps, false, rng)?;
        let head = LinearHead::new(rows * frame_cols);
        Ok(FrameVoteBaseline {
            group_flow,
            frame_flow,
            head,
        })
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.group_flow
            .visit(&mut |name, t| f(&format!("group_flow.{name}"), t));
        self.frame_flow
            .visit(&mut |name, t| f(&format!("frame_flow.{name}"), t));
        self.head.visit(&mut |name, t| f(&format!("head.{name}"), t));
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.group_flow
            .visit_mut(&mut |name, t| f(&format!("group_flow.{name}"), t));
        self.frame_flow
            .visit_mut(&mut |name, t| f(&format!("frame_flow.{name}"), t));
        self.head
            .visit_mut(&mut |name, t| f(&format!("head.{name}"), t));
    }

    pub fn bind(&self, tape: &Tape, trainable: bool) -> BoundFrameVote {
        BoundFrameVote {
            tape: tape.clone(),
            group_flow: self.group_flow.bind(tape, trainable),
            frame_flow: self.frame_flow.bind(tape, trainable),
            head: self.head.bind(tape, trainable),
        }
    }
}

pub struct BoundFrameVote {
    tape: Tape,
    pub group_flow: BoundFlow,
    pub frame_flow: BoundFlow,
    pub head: BoundLinearHead,
}

impl BoundFrameVote {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = self.group_flow.vars();
        out.extend(self.frame_flow.vars());
        self.head.vars(&mut out);
        out
    }

    /// Same frame representation as the recurrent model, then the
    /// linear head.
    pub fn frame_logits(&self, groups: &[GroupedFeature]) -> Result<Var> {
        let (grid, mask) = build_frame_grid(&self.tape, &self.group_flow, self.frame_flow.cols, groups)?;
        let fused = self.frame_flow.flow_forward_var(&grid, &mask)?;
        let x = fused
            .h
            .reshape(&[self.group_flow.rows * self.frame_flow.cols, 1])?;
        self.head.logits(&x)
    }

    /// Sum over frames of per-frame cross-entropy.
    pub fn sequence_loss(&self, seq: &FrameSequence) -> Result<Var> {
        seq.validate()?;
        let mut total = self.tape.scalar(0.0);
        for (frame, label) in seq.frames.iter().zip(&seq.frame_labels) {
            let logits = self.frame_logits(frame)?;
            total = total.add(&cross_entropy(&self.tape, &logits, *label)?)?;
        }
        Ok(total)
    }

    /// Mean of [`Self::sequence_loss`] over a batch of videos.
    pub fn batch_loss(&self, batch: &[&FrameSequence]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::invalid("frame_vote", "empty batch"));
        }
        let mut total = self.tape.scalar(0.0);
        for seq in batch {
            total = total.add(&self.sequence_loss(seq)?)?;
        }
        Ok(total.cmul(1.0 / batch.len() as f64))
    }
}

/// Plurality vote over per-frame argmax classes; ties resolve to the
/// lowest class index.
pub fn predict_video_vote(model: &FrameVoteBaseline, seq: &FrameSequence) -> Result<GroupLabel> {
    seq.validate()?;
    let tape = Tape::new();
    let bound = model.bind(&tape, false);
    let mut votes = [0usize; 3];
    for frame in &seq.frames {
        let logits = bound.frame_logits(frame)?.value();
        let mut scores = [0.0; 3];
        scores.copy_from_slice(logits.data());
        votes[argmax_class(&scores).index()] += 1;
    }
    let mut best = 0;
    for c in 1..3 {
        if votes[c] > votes[best] {
            best = c;
        }
    }
    Ok(GROUP_LABELS[best])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::gen_group_sample;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_init_is_the_uniform_predictor() {
        let model = ConcatSoftmax::new(4, 3);
        let (group, _) = gen_group_sample(GroupLabel::Positive, 3, 3, 4, 2.0, 5).unwrap();
        let tape = Tape::new();
        let bound = model.bind(&tape, false);
        let logits = bound.logits(&group).unwrap().value();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        // Uniform predictor's cross-entropy is ln 3.
        let loss = bound
            .batch_loss(&[(&group, GroupLabel::Positive)])
            .unwrap()
            .value()
            .item();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
        assert_eq!(
            classify_concat(&model, &group).unwrap(),
            GroupLabel::Positive // ties resolve to the lowest index
        );
    }

    #[test]
    fn gradient_step_reduces_concat_loss() {
        let mut model = ConcatSoftmax::new(4, 3);
        let samples: Vec<(GroupedFeature, GroupLabel)> = (0..6)
            .map(|i| {
                gen_group_sample(GROUP_LABELS[i % 3], 3, 3, 4, 4.0, 700 + i as u64).unwrap()
            })
            .collect();
        let batch: Vec<(&GroupedFeature, GroupLabel)> =
            samples.iter().map(|(g, l)| (g, *l)).collect();
        let before = {
            let tape = Tape::new();
            let bound = model.bind(&tape, true);
            let loss = bound.batch_loss(&batch).unwrap();
            tape.backward(&loss).unwrap();
            let vars = bound.vars();
            let grads: Vec<Tensor> = vars
                .iter()
                .map(|v| v.grad().expect("all head params receive gradient"))
                .collect();
            let mut i = 0;
            model.visit_mut(&mut |_, t| {
                let g = &grads[i];
                for (w, gv) in t.data_mut().iter_mut().zip(g.data()) {
                    *w -= 0.5 * gv;
                }
                i += 1;
            });
            loss.value().item()
        };
        let tape = Tape::new();
        let after = model
            .bind(&tape, false)
            .batch_loss(&batch)
            .unwrap()
            .value()
            .item();
        assert!(after < before, "loss went {before} -> {after}");
    }

    fn tiny_sequence(label: GroupLabel, seed: u64) -> FrameSequence {
        let frames: Vec<Vec<GroupedFeature>> = (0..2)
            .map(|t| {
                vec![
                    gen_group_sample(label, 2, 3, 4, 1.5, seed + 10 * t).unwrap().0,
                    gen_group_sample(label, 2, 3, 4, 1.5, seed + 10 * t + 1).unwrap().0,
                ]
            })
            .collect();
        FrameSequence {
            frames,
            frame_labels: vec![label; 2],
            video_label: label,
        }
    }

    #[test]
    fn frame_vote_baseline_runs_and_votes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = FrameVoteBaseline::new(4, 3, 5, 2, 2, 4, &mut rng).unwrap();
        let seq = tiny_sequence(GroupLabel::Negative, 100);
        // Zero head → all logits zero → every frame votes class 0.
        let pred = predict_video_vote(&model, &seq).unwrap();
        assert_eq!(pred, GroupLabel::Positive);
        let tape = Tape::new();
        let bound = model.bind(&tape, false);
        let loss = bound.batch_loss(&[&seq]).unwrap().value().item();
        // Two frames, each at the uniform predictor.
        assert!((loss - 2.0 * 3f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn frame_vote_baseline_learns() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut model = FrameVoteBaseline::new(4, 3, 5, 2, 2, 4, &mut rng).unwrap();
        let seqs: Vec<FrameSequence> = (0..3)
            .map(|i| tiny_sequence(GROUP_LABELS[i % 3], 500 + 40 * i as u64))
            .collect();
        let refs: Vec<&FrameSequence> = seqs.iter().collect();
        let mut losses = Vec::new();
        for _ in 0..5 {
            let tape = Tape::new();
            let bound = model.bind(&tape, true);
            let loss = bound.batch_loss(&refs).unwrap();
            tape.backward(&loss).unwrap();
            let vars = bound.vars();
            let grads: Vec<Tensor> = vars
                .iter()
                .map(|v| {
                    v.grad()
                        .unwrap_or_else(|| Tensor::zeros(v.value().shape()))
                })
                .collect();
            let mut i = 0;
            model.visit_mut(&mut |_, t| {
                for (w, gv) in t.data_mut().iter_mut().zip(grads[i].data()) {
                    *w -= 0.05 * gv;
                }
                i += 1;
            });
            losses.push(loss.value().item());
        }
        assert!(
            losses.last().unwrap() < losses.first().unwrap(),
            "losses {losses:?}"
        );
    }

    #[test]
    fn vote_ties_resolve_to_lowest_class() {
        // Craft a head whose logits depend only on the sign of the
        // first grid cell, so different frames can vote differently.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut model = FrameVoteBaseline::new(4, 3, 5, 2, 2, 4, &mut rng).unwrap();
        // Row 1 (negative class) fires on a positive first feature; row
        // 2 (neutral) fires on a negative one.
        model.head.w.set2(1, 0, 5.0);
        model.head.w.set2(2, 0, -5.0);
        let mut seq = tiny_sequence(GroupLabel::Neutral, 900);
        seq.frames.truncate(2);
        seq.frame_labels.truncate(2);
        // Force opposite signs on the deciding cell of each frame: flip
        // every member's first feature so the fused grid follows.
        for (t, sign) in [(0usize, 1.0f64), (1, -1.0)] {
            for group in &mut seq.frames[t] {
                for j in 0..group.cols() {
                    let v = group.s.at2(0, j).abs() + 1.0;
                    group.s.set2(0, j, sign * v);
                }
            }
        }
        let pred = predict_video_vote(&model, &seq).unwrap();
        // One frame votes negative (index 1), the other neutral (index
        // 2): a 1–1 tie with zero positive votes resolves to the lowest
        // index among the tied, which the vote loop realizes by never
        // replacing on equality — negative wins over neutral.
        assert_eq!(pred, GroupLabel::Negative);
    }
}
