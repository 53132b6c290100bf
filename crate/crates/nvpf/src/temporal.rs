//! Temporal extension: per-frame fusion plus a gated recurrence.
//!
//! Each frame of a video holds several grouped feature matrices. The
//! group-level flow fuses each of them; the valid columns of the fused
//! grids are then concatenated in group order into a single frame-level
//! grid (zero-padded or truncated to a fixed column budget), which a
//! second, frame-level flow fuses again. The flattened frame feature
//! drives one step of a gated recurrent unit, and a linear readout maps
//! the recurrent state to per-class logits at every step.
//!
//! The recurrence follows the update/reset form
//!
//! ```text
//! z_t = sigmoid(W_z h_t + U_z o_{t-1})
//! r_t = sigmoid(W_r h_t + U_r o_{t-1})
//! o_t = (1 - z_t) .* o_{t-1} + z_t .* tanh(W h_t + U (r_t .* o_{t-1}))
//! ```
//!
//! with no gate biases and `o_0 = 0`. Training minimises the sum over
//! frames of the cross-entropy between the step logits and the
//! per-frame labels; video prediction aggregates the step logits either
//! by taking the final step or by averaging over steps.

use rand::Rng;

use crate::error::{Error, Result};
use crate::flow::{BoundFlow, FlowModel};
use crate::grouping::GroupedFeature;
use crate::metrics::{argmax_class, GroupLabel, GROUP_LABELS};
use crate::params::param_block;
use crate::tape::{log_softmax, Tape, Var};
use crate::tensor::{glorot_uniform, Tensor};

param_block! {
    /// Gated recurrent unit parameters. `w*` act on the frame feature,
    /// `u*` on the previous state; `wh`/`bh` are the logit readout and
    /// start at zero so the logits begin uninformative.
    pub struct GruParams / BoundGru {
        w, u,
        wz, uz,
        wr, ur,
        wh, bh,
    }
}

impl GruParams {
    pub fn new(d_in: usize, d_h: usize, rng: &mut impl Rng) -> GruParams {
        GruParams {
            w: glorot_uniform(&[d_h, d_in], d_in, d_h, rng),
            u: glorot_uniform(&[d_h, d_h], d_h, d_h, rng),
            wz: glorot_uniform(&[d_h, d_in], d_in, d_h, rng),
            uz: glorot_uniform(&[d_h, d_h], d_h, d_h, rng),
            wr: glorot_uniform(&[d_h, d_in], d_in, d_h, rng),
            ur: glorot_uniform(&[d_h, d_h], d_h, d_h, rng),
            wh: Tensor::zeros(&[GROUP_LABELS.len(), d_h]),
            bh: Tensor::zeros(&[GROUP_LABELS.len(), 1]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn d_h(&self) -> usize {
        self.w.shape()[0]
    }
}

impl BoundGru {
    /// One recurrence step: previous state `[d_h, 1]` and frame feature
    /// `[d_in, 1]` to the next state.
    pub fn step(&self, o_prev: &Var, h_t: &Var) -> Result<Var> {
        let z = self.wz.matmul(h_t)?.add(&self.uz.matmul(o_prev)?)?.sigmoid();
        let r = self.wr.matmul(h_t)?.add(&self.ur.matmul(o_prev)?)?.sigmoid();
        let gated = r.mul(o_prev)?;
        let cand = self.w.matmul(h_t)?.add(&self.u.matmul(&gated)?)?.tanh();
        let keep = z.neg().cadd(1.0).mul(o_prev)?;
        keep.add(&z.mul(&cand)?)
    }

    /// Per-class logits `[3, 1]` from a recurrent state.
    pub fn logits(&self, o_t: &Var) -> Result<Var> {
        self.wh.matmul(o_t)?.add(&self.bh)
    }
}

/// One video: per-frame grouped features, per-frame labels, and the
/// video-level label.
#[derive(Clone, Debug)]
pub struct FrameSequence {
    pub frames: Vec<Vec<GroupedFeature>>,
    pub frame_labels: Vec<GroupLabel>,
    pub video_label: GroupLabel,
}

impl FrameSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::invalid("sequence", "video has no frames"));
        }
        if self.frames.len() != self.frame_labels.len() {
            return Err(Error::invalid(
                "sequence",
                format!(
                    "{} frames but {} frame labels",
                    self.frames.len(),
                    self.frame_labels.len()
                ),
            ));
        }
        if let Some(t) = self.frames.iter().position(|f| f.is_empty()) {
            return Err(Error::invalid(
                "sequence",
                format!("frame {t} has no groups"),
            ));
        }
        Ok(())
    }
}

/// How video-level predictions aggregate the per-step logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VideoAggregation {
    /// Argmax of the last step's logits.
    #[default]
    FinalStep,
    /// Argmax of the mean logits over all steps.
    MeanLogits,
}

/// The full temporal model: a group-level flow, a frame-level flow over
/// the concatenated group features, and the recurrence.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalModel {
    pub group_flow: FlowModel,
    pub frame_flow: FlowModel,
    pub gru: GruParams,
}

impl TemporalModel {
    /// `rows` is the feature dimension shared by both flows;
    /// `frame_cols` is the column budget of the frame-level grid, so
    /// the recurrence input has `rows * frame_cols` entries.
    pub fn new(
        rows: usize,
        group_cols: usize,
        frame_cols: usize,
        group_units: usize,
        frame_units: usize,
        feature_maps: usize,
        d_h: usize,
        rng: &mut impl Rng,
    ) -> Result<TemporalModel> {
        if d_h == 0 {
            return Err(Error::invalid("TemporalModel::new", "state size must be positive"));
        }
        let group_flow = FlowModel::new(rows, group_cols, group_units, feature_maps, false, rng)?;
        let frame_flow = FlowModel::new(rows, frame_cols, frame_units, feature_maps, false, rng)?;
        let gru = GruParams::new(rows * frame_cols, d_h, rng);
        Ok(TemporalModel {
            group_flow,
            frame_flow,
            gru,
        })
    }

    pub fn rows(&self) -> usize {
        self.group_flow.rows
    }

    pub fn frame_cols(&self) -> usize {
        self.frame_flow.cols
    }

    /// Visit every trainable tensor with a stable dotted name.
    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.group_flow
            .visit(&mut |name, t| f(&format!("group_flow.{name}"), t));
        self.frame_flow
            .visit(&mut |name, t| f(&format!("frame_flow.{name}"), t));
        self.gru.visit(&mut |name, t| f(&format!("gru.{name}"), t));
    }

    /// Mutable variant of [`Self::visit`], same order.
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.group_flow
            .visit_mut(&mut |name, t| f(&format!("group_flow.{name}"), t));
        self.frame_flow
            .visit_mut(&mut |name, t| f(&format!("frame_flow.{name}"), t));
        self.gru.visit_mut(&mut |name, t| f(&format!("gru.{name}"), t));
    }

    pub fn bind(&self, tape: &Tape, trainable: bool) -> BoundTemporal {
        BoundTemporal {
            tape: tape.clone(),
            group_flow: self.group_flow.bind(tape, trainable),
            frame_flow: self.frame_flow.bind(tape, trainable),
            gru: self.gru.bind(tape, trainable),
            d_h: self.gru.d_h(),
        }
    }
}

/// Fuse each group through the group-level flow and concatenate the
/// valid columns of the fused grids, in group order, into one
/// `rows × frame_cols` frame grid. Columns beyond the budget are
/// dropped; missing ones stay zero. Shared by the recurrent model and
/// the per-frame baseline so both see the identical frame
/// representation.
pub fn build_frame_grid(
    tape: &Tape,
    group_flow: &BoundFlow,
    frame_cols: usize,
    groups: &[GroupedFeature],
) -> Result<(Var, Vec<bool>)> {
    if groups.is_empty() {
        return Err(Error::invalid("frame_grid", "frame has no groups"));
    }
    let rows = group_flow.rows;
    let mut entries: Vec<(Var, usize, usize)> = Vec::new();
    let mut dst = 0usize;
    'groups: for group in groups {
        let fused = group_flow.flow_forward(group)?;
        for (src, &ok) in group.mask.iter().enumerate() {
            if !ok {
                continue;
            }
            if dst == frame_cols {
                break 'groups;
            }
            entries.push((fused.h.clone(), src, dst));
            dst += 1;
        }
    }
    let grid = tape.place_cols(rows, frame_cols, &entries)?;
    let mut mask = vec![false; frame_cols];
    for slot in mask.iter_mut().take(dst) {
        *slot = true;
    }
    Ok((grid, mask))
}

/// Tape-bound temporal model.
pub struct BoundTemporal {
    tape: Tape,
    pub group_flow: BoundFlow,
    pub frame_flow: BoundFlow,
    pub gru: BoundGru,
    d_h: usize,
}

impl BoundTemporal {
    /// All trainable vars in the same order as [`TemporalModel::visit`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = self.group_flow.vars();
        out.extend(self.frame_flow.vars());
        self.gru.vars(&mut out);
        out
    }

    /// Fuse every group of one frame and concatenate the valid columns
    /// of the fused grids, in group order, into the frame-level grid.
    /// Columns beyond the frame budget are dropped; missing ones stay
    /// zero. Returns the grid and its column-validity mask.
    pub fn frame_grid(&self, groups: &[GroupedFeature]) -> Result<(Var, Vec<bool>)> {
        build_frame_grid(&self.tape, &self.group_flow, self.frame_flow.cols, groups)
    }

    /// Frame feature for the recurrence: the frame grid fused by the
    /// frame-level flow, flattened to a column vector. The grid stays
    /// tape-resident end to end, so gradients reach the group flow.
    pub fn frame_feature(&self, groups: &[GroupedFeature]) -> Result<Var> {
        let (grid, mask) = self.frame_grid(groups)?;
        let fused = self.frame_flow.flow_forward_var(&grid, &mask)?;
        fused
            .h
            .reshape(&[self.group_flow.rows * self.frame_flow.cols, 1])
    }

    /// Per-step logits for one video.
    pub fn sequence_logits(&self, seq: &FrameSequence) -> Result<Vec<Var>> {
        seq.validate()?;
        let mut state = self.tape.constant(Tensor::zeros(&[self.d_h, 1]));
        let mut logits = Vec::with_capacity(seq.frames.len());
        for frame in &seq.frames {
            let feature = self.frame_feature(frame)?;
            state = self.gru.step(&state, &feature)?;
            logits.push(self.gru.logits(&state)?);
        }
        Ok(logits)
    }

    /// Sum over frames of the cross-entropy between step logits and the
    /// per-frame labels.
    pub fn sequence_loss(&self, seq: &FrameSequence) -> Result<Var> {
        let logits = self.sequence_logits(seq)?;
        let mut total = self.tape.scalar(0.0);
        for (step, label) in logits.iter().zip(&seq.frame_labels) {
            let log_probs = log_softmax(step)?;
            let mut pick = Tensor::zeros(&[GROUP_LABELS.len(), 1]);
            pick.data_mut()[label.index()] = 1.0;
            let picked = log_probs.mul(&self.tape.constant(pick))?.sum();
            total = total.add(&picked.neg())?;
        }
        Ok(total)
    }

    /// Mean of [`Self::sequence_loss`] over a batch of videos.
    pub fn batch_loss(&self, batch: &[&FrameSequence]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::invalid("sequence_loss", "empty batch"));
        }
        let mut total = self.tape.scalar(0.0);
        for seq in batch {
            total = total.add(&self.sequence_loss(seq)?)?;
        }
        Ok(total.cmul(1.0 / batch.len() as f64))
    }
}

/// Video-level prediction, value path: per-step logits, per-frame
/// classes, and the aggregated video label.
#[derive(Clone, Debug)]
pub struct VideoPrediction {
    pub label: GroupLabel,
    pub frame_labels: Vec<GroupLabel>,
    pub step_logits: Vec<[f64; 3]>,
}

/// Classify one video with a frozen model.
pub fn predict_video(
    model: &TemporalModel,
    seq: &FrameSequence,
    aggregation: VideoAggregation,
) -> Result<VideoPrediction> {
    let tape = Tape::new();
    let bound = model.bind(&tape, false);
    let logits = bound.sequence_logits(seq)?;
    let step_logits: Vec<[f64; 3]> = logits
        .iter()
        .map(|v| {
            let t = v.value();
            [t.data()[0], t.data()[1], t.data()[2]]
        })
        .collect();
    let frame_labels: Vec<GroupLabel> = step_logits.iter().map(|s| argmax_class(s)).collect();
    let scores = match aggregation {
        VideoAggregation::FinalStep => *step_logits.last().expect("validated non-empty"),
        VideoAggregation::MeanLogits => {
            let mut mean = [0.0; 3];
            for step in &step_logits {
                for (m, s) in mean.iter_mut().zip(step) {
                    *m += s / step_logits.len() as f64;
                }
            }
            mean
        }
    };
    Ok(VideoPrediction {
        label: argmax_class(&scores),
        frame_labels,
        step_logits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn full_group(s: Tensor) -> GroupedFeature {
        let cols = s.shape()[1];
        GroupedFeature {
            s,
            mask: vec![true; cols],
            group_id: 0,
            member_order: (0..cols).collect(),
        }
    }

    fn tiny_model(seed: u64) -> TemporalModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TemporalModel::new(2, 2, 3, 2, 2, 4, 4, &mut rng).unwrap()
    }

    fn random_sequence(model: &TemporalModel, t: usize, seed: u64) -> FrameSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames: Vec<Vec<GroupedFeature>> = (0..t)
            .map(|_| {
                vec![full_group(crate::tensor::randn(
                    &[model.rows(), model.group_flow.cols],
                    &mut rng,
                ))]
            })
            .collect();
        let frame_labels = (0..t)
            .map(|i| GROUP_LABELS[i % GROUP_LABELS.len()])
            .collect();
        FrameSequence {
            frames,
            frame_labels,
            video_label: GroupLabel::Positive,
        }
    }

    #[test]
    fn zero_parameters_halve_the_state_each_step() {
        // With every parameter at zero the gates sit at 1/2 and the
        // candidate vanishes, so one step halves the previous state.
        let d_in = 3;
        let d_h = 2;
        let mut gru = GruParams::new(d_in, d_h, &mut ChaCha8Rng::seed_from_u64(0));
        gru.visit_mut(&mut |_, t| *t = Tensor::zeros(&t.shape().to_vec()));
        let tape = Tape::new();
        let bound = gru.bind(&tape, false);
        let v = Tensor::from_vec(&[d_h, 1], vec![0.8, -0.4]).unwrap();
        let o_prev = tape.constant(v);
        let h_t = tape.constant(Tensor::filled(&[d_in, 1], 2.5));
        let o_next = bound.step(&o_prev, &h_t).unwrap().value();
        assert_eq!(o_next.data(), &[0.4, -0.2]);
        let logits = bound.logits(&tape.constant(o_next)).unwrap().value();
        assert_eq!(logits.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn gru_step_matches_hand_evaluation() {
        // Independent scalar-loop evaluation of the recurrence.
        let d_in = 2;
        let d_h = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gru = GruParams::new(d_in, d_h, &mut rng);
        let h_t = crate::tensor::randn(&[d_in, 1], &mut rng);
        let o_prev = crate::tensor::randn(&[d_h, 1], &mut rng);

        let matvec = |m: &Tensor, v: &[f64]| -> Vec<f64> {
            let (r, c) = (m.shape()[0], m.shape()[1]);
            (0..r)
                .map(|i| (0..c).map(|j| m.at2(i, j) * v[j]).sum())
                .collect()
        };
        let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
        let zs: Vec<f64> = matvec(&gru.wz, h_t.data())
            .iter()
            .zip(matvec(&gru.uz, o_prev.data()))
            .map(|(a, b)| sigmoid(a + b))
            .collect();
        let rs: Vec<f64> = matvec(&gru.wr, h_t.data())
            .iter()
            .zip(matvec(&gru.ur, o_prev.data()))
            .map(|(a, b)| sigmoid(a + b))
            .collect();
        let gated: Vec<f64> = rs.iter().zip(o_prev.data()).map(|(r, o)| r * o).collect();
        let cand: Vec<f64> = matvec(&gru.w, h_t.data())
            .iter()
            .zip(matvec(&gru.u, &gated))
            .map(|(a, b)| (a + b).tanh())
            .collect();
        let expected: Vec<f64> = zs
            .iter()
            .zip(&cand)
            .zip(o_prev.data())
            .map(|((z, c), o)| (1.0 - z) * o + z * c)
            .collect();

        let tape = Tape::new();
        let bound = gru.bind(&tape, false);
        let got = bound
            .step(&tape.constant(o_prev.clone()), &tape.constant(h_t.clone()))
            .unwrap()
            .value();
        for (g, e) in got.data().iter().zip(&expected) {
            assert!((g - e).abs() <= 1e-12, "{g} vs {e}");
        }
    }

    #[test]
    fn sequence_loss_matches_per_step_recomputation() {
        let model = tiny_model(11);
        let seq = random_sequence(&model, 3, 12);
        let tape = Tape::new();
        let bound = model.bind(&tape, false);
        let loss = bound.sequence_loss(&seq).unwrap().value().item();

        let logits = bound.sequence_logits(&seq).unwrap();
        let mut expected = 0.0;
        for (step, label) in logits.iter().zip(&seq.frame_labels) {
            let raw = step.value();
            let m = raw.data().iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + raw.data().iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            expected += lse - raw.data()[label.index()];
        }
        assert!((loss - expected).abs() <= 1e-12, "{loss} vs {expected}");
    }

    #[test]
    fn single_full_group_frame_grid_is_the_fused_group() {
        // Identity flows (zero-initialised heads): the frame grid equals
        // the group's own feature columns when budgets line up.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let model = TemporalModel::new(2, 3, 3, 2, 2, 4, 4, &mut rng).unwrap();
        let s = crate::tensor::randn(&[2, 3], &mut rng);
        let tape = Tape::new();
        let bound = model.bind(&tape, false);
        let (grid, mask) = bound.frame_grid(&[full_group(s.clone())]).unwrap();
        assert_eq!(grid.value().data(), s.data());
        assert_eq!(mask, vec![true, true, true]);
    }

    #[test]
    fn frame_grid_concatenates_and_truncates_in_group_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let model = TemporalModel::new(2, 2, 3, 2, 2, 4, 4, &mut rng).unwrap();
        let a = crate::tensor::randn(&[2, 2], &mut rng);
        let mut b = crate::tensor::randn(&[2, 2], &mut rng);
        // Second group has one padded column; its valid column is col 1.
        for r in 0..2 {
            b.set2(r, 0, 0.0);
        }
        let g_a = full_group(a.clone());
        let g_b = GroupedFeature {
            s: b.clone(),
            mask: vec![false, true],
            group_id: 1,
            member_order: vec![0],
        };
        let c = crate::tensor::randn(&[2, 2], &mut rng);
        let g_c = full_group(c.clone());

        let tape = Tape::new();
        let bound = model.bind(&tape, false);
        let (grid, mask) = bound.frame_grid(&[g_a, g_b, g_c]).unwrap();
        let v = grid.value();
        // Budget is 3 columns: both of A's, then B's valid one; C is cut.
        assert_eq!(mask, vec![true, true, true]);
        for r in 0..2 {
            assert_eq!(v.at2(r, 0), a.at2(r, 0));
            assert_eq!(v.at2(r, 1), a.at2(r, 1));
            assert_eq!(v.at2(r, 2), b.at2(r, 1));
        }
    }

    #[test]
    fn frame_grid_pads_missing_columns_with_zeros() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let model = TemporalModel::new(2, 2, 4, 2, 2, 4, 4, &mut rng).unwrap();
        let a = crate::tensor::randn(&[2, 2], &mut rng);
        let tape = Tape::new();
        let bound = model.bind(&tape, false);
        let (grid, mask) = bound.frame_grid(&[full_group(a)]).unwrap();
        assert_eq!(mask, vec![true, true, false, false]);
        let v = grid.value();
        for r in 0..2 {
            assert_eq!(v.at2(r, 2), 0.0);
            assert_eq!(v.at2(r, 3), 0.0);
        }
    }

    #[test]
    fn gradient_step_reduces_sequence_loss() {
        let mut model = tiny_model(51);
        let seqs: Vec<FrameSequence> = (0..2)
            .map(|i| random_sequence(&model, 3, 60 + i))
            .collect();
        let batch: Vec<&FrameSequence> = seqs.iter().collect();

        let tape = Tape::new();
        let bound = model.bind(&tape, true);
        let loss = bound.batch_loss(&batch).unwrap();
        let before = loss.value().item();
        tape.backward(&loss).unwrap();
        let grads: Vec<Tensor> = bound.vars().iter().map(|v| v.grad().unwrap()).collect();

        let mut idx = 0;
        model.visit_mut(&mut |_, t| {
            for (w, g) in t.data_mut().iter_mut().zip(grads[idx].data()) {
                *w -= 0.05 * g;
            }
            idx += 1;
        });
        assert_eq!(idx, grads.len());

        let tape2 = Tape::new();
        let after = model
            .bind(&tape2, true)
            .batch_loss(&batch)
            .unwrap()
            .value()
            .item();
        assert!(after < before, "{before} -> {after}");
    }

    #[test]
    fn readout_gradients_flow_at_zero_init() {
        // The readout starts at zero, so the only non-zero gradients on
        // the first step belong to the readout itself.
        let model = tiny_model(71);
        let seq = random_sequence(&model, 2, 72);
        let tape = Tape::new();
        let bound = model.bind(&tape, true);
        let loss = bound.sequence_loss(&seq).unwrap();
        tape.backward(&loss).unwrap();
        let mut names = Vec::new();
        model.visit(&mut |name, _| names.push(name.to_string()));
        let grads: Vec<Tensor> = bound.vars().iter().map(|v| v.grad().unwrap()).collect();
        let mut saw_nonzero_readout = false;
        for (name, grad) in names.iter().zip(&grads) {
            let nonzero = grad.data().iter().any(|&g| g != 0.0);
            if name == "gru.wh" {
                assert!(nonzero, "readout weight gradient must be non-zero");
                saw_nonzero_readout = true;
            }
        }
        assert!(saw_nonzero_readout);
    }

    #[test]
    fn same_parameters_run_any_sequence_length() {
        let model = tiny_model(81);
        let short = random_sequence(&model, 2, 82);
        let long = random_sequence(&model, 5, 83);
        for seq in [&short, &long] {
            let pred = predict_video(&model, seq, VideoAggregation::FinalStep).unwrap();
            assert_eq!(pred.step_logits.len(), seq.len());
        }
    }

    #[test]
    fn aggregations_use_final_and_mean_logits() {
        let mut model = tiny_model(91);
        // Give the readout weight so logits are non-trivial.
        let mut rng = ChaCha8Rng::seed_from_u64(92);
        model.visit_mut(&mut |name, t| {
            if name == "gru.wh" {
                *t = crate::tensor::randn(&t.shape().to_vec(), &mut rng);
            }
        });
        let seq = random_sequence(&model, 4, 93);
        let final_pred = predict_video(&model, &seq, VideoAggregation::FinalStep).unwrap();
        let mean_pred = predict_video(&model, &seq, VideoAggregation::MeanLogits).unwrap();
        assert_eq!(final_pred.step_logits, mean_pred.step_logits);
        assert_eq!(
            final_pred.label,
            argmax_class(final_pred.step_logits.last().unwrap())
        );
        let mut mean = [0.0; 3];
        for step in &mean_pred.step_logits {
            for (m, s) in mean.iter_mut().zip(step) {
                *m += s / mean_pred.step_logits.len() as f64;
            }
        }
        assert_eq!(mean_pred.label, argmax_class(&mean));
    }

    #[test]
    fn prefix_recomputation_matches_streamed_steps() {
        // Rerunning the model from scratch on every prefix must give
        // bit-identical logits to the corresponding step of the full
        // pass: the recurrence carries no hidden bookkeeping.
        let mut model = tiny_model(111);
        let mut rng = ChaCha8Rng::seed_from_u64(112);
        model.visit_mut(&mut |name, t| {
            if name == "gru.wh" {
                *t = crate::tensor::randn(&t.shape().to_vec(), &mut rng);
            }
        });
        let seq = random_sequence(&model, 5, 113);
        let full = predict_video(&model, &seq, VideoAggregation::FinalStep).unwrap();
        for t in 1..=seq.len() {
            let prefix = FrameSequence {
                frames: seq.frames[..t].to_vec(),
                frame_labels: seq.frame_labels[..t].to_vec(),
                video_label: seq.video_label,
            };
            let partial = predict_video(&model, &prefix, VideoAggregation::FinalStep).unwrap();
            assert_eq!(partial.step_logits[t - 1], full.step_logits[t - 1]);
            assert_eq!(partial.frame_labels[t - 1], full.frame_labels[t - 1]);
        }
    }

    #[test]
    fn empty_video_is_rejected() {
        let model = tiny_model(101);
        let seq = FrameSequence {
            frames: vec![],
            frame_labels: vec![],
            video_label: GroupLabel::Neutral,
        };
        assert!(predict_video(&model, &seq, VideoAggregation::FinalStep).is_err());
    }
}
