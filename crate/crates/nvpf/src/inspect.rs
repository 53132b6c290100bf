//! Per-sample model traces: where every log-det and logit comes from.
//!
//! Traces are pretty-printed JSON with a stable field order, so two runs
//! of the same model on the same data diff cleanly (and byte-compare
//! equal). The flow trace exposes each coupling unit's log-det
//! contribution and the per-class log-likelihoods behind the prediction;
//! the video trace exposes the per-frame logits behind the recurrence.

use serde::Serialize;

use crate::error::Result;
use crate::flow::{class_log_likelihoods, classify_group, flow_forward, FlowModel};
use crate::grouping::GroupedFeature;
use crate::metrics::GroupLabel;
use crate::temporal::{predict_video, FrameSequence, TemporalModel, VideoAggregation};
use crate::train::truncate_sequence;

/// One group's walk through the fusion flow.
#[derive(Clone, Debug, Serialize)]
pub struct FlowTraceItem {
    pub index: usize,
    pub group_id: usize,
    pub unit_log_dets: Vec<f64>,
    pub total_log_det: f64,
    pub class_log_likelihoods: [f64; 3],
    pub prediction: GroupLabel,
}

/// Trace of a fusion-flow checkpoint over a dataset.
#[derive(Clone, Debug, Serialize)]
pub struct FlowTrace {
    pub kind: &'static str,
    pub items: Vec<FlowTraceItem>,
}

/// One video's walk through the recurrent model.
#[derive(Clone, Debug, Serialize)]
pub struct TemporalTraceItem {
    pub video_id: String,
    pub frame_logits: Vec<[f64; 3]>,
    pub frame_predictions: Vec<GroupLabel>,
    pub prediction: GroupLabel,
}

/// Trace of a recurrent checkpoint over a video dataset.
#[derive(Clone, Debug, Serialize)]
pub struct TemporalTrace {
    pub kind: &'static str,
    pub aggregation: VideoAggregation,
    pub items: Vec<TemporalTraceItem>,
}

/// Trace every group through a frozen flow. Predictions use the
/// likelihood route and match [`classify_group`] exactly.
pub fn trace_flow(model: &FlowModel, data: &[GroupedFeature]) -> Result<FlowTrace> {
    let mut items = Vec::with_capacity(data.len());
    for (index, group) in data.iter().enumerate() {
        let fused = flow_forward(model, group)?;
        let lls = class_log_likelihoods(model, &fused);
        let prediction = classify_group(model, group, false)?.label;
        items.push(FlowTraceItem {
            index,
            group_id: group.group_id,
            unit_log_dets: fused.unit_log_dets.clone(),
            total_log_det: fused.log_det,
            class_log_likelihoods: lls,
            prediction,
        });
    }
    Ok(FlowTrace {
        kind: "flow",
        items,
    })
}

/// Trace every video through a frozen recurrent model (first `t`
/// frames). Predictions match [`predict_video`] under the same
/// aggregation.
pub fn trace_temporal(
    model: &TemporalModel,
    seqs: &[(String, FrameSequence)],
    t: usize,
    aggregation: VideoAggregation,
) -> Result<TemporalTrace> {
    let mut items = Vec::with_capacity(seqs.len());
    for (video_id, seq) in seqs {
        let seq = truncate_sequence(seq, t);
        let p = predict_video(model, &seq, aggregation)?;
        items.push(TemporalTraceItem {
            video_id: video_id.clone(),
            frame_logits: p.step_logits,
            frame_predictions: p.frame_labels,
            prediction: p.label,
        });
    }
    Ok(TemporalTrace {
        kind: "temporal",
        aggregation,
        items,
    })
}

/// Render a trace as pretty JSON with a trailing newline. Field order is
/// declaration order, so the output is stable for diffing.
pub fn render_trace<T: Serialize>(trace: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(trace)?;
    s.push('\n');
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::GROUP_LABELS;
    use crate::synth::gen_group_sample;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_groups(n: usize, seed: u64) -> Vec<(GroupedFeature, GroupLabel)> {
        (0..n)
            .map(|i| {
                gen_group_sample(GROUP_LABELS[i % 3], 3, 4, 6, 2.0, seed + i as u64).unwrap()
            })
            .collect()
    }

    #[test]
    fn identity_model_reports_zero_log_dets() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = FlowModel::new(6, 4, 3, 4, false, &mut rng).unwrap();
        let groups: Vec<GroupedFeature> =
            sample_groups(4, 50).into_iter().map(|(g, _)| g).collect();
        let trace = trace_flow(&model, &groups).unwrap();
        assert_eq!(trace.kind, "flow");
        assert_eq!(trace.items.len(), 4);
        for item in &trace.items {
            assert_eq!(item.unit_log_dets.len(), 3);
            assert!(item.unit_log_dets.iter().all(|&d| d == 0.0));
            assert_eq!(item.total_log_det, 0.0);
        }
    }

    #[test]
    fn predictions_cross_check_the_classifier() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut model = FlowModel::new(6, 4, 3, 4, false, &mut rng).unwrap();
        // Perturb away from identity so the check is not vacuous.
        model.visit_mut(&mut |_, t| {
            let noise = crate::tensor::randn(t.shape(), &mut rng);
            for (w, n) in t.data_mut().iter_mut().zip(noise.data()) {
                *w += 0.3 * n;
            }
        });
        let groups: Vec<GroupedFeature> =
            sample_groups(6, 90).into_iter().map(|(g, _)| g).collect();
        let trace = trace_flow(&model, &groups).unwrap();
        for (item, group) in trace.items.iter().zip(&groups) {
            let c = classify_group(&model, group, false).unwrap();
            assert_eq!(item.prediction, c.label);
            assert_eq!(item.class_log_likelihoods, c.log_likelihoods);
            let best = (0..3)
                .max_by(|&a, &b| {
                    item.class_log_likelihoods[a]
                        .partial_cmp(&item.class_log_likelihoods[b])
                        .unwrap()
                })
                .unwrap();
            assert_eq!(item.prediction.index(), best);
        }
    }

    #[test]
    fn renders_are_byte_identical_and_fields_stay_ordered() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = FlowModel::new(6, 4, 2, 4, false, &mut rng).unwrap();
        let groups: Vec<GroupedFeature> =
            sample_groups(2, 70).into_iter().map(|(g, _)| g).collect();
        let a = render_trace(&trace_flow(&model, &groups).unwrap()).unwrap();
        let b = render_trace(&trace_flow(&model, &groups).unwrap()).unwrap();
        assert_eq!(a, b);
        assert!(a.ends_with('\n'));
        let idx = a.find("\"index\"").unwrap();
        let gid = a.find("\"group_id\"").unwrap();
        let uld = a.find("\"unit_log_dets\"").unwrap();
        let tot = a.find("\"total_log_det\"").unwrap();
        let lls = a.find("\"class_log_likelihoods\"").unwrap();
        let pred = a.find("\"prediction\"").unwrap();
        assert!(idx < gid && gid < uld && uld < tot && tot < lls && lls < pred);
    }

    #[test]
    fn video_traces_expose_per_frame_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = TemporalModel::new(6, 4, 6, 2, 2, 4, 5, &mut rng).unwrap();
        let frames: Vec<Vec<GroupedFeature>> = (0..3)
            .map(|t| {
                vec![
                    gen_group_sample(GroupLabel::Positive, 3, 4, 6, 2.0, 40 + t).unwrap().0,
                    gen_group_sample(GroupLabel::Positive, 2, 4, 6, 2.0, 80 + t).unwrap().0,
                ]
            })
            .collect();
        let seq = FrameSequence {
            frames,
            frame_labels: vec![GroupLabel::Positive; 3],
            video_label: GroupLabel::Positive,
        };
        let seqs = vec![("vid00000".to_string(), seq)];
        let trace =
            trace_temporal(&model, &seqs, 2, VideoAggregation::MeanLogits).unwrap();
        assert_eq!(trace.kind, "temporal");
        assert_eq!(trace.items.len(), 1);
        let item = &trace.items[0];
        // Truncated to t = 2 frames.
        assert_eq!(item.frame_logits.len(), 2);
        assert_eq!(item.frame_predictions.len(), 2);
        let p = predict_video(
            &model,
            &truncate_sequence(&seqs[0].1, 2),
            VideoAggregation::MeanLogits,
        )
        .unwrap();
        assert_eq!(item.prediction, p.label);
        assert_eq!(item.frame_logits, p.step_logits);
    }
}
