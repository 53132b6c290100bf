//! The full gradient verification sweep.
//!
//! One entry per differentiable operation, each comparing reverse-mode
//! gradients against central differences through [`grad_check`], plus
//! parameter-space sweeps of the two training losses on toy models.
//! Shared by the `grad-check` CLI mode and the acceptance suite.
//!
//! Every op is contracted to a scalar through a fixed random weight
//! tensor rather than a plain sum, so element-permutation bugs cannot
//! cancel out.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::flow::FlowModel;
use crate::gradcheck::grad_check;
use crate::grouping::GroupedFeature;
use crate::metrics::{GroupLabel, GROUP_LABELS};
use crate::synth::gen_group_sample;
use crate::tape::{log_softmax, Tape, Var};
use crate::temporal::{FrameSequence, TemporalModel};
use crate::tensor::{randn, Tensor};

/// Worst relative error for one verified quantity.
#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub max_rel_err: f64,
}

/// Acceptance bound on every entry.
pub const SUITE_TOLERANCE: f64 = 1e-4;

const EPS: f64 = 1e-5;

/// Keep inputs away from kinks and singularities.
fn smooth(t: Tensor) -> Tensor {
    t.map(|v| {
        let v = v.clamp(-1.5, 1.5);
        if v.abs() < 0.25 {
            0.25f64.copysign(if v == 0.0 { 1.0 } else { v })
        } else {
            v
        }
    })
}

/// Contract an arbitrary-shape var to a scalar with fixed weights.
fn contract(tape: &Tape, v: &Var, weights: &Tensor) -> Result<Var> {
    let flat = v.reshape(&[weights.len()])?;
    Ok(flat.mul(&tape.constant(weights.clone()))?.sum())
}

/// Run the whole sweep. Deterministic under the seed.
pub fn run_gradient_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    let mut push = |name: &'static str, err: f64| entries.push(SuiteEntry { name, max_rel_err: err });

    // --- elementwise and scalar-broadcast ops ---
    {
        let x = smooth(randn(&[3, 4], &mut rng));
        let c = smooth(randn(&[3, 4], &mut rng));
        let w = randn(&[12], &mut rng);
        let c2 = c.clone();
        let w2 = w.clone();
        push(
            "add",
            grad_check(
                move |t, v| contract(t, &v.add(&t.constant(c2.clone()))?, &w2),
                &x,
                EPS,
            )?,
        );
        let c2 = c.clone();
        let w2 = w.clone();
        push(
            "sub",
            grad_check(
                move |t, v| contract(t, &t.constant(c2.clone()).sub(v)?, &w2),
                &x,
                EPS,
            )?,
        );
        let c2 = c.clone();
        let w2 = w.clone();
        push(
            "mul",
            grad_check(
                move |t, v| contract(t, &v.mul(&t.constant(c2.clone()))?, &w2),
                &x,
                EPS,
            )?,
        );
        let w2 = w.clone();
        push(
            "neg",
            grad_check(move |t, v| contract(t, &v.neg(), &w2), &x, EPS)?,
        );
        let w2 = w.clone();
        push(
            "cmul",
            grad_check(move |t, v| contract(t, &v.cmul(-1.7), &w2), &x, EPS)?,
        );
        let w2 = w.clone();
        push(
            "cadd",
            grad_check(move |t, v| contract(t, &v.cadd(0.35), &w2), &x, EPS)?,
        );
        let w2 = w.clone();
        push(
            "exp",
            grad_check(move |t, v| contract(t, &v.exp(), &w2), &x, EPS)?,
        );
        let pos = x.map(|v| v.abs() + 0.5);
        let w2 = w.clone();
        push(
            "log",
            grad_check(move |t, v| contract(t, &v.log()?, &w2), &pos, EPS)?,
        );
        let w2 = w.clone();
        push(
            "tanh",
            grad_check(move |t, v| contract(t, &v.tanh(), &w2), &x, EPS)?,
        );
        let w2 = w.clone();
        push(
            "sigmoid",
            grad_check(move |t, v| contract(t, &v.sigmoid(), &w2), &x, EPS)?,
        );
        let w2 = w.clone();
        push(
            "relu",
            grad_check(move |t, v| contract(t, &v.relu(), &w2), &x, EPS)?,
        );
    }

    // --- matmul, both operands ---
    {
        let a = smooth(randn(&[3, 4], &mut rng));
        let b = smooth(randn(&[4, 2], &mut rng));
        let w = randn(&[6], &mut rng);
        let b2 = b.clone();
        let w2 = w.clone();
        push(
            "matmul_lhs",
            grad_check(
                move |t, v| contract(t, &v.matmul(&t.constant(b2.clone()))?, &w2),
                &a,
                EPS,
            )?,
        );
        let a2 = a.clone();
        let w2 = w.clone();
        push(
            "matmul_rhs",
            grad_check(
                move |t, v| contract(t, &t.constant(a2.clone()).matmul(v)?, &w2),
                &b,
                EPS,
            )?,
        );
    }

    // --- convolution family ---
    {
        let x = smooth(randn(&[5, 4, 2], &mut rng));
        let k = smooth(randn(&[3, 3, 2, 3], &mut rng)).map(|v| v * 0.3);
        let w_s1 = randn(&[5 * 4 * 3], &mut rng);
        let w_s2 = randn(&[3 * 2 * 3], &mut rng);
        let k2 = k.clone();
        let w2 = w_s1.clone();
        push(
            "conv2d_s1_input",
            grad_check(
                move |t, v| contract(t, &v.conv2d(&t.constant(k2.clone()), 1, false)?, &w2),
                &x,
                EPS,
            )?,
        );
        let x2 = x.clone();
        let w2 = w_s1.clone();
        push(
            "conv2d_s1_kernel",
            grad_check(
                move |t, v| contract(t, &t.constant(x2.clone()).conv2d(v, 1, false)?, &w2),
                &k,
                EPS,
            )?,
        );
        let k2 = k.clone();
        push(
            "conv2d_s2_input",
            grad_check(
                move |t, v| contract(t, &v.conv2d(&t.constant(k2.clone()), 2, false)?, &w_s2),
                &x,
                EPS,
            )?,
        );
        let dk = smooth(randn(&[3, 3, 2, 1], &mut rng)).map(|v| v * 0.3);
        let w_dw = randn(&[5 * 4 * 2], &mut rng);
        let dk2 = dk.clone();
        let w2 = w_dw.clone();
        push(
            "conv2d_depthwise_input",
            grad_check(
                move |t, v| contract(t, &v.conv2d(&t.constant(dk2.clone()), 1, true)?, &w2),
                &x,
                EPS,
            )?,
        );
        let x2 = x.clone();
        push(
            "conv2d_depthwise_kernel",
            grad_check(
                move |t, v| contract(t, &t.constant(x2.clone()).conv2d(v, 1, true)?, &w_dw),
                &dk,
                EPS,
            )?,
        );
    }

    // --- per-channel affine ---
    {
        let x = smooth(randn(&[4, 3, 2], &mut rng));
        let b = smooth(randn(&[2], &mut rng));
        let w = randn(&[24], &mut rng);
        let b2 = b.clone();
        let w2 = w.clone();
        push(
            "add_channel_input",
            grad_check(
                move |t, v| contract(t, &v.add_channel(&t.constant(b2.clone()))?, &w2),
                &x,
                EPS,
            )?,
        );
        let x2 = x.clone();
        let w2 = w.clone();
        push(
            "add_channel_bias",
            grad_check(
                move |t, v| contract(t, &t.constant(x2.clone()).add_channel(v)?, &w2),
                &b,
                EPS,
            )?,
        );
        let b2 = b.clone();
        let w2 = w.clone();
        push(
            "mul_channel_input",
            grad_check(
                move |t, v| contract(t, &v.mul_channel(&t.constant(b2.clone()))?, &w2),
                &x,
                EPS,
            )?,
        );
        let x2 = x.clone();
        push(
            "mul_channel_scale",
            grad_check(
                move |t, v| contract(t, &t.constant(x2.clone()).mul_channel(v)?, &w),
                &b,
                EPS,
            )?,
        );
    }

    // --- reductions and shape ops ---
    {
        let x = smooth(randn(&[3, 4], &mut rng));
        push("sum", grad_check(|_, v| Ok(v.sum()), &x, EPS)?);
        push("mean", grad_check(|_, v| Ok(v.mean()), &x, EPS)?);
        let w_cols = randn(&[4], &mut rng);
        let w2 = w_cols.clone();
        push(
            "sum_axis",
            grad_check(move |t, v| contract(t, &v.sum_axis(0)?, &w2), &x, EPS)?,
        );
        let w_rows = randn(&[3], &mut rng);
        push(
            "mean_axis",
            grad_check(move |t, v| contract(t, &v.mean_axis(1)?, &w_rows), &x, EPS)?,
        );
        let w = randn(&[12], &mut rng);
        push(
            "reshape",
            grad_check(
                move |t, v| contract(t, &v.reshape(&[2, 6])?, &w),
                &x,
                EPS,
            )?,
        );
    }

    // --- tape assembly ops ---
    {
        let x = smooth(randn(&[3, 2], &mut rng));
        let other = smooth(randn(&[3, 2], &mut rng));
        let w = randn(&[12], &mut rng);
        let o2 = other.clone();
        push(
            "stack_channels",
            grad_check(
                move |t, v| {
                    let stacked = t.stack_channels(&[v.clone(), t.constant(o2.clone())])?;
                    contract(t, &stacked, &w)
                },
                &x,
                EPS,
            )?,
        );
        let w = randn(&[3 * 4], &mut rng);
        let o2 = other.clone();
        push(
            "place_cols",
            grad_check(
                move |t, v| {
                    let placed = t.place_cols(
                        3,
                        4,
                        &[
                            (v.clone(), 1, 0),
                            (t.constant(o2.clone()), 0, 2),
                            (v.clone(), 0, 3),
                        ],
                    )?;
                    contract(t, &placed, &w)
                },
                &x,
                EPS,
            )?,
        );
    }

    // --- softmax cross-entropy building block ---
    {
        let x = smooth(randn(&[3, 1], &mut rng));
        let w = randn(&[3], &mut rng);
        push(
            "log_softmax",
            grad_check(move |t, v| contract(t, &log_softmax(v)?, &w), &x, EPS)?,
        );
    }

    // --- full losses, parameter-space sweeps on toy models ---
    push("nvpf_loss", nvpf_loss_param_sweep(seed)?);
    push("sequence_loss", sequence_loss_param_sweep(seed)?);

    Ok(entries)
}

/// Deterministic coordinate subset: all coordinates of small tensors,
/// an evenly strided sample of large ones.
fn coordinate_sample(len: usize, cap: usize) -> Vec<usize> {
    if len <= cap {
        (0..len).collect()
    } else {
        (0..cap).map(|i| i * len / cap).collect()
    }
}

const FD_COORD_CAP: usize = 24;

/// Central-difference check of `nvpf_loss` gradients on a 2×2 toy flow,
/// over every parameter tensor.
fn nvpf_loss_param_sweep(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let mut model = FlowModel::new(2, 2, 2, 4, false, &mut rng)?;
    // Give the zero-initialized subnets non-trivial output so the check
    // exercises real curvature.
    model.visit_mut(&mut |_, t| {
        let noise = randn(t.shape(), &mut rng);
        for (w, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *w += 0.2 * n;
        }
    });
    let batch: Vec<(GroupedFeature, GroupLabel)> = (0..3)
        .map(|i| gen_group_sample(GROUP_LABELS[i % 3], 2, 2, 2, 1.0, 300 + i as u64))
        .collect::<Result<_>>()?;
    let refs: Vec<(&GroupedFeature, GroupLabel)> = batch.iter().map(|(g, l)| (g, *l)).collect();

    let loss_of = |m: &FlowModel| -> Result<f64> {
        let tape = Tape::new();
        let bound = m.bind(&tape, false);
        Ok(bound.nvpf_loss(&refs)?.value().item())
    };

    // Analytic gradients, in visit order.
    let grads: Vec<Tensor> = {
        let tape = Tape::new();
        let bound = model.bind(&tape, true);
        let loss = bound.nvpf_loss(&refs)?;
        tape.backward(&loss)?;
        bound
            .vars()
            .iter()
            .map(|v| {
                v.grad()
                    .unwrap_or_else(|| Tensor::zeros(&v.shape()))
            })
            .collect()
    };

    param_sweep_worst(&mut model, FlowModel::visit_mut, loss_of, &grads)
}

/// Central-difference check of the sequence loss on a toy recurrent
/// model (two frames, three hidden units), over every parameter tensor.
fn sequence_loss_param_sweep(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5A5A);
    let mut model = TemporalModel::new(2, 2, 3, 2, 2, 4, 3, &mut rng)?;
    model.visit_mut(&mut |_, t| {
        let noise = randn(t.shape(), &mut rng);
        for (w, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *w += 0.2 * n;
        }
    });
    let frames: Vec<Vec<GroupedFeature>> = (0..2)
        .map(|t| {
            Ok(vec![
                gen_group_sample(GroupLabel::Positive, 2, 2, 2, 1.0, 600 + 10 * t)?.0,
                gen_group_sample(GroupLabel::Negative, 1, 2, 2, 1.0, 600 + 10 * t + 1)?.0,
            ])
        })
        .collect::<Result<_>>()?;
    let seq = FrameSequence {
        frames,
        frame_labels: vec![GroupLabel::Positive, GroupLabel::Negative],
        video_label: GroupLabel::Positive,
    };

    let loss_of = |m: &TemporalModel| -> Result<f64> {
        let tape = Tape::new();
        let bound = m.bind(&tape, false);
        Ok(bound.sequence_loss(&seq)?.value().item())
    };

    let grads: Vec<Tensor> = {
        let tape = Tape::new();
        let bound = model.bind(&tape, true);
        let loss = bound.sequence_loss(&seq)?;
        tape.backward(&loss)?;
        bound
            .vars()
            .iter()
            .map(|v| {
                v.grad()
                    .unwrap_or_else(|| Tensor::zeros(&v.shape()))
            })
            .collect()
    };

    param_sweep_worst(&mut model, TemporalModel::visit_mut, loss_of, &grads)
}

/// Worst relative error over a deterministic sample of parameter
/// coordinates: perturb one coordinate ±eps, recompute the loss, and
/// compare the central difference with the analytic gradient.
fn param_sweep_worst<M>(
    model: &mut M,
    visit_mut: impl Fn(&mut M, &mut dyn FnMut(&str, &mut Tensor)),
    loss_of: impl Fn(&M) -> Result<f64>,
    grads: &[Tensor],
) -> Result<f64> {
    // Count tensors and sizes first.
    let mut sizes = Vec::new();
    visit_mut(model, &mut |_, t| sizes.push(t.len()));
    assert_eq!(sizes.len(), grads.len(), "visit order drifted from vars order");

    let mut worst = 0.0f64;
    for (ti, &len) in sizes.iter().enumerate() {
        for ci in coordinate_sample(len, FD_COORD_CAP) {
            // Nudge coordinate ci of tensor ti, in both directions.
            let mut values = [0.0f64; 2];
            for (dir, slot) in [(1.0, 0usize), (-1.0, 1usize)] {
                let mut idx = 0;
                visit_mut(model, &mut |_, t| {
                    if idx == ti {
                        t.data_mut()[ci] += dir * EPS;
                    }
                    idx += 1;
                });
                values[slot] = loss_of(model)?;
                let mut idx = 0;
                visit_mut(model, &mut |_, t| {
                    if idx == ti {
                        t.data_mut()[ci] -= dir * EPS;
                    }
                    idx += 1;
                });
            }
            let fd = (values[0] - values[1]) / (2.0 * EPS);
            let a = grads[ti].data()[ci];
            let err = (a - fd).abs() / a.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
