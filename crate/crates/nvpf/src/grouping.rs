//! Spatial grouping of detected faces and the stacking operator.
//!
//! Faces are clustered by box center with seeded k-means (k-means++
//! initialization, Lloyd refinement). The clustering is made
//! permutation-equivariant by running on an internal canonical ordering
//! of the points, so shuffling the input list never changes which cluster
//! a face lands in.
//!
//! [`stack_group`] turns one group's members into the fixed-size matrix
//! `S ∈ R^{M×N_max}` consumed by the fusion flow: columns in spatial
//! order, zero-padded and masked when the group is small, truncated to
//! the largest faces when it is not.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::FaceLabel;
use crate::tensor::Tensor;

/// Cluster count used when a run leaves K unspecified.
pub const DEFAULT_K: usize = 10;

/// Maximum Lloyd iterations before declaring convergence.
const MAX_ITERS: usize = 100;

/// One detected face: where it is, how big it is, and its feature vector.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct FaceBox {
    /// Center (x, y) in pixels.
    pub center: (f64, f64),
    /// Width and height in pixels.
    pub size: (f64, f64),
    /// M-dimensional feature from the extractor (or synthetic stand-in).
    pub feature: Tensor,
    /// Ground-truth face category when the dataset provides one.
    pub face_label: Option<FaceLabel>,
}

impl FaceBox {
    pub fn area(&self) -> f64 {
        self.size.0 * self.size.1
    }
}

/// A group's stacked feature matrix plus column validity.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedFeature {
    /// S ∈ R^{M×N_max}, columns beyond the member count are zero.
    pub s: Tensor,
    /// Valid-column flags, length N_max.
    pub mask: Vec<bool>,
    pub group_id: usize,
    /// Indices into the source member list, in column order.
    pub member_order: Vec<usize>,
}

impl GroupedFeature {
    pub fn rows(&self) -> usize {
        self.s.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.s.shape()[1]
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Result of one clustering run.
#[derive(Clone, Debug)]
pub struct KmeansOutcome {
    /// Cluster id per input box, aligned with the input order.
    pub assignments: Vec<usize>,
    /// Final cluster centers, indexed by cluster id.
    pub centers: Vec<(f64, f64)>,
    /// Within-cluster SSE after each assignment step.
    pub sse_history: Vec<f64>,
    pub requested_k: usize,
    pub effective_k: usize,
    /// True when K exceeded the box count and was clamped (not fatal).
    pub clamped: bool,
}

/// Cluster face boxes by center with seeded k-means.
///
/// `K` greater than the box count is clamped and reported via
/// [`KmeansOutcome::clamped`]. Empty clusters are dropped, so
/// `effective_k` may be smaller than requested.
pub fn cluster_faces(boxes: &[FaceBox], k: usize, seed: u64) -> Result<KmeansOutcome> {
    if boxes.is_empty() {
        return Err(Error::invalid("cluster_faces", "no boxes"));
    }
    if k == 0 {
        return Err(Error::invalid("cluster_faces", "K must be at least 1"));
    }
    for b in boxes {
        if !(b.center.0.is_finite() && b.center.1.is_finite()) {
            return Err(Error::invalid("cluster_faces", "non-finite box center"));
        }
    }
    let clamped = k > boxes.len();
    let k = k.min(boxes.len());

    // Canonical ordering: clustering must not depend on input order.
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (boxes[a].center, boxes[b].center);
        pa.0.total_cmp(&pb.0).then(pa.1.total_cmp(&pb.1))
    });
    let pts: Vec<(f64, f64)> = order.iter().map(|&i| boxes[i].center).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = kmeanspp_init(&pts, k, &mut rng);
    let mut assign = vec![0usize; pts.len()];
    let mut sse_history = Vec::new();

    for _ in 0..MAX_ITERS {
        // Assignment step (ties go to the lowest cluster index).
        let mut changed = false;
        let mut sse = 0.0;
        for (i, p) in pts.iter().enumerate() {
            let (best, d2) = nearest_center(*p, &centers);
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
            sse += d2;
        }
        sse_history.push(sse);
        if !changed && sse_history.len() > 1 {
            break;
        }
        // Update step; empty clusters are dropped and ids compacted.
        let mut sums = vec![(0.0, 0.0, 0usize); centers.len()];
        for (i, p) in pts.iter().enumerate() {
            let s = &mut sums[assign[i]];
            s.0 += p.0;
            s.1 += p.1;
            s.2 += 1;
        }
        let mut remap = vec![usize::MAX; centers.len()];
        let mut next = Vec::new();
        for (c, s) in sums.iter().enumerate() {
            if s.2 > 0 {
                remap[c] = next.len();
                next.push((s.0 / s.2 as f64, s.1 / s.2 as f64));
            }
        }
        if next.len() < centers.len() {
            for a in assign.iter_mut() {
                *a = remap[*a];
            }
        }
        centers = next;
    }

    // Map assignments back to the caller's order.
    let mut assignments = vec![0usize; boxes.len()];
    for (sorted_pos, &orig) in order.iter().enumerate() {
        assignments[orig] = assign[sorted_pos];
    }
    Ok(KmeansOutcome {
        assignments,
        effective_k: centers.len(),
        centers,
        sse_history,
        requested_k: if clamped { boxes.len() } else { k },
        clamped,
    })
}

fn d2(a: (f64, f64), b: (f64, f64)) -> f64 {
    let dx = a.0 - b.0;
    let dy = a.1 - b.1;
    dx * dx + dy * dy
}

fn nearest_center(p: (f64, f64), centers: &[(f64, f64)]) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = d2(p, centers[0]);
    for (c, ctr) in centers.iter().enumerate().skip(1) {
        let d = d2(p, *ctr);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    (best, best_d)
}

/// k-means++ seeding: first center uniform, the rest sampled with
/// probability proportional to squared distance from the chosen set.
fn kmeanspp_init(pts: &[(f64, f64)], k: usize, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let mut centers = Vec::with_capacity(k);
    centers.push(pts[rng.random_range(0..pts.len())]);
    while centers.len() < k {
        let d2s: Vec<f64> = pts
            .iter()
            .map(|p| nearest_center(*p, &centers).1)
            .collect();
        let total: f64 = d2s.iter().sum();
        if total <= 0.0 {
            // Every remaining point coincides with a center; no more
            // distinct clusters exist.
            break;
        }
        let mut u = rng.random_range(0.0..total);
        let mut chosen = pts.len() - 1;
        for (i, d) in d2s.iter().enumerate() {
            if u < *d {
                chosen = i;
                break;
            }
            u -= d;
        }
        centers.push(pts[chosen]);
    }
    centers
}

/// Stack one group's members into `S ∈ R^{M×N_max}` with a validity mask.
///
/// Columns are ordered by ascending center x, then y. Oversized groups
/// keep their `N_max` largest members (by box area); undersized groups
/// are zero-padded with the mask marking real columns.
pub fn stack_group(members: &[FaceBox], n_max: usize, group_id: usize) -> Result<GroupedFeature> {
    if members.is_empty() {
        return Err(Error::invalid("stack_group", "empty group"));
    }
    if n_max == 0 {
        return Err(Error::invalid("stack_group", "N_max must be at least 1"));
    }
    let m = members[0].feature.len();
    for b in members {
        if b.feature.len() != m || b.feature.rank() != 1 {
            return Err(Error::shapes(
                "stack_group (feature length)",
                members[0].feature.shape(),
                b.feature.shape(),
            ));
        }
    }
    let mut kept: Vec<usize> = (0..members.len()).collect();
    if members.len() > n_max {
        // Keep the largest faces; ties resolve to the earlier index.
        kept.sort_by(|&a, &b| {
            members[b]
                .area()
                .total_cmp(&members[a].area())
                .then(a.cmp(&b))
        });
        kept.truncate(n_max);
    }
    kept.sort_by(|&a, &b| {
        let (pa, pb) = (members[a].center, members[b].center);
        pa.0.total_cmp(&pb.0).then(pa.1.total_cmp(&pb.1))
    });

    let mut s = Tensor::zeros(&[m, n_max]);
    let mut mask = vec![false; n_max];
    for (col, &idx) in kept.iter().enumerate() {
        for r in 0..m {
            s.set2(r, col, members[idx].feature.data()[r]);
        }
        mask[col] = true;
    }
    Ok(GroupedFeature {
        s,
        mask,
        group_id,
        member_order: kept,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn face_at(x: f64, y: f64, w: f64, h: f64, tag: f64) -> FaceBox {
        FaceBox {
            center: (x, y),
            size: (w, h),
            feature: Tensor::from_vec(&[2], vec![tag, tag]).unwrap(),
            face_label: None,
        }
    }

    #[test]
    fn k_one_assigns_everything_to_cluster_zero() {
        let boxes: Vec<_> = (0..5).map(|i| face_at(i as f64, 0.0, 10.0, 10.0, 0.0)).collect();
        let out = cluster_faces(&boxes, 1, 7).unwrap();
        assert!(out.assignments.iter().all(|&a| a == 0));
        assert_eq!(out.effective_k, 1);
    }

    #[test]
    fn two_distant_clouds_bipartition_matches_brute_force() {
        let mut boxes = Vec::new();
        for i in 0..4 {
            boxes.push(face_at(i as f64, i as f64, 10.0, 10.0, 0.0));
            boxes.push(face_at(1000.0 + i as f64, 1000.0 - i as f64, 10.0, 10.0, 0.0));
        }
        let out = cluster_faces(&boxes, 2, 3).unwrap();
        assert_eq!(out.effective_k, 2);

        // Brute force: lowest-SSE 2-partition over all labelings.
        let pts: Vec<(f64, f64)> = boxes.iter().map(|b| b.center).collect();
        let n = pts.len();
        let mut best_sse = f64::INFINITY;
        let mut best_labels = 0u32;
        for labels in 1..(1u32 << n) - 1 {
            let mut sse = 0.0;
            for side in 0..2 {
                let members: Vec<(f64, f64)> = (0..n)
                    .filter(|&i| (labels >> i) & 1 == side)
                    .map(|i| pts[i])
                    .collect();
                if members.is_empty() {
                    sse = f64::INFINITY;
                    break;
                }
                let cx = members.iter().map(|p| p.0).sum::<f64>() / members.len() as f64;
                let cy = members.iter().map(|p| p.1).sum::<f64>() / members.len() as f64;
                sse += members.iter().map(|p| d2(*p, (cx, cy))).sum::<f64>();
            }
            if sse < best_sse {
                best_sse = sse;
                best_labels = labels;
            }
        }
        // Same partition, up to cluster-id swap.
        let kmeans_side0: Vec<bool> = out.assignments.iter().map(|&a| a == 0).collect();
        let brute_side0: Vec<bool> = (0..n).map(|i| (best_labels >> i) & 1 == 0).collect();
        let flipped: Vec<bool> = brute_side0.iter().map(|b| !b).collect();
        assert!(kmeans_side0 == brute_side0 || kmeans_side0 == flipped);
    }

    #[test]
    fn default_k_is_ten() {
        assert_eq!(DEFAULT_K, 10);
    }

    #[test]
    fn oversized_k_is_clamped_and_reported() {
        let boxes = vec![face_at(0.0, 0.0, 10.0, 10.0, 0.0), face_at(5.0, 5.0, 10.0, 10.0, 1.0)];
        let out = cluster_faces(&boxes, 10, 1).unwrap();
        assert!(out.clamped);
        assert!(out.effective_k <= 2);
    }

    #[test]
    fn single_member_pads_and_masks() {
        let b = face_at(3.0, 4.0, 10.0, 10.0, 9.0);
        let g = stack_group(&[b.clone()], 4, 0).unwrap();
        assert_eq!(g.mask, vec![true, false, false, false]);
        assert_eq!(g.s.at2(0, 0), 9.0);
        assert_eq!(g.s.at2(1, 0), 9.0);
        for col in 1..4 {
            assert_eq!(g.s.at2(0, col), 0.0);
            assert_eq!(g.s.at2(1, col), 0.0);
        }
        assert_eq!(g.member_order, vec![0]);
    }

    #[test]
    fn columns_sorted_by_center_x() {
        let members = vec![
            face_at(30.0, 0.0, 10.0, 10.0, 30.0),
            face_at(10.0, 0.0, 10.0, 10.0, 10.0),
            face_at(20.0, 0.0, 10.0, 10.0, 20.0),
        ];
        let g = stack_group(&members, 3, 0).unwrap();
        assert_eq!(g.s.at2(0, 0), 10.0);
        assert_eq!(g.s.at2(0, 1), 20.0);
        assert_eq!(g.s.at2(0, 2), 30.0);
        assert_eq!(g.member_order, vec![1, 2, 0]);
    }

    #[test]
    fn truncation_keeps_largest_areas() {
        let members: Vec<FaceBox> = (0..6)
            .map(|i| face_at(i as f64, 0.0, 10.0 + i as f64, 10.0, i as f64))
            .collect();
        let g = stack_group(&members, 4, 0).unwrap();
        // Exhaustive area ranking: areas increase with index, so members
        // 2..6 survive.
        let mut by_area: Vec<usize> = (0..6).collect();
        by_area.sort_by(|&a, &b| members[b].area().total_cmp(&members[a].area()));
        let mut expect: Vec<usize> = by_area[..4].to_vec();
        expect.sort(); // spatial x-order equals index order here
        assert_eq!(g.member_order, expect);
        assert_eq!(g.valid_count(), 4);
    }

    #[test]
    fn inconsistent_feature_lengths_rejected() {
        let a = face_at(0.0, 0.0, 10.0, 10.0, 1.0);
        let mut b = face_at(1.0, 0.0, 10.0, 10.0, 2.0);
        b.feature = Tensor::from_vec(&[3], vec![0.0; 3]).unwrap();
        assert!(stack_group(&[a, b], 4, 0).is_err());
    }

    proptest! {
        #[test]
        fn clustering_is_permutation_equivariant(
            xs in proptest::collection::vec((0.0f64..100.0, 0.0f64..100.0), 2..12),
            k in 1usize..5,
            seed in 0u64..50,
            perm_seed in 0u64..50,
        ) {
            let boxes: Vec<FaceBox> = xs.iter().map(|&(x, y)| face_at(x, y, 10.0, 10.0, 0.0)).collect();
            let base = cluster_faces(&boxes, k, seed).unwrap();

            let mut order: Vec<usize> = (0..boxes.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
            for i in (1..order.len()).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            let shuffled: Vec<FaceBox> = order.iter().map(|&i| boxes[i].clone()).collect();
            let permuted = cluster_faces(&shuffled, k, seed).unwrap();
            for (pos, &orig) in order.iter().enumerate() {
                prop_assert_eq!(permuted.assignments[pos], base.assignments[orig]);
            }
        }

        #[test]
        fn sse_is_non_increasing(
            xs in proptest::collection::vec((0.0f64..100.0, 0.0f64..100.0), 3..20),
            k in 1usize..6,
            seed in 0u64..50,
        ) {
            let boxes: Vec<FaceBox> = xs.iter().map(|&(x, y)| face_at(x, y, 10.0, 10.0, 0.0)).collect();
            let out = cluster_faces(&boxes, k, seed).unwrap();
            for w in out.sse_history.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9, "SSE increased: {:?}", out.sse_history);
            }
        }

        #[test]
        fn stacking_is_permutation_invariant(
            n in 1usize..6,
            seed in 0u64..100,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let members: Vec<FaceBox> = (0..n)
                .map(|i| face_at(
                    rng.random_range(0.0..100.0),
                    rng.random_range(0.0..100.0),
                    rng.random_range(5.0..20.0),
                    rng.random_range(5.0..20.0),
                    i as f64,
                ))
                .collect();
            let base = stack_group(&members, 4, 0).unwrap();
            let mut order: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            let shuffled: Vec<FaceBox> = order.iter().map(|&i| members[i].clone()).collect();
            let permuted = stack_group(&shuffled, 4, 0).unwrap();
            prop_assert_eq!(base.s, permuted.s);
            prop_assert_eq!(base.mask, permuted.mask);
        }
    }
}
