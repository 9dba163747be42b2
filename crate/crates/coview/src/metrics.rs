//! Evaluation metrics: segmentation IoU, retrieval mAP, forced-choice
//! accuracy and precision-recall curves, plus the serialized report the
//! CLI emits.
//!
//! Wherever ranking is involved, ties in distance are broken by stable
//! input order so independent implementations can agree bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::MatchResult;

/// Intersection over union of two binary masks.
///
/// Defined as 1.0 when both masks are empty: a correct empty prediction is
/// not penalized.
pub fn iou(pred: &crate::domain::Mask, gt: &crate::domain::Mask) -> Result<f64> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::shape(
            "iou masks",
            format!("{}x{}", gt.width, gt.height),
            format!("{}x{}", pred.width, pred.height),
        ));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        inter += usize::from(p == 1 && g == 1);
        union += usize::from(p == 1 || g == 1);
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

/// Average precision of a ranked binary label list (precision at each
/// positive rank, averaged; no interpolation).
///
/// The list must already be ranked by ascending distance. Returns `None`
/// when the list contains no positive.
pub fn average_precision(ranked_labels: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &label) in ranked_labels.iter().enumerate() {
        if label {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    if hits == 0 {
        None
    } else {
        Some(sum / hits as f64)
    }
}

/// Rank `labels` by ascending `distances` (stable under ties) and return
/// the reordered labels.
pub fn rank_by_distance(distances: &[f64], labels: &[bool]) -> Vec<bool> {
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&i, &j| distances[i].partial_cmp(&distances[j]).expect("finite distances"));
    order.into_iter().map(|i| labels[i]).collect()
}

/// Mean average precision over the query rows of a match result. Queries
/// without any positive candidate are excluded from the mean; the count of
/// exclusions is returned alongside.
pub fn mean_average_precision(result: &MatchResult) -> (f64, usize) {
    let mut aps = Vec::new();
    let mut excluded = 0usize;
    for (qi, query_id) in result.query_ids.iter().enumerate() {
        let distances: Vec<f64> = result.row(qi).to_vec();
        let labels: Vec<bool> = result.candidate_ids.iter().map(|c| c == query_id).collect();
        match average_precision(&rank_by_distance(&distances, &labels)) {
            Some(ap) => aps.push(ap),
            None => excluded += 1,
        }
    }
    let map = if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    };
    (map, excluded)
}

/// Forced-choice accuracy: each query picks its minimum-distance candidate
/// (ties resolve to the lowest candidate index) and the pick is correct when
/// identities match. Queries whose true match is absent from the candidates
/// are excluded and counted.
pub fn forced_choice_acc(result: &MatchResult) -> (f64, usize) {
    let mut correct = 0usize;
    let mut scored = 0usize;
    let mut excluded = 0usize;
    for (qi, query_id) in result.query_ids.iter().enumerate() {
        if !result.candidate_ids.contains(query_id) {
            excluded += 1;
            continue;
        }
        let row = result.row(qi);
        let mut best = 0usize;
        for (ci, &d) in row.iter().enumerate() {
            if d < row[best] {
                best = ci;
            }
        }
        scored += 1;
        correct += usize::from(result.candidate_ids[best] == *query_id);
    }
    let acc = if scored == 0 { 0.0 } else { correct as f64 / scored as f64 };
    (acc, excluded)
}

/// Precision/recall pairs at every rank k = 1..N after ranking by ascending
/// distance (stable ties). Errors when no positive exists.
pub fn pr_curve(distances: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    if distances.len() != labels.len() {
        return Err(Error::shape(
            "pr_curve labels",
            format!("{}", distances.len()),
            format!("{}", labels.len()),
        ));
    }
    let total_pos = labels.iter().filter(|&&l| l).count();
    if total_pos == 0 {
        return Err(Error::EmptyDataset("pr_curve requires at least one positive".into()));
    }
    let ranked = rank_by_distance(distances, labels);
    let mut hits = 0usize;
    let mut out = Vec::with_capacity(ranked.len());
    for (k, &label) in ranked.iter().enumerate() {
        hits += usize::from(label);
        out.push((hits as f64 / (k + 1) as f64, hits as f64 / total_pos as f64));
    }
    Ok(out)
}

/// Per-sequence segmentation score used in the report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceIou {
    pub scene_id: u32,
    pub view_id: u32,
    pub identity: u32,
    pub mean_iou: f64,
    /// IoU at each frame index of the propagated window.
    pub per_frame: Vec<f64>,
}

/// Full evaluation report for one (model, dataset, problem) run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub problem: String,
    pub dataset: String,
    pub model: String,
    pub mean_iou: f64,
    pub sequences: Vec<SequenceIou>,
    /// Mean IoU over sequences at each frame index (Fig. "IoU vs length" data).
    pub iou_by_frame: Vec<f64>,
    pub map: f64,
    pub acc: f64,
    pub map_excluded_queries: usize,
    pub acc_excluded_queries: usize,
    /// (precision, recall) at each rank over all pooled pairs.
    pub pr: Vec<(f64, f64)>,
    /// Optional pointer at the predictions directory this report was built from.
    #[serde(default)]
    pub predictions_dir: Option<String>,
    #[serde(default)]
    pub dataset_root: Option<String>,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("iou", self.mean_iou), ("map", self.map), ("acc", self.acc)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Parameter(format!("{name} out of [0,1]: {v}")));
            }
        }
        let mut last_recall = 0.0;
        for &(_, r) in &self.pr {
            if r + 1e-12 < last_recall {
                return Err(Error::Parameter("pr recall must be non-decreasing".into()));
            }
            last_recall = r;
        }
        Ok(())
    }
}

/// Aggregate IoU curves: mean over sequences at each frame index (sequences
/// shorter than the longest contribute only to the indices they cover).
pub fn iou_by_frame(seqs: &[SequenceIou]) -> Vec<f64> {
    let max_len = seqs.iter().map(|s| s.per_frame.len()).max().unwrap_or(0);
    (0..max_len)
        .map(|t| {
            let vals: Vec<f64> = seqs.iter().filter_map(|s| s.per_frame.get(t).copied()).collect();
            if vals.is_empty() {
                0.0
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Identity, Mask};
    use proptest::prelude::*;

    fn mask(w: usize, h: usize, ones: &[(usize, usize)]) -> Mask {
        let mut m = Mask::zeros(w, h);
        for &(x, y) in ones {
            m.data[y * w + x] = 1;
        }
        m
    }

    #[test]
    fn iou_identical_masks() {
        let a = mask(3, 3, &[(0, 0), (1, 1)]);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn iou_disjoint_masks() {
        let a = mask(3, 3, &[(0, 0)]);
        let b = mask(3, 3, &[(2, 2)]);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn iou_partial_overlap() {
        // pred = {(0,0),(0,1)}, gt = {(0,1),(1,1)} -> intersection 1, union 3
        let pred = mask(2, 2, &[(0, 0), (0, 1)]);
        let gt = mask(2, 2, &[(0, 1), (1, 1)]);
        assert!((iou(&pred, &gt).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn iou_both_empty_is_one() {
        let a = Mask::zeros(4, 4);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn iou_size_mismatch_is_error() {
        let a = Mask::zeros(4, 4);
        let b = Mask::zeros(3, 4);
        assert!(iou(&a, &b).is_err());
    }

    #[test]
    fn ap_all_positives_first() {
        assert_eq!(average_precision(&[true, true, false]).unwrap(), 1.0);
    }

    #[test]
    fn ap_interleaved() {
        let ap = average_precision(&[true, false, true]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn ap_single_positive_at_rank_two() {
        assert!((average_precision(&[false, true]).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ap_no_positive_is_none() {
        assert!(average_precision(&[false, false]).is_none());
    }

    /// Brute-force AP oracle: for every positive rank, recount precision
    /// from scratch.
    fn ap_oracle(labels: &[bool]) -> Option<f64> {
        let positives: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| l.then_some(i))
            .collect();
        if positives.is_empty() {
            return None;
        }
        let mut total = 0.0;
        for &k in &positives {
            let hits_up_to_k = labels[..=k].iter().filter(|&&l| l).count();
            total += hits_up_to_k as f64 / (k + 1) as f64;
        }
        Some(total / positives.len() as f64)
    }

    proptest! {
        #[test]
        fn ap_matches_oracle(labels in proptest::collection::vec(any::<bool>(), 1..40)) {
            match (average_precision(&labels), ap_oracle(&labels)) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() <= 1e-9),
                (None, None) => {}
                _ => prop_assert!(false, "implementations disagree on definedness"),
            }
        }

        #[test]
        fn pr_final_recall_is_one(
            distances in proptest::collection::vec(0.0f64..10.0, 1..30),
            seed in any::<u64>(),
        ) {
            // Derive labels from the seed, forcing at least one positive.
            let mut labels: Vec<bool> = distances
                .iter()
                .enumerate()
                .map(|(i, _)| (seed >> (i % 60)) & 1 == 1)
                .collect();
            labels[0] = true;
            let curve = pr_curve(&distances, &labels).unwrap();
            prop_assert!((curve.last().unwrap().1 - 1.0).abs() < 1e-12);
            let mut last = 0.0;
            for &(_, r) in &curve {
                prop_assert!(r >= last - 1e-12);
                last = r;
            }
        }
    }

    #[test]
    fn pr_curve_worked_example() {
        let curve = pr_curve(&[0.1, 0.2, 0.3], &[true, false, true]).unwrap();
        let expect = [(1.0, 0.5), (0.5, 0.5), (2.0 / 3.0, 1.0)];
        for (got, want) in curve.iter().zip(expect.iter()) {
            assert!((got.0 - want.0).abs() < 1e-12 && (got.1 - want.1).abs() < 1e-12);
        }
    }

    #[test]
    fn pr_curve_all_positive() {
        let curve = pr_curve(&[0.3, 0.1], &[true, true]).unwrap();
        assert!(curve.iter().all(|&(p, _)| p == 1.0));
    }

    #[test]
    fn pr_curve_single_positive_pair() {
        let curve = pr_curve(&[0.7], &[true]).unwrap();
        assert_eq!(curve, vec![(1.0, 1.0)]);
    }

    fn result_2x2(d: [[f64; 2]; 2], query_ids: [u32; 2], candidate_ids: [u32; 2]) -> MatchResult {
        MatchResult::new(
            crate::domain::Problem::ThirdThird,
            query_ids.map(Identity).to_vec(),
            candidate_ids.map(Identity).to_vec(),
            d.iter().flatten().copied().collect(),
        )
        .unwrap()
    }

    #[test]
    fn acc_diagonal_match() {
        let r = result_2x2([[0.1, 0.9], [0.8, 0.2]], [1, 2], [1, 2]);
        assert_eq!(forced_choice_acc(&r).0, 1.0);
    }

    #[test]
    fn acc_anti_diagonal() {
        let r = result_2x2([[0.1, 0.9], [0.8, 0.2]], [1, 2], [2, 1]);
        assert_eq!(forced_choice_acc(&r).0, 0.0);
    }

    #[test]
    fn acc_tie_picks_lowest_index() {
        let r = MatchResult::new(
            crate::domain::Problem::ThirdThird,
            vec![Identity(1)],
            vec![Identity(1), Identity(2)],
            vec![0.5, 0.5],
        )
        .unwrap();
        assert_eq!(forced_choice_acc(&r).0, 1.0);
    }

    #[test]
    fn acc_excludes_queries_without_true_match() {
        let r = MatchResult::new(
            crate::domain::Problem::ThirdThird,
            vec![Identity(1), Identity(9)],
            vec![Identity(1), Identity(2)],
            vec![0.1, 0.9, 0.2, 0.3],
        )
        .unwrap();
        let (acc, excluded) = forced_choice_acc(&r);
        assert_eq!(acc, 1.0);
        assert_eq!(excluded, 1);
    }

    proptest! {
        /// Argmin/rank invariance: any strictly monotone transform of the
        /// distances leaves ACC and mAP unchanged.
        #[test]
        fn acc_and_map_monotone_invariant(
            d in proptest::collection::vec(0.01f64..5.0, 6..6usize.saturating_add(1)),
            scale in 0.1f64..4.0,
            shift in 0.0f64..3.0,
        ) {
            let base = MatchResult::new(
                crate::domain::Problem::ThirdThird,
                vec![Identity(1), Identity(2)],
                vec![Identity(2), Identity(1), Identity(3)],
                d.clone(),
            ).unwrap();
            let transformed = MatchResult::new(
                crate::domain::Problem::ThirdThird,
                vec![Identity(1), Identity(2)],
                vec![Identity(2), Identity(1), Identity(3)],
                d.iter().map(|&x| (scale * x + shift).exp()).collect(),
            ).unwrap();
            prop_assert_eq!(forced_choice_acc(&base), forced_choice_acc(&transformed));
            let (m1, e1) = mean_average_precision(&base);
            let (m2, e2) = mean_average_precision(&transformed);
            prop_assert!((m1 - m2).abs() < 1e-12);
            prop_assert_eq!(e1, e2);
        }
    }
}
