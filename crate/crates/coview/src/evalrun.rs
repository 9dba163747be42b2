//! Full-protocol evaluation: propagate every person in every test view
//! from its first-frame ground truth, match across view pairs and fold
//! everything into an [`EvalReport`].

use std::path::Path;

use rayon::prelude::*;

use crate::domain::{CameraKind, Identity, Mask, Problem, Sequence};
use crate::error::{Error, Result};
use crate::matchnet::JointModel;
use crate::metrics::{
    forced_choice_acc, iou, iou_by_frame, mean_average_precision, pr_curve, EvalReport,
    SequenceIou,
};
use crate::pipeline::{
    copy_first_baseline, match_views, Aggregation, MaskPredictor, MatchResult, MatchSide,
    ModelEmbedder, PropagatedView, PropagationResult,
};
use crate::synthdata::{Dataset, DatasetScene, Split};

/// Persons eligible for evaluation in a view: visible with a ground-truth
/// mask in frame 0 (the protocol provides the first-frame mask only).
pub fn eligible_persons(seq: &Sequence) -> Vec<(Identity, Mask)> {
    seq.instances
        .first()
        .map(|list| {
            list.iter()
                .filter_map(|inst| inst.gt_mask.clone().map(|m| (inst.identity, m)))
                .collect()
        })
        .unwrap_or_default()
}

/// Propagate every eligible person of one view.
pub fn propagate_view<'a>(
    predictor: &(dyn MaskPredictor + Sync),
    seq: &'a Sequence,
) -> Result<PropagatedView<'a>> {
    let persons = eligible_persons(seq);
    let results: Vec<Result<(Identity, PropagationResult)>> = persons
        .par_iter()
        .map(|(id, first_mask)| {
            let prop = crate::pipeline::propagate_sequence(predictor, &seq.frames, &seq.flows, first_mask)?;
            Ok((*id, prop))
        })
        .collect();
    let persons = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(PropagatedView { seq, persons })
}

fn gt_mask_or_empty(seq: &Sequence, t: usize, id: Identity) -> Mask {
    seq.instances[t]
        .iter()
        .find(|i| i.identity == id)
        .and_then(|i| i.gt_mask.clone())
        .unwrap_or_else(|| {
            Mask::zeros(seq.frames[t].width, seq.frames[t].height)
        })
}

/// Per-frame IoU of one propagated person against ground truth.
pub fn propagation_iou(seq: &Sequence, id: Identity, prop: &PropagationResult) -> Result<Vec<f64>> {
    (0..prop.masks.len())
        .map(|t| iou(&prop.masks[t], &gt_mask_or_empty(seq, t, id)))
        .collect()
}

/// Segmentation scores for every (view, person) of the given scenes under
/// any mask predictor (the joint model's FCN or a baseline).
pub fn segmentation_scores(
    predictor: &(dyn MaskPredictor + Sync),
    scenes: &[&DatasetScene],
) -> Result<Vec<SequenceIou>> {
    let mut out = Vec::new();
    for scene in scenes {
        for seq in &scene.views {
            let view = propagate_view(predictor, seq)?;
            for (id, prop) in &view.persons {
                let per_frame = propagation_iou(seq, *id, prop)?;
                let mean = per_frame.iter().sum::<f64>() / per_frame.len().max(1) as f64;
                out.push(SequenceIou {
                    scene_id: scene.scene_id,
                    view_id: seq.view_id,
                    identity: id.0,
                    mean_iou: mean,
                    per_frame,
                });
            }
        }
    }
    Ok(out)
}

/// Copy First: replicate the first-frame ground truth across the window.
pub struct CopyFirstPredictor;

impl MaskPredictor for CopyFirstPredictor {
    fn predict_soft(
        &self,
        _frame: &crate::domain::Frame,
        _flows: &[&crate::domain::FlowField],
        pre_mask: &Mask,
    ) -> Result<crate::domain::SoftMask> {
        Ok(pre_mask.to_soft())
    }
}

/// Mean IoU of the Copy First baseline over the given scenes.
pub fn copy_first_iou(scenes: &[&DatasetScene]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for scene in scenes {
        for seq in &scene.views {
            for (id, first_mask) in eligible_persons(seq) {
                let prop = copy_first_baseline(&first_mask, seq.frames.len());
                let per_frame = propagation_iou(seq, id, &prop)?;
                total += per_frame.iter().sum::<f64>() / per_frame.len().max(1) as f64;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptyDataset("no eligible persons for the baseline".into()));
    }
    Ok(total / count as f64)
}

/// All match results for one problem over the given scenes: third-third
/// pairs every ordered view pair; third-first pairs every first-person view
/// against every other view.
pub fn match_all_views(
    model: &JointModel,
    scenes: &[&DatasetScene],
    problem: Problem,
) -> Result<Vec<MatchResult>> {
    match_all_views_with(model, scenes, problem, Aggregation::default())
}

/// [`match_all_views`] with an explicit temporal aggregation rule.
pub fn match_all_views_with(
    model: &JointModel,
    scenes: &[&DatasetScene],
    problem: Problem,
    aggregation: Aggregation,
) -> Result<Vec<MatchResult>> {
    let embedder = ModelEmbedder { model };
    let mut results = Vec::new();
    for scene in scenes {
        let propagated: Vec<PropagatedView> = scene
            .views
            .iter()
            .map(|seq| propagate_view(&model.segnet, seq))
            .collect::<Result<_>>()?;
        match problem {
            Problem::ThirdThird => {
                for (ai, va) in propagated.iter().enumerate() {
                    for (bi, vb) in propagated.iter().enumerate() {
                        if ai == bi || va.persons.is_empty() || vb.persons.is_empty() {
                            continue;
                        }
                        results.push(match_views(&embedder, va, MatchSide::Third(vb), aggregation)?);
                    }
                }
            }
            Problem::ThirdFirst => {
                for fp in &scene.views {
                    if fp.camera_kind != CameraKind::FirstPerson {
                        continue;
                    }
                    for (vi, va) in propagated.iter().enumerate() {
                        if scene.views[vi].view_id == fp.view_id || va.persons.is_empty() {
                            continue;
                        }
                        results.push(match_views(
                            &embedder,
                            va,
                            MatchSide::FirstPerson(fp),
                            aggregation,
                        )?);
                    }
                }
            }
        }
    }
    if results.is_empty() {
        return Err(Error::EmptyDataset("no view pairs to match".into()));
    }
    Ok(results)
}

/// Aggregate identification metrics over a set of match results.
pub fn identification_metrics(results: &[MatchResult]) -> (f64, f64, usize, usize, Vec<(f64, f64)>) {
    let mut acc_correct = 0.0;
    let mut acc_n = 0usize;
    let mut acc_excluded = 0usize;
    let mut aps: Vec<f64> = Vec::new();
    let mut map_excluded = 0usize;
    let mut pooled_d = Vec::new();
    let mut pooled_l = Vec::new();
    for r in results {
        let (acc, excluded) = forced_choice_acc(r);
        let scored = r.query_ids.len() - excluded;
        acc_correct += acc * scored as f64;
        acc_n += scored;
        acc_excluded += excluded;
        let (map, mexcl) = mean_average_precision(r);
        let counted = r.query_ids.len() - mexcl;
        if counted > 0 {
            for _ in 0..counted {
                aps.push(map);
            }
        }
        map_excluded += mexcl;
        let (d, l) = r.pooled_pairs();
        pooled_d.extend(d);
        pooled_l.extend(l);
    }
    let acc = if acc_n == 0 { 0.0 } else { acc_correct / acc_n as f64 };
    let map = if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    };
    let pr = pr_curve(&pooled_d, &pooled_l).unwrap_or_default();
    (map, acc, map_excluded, acc_excluded, pr)
}

/// Run the full evaluation protocol for one model on one split.
pub fn evaluate(
    model: &JointModel,
    dataset: &Dataset,
    split: Split,
    problem: Problem,
    model_tag: &str,
    dataset_tag: &str,
) -> Result<EvalReport> {
    let scenes = dataset.split(split);
    if scenes.is_empty() {
        return Err(Error::EmptyDataset(format!("no {split:?} scenes in the dataset")));
    }
    let sequences = segmentation_scores(&model.segnet, &scenes)?;
    let mean_iou = if sequences.is_empty() {
        0.0
    } else {
        sequences.iter().map(|s| s.mean_iou).sum::<f64>() / sequences.len() as f64
    };
    let results = match_all_views(model, &scenes, problem)?;
    let (map, acc, map_excluded, acc_excluded, pr) = identification_metrics(&results);
    let report = EvalReport {
        problem: problem.to_string(),
        dataset: dataset_tag.to_string(),
        model: model_tag.to_string(),
        mean_iou,
        iou_by_frame: iou_by_frame(&sequences),
        sequences,
        map,
        acc,
        map_excluded_queries: map_excluded,
        acc_excluded_queries: acc_excluded,
        pr,
        predictions_dir: None,
        dataset_root: None,
    };
    report.validate()?;
    Ok(report)
}

/// Write propagated masks as PNGs (one per person-frame) for inspection
/// and for the `plot` command's overlays.
pub fn write_predictions(
    model: &JointModel,
    dataset: &Dataset,
    split: Split,
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for scene in dataset.split(split) {
        for seq in &scene.views {
            let view = propagate_view(&model.segnet, seq)?;
            for (id, prop) in &view.persons {
                for (t, mask) in prop.masks.iter().enumerate() {
                    let name = format!(
                        "scene_{:03}_view_{:02}_id_{:02}_t_{:03}.png",
                        scene.scene_id, seq.view_id, id.0, t
                    );
                    let bytes: Vec<u8> = mask.data.iter().map(|&v| v * 255).collect();
                    let img = image::GrayImage::from_raw(mask.width as u32, mask.height as u32, bytes)
                        .expect("mask buffer");
                    let path = dir.join(name);
                    img.save(&path).map_err(|e| Error::Image {
                        path,
                        message: e.to_string(),
                    })?;
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matchnet::MatchConfig;
    use crate::segnet::SegNetConfig;
    use crate::synthdata::{generate_benchmark, BenchmarkConfig, Dataset};

    fn micro_dataset() -> Dataset {
        let mut cfg = BenchmarkConfig::desk(3);
        cfg.scenes = 2;
        cfg.train_scenes = 1;
        cfg.num_frames = 4;
        cfg.view = (32, 32);
        cfg.world = (64, 64);
        cfg.agent_size = (7, 9);
        let scenes = generate_benchmark(&cfg).unwrap();
        Dataset::from_scenes(&scenes).unwrap()
    }

    #[test]
    fn untrained_model_produces_valid_report() {
        let dataset = micro_dataset();
        let seg = SegNetConfig::desk(32, 32);
        let mc = MatchConfig::desk(Problem::ThirdThird, &seg);
        let model = JointModel::build(&seg, &mc, 1).unwrap();
        let report = evaluate(&model, &dataset, Split::Test, Problem::ThirdThird, "untrained", "micro").unwrap();
        assert!(report.mean_iou >= 0.0 && report.mean_iou <= 1.0);
        assert!(!report.sequences.is_empty());
        assert!(!report.pr.is_empty());
        assert!((report.pr.last().unwrap().1 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn copy_first_baseline_scores() {
        let dataset = micro_dataset();
        let scenes = dataset.split(Split::Test);
        let iou = copy_first_iou(&scenes).unwrap();
        assert!(iou > 0.0 && iou <= 1.0);
    }

    #[test]
    fn third_first_matching_runs() {
        let dataset = micro_dataset();
        let seg = SegNetConfig::desk(32, 32);
        let mc = MatchConfig::desk(Problem::ThirdFirst, &seg);
        let model = JointModel::build(&seg, &mc, 2).unwrap();
        let scenes = dataset.split(Split::Test);
        let results = match_all_views(&model, &scenes, Problem::ThirdFirst).unwrap();
        assert!(!results.is_empty());
        for r in &results {
            assert_eq!(r.query_ids.len(), 1);
        }
    }
}
