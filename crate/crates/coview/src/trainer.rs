//! Two-stage optimization: stage (a) trains the FCN branch alone with
//! ground-truth pre-masks (switching to estimated pre-masks halfway), and
//! stage (b) trains the joint model, keeping the FCN weights bitwise frozen
//! for the first chunk of epochs while the Siamese branch settles.

use std::collections::HashMap;
use std::path::PathBuf;

use ndarray::ArrayD;
use num_traits::Float;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::domain::{
    flow_window_indices, threshold_mask, ExamplePair, FlowField, Identity, Mask, PairSide,
    Problem, Sequence, DEFAULT_MASK_TAU,
};
use crate::error::{Error, Result};
use crate::matchnet::{GtBox, JointModel, ReweightMode};
use crate::metrics::iou;
use crate::nn::{accumulate_grads, ops, Binding, GradMap, ParamSet};
use crate::segnet::{make_motion_input, make_visual_input, SegNet};
use crate::synthdata::{Dataset, Split};

pub use crate::nn::backward;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Fcn,
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub problem: Option<Problem>,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Total epochs for this stage.
    pub epochs: usize,
    /// Joint stage only: initial epochs with the FCN branch frozen.
    pub frozen_epochs: usize,
    /// Joint stage mix weight between the segmentation and contrastive
    /// losses: L_total = L_seg + loss_mix * L_siam.
    pub loss_mix: f64,
    pub seed: u64,
    /// Optional cap on samples (or pairs) drawn per epoch.
    pub samples_per_epoch: Option<usize>,
    /// Negative:positive ratio when sampling pairs.
    pub neg_ratio: f64,
    /// When set, writes per-epoch checkpoints and a JSON training log.
    pub checkpoint_dir: Option<PathBuf>,
}

impl TrainConfig {
    /// Stage (a) hyper-parameters as published: SGD with fixed learning
    /// rate 1e-4, momentum 0.9, weight decay 5e-4, batch size 25, 30 epochs.
    pub fn paper_fcn(seed: u64) -> Self {
        TrainConfig {
            stage: Stage::Fcn,
            problem: None,
            lr: 1e-4,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 25,
            epochs: 30,
            frozen_epochs: 0,
            loss_mix: 0.0,
            seed,
            samples_per_epoch: None,
            neg_ratio: 3.0,
            checkpoint_dir: None,
        }
    }

    /// Stage (b) as published: learning rate 1e-5, FCN frozen for the first
    /// 20 epochs, then 40 joint epochs.
    pub fn paper_joint(seed: u64, problem: Problem) -> Self {
        TrainConfig {
            stage: Stage::Joint,
            problem: Some(problem),
            lr: 1e-5,
            epochs: 60,
            frozen_epochs: 20,
            loss_mix: 0.1,
            ..Self::paper_fcn(seed)
        }
    }

    /// Desk-scale stage (a): the paper schedule with a smaller batch and a
    /// learning rate matched to the summed pixel loss at 64x64.
    pub fn desk_fcn(seed: u64) -> Self {
        TrainConfig {
            batch_size: 8,
            lr: 3e-6,
            ..Self::paper_fcn(seed)
        }
    }

    pub fn desk_joint(seed: u64, problem: Problem) -> Self {
        TrainConfig {
            batch_size: 8,
            loss_mix: 0.03,
            ..Self::paper_joint(seed, problem)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || self.momentum < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("rates must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be at least 1".into()));
        }
        if self.stage == Stage::Joint && self.frozen_epochs > self.epochs {
            return Err(Error::Config("frozen epochs exceed total epochs".into()));
        }
        Ok(())
    }
}

/// Per-parameter velocity buffers for SGD with classical momentum.
#[derive(Default)]
pub struct OptimizerState {
    velocity: HashMap<String, ArrayD<f32>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One SGD update with classical momentum and L2 weight decay:
/// `g' = g + wd*p; v = momentum*v + g'; p = p - lr*v`.
pub fn sgd_update<F: Float>(
    param: &mut ArrayD<F>,
    grad: &ArrayD<F>,
    velocity: &mut ArrayD<F>,
    lr: F,
    momentum: F,
    weight_decay: F,
) {
    ndarray::Zip::from(param)
        .and(grad)
        .and(velocity)
        .for_each(|p, &g, v| {
            let g = g + weight_decay * *p;
            *v = momentum * *v + g;
            *p = *p - lr * *v;
        });
}

/// Apply one optimizer step to every parameter that received a gradient.
/// Frozen parameters are skipped entirely, leaving them bitwise unchanged.
pub fn sgd_step(
    params: &ParamSet,
    grads: &GradMap,
    state: &mut OptimizerState,
    lr: f32,
    momentum: f32,
    weight_decay: f32,
    frozen: &dyn Fn(&str) -> bool,
) -> Result<()> {
    for param in params.iter() {
        if frozen(&param.name) {
            continue;
        }
        let Some(grad) = grads.get(&param.name) else { continue };
        if grad.shape() != param.shape() {
            return Err(Error::shape(
                format!("gradient of {}", param.name),
                format!("{:?}", param.shape()),
                format!("{:?}", grad.shape()),
            ));
        }
        let velocity = state
            .velocity
            .entry(param.name.clone())
            .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
        param.update_with(|value| sgd_update(value, grad, velocity, lr, momentum, weight_decay));
    }
    state.step += 1;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_seg_loss: f64,
    pub mean_siam_loss: f64,
    pub samples: usize,
    pub unix_seconds: u64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }
}

/// One stage-(a) training sample: segment `identity` in frame `t` of a
/// view, conditioned on the previous frame's mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegSample {
    pub scene_idx: usize,
    pub view_idx: usize,
    pub t: usize,
    pub identity: Identity,
}

fn gt_mask_of(seq: &Sequence, t: usize, id: Identity) -> Option<&Mask> {
    seq.instances[t]
        .iter()
        .find(|inst| inst.identity == id)
        .and_then(|inst| inst.gt_mask.as_ref())
}

/// The ground-truth pre-mask for frame `t`: the previous frame's mask.
/// At t = 0, or when the person only became visible at `t`, the frame's
/// own mask conditions the network instead.
fn gt_pre_mask<'a>(seq: &'a Sequence, t: usize, id: Identity) -> Option<&'a Mask> {
    if t > 0 {
        if let Some(prev) = gt_mask_of(seq, t - 1, id) {
            return Some(prev);
        }
    }
    gt_mask_of(seq, t, id)
}

/// Every (view, frame, identity) with both a target mask and a pre-mask.
pub fn collect_seg_samples(dataset: &Dataset, split: Option<Split>) -> Vec<SegSample> {
    let mut out = Vec::new();
    for (scene_idx, scene) in dataset.scenes.iter().enumerate() {
        if let Some(want) = split {
            if scene.split != want {
                continue;
            }
        }
        for (view_idx, seq) in scene.views.iter().enumerate() {
            for t in 0..seq.frames.len() {
                for inst in &seq.instances[t] {
                    if inst.gt_mask.is_some() && gt_pre_mask(seq, t, inst.identity).is_some() {
                        out.push(SegSample {
                            scene_idx,
                            view_idx,
                            t,
                            identity: inst.identity,
                        });
                    }
                }
            }
        }
    }
    out
}

fn flow_stack<'s>(seq: &'s Sequence, t: usize, k: usize) -> Vec<&'s FlowField> {
    flow_window_indices(seq.flows.len(), t, k)
        .into_iter()
        .map(|i| &seq.flows[i])
        .collect()
}

/// Predict the previous frame's mask to use as an estimated pre-mask,
/// mirroring test-time propagation one step back.
fn estimated_pre_mask(net: &SegNet, seq: &Sequence, t: usize, id: Identity) -> Result<Option<Mask>> {
    if t == 0 {
        return Ok(gt_pre_mask(seq, 0, id).cloned());
    }
    let prev = t - 1;
    let Some(prev_pre) = gt_pre_mask(seq, prev, id) else {
        // No two-frame history (the person just became visible): keep the
        // ground-truth pre-mask for this sample.
        return Ok(gt_pre_mask(seq, t, id).cloned());
    };
    let flows = flow_stack(seq, prev, net.config.flow_stack);
    let out = net.predict(&seq.frames[prev], &flows, prev_pre)?;
    Ok(Some(threshold_mask(&out.soft_mask(), DEFAULT_MASK_TAU)?))
}

fn mask_to_target(mask: &Mask) -> ArrayD<f32> {
    ArrayD::from_shape_vec(
        ndarray::IxDyn(&[1, mask.height, mask.width]),
        mask.data.iter().map(|&v| v as f32).collect(),
    )
    .expect("target shape")
}

/// Forward + backward for one stage-(a) sample. Returns (loss, gradients).
fn seg_sample_pass(
    net: &SegNet,
    seq: &Sequence,
    sample: &SegSample,
    use_estimated_pre_mask: bool,
) -> Result<(f64, GradMap)> {
    let target_mask = gt_mask_of(seq, sample.t, sample.identity)
        .ok_or_else(|| Error::EmptyDataset("sample without ground truth".into()))?;
    let pre_mask = if use_estimated_pre_mask {
        estimated_pre_mask(net, seq, sample.t, sample.identity)?
    } else {
        gt_pre_mask(seq, sample.t, sample.identity).cloned()
    }
    .ok_or_else(|| Error::EmptyDataset("sample without pre-mask".into()))?;

    let binding = Binding::new(true);
    let visual = net
        .config
        .visual_stream
        .then(|| make_visual_input(&seq.frames[sample.t], &pre_mask));
    let motion = if net.config.motion_stream {
        Some(make_motion_input(
            &flow_stack(seq, sample.t, net.config.flow_stack),
            &pre_mask,
            net.config.flow_stack,
        )?)
    } else {
        None
    };
    let out = net.forward(&binding, visual.as_ref(), motion.as_ref())?;
    let fg = ops::channel(&out.probs, 1);
    let loss = ops::seg_loss_op(&fg, &mask_to_target(target_mask));
    backward(&loss);
    Ok((f64::from(loss.scalar()), binding.take_grads()))
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_add((epoch as u64).wrapping_mul(0x9e3779b97f4a7c15)))
}

fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn write_log(dir: &PathBuf, history: &TrainHistory) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("training_log.json");
    let json = serde_json::to_string_pretty(history).expect("history serializes");
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// Stage (a): optimize only the FCN branch, instance by instance. Uses
/// ground-truth pre-masks for the first half of the epochs, then estimated
/// masks from the previous frame. Deterministic under the config seed.
pub fn train_fcn_stage(net: &SegNet, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainHistory> {
    cfg.validate()?;
    let samples = collect_seg_samples(dataset, Some(Split::Train));
    if samples.is_empty() {
        return Err(Error::EmptyDataset("no training samples with masks".into()));
    }

    let mut state = OptimizerState::new();
    let mut history = TrainHistory::default();
    let switch_epoch = cfg.epochs / 2;

    for epoch in 0..cfg.epochs {
        let mut order = samples.clone();
        order.shuffle(&mut epoch_rng(cfg.seed, epoch));
        if let Some(cap) = cfg.samples_per_epoch {
            order.truncate(cap);
        }
        let use_estimated = epoch >= switch_epoch;

        let mut total_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<Result<(f64, GradMap)>> = batch
                .par_iter()
                .map(|sample| {
                    let seq = &dataset.scenes[sample.scene_idx].views[sample.view_idx];
                    seg_sample_pass(net, seq, sample, use_estimated)
                })
                .collect();
            let mut grads = GradMap::new();
            for r in results {
                let (loss, g) = r?;
                total_loss += loss;
                accumulate_grads(&mut grads, g);
            }
            sgd_step(
                net.params(),
                &grads,
                &mut state,
                cfg.lr as f32,
                cfg.momentum as f32,
                cfg.weight_decay as f32,
                &|_| false,
            )?;
        }

        let mean = total_loss / order.len() as f64;
        history.epochs.push(EpochStats {
            epoch,
            mean_loss: mean,
            mean_seg_loss: mean,
            mean_siam_loss: 0.0,
            samples: order.len(),
            unix_seconds: now_unix(),
        });
        if let Some(dir) = &cfg.checkpoint_dir {
            checkpoint::save_segnet(&dir.join(format!("fcn_epoch_{epoch:03}.cvck")), net, Some(epoch))?;
            write_log(dir, &history)?;
        }
    }
    Ok(history)
}

/// A pair resolved to its concrete rasters for one training pass.
struct ResolvedPair<'a> {
    seq_a: &'a Sequence,
    t_a: usize,
    id_a: Identity,
    side_b: ResolvedSideB<'a>,
    positive: bool,
}

enum ResolvedSideB<'a> {
    Third { seq: &'a Sequence, t: usize, id: Identity },
    First { seq: &'a Sequence, t: usize },
}

fn resolve_pair<'a>(dataset: &'a Dataset, pair: &ExamplePair) -> Result<ResolvedPair<'a>> {
    let find_view = |scene_id: u32, view_id: u32| -> Result<&'a Sequence> {
        dataset
            .scene(scene_id)
            .and_then(|s| s.views.iter().find(|v| v.view_id == view_id))
            .ok_or_else(|| Error::Integrity(format!("pair references scene {scene_id} view {view_id}")))
    };
    let seq_a = find_view(pair.side_a.scene_id, pair.side_a.view_id)?;
    let side_b = match &pair.side_b {
        PairSide::Instance(inst) => ResolvedSideB::Third {
            seq: find_view(inst.scene_id, inst.view_id)?,
            t: inst.frame_index,
            id: inst.identity,
        },
        PairSide::FirstPerson(win) => ResolvedSideB::First {
            seq: find_view(win.scene_id, win.view_id)?,
            t: win.frame_index,
        },
    };
    Ok(ResolvedPair {
        seq_a,
        t_a: pair.side_a.frame_index,
        id_a: pair.side_a.identity,
        side_b,
        positive: pair.label,
    })
}

/// Forward + backward for one joint-stage pair.
/// Returns (total loss, seg part, siam part, gradients).
fn joint_pair_pass(
    model: &JointModel,
    pair: &ResolvedPair,
    include_seg_loss: bool,
    loss_mix: f64,
    use_estimated_pre_mask: bool,
    binding: &Binding,
) -> Result<(f64, f64, f64, GradMap)> {
    let embed_side = |binding: &Binding,
                      seq: &Sequence,
                      t: usize,
                      id: Identity|
     -> Result<(crate::nn::Var<f32>, crate::nn::Var<f32>)> {
        let pre_mask = if use_estimated_pre_mask {
            estimated_pre_mask(&model.segnet, seq, t, id)?
        } else {
            gt_pre_mask(seq, t, id).cloned()
        }
        .ok_or_else(|| Error::EmptyDataset("pair side without pre-mask".into()))?;
        let pre_mask = &pre_mask;
        let gt_box = match model.match_config.reweight_mode {
            ReweightMode::BoundingBox => gt_mask_of(seq, t, id).and_then(GtBox::from_mask),
            _ => None,
        };
        let flows = flow_stack(seq, t, model.segnet.config.flow_stack);
        let (seg, emb) =
            model.embed_third(binding, &seq.frames[t], &flows, pre_mask, gt_box.as_ref())?;
        Ok((ops::channel(&seg.probs, 1), emb))
    };

    let (fg_a, emb_a) = embed_side(binding, pair.seq_a, pair.t_a, pair.id_a)?;
    let mut seg_losses = Vec::new();
    if include_seg_loss {
        if let Some(gt) = gt_mask_of(pair.seq_a, pair.t_a, pair.id_a) {
            seg_losses.push(ops::seg_loss_op(&fg_a, &mask_to_target(gt)));
        }
    }

    let emb_b = match &pair.side_b {
        ResolvedSideB::Third { seq, t, id } => {
            let (fg_b, emb_b) = embed_side(binding, seq, *t, *id)?;
            if include_seg_loss {
                if let Some(gt) = gt_mask_of(seq, *t, *id) {
                    seg_losses.push(ops::seg_loss_op(&fg_b, &mask_to_target(gt)));
                }
            }
            emb_b
        }
        ResolvedSideB::First { seq, t } => {
            let flows = flow_stack(seq, *t, model.segnet.config.flow_stack);
            model.embed_first(binding, &seq.frames[*t], &flows)?
        }
    };

    let siam = ops::contrastive_op(&emb_a, &emb_b, pair.positive, model.match_config.margin);
    let siam_value = f64::from(siam.scalar());

    let mut total = ops::scale(&siam, loss_mix as f32);
    let mut seg_value = 0.0;
    for sl in &seg_losses {
        seg_value += f64::from(sl.scalar());
        total = ops::add(&total, sl);
    }

    backward(&total);
    Ok((
        f64::from(total.scalar()),
        seg_value,
        siam_value,
        binding.take_grads(),
    ))
}

/// Stage (b): joint training over labeled pairs. For the first
/// `frozen_epochs` epochs the FCN parameters stay bitwise unchanged and
/// only the Siamese branch learns from the contrastive loss; afterwards
/// everything trains under `L_seg + loss_mix * L_siam`. Pair sides are
/// conditioned on estimated pre-masks (one propagation step back), the
/// regime the test-time protocol runs in.
pub fn train_joint_stage(
    model: &JointModel,
    dataset: &Dataset,
    pairs: &[ExamplePair],
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("joint stage needs a non-empty pair list".into()));
    }
    let resolved: Vec<ResolvedPair> = pairs
        .iter()
        .map(|p| resolve_pair(dataset, p))
        .collect::<Result<_>>()?;

    let all_params = model.all_params();
    let seg_frozen = |name: &str| name.starts_with("seg.");

    let mut state = OptimizerState::new();
    let mut history = TrainHistory::default();

    for epoch in 0..cfg.epochs {
        let frozen_phase = epoch < cfg.frozen_epochs;
        let mut order: Vec<usize> = (0..resolved.len()).collect();
        order.shuffle(&mut epoch_rng(cfg.seed, epoch));
        if let Some(cap) = cfg.samples_per_epoch {
            order.truncate(cap);
        }

        let mut total = (0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<Result<(f64, f64, f64, GradMap)>> = batch
                .par_iter()
                .map(|&idx| {
                    // While frozen, FCN parameters are constants: gradients
                    // neither reach them nor cost backward time.
                    let binding = if frozen_phase {
                        Binding::with_filter(true, |name| !name.starts_with("seg."))
                    } else {
                        Binding::new(true)
                    };
                    joint_pair_pass(model, &resolved[idx], !frozen_phase, cfg.loss_mix, false, &binding)
                })
                .collect();
            let mut grads = GradMap::new();
            for r in results {
                let (loss, seg, siam, g) = r?;
                total.0 += loss;
                total.1 += seg;
                total.2 += siam;
                accumulate_grads(&mut grads, g);
            }
            let frozen: &dyn Fn(&str) -> bool = if frozen_phase { &seg_frozen } else { &|_| false };
            sgd_step(
                &all_params,
                &grads,
                &mut state,
                cfg.lr as f32,
                cfg.momentum as f32,
                cfg.weight_decay as f32,
                frozen,
            )?;
        }

        let n = order.len() as f64;
        history.epochs.push(EpochStats {
            epoch,
            mean_loss: total.0 / n,
            mean_seg_loss: total.1 / n,
            mean_siam_loss: total.2 / n,
            samples: order.len(),
            unix_seconds: now_unix(),
        });
        if let Some(dir) = &cfg.checkpoint_dir {
            checkpoint::save_joint(&dir.join(format!("joint_epoch_{epoch:03}.cvck")), model, Some(epoch))?;
            write_log(dir, &history)?;
        }
    }
    Ok(history)
}

/// Mean IoU of single-frame predictions with ground-truth pre-masks over
/// the given split: the stage-(a) training task, used for overfit checks.
pub fn mean_training_iou(net: &SegNet, dataset: &Dataset, split: Option<Split>) -> Result<f64> {
    let samples = collect_seg_samples(dataset, split);
    if samples.is_empty() {
        return Err(Error::EmptyDataset("no samples to score".into()));
    }
    let scores: Vec<Result<f64>> = samples
        .par_iter()
        .map(|sample| {
            let seq = &dataset.scenes[sample.scene_idx].views[sample.view_idx];
            let pre = gt_pre_mask(seq, sample.t, sample.identity).expect("collected sample");
            let gt = gt_mask_of(seq, sample.t, sample.identity).expect("collected sample");
            let flows = flow_stack(seq, sample.t, net.config.flow_stack);
            let out = net.predict(&seq.frames[sample.t], &flows, pre)?;
            let pred = threshold_mask(&out.soft_mask(), DEFAULT_MASK_TAU)?;
            iou(&pred, gt)
        })
        .collect();
    let mut total = 0.0;
    for s in &scores {
        total += *s.as_ref().map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(total / scores.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn sgd_plain_step() {
        let mut p = ArrayD::from_elem(IxDyn(&[1]), 1.0f64);
        let g = ArrayD::from_elem(IxDyn(&[1]), 0.5f64);
        let mut v = ArrayD::zeros(IxDyn(&[1]));
        sgd_update(&mut p, &g, &mut v, 0.1, 0.0, 0.0);
        assert!((p[[0]] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn sgd_two_step_momentum_recurrence() {
        // Hand-rolled: v1 = 0.5, p1 = 0.95; v2 = 0.9*0.5 + 0.5 = 0.95,
        // p2 = 0.95 - 0.095 = 0.855.
        let mut p = ArrayD::from_elem(IxDyn(&[1]), 1.0f64);
        let g = ArrayD::from_elem(IxDyn(&[1]), 0.5f64);
        let mut v = ArrayD::zeros(IxDyn(&[1]));
        sgd_update(&mut p, &g, &mut v, 0.1, 0.9, 0.0);
        assert!((p[[0]] - 0.95).abs() < 1e-12);
        sgd_update(&mut p, &g, &mut v, 0.1, 0.9, 0.0);
        assert!((p[[0]] - 0.855).abs() < 1e-12);
    }

    #[test]
    fn sgd_decay_only() {
        let mut p = ArrayD::from_elem(IxDyn(&[1]), 1.0f64);
        let g = ArrayD::zeros(IxDyn(&[1]));
        let mut v = ArrayD::zeros(IxDyn(&[1]));
        sgd_update(&mut p, &g, &mut v, 0.1, 0.0, 0.1);
        assert!((p[[0]] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn sgd_descends_convex_quadratic() {
        // f(p) = 0.5 * a * p^2 with a = 2; lr below 2/a keeps descent.
        let mut p = ArrayD::from_elem(IxDyn(&[1]), 3.0f64);
        let mut v = ArrayD::zeros(IxDyn(&[1]));
        let mut last = 0.5 * 2.0 * 9.0;
        for _ in 0..20 {
            let g = p.mapv(|x| 2.0 * x);
            sgd_update(&mut p, &g, &mut v, 0.1, 0.0, 0.0);
            let f = 0.5 * 2.0 * p[[0]] * p[[0]];
            assert!(f < last);
            last = f;
        }
    }

    #[test]
    fn frozen_params_stay_bitwise_identical() {
        let mut params = ParamSet::new();
        let frozen = params.add("seg.w", ArrayD::from_elem(IxDyn(&[2]), 1.25f32));
        let free = params.add("match.w", ArrayD::from_elem(IxDyn(&[2]), 1.25f32));
        let mut grads = GradMap::new();
        grads.insert("seg.w".into(), ArrayD::from_elem(IxDyn(&[2]), 1.0f32));
        grads.insert("match.w".into(), ArrayD::from_elem(IxDyn(&[2]), 1.0f32));
        let mut state = OptimizerState::new();
        sgd_step(&params, &grads, &mut state, 0.1, 0.9, 0.0, &|n| n.starts_with("seg."))
            .unwrap();
        assert_eq!(frozen.value(), ArrayD::from_elem(IxDyn(&[2]), 1.25f32));
        assert!(free.value().iter().all(|&v| (v - 1.15).abs() < 1e-6));
    }

    #[test]
    fn gradient_shape_mismatch_is_error() {
        let mut params = ParamSet::new();
        params.add("w", ArrayD::from_elem(IxDyn(&[2]), 1.0f32));
        let mut grads = GradMap::new();
        grads.insert("w".into(), ArrayD::from_elem(IxDyn(&[3]), 1.0f32));
        let mut state = OptimizerState::new();
        assert!(sgd_step(&params, &grads, &mut state, 0.1, 0.9, 0.0, &|_| false).is_err());
    }
}
