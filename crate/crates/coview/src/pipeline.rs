//! Test-time inference: sequential mask propagation per person, cross-view
//! matching over candidate pairs, and the Copy First baseline.

use crate::domain::{
    flow_window_indices, threshold_mask, FlowField, Frame, Identity, Mask, Problem, Sequence,
    SoftMask, DEFAULT_MASK_TAU,
};
use crate::error::{Error, Result};
use crate::matchnet::{pair_distance, Embedding, GtBox, JointModel};
use crate::nn::Binding;
use crate::segnet::SegNet;

/// Anything that can predict the soft mask of one frame given the previous
/// frame's binary mask. Implemented by [`SegNet`] and by test stubs.
pub trait MaskPredictor {
    fn predict_soft(&self, frame: &Frame, flows: &[&FlowField], pre_mask: &Mask) -> Result<SoftMask>;

    /// How many flow fields the predictor wants stacked.
    fn flow_stack(&self) -> usize {
        1
    }
}

impl MaskPredictor for SegNet {
    fn predict_soft(&self, frame: &Frame, flows: &[&FlowField], pre_mask: &Mask) -> Result<SoftMask> {
        Ok(self.predict(frame, flows, pre_mask)?.soft_mask())
    }

    fn flow_stack(&self) -> usize {
        self.config.flow_stack
    }
}

/// Per-frame soft and binary masks for one person in one view. Frame 0
/// holds the provided ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagationResult {
    pub soft: Vec<SoftMask>,
    pub masks: Vec<Mask>,
}

impl PropagationResult {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

/// Propagate a first-frame ground-truth mask through a sequence: frame t's
/// pre-mask is the binarized prediction for frame t-1 (frame 1 starts from
/// `first_mask`), so inference is causal.
pub fn propagate_sequence(
    predictor: &dyn MaskPredictor,
    frames: &[Frame],
    flows: &[FlowField],
    first_mask: &Mask,
) -> Result<PropagationResult> {
    if frames.is_empty() {
        return Err(Error::EmptyDataset("propagation needs at least one frame".into()));
    }
    if flows.len() + 1 != frames.len() {
        return Err(Error::shape(
            "propagation flows",
            format!("{}", frames.len() - 1),
            format!("{}", flows.len()),
        ));
    }
    if first_mask.width != frames[0].width || first_mask.height != frames[0].height {
        return Err(Error::shape(
            "first mask",
            format!("{}x{}", frames[0].width, frames[0].height),
            format!("{}x{}", first_mask.width, first_mask.height),
        ));
    }

    let mut soft = Vec::with_capacity(frames.len());
    let mut masks = Vec::with_capacity(frames.len());
    soft.push(first_mask.to_soft());
    masks.push(first_mask.clone());

    let k = predictor.flow_stack();
    for t in 1..frames.len() {
        let window = flow_window_indices(flows.len(), t, k);
        let stack: Vec<&FlowField> = window.into_iter().map(|i| &flows[i]).collect();
        let predicted = predictor.predict_soft(&frames[t], &stack, &masks[t - 1])?;
        let binary = threshold_mask(&predicted, DEFAULT_MASK_TAU)?;
        soft.push(predicted);
        masks.push(binary);
    }
    Ok(PropagationResult { soft, masks })
}

/// Replicate the first frame's ground-truth mask across the whole
/// sequence.
pub fn copy_first_baseline(first_mask: &Mask, num_frames: usize) -> PropagationResult {
    assert!(num_frames >= 1, "copy-first needs at least one frame");
    PropagationResult {
        soft: vec![first_mask.to_soft(); num_frames],
        masks: vec![first_mask.clone(); num_frames],
    }
}

/// Distance matrix between query instances and candidate instances, with
/// identity labels on both axes.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub problem: Problem,
    pub query_ids: Vec<Identity>,
    pub candidate_ids: Vec<Identity>,
    distances: Vec<f64>,
}

impl MatchResult {
    pub fn new(
        problem: Problem,
        query_ids: Vec<Identity>,
        candidate_ids: Vec<Identity>,
        distances: Vec<f64>,
    ) -> Result<Self> {
        if distances.len() != query_ids.len() * candidate_ids.len() {
            return Err(Error::shape(
                "match result",
                format!("{}x{}", query_ids.len(), candidate_ids.len()),
                format!("{} entries", distances.len()),
            ));
        }
        if distances.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::Parameter("distances must be finite and non-negative".into()));
        }
        Ok(MatchResult {
            problem,
            query_ids,
            candidate_ids,
            distances,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.query_ids.len(), self.candidate_ids.len())
    }

    pub fn row(&self, query: usize) -> &[f64] {
        let n = self.candidate_ids.len();
        &self.distances[query * n..(query + 1) * n]
    }

    pub fn get(&self, query: usize, candidate: usize) -> f64 {
        self.distances[query * self.candidate_ids.len() + candidate]
    }

    /// All (distance, is-positive) pairs, pooled.
    pub fn pooled_pairs(&self) -> (Vec<f64>, Vec<bool>) {
        let mut d = Vec::with_capacity(self.distances.len());
        let mut l = Vec::with_capacity(self.distances.len());
        for (qi, q) in self.query_ids.iter().enumerate() {
            for (ci, c) in self.candidate_ids.iter().enumerate() {
                d.push(self.get(qi, ci));
                l.push(q == c);
            }
        }
        (d, l)
    }
}

/// Turns propagated per-person masks into per-frame embeddings. The real
/// implementation wraps the joint model; tests use stubs.
pub trait InstanceEmbedder {
    /// Embed one third-person instance at frame `t`, conditioned on its
    /// propagated masks.
    fn embed_instance(
        &self,
        seq: &Sequence,
        person: Identity,
        prop: &PropagationResult,
        t: usize,
    ) -> Result<Embedding>;

    /// Embed a first-person view at frame `t`.
    fn embed_first_person(&self, seq: &Sequence, t: usize) -> Result<Embedding>;
}

/// A propagated third-person view: the sequence plus the propagation result
/// of every person being evaluated in it.
pub struct PropagatedView<'a> {
    pub seq: &'a Sequence,
    pub persons: Vec<(Identity, PropagationResult)>,
}

/// The candidate side of [`match_views`].
pub enum MatchSide<'a> {
    /// Another propagated third-person view (third-third problem).
    Third(&'a PropagatedView<'a>),
    /// A first-person view (third-first problem): the single query is the
    /// camera wearer.
    FirstPerson(&'a Sequence),
}

/// How per-frame embeddings combine into one score per instance pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    /// Mean embedding over the window, then one distance.
    #[default]
    MeanEmbedding,
    /// Minimum per-frame distance over the window.
    MinFrameDistance,
}

/// Match every person of `view_a` against the candidate side, embedding
/// each instance exactly once per frame (never once per pair).
///
/// Third-third: rows are `view_a` persons, columns are the other view's
/// persons. Third-first: the single row is the first-person camera (labeled
/// with its wearer), columns are `view_a` persons.
pub fn match_views(
    embedder: &dyn InstanceEmbedder,
    view_a: &PropagatedView,
    other: MatchSide,
    aggregation: Aggregation,
) -> Result<MatchResult> {
    let frames = view_a.seq.frames.len();
    let embed_person = |seq: &Sequence, id: Identity, prop: &PropagationResult| -> Result<Vec<Embedding>> {
        (0..frames).map(|t| embedder.embed_instance(seq, id, prop, t)).collect()
    };

    let a_embeds: Vec<(Identity, Vec<Embedding>)> = view_a
        .persons
        .iter()
        .map(|(id, prop)| Ok((*id, embed_person(view_a.seq, *id, prop)?)))
        .collect::<Result<_>>()?;

    let (problem, b_embeds): (Problem, Vec<(Identity, Vec<Embedding>)>) = match other {
        MatchSide::Third(view_b) => {
            let embeds: Vec<(Identity, Vec<Embedding>)> = view_b
                .persons
                .iter()
                .map(|(id, prop)| Ok((*id, embed_person(view_b.seq, *id, prop)?)))
                .collect::<Result<_>>()?;
            (Problem::ThirdThird, embeds)
        }
        MatchSide::FirstPerson(fp_seq) => {
            let wearer = fp_seq.wearer_identity.ok_or_else(|| {
                Error::Parameter("first-person sequence without wearer identity".into())
            })?;
            let per_frame: Vec<Embedding> = (0..fp_seq.frames.len())
                .map(|t| embedder.embed_first_person(fp_seq, t))
                .collect::<Result<_>>()?;
            (Problem::ThirdFirst, vec![(wearer, per_frame)])
        }
    };

    if a_embeds.is_empty() || b_embeds.is_empty() {
        return Err(Error::EmptyDataset("no candidates on one side of the match".into()));
    }

    // Third-third: queries are view A. Third-first: the query is the camera.
    let (queries, candidates) = match problem {
        Problem::ThirdThird => (&a_embeds, &b_embeds),
        Problem::ThirdFirst => (&b_embeds, &a_embeds),
    };

    let mut distances = Vec::with_capacity(queries.len() * candidates.len());
    for (_, q_frames) in queries {
        let q_mean = Embedding::mean(q_frames).expect("non-empty window");
        for (_, c_frames) in candidates {
            let d = match aggregation {
                Aggregation::MeanEmbedding => {
                    let c_mean = Embedding::mean(c_frames).expect("non-empty window");
                    pair_distance(&q_mean, &c_mean)?
                }
                Aggregation::MinFrameDistance => {
                    let mut best = f64::INFINITY;
                    for (qf, cf) in q_frames.iter().zip(c_frames) {
                        best = best.min(pair_distance(qf, cf)?);
                    }
                    best
                }
            };
            distances.push(d);
        }
    }

    MatchResult::new(
        problem,
        queries.iter().map(|(id, _)| *id).collect(),
        candidates.iter().map(|(id, _)| *id).collect(),
        distances,
    )
}

/// The production embedder: runs the joint model once per instance-frame.
pub struct ModelEmbedder<'a> {
    pub model: &'a JointModel,
}

impl ModelEmbedder<'_> {
    fn flow_stack<'s>(&self, seq: &'s Sequence, t: usize) -> Vec<&'s FlowField> {
        let k = self.model.segnet.config.flow_stack;
        flow_window_indices(seq.flows.len(), t, k)
            .into_iter()
            .map(|i| &seq.flows[i])
            .collect()
    }
}

impl InstanceEmbedder for ModelEmbedder<'_> {
    fn embed_instance(
        &self,
        seq: &Sequence,
        person: Identity,
        prop: &PropagationResult,
        t: usize,
    ) -> Result<Embedding> {
        // Pre-mask rule matches propagation: frame 0 conditions on its own
        // (ground-truth) mask, later frames on the previous prediction.
        let pre_mask = if t == 0 { &prop.masks[0] } else { &prop.masks[t - 1] };
        let gt_box = match self.model.match_config.reweight_mode {
            crate::matchnet::ReweightMode::BoundingBox => {
                let inst = seq.instances[t].iter().find(|i| i.identity == person);
                let mask = inst.and_then(|i| i.gt_mask.as_ref()).unwrap_or(&prop.masks[t]);
                GtBox::from_mask(mask).or(Some(GtBox { x: 0, y: 0, w: 1, h: 1 }))
            }
            _ => None,
        };
        let flows = self.flow_stack(seq, t);
        let binding = Binding::new(false);
        let (_, embedding) =
            self.model
                .embed_third(&binding, &seq.frames[t], &flows, pre_mask, gt_box.as_ref())?;
        Ok(Embedding::from_var(&embedding))
    }

    fn embed_first_person(&self, seq: &Sequence, t: usize) -> Result<Embedding> {
        let flows = self.flow_stack(seq, t);
        let binding = Binding::new(false);
        let var = self.model.embed_first(&binding, &seq.frames[t], &flows)?;
        Ok(Embedding::from_var(&var))
    }
}
