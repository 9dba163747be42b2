//! Siamese matching machinery: soft-attention re-weighting of the deepest
//! two-stream features, shared embedding convolutions, the generalized
//! contrastive loss and pair distances for ranking.
//!
//! The third-third configuration is fully Siamese: both pair sides run
//! through the one segmentation network and the one embedding head. The
//! third-first configuration is semi-Siamese: the first-person branch has
//! its own shallow stages but shares the embedding head object.

use ndarray::{Array3, ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::domain::{FlowField, Frame, Mask, Problem};
use crate::error::{Error, Result};
use crate::nn::init::Initializer;
use crate::nn::{loss, ops, Binding, ParamSet, Var};
use crate::segnet::{
    build_network, make_motion_input, make_visual_input, ConvLayer, SegForward, SegNet,
    SegNetConfig, StreamStages, DEEPEST_STRIDE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReweightMode {
    /// Use pool5 features as they are.
    None,
    /// Multiply features with the downsampled softmax confidence maps.
    SoftAttention,
    /// Multiply features with a downsampled ground-truth box mask.
    BoundingBox,
}

impl std::fmt::Display for ReweightMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ReweightMode::None => write!(f, "none"),
            ReweightMode::SoftAttention => write!(f, "soft_attention"),
            ReweightMode::BoundingBox => write!(f, "bounding_box"),
        }
    }
}

/// An axis-aligned box in pixel coordinates, used by the bounding-box
/// re-weighting ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GtBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl GtBox {
    /// Tight bounding box of a mask's foreground, if any.
    pub fn from_mask(mask: &Mask) -> Option<GtBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
        for y in 0..mask.height {
            for x in 0..mask.width {
                if mask.get(x, y) == 1 {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        (x0 != usize::MAX).then(|| GtBox {
            x: x0,
            y: y0,
            w: x1 - x0 + 1,
            h: y1 - y0 + 1,
        })
    }

    pub fn to_mask(&self, width: usize, height: usize) -> Mask {
        let mut m = Mask::zeros(width, height);
        for y in self.y..(self.y + self.h).min(height) {
            for x in self.x..(self.x + self.w).min(width) {
                m.data[y * width + x] = 1;
            }
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    pub problem: Problem,
    pub reweight_mode: ReweightMode,
    /// Output channels C of the embedding.
    pub embed_channels: usize,
    /// Width of the per-stream embedding convolutions.
    pub stream_channels: usize,
    /// Convolutions per stream before concatenation.
    pub head_depth: usize,
    /// Embedding grid, the stride-16 feature grid of the FCN.
    pub grid: (usize, usize),
    /// Average-pool the embedding over its grid before matching. Matching
    /// a first-person camera to a person does not depend on where in the
    /// frame either appears, so the third-first head pools; the
    /// third-third head keeps the spatial grid.
    #[serde(default)]
    pub pooled: bool,
    /// Contrastive margin m.
    pub margin: f32,
}

impl MatchConfig {
    pub fn desk(problem: Problem, seg: &SegNetConfig) -> Self {
        MatchConfig {
            problem,
            reweight_mode: ReweightMode::SoftAttention,
            embed_channels: 128,
            stream_channels: 64,
            head_depth: 2,
            grid: seg.grid(),
            pooled: problem == Problem::ThirdFirst,
            margin: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.margin <= 0.0 {
            return Err(Error::Config("contrastive margin must be positive".into()));
        }
        if self.embed_channels == 0 || self.stream_channels == 0 || self.head_depth == 0 {
            return Err(Error::Config("embedding head sizes must be positive".into()));
        }
        if self.grid.0 == 0 || self.grid.1 == 0 {
            return Err(Error::Config("embedding grid must be non-empty".into()));
        }
        Ok(())
    }
}

/// A C x H'' x W'' feature block in the learned embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub data: Array3<f32>,
}

impl Embedding {
    pub fn from_var(v: &Var<f32>) -> Embedding {
        let s = v.shape();
        let data = Array3::from_shape_vec(
            (s[0], s[1], s[2]),
            v.data().as_slice().expect("standard layout").to_vec(),
        )
        .expect("embedding shape");
        Embedding { data }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    /// Mean of several same-shape embeddings.
    pub fn mean(items: &[Embedding]) -> Option<Embedding> {
        let first = items.first()?;
        let mut acc = Array3::<f32>::zeros(first.data.dim());
        for e in items {
            acc += &e.data;
        }
        acc /= items.len() as f32;
        Some(Embedding { data: acc })
    }
}

/// Squared elementwise distance between two embeddings: zero iff equal,
/// symmetric, the ranking score for retrieval.
pub fn pair_distance(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "pair_distance",
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    let mut acc = 0.0f64;
    for (&av, &bv) in a.data.iter().zip(b.data.iter()) {
        let d = (av - bv) as f64;
        acc += d * d;
    }
    Ok(acc)
}

/// Generalized contrastive loss over a batch of embedding pairs, as a
/// plain number (the in-graph variant lives in `nn::ops`).
pub fn contrastive_loss(a: &[Embedding], b: &[Embedding], y: &[bool], margin: f64) -> Result<f64> {
    if a.len() != b.len() || a.len() != y.len() {
        return Err(Error::shape(
            "contrastive batch",
            format!("{}", a.len()),
            format!("a={} b={} y={}", a.len(), b.len(), y.len()),
        ));
    }
    if margin <= 0.0 {
        return Err(Error::Parameter("contrastive margin must be positive".into()));
    }
    let mut total = 0.0;
    for ((ea, eb), &label) in a.iter().zip(b).take(y.len()).zip(y) {
        if ea.shape() != eb.shape() {
            return Err(Error::shape(
                "contrastive pair",
                format!("{:?}", ea.shape()),
                format!("{:?}", eb.shape()),
            ));
        }
        let aa = ea.data.mapv(|v| v as f64).into_dyn().insert_axis(Axis(0));
        let bb = eb.data.mapv(|v| v as f64).into_dyn().insert_axis(Axis(0));
        let yy = ndarray::Array1::from_vec(vec![label]);
        total += loss::contrastive_value(&aa, &bb, &yy, margin);
    }
    Ok(total)
}

/// Downsample one attention channel to the feature grid and tile-multiply
/// it across all feature channels.
fn apply_attention(feats: &Var<f32>, attention: &Var<f32>) -> Var<f32> {
    let pooled = ops::avg_pool(attention, DEEPEST_STRIDE);
    ops::mul_channel_broadcast(feats, &pooled)
}

/// Re-weight the deepest spatial (visual) and temporal (motion) features
/// with the segmentation confidence.
///
/// Soft attention follows the problem: third-third multiplies both streams
/// by the foreground confidence; third-first multiplies spatial features by
/// the background confidence and temporal features by the foreground
/// confidence. `none` passes features through; `bounding_box` multiplies
/// both streams by the downsampled binary box mask.
pub fn reweight(
    spatial: Option<&Var<f32>>,
    temporal: Option<&Var<f32>>,
    seg_probs: &Var<f32>,
    mode: ReweightMode,
    problem: Problem,
    gt_box: Option<&GtBox>,
) -> Result<(Option<Var<f32>>, Option<Var<f32>>)> {
    let probs_shape = seg_probs.shape().to_vec();
    if probs_shape.len() != 3 || probs_shape[0] != 2 {
        return Err(Error::shape(
            "seg_probs",
            "[2, H, W]",
            format!("{probs_shape:?}"),
        ));
    }
    let (h, w) = (probs_shape[1], probs_shape[2]);
    for (name, f) in [("spatial", spatial), ("temporal", temporal)] {
        if let Some(f) = f {
            let s = f.shape();
            if s.len() != 3 || s[1] * DEEPEST_STRIDE != h || s[2] * DEEPEST_STRIDE != w {
                return Err(Error::shape(
                    format!("{name} features"),
                    format!("[C, {}, {}]", h / DEEPEST_STRIDE, w / DEEPEST_STRIDE),
                    format!("{s:?}"),
                ));
            }
        }
    }

    match mode {
        ReweightMode::None => Ok((spatial.cloned(), temporal.cloned())),
        ReweightMode::SoftAttention => {
            let bg = ops::channel(seg_probs, 0);
            let fg = ops::channel(seg_probs, 1);
            let spatial_att = match problem {
                Problem::ThirdThird => &fg,
                Problem::ThirdFirst => &bg,
            };
            Ok((
                spatial.map(|f| apply_attention(f, spatial_att)),
                temporal.map(|f| apply_attention(f, &fg)),
            ))
        }
        ReweightMode::BoundingBox => {
            let gt_box = gt_box.ok_or_else(|| {
                Error::Parameter("bounding_box re-weighting requires a ground-truth box".into())
            })?;
            let raster = gt_box.to_mask(w, h);
            let data: Vec<f32> = raster.data.iter().map(|&v| v as f32).collect();
            let box_map = Var::constant(ArrayD::from_shape_vec(IxDyn(&[1, h, w]), data).expect("box map"));
            Ok((
                spatial.map(|f| apply_attention(f, &box_map)),
                temporal.map(|f| apply_attention(f, &box_map)),
            ))
        }
    }
}

/// The embedding convolutions: `head_depth` per-stream convolutions, then
/// channel concatenation, then one linear convolution down to C channels.
/// This is the part both branches of a semi-Siamese network share.
pub struct MatchHead {
    pub config: MatchConfig,
    params: ParamSet,
    visual_convs: Vec<ConvLayer>,
    motion_convs: Vec<ConvLayer>,
    final_conv: ConvLayer,
}

pub fn build_match_head(config: &MatchConfig, seg: &SegNetConfig, seed: u64) -> Result<MatchHead> {
    config.validate()?;
    seg.validate()?;
    let mut params = ParamSet::new();
    let mut init = Initializer::new(seed);
    let f = seg.deep_channels();
    let s = config.stream_channels;

    let stream = |prefix: &str, enabled: bool, params: &mut ParamSet, init: &mut Initializer| {
        if !enabled {
            return Vec::new();
        }
        let mut convs = Vec::with_capacity(config.head_depth);
        let mut prev = f;
        for d in 0..config.head_depth {
            convs.push(ConvLayer::build(params, init, &format!("{prefix}{}", d + 1), s, prev, 3));
            prev = s;
        }
        convs
    };
    let visual_convs = stream("match.visual", seg.visual_stream, &mut params, &mut init);
    let motion_convs = stream("match.motion", seg.motion_stream, &mut params, &mut init);

    let concat_ch = s * seg.streams_enabled();
    let final_conv = ConvLayer::build(
        &mut params,
        &mut init,
        "match.embed",
        config.embed_channels,
        concat_ch,
        3,
    );

    Ok(MatchHead {
        config: config.clone(),
        params,
        visual_convs,
        motion_convs,
        final_conv,
    })
}

impl MatchHead {
    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    fn run_stream(convs: &[ConvLayer], x: &Var<f32>, binding: &Binding) -> Var<f32> {
        let mut cur = x.clone();
        for conv in convs {
            cur = ops::relu(&conv.apply(&cur, binding, 1));
        }
        cur
    }

    /// Map re-weighted per-stream features into the embedding space.
    pub fn embed(
        &self,
        spatial: Option<&Var<f32>>,
        temporal: Option<&Var<f32>>,
        binding: &Binding,
    ) -> Result<Var<f32>> {
        let (gw, gh) = self.config.grid;
        let mut parts: Vec<Var<f32>> = Vec::with_capacity(2);
        for (name, feats, convs) in [
            ("spatial", spatial, &self.visual_convs),
            ("temporal", temporal, &self.motion_convs),
        ] {
            match (feats, convs.is_empty()) {
                (Some(f), false) => {
                    let s = f.shape();
                    if s.len() != 3 || s[1] != gh || s[2] != gw {
                        return Err(Error::shape(
                            format!("{name} embedding input"),
                            format!("[C, {gh}, {gw}]"),
                            format!("{s:?}"),
                        ));
                    }
                    parts.push(Self::run_stream(convs, f, binding));
                }
                (None, true) => {}
                (Some(_), true) => {
                    return Err(Error::Parameter(format!(
                        "{name} features given but the head has no {name} stream"
                    )))
                }
                (None, false) => {
                    return Err(Error::Parameter(format!("missing {name} features for embedding")))
                }
            }
        }
        if parts.is_empty() {
            return Err(Error::Parameter("embedding requires at least one stream".into()));
        }
        let fused = if parts.len() == 1 {
            parts[0].clone()
        } else {
            let refs: Vec<&Var<f32>> = parts.iter().collect();
            ops::concat_channels(&refs)
        };
        let out = self.final_conv.apply(&fused, binding, 1);
        if self.config.pooled {
            debug_assert_eq!(gw, gh, "pooled head expects a square grid");
            Ok(ops::avg_pool(&out, gw))
        } else {
            Ok(out)
        }
    }
}

/// The unshared shallow branch of the third-first network: the same
/// five-stage two-stream stack as the FCN but without pre-mask inputs,
/// upsampling layers or a segmentation loss.
pub struct FirstPersonEncoder {
    pub seg_config: SegNetConfig,
    params: ParamSet,
    visual: Option<StreamStages>,
    motion: Option<StreamStages>,
}

pub fn build_first_person_encoder(seg: &SegNetConfig, seed: u64) -> Result<FirstPersonEncoder> {
    seg.validate()?;
    let mut params = ParamSet::new();
    let mut init = Initializer::new(seed);
    let widths = &seg.stage_channels;
    let visual = seg
        .visual_stream
        .then(|| StreamStages::build(&mut params, &mut init, "fpenc.visual", 3, widths));
    let motion = seg
        .motion_stream
        .then(|| StreamStages::build(&mut params, &mut init, "fpenc.motion", 2 * seg.flow_stack, widths));
    Ok(FirstPersonEncoder {
        seg_config: seg.clone(),
        params,
        visual,
        motion,
    })
}

impl FirstPersonEncoder {
    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Deep per-stream features of a first-person window (stride 16).
    pub fn forward(
        &self,
        binding: &Binding,
        frame: &Frame,
        flows: &[&FlowField],
    ) -> Result<(Option<Var<f32>>, Option<Var<f32>>)> {
        let cfg = &self.seg_config;
        if frame.width != cfg.width || frame.height != cfg.height {
            return Err(Error::shape(
                "first-person frame",
                format!("{}x{}", cfg.width, cfg.height),
                format!("{}x{}", frame.width, frame.height),
            ));
        }
        if flows.len() != cfg.flow_stack {
            return Err(Error::shape(
                "first-person flow stack",
                format!("{}", cfg.flow_stack),
                format!("{}", flows.len()),
            ));
        }
        let spatial = self.visual.as_ref().map(|stages| {
            let mut input = Array3::zeros((3, cfg.height, cfg.width));
            for y in 0..cfg.height {
                for x in 0..cfg.width {
                    let px = frame.pixel(x, y);
                    input[[0, y, x]] = px[0];
                    input[[1, y, x]] = px[1];
                    input[[2, y, x]] = px[2];
                }
            }
            stages.forward(&Var::constant(input.into_dyn()), binding).deep
        });
        let temporal = match &self.motion {
            Some(stages) => {
                let mut input = Array3::zeros((2 * cfg.flow_stack, cfg.height, cfg.width));
                for (fi, flow) in flows.iter().enumerate() {
                    if flow.width != cfg.width || flow.height != cfg.height {
                        return Err(Error::shape(
                            "first-person flow field",
                            format!("{}x{}", cfg.width, cfg.height),
                            format!("{}x{}", flow.width, flow.height),
                        ));
                    }
                    for y in 0..cfg.height {
                        for x in 0..cfg.width {
                            let (u, v) = flow.uv(x, y);
                            input[[2 * fi, y, x]] = u;
                            input[[2 * fi + 1, y, x]] = v;
                        }
                    }
                }
                Some(stages.forward(&Var::constant(input.into_dyn()), binding).deep)
            }
            None => None,
        };
        Ok((spatial, temporal))
    }
}

/// Copy the segmentation network's visual-stage weights into the
/// encoder's visual stages (the overlapping input channels of the first
/// convolution, since this branch has no pre-mask).
///
/// The motion stages keep their fresh initialization on purpose: stage-(a)
/// training teaches the segmentation branch to cancel uniform camera
/// motion, and that invariance would erase the very ego-motion signal the
/// first-person branch exists to extract.
fn warm_start_encoder(encoder: &FirstPersonEncoder, segnet: &SegNet) -> Result<()> {
    for dst in encoder.params.iter() {
        if !dst.name.starts_with("fpenc.visual.") {
            continue;
        }
        let src_name = dst.name.replace("fpenc.", "seg.");
        let src = segnet.params().require(&src_name)?;
        let src_value = src.value();
        let dst_shape = dst.shape();
        if src_value.shape() == dst_shape.as_slice() {
            dst.set(src_value);
        } else {
            // First conv of the stream: [O, C+1, k, k] -> [O, C, k, k].
            let sliced = src_value
                .slice_axis(Axis(1), ndarray::Slice::from(0..dst_shape[1]))
                .to_owned();
            if sliced.shape() != dst_shape.as_slice() {
                return Err(Error::shape(
                    format!("warm start of {}", dst.name),
                    format!("{dst_shape:?}"),
                    format!("{:?}", src_value.shape()),
                ));
            }
            dst.set(sliced);
        }
    }
    Ok(())
}

/// Embed a first-person window through the encoder's unshared stages and
/// the shared embedding head. No attention re-weighting applies on this
/// side: the first-person branch produces no segmentation.
pub fn forward_first_person(
    encoder: &FirstPersonEncoder,
    head: &MatchHead,
    binding: &Binding,
    frame: &Frame,
    flows: &[&FlowField],
) -> Result<Var<f32>> {
    let (spatial, temporal) = encoder.forward(binding, frame, flows)?;
    head.embed(spatial.as_ref(), temporal.as_ref(), binding)
}

/// A complete trainable model: the segmentation network, the matching head
/// and (for third-first) the first-person encoder. Weight sharing is by
/// construction: both pair sides resolve to the same parameter objects.
pub struct JointModel {
    pub segnet: SegNet,
    pub head: MatchHead,
    pub fp_encoder: Option<FirstPersonEncoder>,
    pub match_config: MatchConfig,
}

impl JointModel {
    pub fn build(seg_cfg: &SegNetConfig, match_cfg: &MatchConfig, seed: u64) -> Result<JointModel> {
        let segnet = build_network(seg_cfg, seed)?;
        JointModel::from_segnet(segnet, match_cfg, seed)
    }

    /// Attach freshly initialized matching parts to an existing (typically
    /// stage-a pre-trained) segmentation network. The first-person branch
    /// starts from the pre-trained FCN weights (its stages stay unshared
    /// objects); its first convolutions take the channel slices that line
    /// up, since that branch has no pre-mask channel.
    pub fn from_segnet(segnet: SegNet, match_cfg: &MatchConfig, seed: u64) -> Result<JointModel> {
        let head = build_match_head(match_cfg, &segnet.config, seed.wrapping_add(1))?;
        let fp_encoder = match match_cfg.problem {
            Problem::ThirdFirst => {
                let encoder = build_first_person_encoder(&segnet.config, seed.wrapping_add(2))?;
                warm_start_encoder(&encoder, &segnet)?;
                Some(encoder)
            }
            Problem::ThirdThird => None,
        };
        Ok(JointModel {
            segnet,
            head,
            fp_encoder,
            match_config: match_cfg.clone(),
        })
    }

    /// All parameters: segmentation under `seg.`, matching head under
    /// `match.`, first-person encoder under `fpenc.`.
    pub fn all_params(&self) -> ParamSet {
        let mut all = ParamSet::new();
        all.extend_from(self.segnet.params());
        all.extend_from(self.head.params());
        if let Some(enc) = &self.fp_encoder {
            all.extend_from(enc.params());
        }
        all
    }

    /// Segment one third-person instance and embed it for matching.
    pub fn embed_third(
        &self,
        binding: &Binding,
        frame: &Frame,
        flows: &[&FlowField],
        pre_mask: &Mask,
        gt_box: Option<&GtBox>,
    ) -> Result<(SegForward, Var<f32>)> {
        let visual = self
            .segnet
            .config
            .visual_stream
            .then(|| make_visual_input(frame, pre_mask));
        let motion = if self.segnet.config.motion_stream {
            Some(make_motion_input(flows, pre_mask, self.segnet.config.flow_stack)?)
        } else {
            None
        };
        let seg = self.segnet.forward(binding, visual.as_ref(), motion.as_ref())?;
        let (spatial, temporal) = reweight(
            seg.visual_deep.as_ref(),
            seg.motion_deep.as_ref(),
            &seg.probs,
            self.match_config.reweight_mode,
            self.match_config.problem,
            gt_box,
        )?;
        let embedding = self.head.embed(spatial.as_ref(), temporal.as_ref(), binding)?;
        Ok((seg, embedding))
    }

    /// Embed a first-person window (third-first only).
    pub fn embed_first(
        &self,
        binding: &Binding,
        frame: &Frame,
        flows: &[&FlowField],
    ) -> Result<Var<f32>> {
        let encoder = self.fp_encoder.as_ref().ok_or_else(|| {
            Error::Config("first-person embedding requires a third-first model".into())
        })?;
        forward_first_person(encoder, &self.head, binding, frame, flows)
    }
}
