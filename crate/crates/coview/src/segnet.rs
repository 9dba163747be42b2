//! Two-stream pre-mask-conditioned fully convolutional segmentation
//! network: a visual stream over RGB + pre-mask and a motion stream over
//! stacked flow fields + pre-mask, fused by channel concatenation at three
//! pyramid levels (strides 8/16/16), scored by 1x1 convolutions and
//! combined through additive skip upsampling into a 2-channel softmax.

use ndarray::{Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::domain::{FlowField, Frame, Mask, SoftMask};
use crate::error::{Error, Result};
use crate::nn::init::{bilinear_deconv, Initializer};
use crate::nn::{loss, ops, Binding, Param, ParamSet, Var};

/// Stride of the deepest feature grid. The fifth stage does not downsample,
/// so pool4 and pool5 share this stride.
pub const DEEPEST_STRIDE: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegNetConfig {
    pub width: usize,
    pub height: usize,
    /// Number of stacked flow fields K in the motion input.
    pub flow_stack: usize,
    pub stage_channels: [usize; 5],
    pub visual_stream: bool,
    pub motion_stream: bool,
    /// Channels of the score/softmax head: background and foreground.
    pub head_channels: usize,
}

impl SegNetConfig {
    /// Desk-scale backbone: small widths, minutes-scale CPU training.
    pub fn desk(width: usize, height: usize) -> Self {
        SegNetConfig {
            width,
            height,
            flow_stack: 5,
            stage_channels: [16, 32, 64, 64, 64],
            visual_stream: true,
            motion_stream: true,
            head_channels: 2,
        }
    }

    /// VGG16-like widths.
    pub fn paper(width: usize, height: usize) -> Self {
        SegNetConfig {
            stage_channels: [64, 128, 256, 512, 512],
            ..Self::desk(width, height)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0
            || self.width % DEEPEST_STRIDE != 0
            || self.height == 0
            || self.height % DEEPEST_STRIDE != 0
        {
            return Err(Error::Config(format!(
                "input size {}x{} must be divisible by {DEEPEST_STRIDE}",
                self.width, self.height
            )));
        }
        if self.flow_stack == 0 {
            return Err(Error::Config("flow stack K must be >= 1".into()));
        }
        if !self.visual_stream && !self.motion_stream {
            return Err(Error::Config("at least one stream must be enabled".into()));
        }
        if self.head_channels != 2 {
            return Err(Error::Config(
                "segmentation head is a 2-way (background/foreground) softmax".into(),
            ));
        }
        if self.stage_channels.iter().any(|&ch| ch == 0) {
            return Err(Error::Config("stage channel widths must be positive".into()));
        }
        Ok(())
    }

    /// RGB plus the pre-mask channel.
    pub fn visual_in_channels(&self) -> usize {
        4
    }

    /// 2K flow channels plus the pre-mask channel.
    pub fn motion_in_channels(&self) -> usize {
        2 * self.flow_stack + 1
    }

    /// Spatial size of the deepest feature grid.
    pub fn grid(&self) -> (usize, usize) {
        (self.width / DEEPEST_STRIDE, self.height / DEEPEST_STRIDE)
    }

    pub fn streams_enabled(&self) -> usize {
        usize::from(self.visual_stream) + usize::from(self.motion_stream)
    }

    /// Per-stream channel width at the deepest stage.
    pub fn deep_channels(&self) -> usize {
        self.stage_channels[4]
    }
}

pub(crate) struct ConvLayer {
    pub w: Param,
    pub b: Param,
}

impl ConvLayer {
    pub(crate) fn build(
        params: &mut ParamSet,
        init: &mut Initializer,
        name: &str,
        out_ch: usize,
        in_ch: usize,
        k: usize,
    ) -> Self {
        let w = params.add(format!("{name}.weight"), init.kaiming_conv([out_ch, in_ch, k, k]));
        let b = params.add(format!("{name}.bias"), init.zeros(&[out_ch]));
        ConvLayer { w, b }
    }

    pub(crate) fn apply(&self, x: &Var<f32>, binding: &Binding, pad: usize) -> Var<f32> {
        ops::conv2d(x, &binding.var_of(&self.w), Some(&binding.var_of(&self.b)), pad)
    }
}

/// The five convolutional stages of one stream. Stages 1-4 downsample by
/// max pooling; stage 5 keeps the stride-16 grid.
pub(crate) struct StreamStages {
    layers: Vec<ConvLayer>,
}

/// Features tapped for fusion: pool3 (stride 8), pool4 (stride 16) and the
/// non-downsampled stage-5 output (stride 16).
pub(crate) struct StreamTaps {
    pub pool3: Var<f32>,
    pub pool4: Var<f32>,
    pub deep: Var<f32>,
}

impl StreamStages {
    pub(crate) fn build(
        params: &mut ParamSet,
        init: &mut Initializer,
        prefix: &str,
        in_ch: usize,
        widths: &[usize; 5],
    ) -> Self {
        let mut layers = Vec::with_capacity(5);
        let mut prev = in_ch;
        for (i, &width) in widths.iter().enumerate() {
            layers.push(ConvLayer::build(
                params,
                init,
                &format!("{prefix}.stage{}", i + 1),
                width,
                prev,
                3,
            ));
            prev = width;
        }
        StreamStages { layers }
    }

    pub(crate) fn forward(&self, input: &Var<f32>, binding: &Binding) -> StreamTaps {
        let s1 = ops::maxpool2x2(&ops::relu(&self.layers[0].apply(input, binding, 1)));
        let s2 = ops::maxpool2x2(&ops::relu(&self.layers[1].apply(&s1, binding, 1)));
        let pool3 = ops::maxpool2x2(&ops::relu(&self.layers[2].apply(&s2, binding, 1)));
        let pool4 = ops::maxpool2x2(&ops::relu(&self.layers[3].apply(&pool3, binding, 1)));
        let deep = ops::relu(&self.layers[4].apply(&pool4, binding, 1));
        StreamTaps { pool3, pool4, deep }
    }
}

/// The two-stream FCN. All trainable weights are addressable by name
/// through [`SegNet::params`].
pub struct SegNet {
    pub config: SegNetConfig,
    params: ParamSet,
    visual: Option<StreamStages>,
    motion: Option<StreamStages>,
    score3: ConvLayer,
    score4: ConvLayer,
    score5: ConvLayer,
    up2: Param,
    up8: Param,
}

/// Deterministically initialize a network for the given configuration.
pub fn build_network(config: &SegNetConfig, init_seed: u64) -> Result<SegNet> {
    config.validate()?;
    let mut params = ParamSet::new();
    let mut init = Initializer::new(init_seed);
    let widths = &config.stage_channels;

    let visual = config.visual_stream.then(|| {
        StreamStages::build(&mut params, &mut init, "seg.visual", config.visual_in_channels(), widths)
    });
    let motion = config.motion_stream.then(|| {
        StreamStages::build(&mut params, &mut init, "seg.motion", config.motion_in_channels(), widths)
    });

    let streams = config.streams_enabled();
    let head = config.head_channels;
    let score3 = ConvLayer::build(&mut params, &mut init, "seg.score3", head, streams * widths[2], 1);
    let score4 = ConvLayer::build(&mut params, &mut init, "seg.score4", head, streams * widths[3], 1);
    let score5 = ConvLayer::build(&mut params, &mut init, "seg.score5", head, streams * widths[4], 1);
    // Person pixels are rare; start the head at a background prior with
    // damped weights so the summed pixel loss neither saturates nor
    // explodes in the first epochs.
    for score in [&score3, &score4, &score5] {
        score.w.update_with(|w| w.mapv_inplace(|v| v * 0.1));
        score.b.update_with(|b| {
            b[[0]] = 0.5;
            b[[1]] = -0.5;
        });
    }

    let up2 = params.add("seg.up2.weight", bilinear_deconv(head, 4, 2));
    let up8 = params.add("seg.up8.weight", bilinear_deconv(head, 16, 8));

    Ok(SegNet {
        config: config.clone(),
        params,
        visual,
        motion,
        score3,
        score4,
        score5,
        up2,
        up8,
    })
}

/// Everything one forward pass produces: the softmax segmentation, the
/// fused pyramid features and the per-stream deepest features the matching
/// head consumes.
pub struct SegForward {
    /// `[2, H, W]`: background then foreground probability.
    pub probs: Var<f32>,
    pub logits: Var<f32>,
    /// Fused features at strides 8, 16, 16.
    pub fused: [Var<f32>; 3],
    pub visual_deep: Option<Var<f32>>,
    pub motion_deep: Option<Var<f32>>,
}

impl SegForward {
    /// Foreground probabilities as a raster.
    pub fn soft_mask(&self) -> SoftMask {
        let shape = self.probs.shape().to_vec();
        let (h, w) = (shape[1], shape[2]);
        let data = self.probs.data().as_slice().expect("standard layout");
        SoftMask {
            width: w,
            height: h,
            data: data[h * w..2 * h * w].iter().map(|&v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    /// The concatenated deepest feature block (2F channels for two streams).
    pub fn deep_fused(&self) -> &Var<f32> {
        &self.fused[2]
    }
}

impl SegNet {
    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// A copy with its own parameter storage (same config and values).
    pub fn clone_detached(&self) -> Result<SegNet> {
        let fresh = build_network(&self.config, 0)?;
        for p in fresh.params().iter() {
            let src = self.params.require(&p.name)?;
            p.set(src.value());
        }
        Ok(fresh)
    }

    fn check_input(&self, name: &str, input: &ArrayD<f32>, channels: usize) -> Result<()> {
        let want = [channels, self.config.height, self.config.width];
        if input.shape() != want {
            return Err(Error::shape(name, format!("{want:?}"), format!("{:?}", input.shape())));
        }
        Ok(())
    }

    /// Run the network. Disabled streams ignore their input entirely; an
    /// enabled stream requires one.
    pub fn forward(
        &self,
        binding: &Binding,
        visual_in: Option<&Array3<f32>>,
        motion_in: Option<&Array3<f32>>,
    ) -> Result<SegForward> {
        let mut taps: Vec<StreamTaps> = Vec::with_capacity(2);
        let mut visual_deep = None;
        let mut motion_deep = None;

        if let Some(stages) = &self.visual {
            let input = visual_in
                .ok_or_else(|| Error::Parameter("visual stream enabled but no visual input".into()))?;
            let input = input.clone().into_dyn();
            self.check_input("visual input", &input, self.config.visual_in_channels())?;
            let t = stages.forward(&Var::constant(input), binding);
            visual_deep = Some(t.deep.clone());
            taps.push(t);
        }
        if let Some(stages) = &self.motion {
            let input = motion_in
                .ok_or_else(|| Error::Parameter("motion stream enabled but no motion input".into()))?;
            let input = input.clone().into_dyn();
            self.check_input("motion input", &input, self.config.motion_in_channels())?;
            let t = stages.forward(&Var::constant(input), binding);
            motion_deep = Some(t.deep.clone());
            taps.push(t);
        }

        let fuse = |pick: &dyn Fn(&StreamTaps) -> &Var<f32>| -> Var<f32> {
            let picked: Vec<&Var<f32>> = taps.iter().map(|t| pick(t)).collect();
            if picked.len() == 1 {
                picked[0].clone()
            } else {
                ops::concat_channels(&picked)
            }
        };
        let fused3 = fuse(&|t| &t.pool3);
        let fused4 = fuse(&|t| &t.pool4);
        let fused5 = fuse(&|t| &t.deep);

        let s3 = self.score3.apply(&fused3, binding, 0);
        let s4 = self.score4.apply(&fused4, binding, 0);
        let s5 = self.score5.apply(&fused5, binding, 0);

        let deep_sum = ops::add(&s5, &s4);
        let up_to_8 = ops::conv_transpose2d(&deep_sum, &binding.var_of(&self.up2), 2, 1);
        let with_skip = ops::add(&up_to_8, &s3);
        let logits = ops::conv_transpose2d(&with_skip, &binding.var_of(&self.up8), 8, 4);
        let probs = ops::softmax_channels(&logits);

        Ok(SegForward {
            probs,
            logits,
            fused: [fused3, fused4, fused5],
            visual_deep,
            motion_deep,
        })
    }

    /// Convenience inference pass from domain rasters.
    pub fn predict(&self, frame: &Frame, flows: &[&FlowField], pre_mask: &Mask) -> Result<SegForward> {
        let binding = Binding::new(false);
        let visual = self
            .config
            .visual_stream
            .then(|| make_visual_input(frame, pre_mask));
        let motion = if self.config.motion_stream {
            Some(make_motion_input(flows, pre_mask, self.config.flow_stack)?)
        } else {
            None
        };
        self.forward(&binding, visual.as_ref(), motion.as_ref())
    }
}

/// Stack RGB planes and the pre-mask into the visual input `[4, H, W]`.
pub fn make_visual_input(frame: &Frame, pre_mask: &Mask) -> Array3<f32> {
    let (w, h) = (frame.width, frame.height);
    let mut out = Array3::zeros((4, h, w));
    for y in 0..h {
        for x in 0..w {
            let px = frame.pixel(x, y);
            out[[0, y, x]] = px[0];
            out[[1, y, x]] = px[1];
            out[[2, y, x]] = px[2];
            out[[3, y, x]] = pre_mask.get(x, y) as f32;
        }
    }
    out
}

/// Stack K flow fields (u then v per field) and the pre-mask into the
/// motion input `[2K+1, H, W]`.
pub fn make_motion_input(flows: &[&FlowField], pre_mask: &Mask, k: usize) -> Result<Array3<f32>> {
    if flows.len() != k {
        return Err(Error::shape(
            "motion input flows",
            format!("{k} fields"),
            format!("{}", flows.len()),
        ));
    }
    let (w, h) = (pre_mask.width, pre_mask.height);
    let mut out = Array3::zeros((2 * k + 1, h, w));
    for (fi, flow) in flows.iter().enumerate() {
        if flow.width != w || flow.height != h {
            return Err(Error::shape(
                "motion input flow field",
                format!("{w}x{h}"),
                format!("{}x{}", flow.width, flow.height),
            ));
        }
        for y in 0..h {
            for x in 0..w {
                let (u, v) = flow.uv(x, y);
                out[[2 * fi, y, x]] = u;
                out[[2 * fi + 1, y, x]] = v;
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            out[[2 * k, y, x]] = pre_mask.get(x, y) as f32;
        }
    }
    Ok(out)
}

/// Pixel-summed cross entropy over a batch of predicted soft masks, as a
/// plain number (the in-graph variant lives in `nn::ops`).
pub fn seg_loss(probs_fg: &[SoftMask], gt: &[Mask]) -> Result<f64> {
    if probs_fg.len() != gt.len() {
        return Err(Error::shape(
            "seg_loss batch",
            format!("{}", gt.len()),
            format!("{}", probs_fg.len()),
        ));
    }
    let mut total = 0.0;
    for (p, g) in probs_fg.iter().zip(gt) {
        if p.width != g.width || p.height != g.height {
            return Err(Error::shape(
                "seg_loss mask",
                format!("{}x{}", g.width, g.height),
                format!("{}x{}", p.width, p.height),
            ));
        }
        let probs = ArrayD::from_shape_vec(
            IxDyn(&[p.height, p.width]),
            p.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("probs shape");
        let target = ArrayD::from_shape_vec(
            IxDyn(&[g.height, g.width]),
            g.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("target shape");
        total += loss::seg_loss_value(&probs, &target);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SegNetConfig {
        SegNetConfig::desk(64, 64)
    }

    fn zero_inputs(cfg: &SegNetConfig) -> (Array3<f32>, Array3<f32>) {
        (
            Array3::zeros((cfg.visual_in_channels(), cfg.height, cfg.width)),
            Array3::zeros((cfg.motion_in_channels(), cfg.height, cfg.width)),
        )
    }

    #[test]
    fn default_config_channel_arithmetic() {
        let cfg = cfg();
        assert_eq!(cfg.visual_in_channels(), 4);
        assert_eq!(cfg.motion_in_channels(), 11);
        assert_eq!(cfg.grid(), (4, 4));
    }

    #[test]
    fn non_divisible_size_is_config_error() {
        let mut cfg = cfg();
        cfg.width = 60;
        assert!(matches!(build_network(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn no_streams_is_config_error() {
        let mut cfg = cfg();
        cfg.visual_stream = false;
        cfg.motion_stream = false;
        assert!(build_network(&cfg, 0).is_err());
    }

    #[test]
    fn same_seed_builds_identical_parameters() {
        let a = build_network(&cfg(), 5).unwrap();
        let b = build_network(&cfg(), 5).unwrap();
        assert_eq!(a.params().checksum(), b.params().checksum());
        let c = build_network(&cfg(), 6).unwrap();
        assert_ne!(a.params().checksum(), c.params().checksum());
    }

    #[test]
    fn forward_shapes() {
        let cfg = cfg();
        let net = build_network(&cfg, 1).unwrap();
        let (v, m) = zero_inputs(&cfg);
        let out = net.forward(&Binding::new(false), Some(&v), Some(&m)).unwrap();
        assert_eq!(out.probs.shape(), &[2, 64, 64]);
        assert_eq!(out.deep_fused().shape(), &[2 * cfg.deep_channels(), 4, 4]);
        assert_eq!(out.fused[0].shape(), &[2 * cfg.stage_channels[2], 8, 8]);
        assert_eq!(out.fused[1].shape(), &[2 * cfg.stage_channels[3], 4, 4]);
    }

    #[test]
    fn zero_parameters_give_uniform_softmax() {
        let cfg = cfg();
        let net = build_network(&cfg, 1).unwrap();
        for p in net.params().iter() {
            p.update_with(|v| v.fill(0.0));
        }
        let (v, m) = zero_inputs(&cfg);
        let out = net.forward(&Binding::new(false), Some(&v), Some(&m)).unwrap();
        assert!(out.probs.data().iter().all(|&p| (p - 0.5).abs() < 1e-6));
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = cfg();
        let net = build_network(&cfg, 2).unwrap();
        let mut v = Array3::zeros((4, 64, 64));
        v[[0, 10, 10]] = 0.7;
        v[[3, 12, 9]] = 1.0;
        let m = Array3::from_elem((11, 64, 64), 0.25f32);
        let a = net.forward(&Binding::new(false), Some(&v), Some(&m)).unwrap();
        let b = net.forward(&Binding::new(false), Some(&v), Some(&m)).unwrap();
        assert_eq!(a.probs.data(), b.probs.data());
    }

    #[test]
    fn shape_mismatch_names_the_tensor() {
        let cfg = cfg();
        let net = build_network(&cfg, 1).unwrap();
        let bad = Array3::zeros((4, 32, 64));
        let (_, m) = zero_inputs(&cfg);
        match net.forward(&Binding::new(false), Some(&bad), Some(&m)) {
            Err(Error::Shape { tensor, .. }) => assert!(tensor.contains("visual")),
            Err(other) => panic!("expected shape error, got {other:?}"),
            Ok(_) => panic!("expected shape error, got Ok"),
        }
    }

    #[test]
    fn single_stream_changes_values_not_shapes() {
        let full = build_network(&cfg(), 3).unwrap();
        let mut image_only_cfg = cfg();
        image_only_cfg.motion_stream = false;
        let image_only = build_network(&image_only_cfg, 3).unwrap();

        let (v, m) = zero_inputs(&cfg());
        let a = full.forward(&Binding::new(false), Some(&v), Some(&m)).unwrap();
        let b = image_only.forward(&Binding::new(false), Some(&v), None).unwrap();
        assert_eq!(a.probs.shape(), b.probs.shape());
        assert_eq!(b.deep_fused().shape(), &[image_only_cfg.deep_channels(), 4, 4]);
        assert!(b.motion_deep.is_none());
    }

    #[test]
    fn probs_sum_to_one_per_pixel() {
        let cfg = cfg();
        let net = build_network(&cfg, 7).unwrap();
        let mut v = Array3::from_elem((4, 64, 64), 0.3f32);
        v[[1, 5, 5]] = 0.9;
        let m = Array3::from_elem((11, 64, 64), -0.4f32);
        let out = net.forward(&Binding::new(false), Some(&v), Some(&m)).unwrap();
        let data = out.probs.data().as_slice().unwrap();
        let n = 64 * 64;
        for p in 0..n {
            assert!((data[p] + data[n + p] - 1.0).abs() < 1e-6);
        }
    }
}
