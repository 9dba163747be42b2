//! Shared domain types: per-view rasters (frames, flow fields, masks),
//! person instances, sequences and training pairs.
//!
//! Conventions fixed here and relied on everywhere else:
//! origin is the top-left pixel, x grows rightward, y grows downward, and a
//! flow vector (u, v) at frame t is the displacement of the surface visible
//! at that pixel from frame t to frame t+1, in pixels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Person identity label. 0 is reserved for the background.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Identity(pub u32);

impl std::fmt::Display for Identity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Which matching problem a pair or result belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Problem {
    ThirdThird,
    ThirdFirst,
}

impl std::fmt::Display for Problem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Problem::ThirdThird => write!(f, "third_third"),
            Problem::ThirdFirst => write!(f, "third_first"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraKind {
    ThirdPerson,
    FirstPerson,
}

/// RGB raster with interleaved channels, row-major, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    /// Length `width * height * 3`, layout `[y][x][rgb]`.
    pub data: Vec<f32>,
}

impl Frame {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Parameter("frame dimensions must be positive".into()));
        }
        if data.len() != width * height * 3 {
            return Err(Error::shape(
                "frame",
                format!("{} values", width * height * 3),
                format!("{}", data.len()),
            ));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Parameter("frame intensities must lie in [0,1]".into()));
        }
        Ok(Frame { width, height, data })
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// Dense optical flow, two channels (u, v) in pixels per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    /// Length `width * height * 2`, layout `[y][x][uv]`.
    pub data: Vec<f32>,
}

impl FlowField {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 2 {
            return Err(Error::shape(
                "flow",
                format!("{} values", width * height * 2),
                format!("{}", data.len()),
            ));
        }
        Ok(FlowField { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        FlowField {
            width,
            height,
            data: vec![0.0; width * height * 2],
        }
    }

    pub fn uv(&self, x: usize, y: usize) -> (f32, f32) {
        let i = (y * self.width + x) * 2;
        (self.data[i], self.data[i + 1])
    }
}

/// Binary segmentation mask, one byte per pixel, strictly {0, 1}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape(
                "mask",
                format!("{} values", width * height),
                format!("{}", data.len()),
            ));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Parameter("mask values must be 0 or 1".into()));
        }
        Ok(Mask { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// Lossless cast to a soft mask with probabilities 0.0 / 1.0.
    pub fn to_soft(&self) -> SoftMask {
        SoftMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }
}

/// Per-pixel foreground probability in [0, 1]. The paired background
/// probability is `1 - p` at every pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl SoftMask {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape(
                "soft mask",
                format!("{} values", width * height),
                format!("{}", data.len()),
            ));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Parameter(
                "soft mask probabilities must lie in [0,1]".into(),
            ));
        }
        Ok(SoftMask { width, height, data })
    }
}

/// Binarize a soft mask. The comparison is inclusive: a pixel with
/// probability exactly `tau` counts as foreground.
pub fn threshold_mask(soft: &SoftMask, tau: f32) -> Result<Mask> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Parameter(format!(
            "threshold tau must lie strictly inside (0,1), got {tau}"
        )));
    }
    Ok(Mask {
        width: soft.width,
        height: soft.height,
        data: soft.data.iter().map(|&p| u8::from(p >= tau)).collect(),
    })
}

/// Default binarization threshold for pre-masks.
pub const DEFAULT_MASK_TAU: f32 = 0.5;

/// One person at one (scene, view, time). `gt_mask` is optional at inference.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonInstance {
    pub scene_id: u32,
    pub view_id: u32,
    pub frame_index: usize,
    pub identity: Identity,
    pub gt_mask: Option<Mask>,
}

impl PersonInstance {
    pub fn validate(&self) -> Result<()> {
        if self.identity.0 == 0 {
            return Err(Error::Parameter(
                "person identity must be >= 1 (0 is background)".into(),
            ));
        }
        Ok(())
    }
}

/// A single camera view of one scene: ordered frames, the flow between
/// consecutive frames, and the people visible in each frame.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub scene_id: u32,
    pub view_id: u32,
    pub camera_kind: CameraKind,
    pub wearer_identity: Option<Identity>,
    pub frames: Vec<Frame>,
    pub flows: Vec<FlowField>,
    /// `instances[t]` lists the people visible in frame t.
    pub instances: Vec<Vec<PersonInstance>>,
}

/// A violated [`Sequence`] invariant. Violations are data, not failures.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    FlowCount { frames: usize, flows: usize },
    WearerVisibleInOwnView { frame: usize },
    MissingWearerIdentity,
    RasterSize { frame: usize, what: &'static str },
    InstanceListLength { frames: usize, lists: usize },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::FlowCount { frames, flows } => {
                write!(f, "flow count: {frames} frames require {} flows, got {flows}", frames.saturating_sub(1))
            }
            Violation::WearerVisibleInOwnView { frame } => {
                write!(f, "wearer visible in own view at frame {frame}")
            }
            Violation::MissingWearerIdentity => write!(f, "first-person view without wearer identity"),
            Violation::RasterSize { frame, what } => write!(f, "{what} size mismatch at frame {frame}"),
            Violation::InstanceListLength { frames, lists } => {
                write!(f, "instance lists: {lists} for {frames} frames")
            }
        }
    }
}

/// Check every [`Sequence`] invariant and return all violations found.
pub fn validate_sequence(seq: &Sequence) -> Vec<Violation> {
    let mut out = Vec::new();
    if seq.frames.len().saturating_sub(1) != seq.flows.len() {
        out.push(Violation::FlowCount {
            frames: seq.frames.len(),
            flows: seq.flows.len(),
        });
    }
    if seq.instances.len() != seq.frames.len() {
        out.push(Violation::InstanceListLength {
            frames: seq.frames.len(),
            lists: seq.instances.len(),
        });
    }
    if let Some(first) = seq.frames.first() {
        let (w, h) = (first.width, first.height);
        for (t, frame) in seq.frames.iter().enumerate() {
            if frame.width != w || frame.height != h {
                out.push(Violation::RasterSize { frame: t, what: "frame" });
            }
        }
        for (t, flow) in seq.flows.iter().enumerate() {
            if flow.width != w || flow.height != h {
                out.push(Violation::RasterSize { frame: t, what: "flow" });
            }
        }
        for (t, list) in seq.instances.iter().enumerate() {
            for inst in list {
                if let Some(mask) = &inst.gt_mask {
                    if mask.width != w || mask.height != h {
                        out.push(Violation::RasterSize { frame: t, what: "mask" });
                    }
                }
            }
        }
    }
    match (seq.camera_kind, seq.wearer_identity) {
        (CameraKind::FirstPerson, None) => out.push(Violation::MissingWearerIdentity),
        (CameraKind::FirstPerson, Some(wearer)) => {
            for (t, list) in seq.instances.iter().enumerate() {
                if list.iter().any(|inst| inst.identity == wearer) {
                    out.push(Violation::WearerVisibleInOwnView { frame: t });
                }
            }
        }
        _ => {}
    }
    out
}

/// The non-instance side of a third-first pair: a first-person view window
/// centered on one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FirstPersonWindow {
    pub scene_id: u32,
    pub view_id: u32,
    pub frame_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PairSide {
    Instance(PersonInstance),
    FirstPerson(FirstPersonWindow),
}

/// A labeled training pair: two instances from different views
/// (third-third) or an instance and a first-person window (third-first).
#[derive(Debug, Clone, PartialEq)]
pub struct ExamplePair {
    pub problem: Problem,
    pub side_a: PersonInstance,
    pub side_b: PairSide,
    /// 1 for a correct correspondence, 0 otherwise.
    pub label: bool,
}

/// Indices into `flows` for the motion stack used when processing frame `t`:
/// the `k` flow fields ending at `t`, each clamped into the valid range so
/// sequence boundaries repeat the nearest available field.
pub fn flow_window_indices(num_flows: usize, t: usize, k: usize) -> Vec<usize> {
    assert!(k >= 1, "flow stack must contain at least one field");
    assert!(num_flows >= 1, "sequence must contain at least one flow field");
    (0..k)
        .map(|j| {
            let want = t as i64 - (k as i64 - 1) + j as i64;
            want.clamp(0, num_flows as i64 - 1) as usize
        })
        .collect()
}
