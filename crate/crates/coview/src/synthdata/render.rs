//! Rasterization of resolved scenes: painter's-order rendering, exact
//! visibility masks and analytic forward flow.

use crate::domain::{CameraKind, FlowField, Frame, Identity, Mask, PersonInstance, Sequence};
use crate::error::{Error, Result};

use super::SceneSpec;

/// One rendered view at one time step.
pub struct RenderedView {
    pub frame: Frame,
    /// Visible (unoccluded) pixels per identity; empty masks are omitted.
    pub masks: Vec<(Identity, Mask)>,
    /// Forward flow to t+1; absent at the last frame.
    pub flow: Option<FlowField>,
}

/// Index of the top-most surface at each viewport pixel: `None` for the
/// background, `Some(agent_index)` otherwise. Painter's order: higher agent
/// index occludes lower; first-person views never draw the carried agent.
fn surface_map(scene: &SceneSpec, view_id: u32, t: usize) -> Result<Vec<Option<usize>>> {
    let cam = scene.camera(view_id)?;
    let (vw, vh) = scene.config.view;
    let (ox, oy) = cam.origins[t];
    let mut top = vec![None; vw * vh];
    for (ai, agent) in scene.agents.iter().enumerate() {
        if cam.kind == CameraKind::FirstPerson && cam.wearer == Some(agent.identity) {
            continue;
        }
        let (px, py) = agent.positions[t];
        let sprite = &agent.sprite;
        for sy in 0..sprite.height {
            let wy = py + sy as i64;
            let vy = wy - oy;
            if vy < 0 || vy >= vh as i64 {
                continue;
            }
            for sx in 0..sprite.width {
                if sprite.alpha[sy * sprite.width + sx] == 0 {
                    continue;
                }
                let wx = px + sx as i64;
                let vx = wx - ox;
                if vx < 0 || vx >= vw as i64 {
                    continue;
                }
                top[vy as usize * vw + vx as usize] = Some(ai);
            }
        }
    }
    Ok(top)
}

/// Identities with at least one visible pixel in the given view and frame.
pub fn visible_identities(scene: &SceneSpec, view_id: u32, t: usize) -> Result<Vec<Identity>> {
    let top = surface_map(scene, view_id, t)?;
    let mut seen = vec![false; scene.agents.len()];
    for cell in top.iter().flatten() {
        seen[*cell] = true;
    }
    Ok(seen
        .iter()
        .enumerate()
        .filter_map(|(ai, &s)| s.then(|| scene.agents[ai].identity))
        .collect())
}

/// Render one view at one time step: the frame, the per-identity visibility
/// masks, and (except at the last frame) the analytic flow to t+1.
///
/// Flow at a pixel is the world displacement of the surface visible there
/// minus the camera displacement, so a static background under a camera
/// translating by (3,0) flows by (-3,0) everywhere.
pub fn render_view(scene: &SceneSpec, view_id: u32, t: usize) -> Result<RenderedView> {
    let cam = scene.camera(view_id)?;
    let frames = scene.config.num_frames;
    if t >= frames {
        return Err(Error::Parameter(format!(
            "frame index {t} out of range (scene has {frames} frames)"
        )));
    }
    let (vw, vh) = scene.config.view;
    let (ox, oy) = cam.origins[t];
    let top = surface_map(scene, view_id, t)?;

    let bg = &scene.background;
    let mut rgb = vec![0.0f32; vw * vh * 3];
    for vy in 0..vh {
        for vx in 0..vw {
            let (r, g, b) = match top[vy * vw + vx] {
                Some(ai) => {
                    let agent = &scene.agents[ai];
                    let (px, py) = agent.positions[t];
                    let sx = (ox + vx as i64 - px) as usize;
                    let sy = (oy + vy as i64 - py) as usize;
                    let base = (sy * agent.sprite.width + sx) * 3;
                    (
                        agent.sprite.rgb[base],
                        agent.sprite.rgb[base + 1],
                        agent.sprite.rgb[base + 2],
                    )
                }
                None => {
                    let wx = (ox + vx as i64) as usize;
                    let wy = (oy + vy as i64) as usize;
                    let base = (wy * bg.width + wx) * 3;
                    (bg.rgb[base], bg.rgb[base + 1], bg.rgb[base + 2])
                }
            };
            let base = (vy * vw + vx) * 3;
            rgb[base] = r as f32 / 255.0;
            rgb[base + 1] = g as f32 / 255.0;
            rgb[base + 2] = b as f32 / 255.0;
        }
    }
    let frame = Frame::new(vw, vh, rgb)?;

    let mut masks = Vec::new();
    for (ai, agent) in scene.agents.iter().enumerate() {
        let mut data = vec![0u8; vw * vh];
        let mut any = false;
        for (i, cell) in top.iter().enumerate() {
            if *cell == Some(ai) {
                data[i] = 1;
                any = true;
            }
        }
        if any {
            masks.push((agent.identity, Mask { width: vw, height: vh, data }));
        }
    }

    let flow = if t + 1 < frames {
        let cam_disp = (
            cam.origins[t + 1].0 - cam.origins[t].0,
            cam.origins[t + 1].1 - cam.origins[t].1,
        );
        let mut data = vec![0.0f32; vw * vh * 2];
        for (i, cell) in top.iter().enumerate() {
            let surface_disp = match cell {
                Some(ai) => {
                    let agent = &scene.agents[*ai];
                    (
                        agent.positions[t + 1].0 - agent.positions[t].0,
                        agent.positions[t + 1].1 - agent.positions[t].1,
                    )
                }
                None => (0, 0),
            };
            data[2 * i] = (surface_disp.0 - cam_disp.0) as f32;
            data[2 * i + 1] = (surface_disp.1 - cam_disp.1) as f32;
        }
        Some(FlowField { width: vw, height: vh, data })
    } else {
        None
    };

    Ok(RenderedView { frame, masks, flow })
}

/// Render a whole scene into per-view [`Sequence`]s with ground-truth
/// instances attached to every frame.
pub fn scene_sequences(scene: &SceneSpec) -> Result<Vec<Sequence>> {
    let mut out = Vec::with_capacity(scene.cameras.len());
    for cam in &scene.cameras {
        let mut frames = Vec::with_capacity(scene.config.num_frames);
        let mut flows = Vec::new();
        let mut instances = Vec::with_capacity(scene.config.num_frames);
        for t in 0..scene.config.num_frames {
            let rendered = render_view(scene, cam.view_id, t)?;
            instances.push(
                rendered
                    .masks
                    .into_iter()
                    .map(|(identity, mask)| PersonInstance {
                        scene_id: scene.config.scene_id,
                        view_id: cam.view_id,
                        frame_index: t,
                        identity,
                        gt_mask: Some(mask),
                    })
                    .collect(),
            );
            frames.push(rendered.frame);
            if let Some(flow) = rendered.flow {
                flows.push(flow);
            }
        }
        out.push(Sequence {
            scene_id: scene.config.scene_id,
            view_id: cam.view_id,
            camera_kind: cam.kind,
            wearer_identity: cam.wearer,
            frames,
            flows,
            instances,
        });
    }
    Ok(out)
}
