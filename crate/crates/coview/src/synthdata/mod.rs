//! Deterministic synthetic generator of synchronized first- and
//! third-person scenes with exact masks, identities and analytic optical
//! flow, plus dataset serialization and training-pair sampling.
//!
//! The world is 2-D and translation-only: agents are textured convex
//! sprites following piecewise-linear integer trajectories, cameras are
//! translating viewports. Everything is a pure function of (config, seed).

mod dataset;
mod pairs;
mod render;

pub use dataset::{export_dataset, import_dataset, read_flow_file, write_flow_file, Dataset, DatasetManifest, DatasetScene};
pub use pairs::sample_pairs;
pub use render::{render_view, scene_sequences, visible_identities, RenderedView};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{CameraKind, Identity};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Camera motion model for third-person rigs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraPath {
    /// Fixed viewport at the given origin.
    Static { origin: (i64, i64) },
    /// Linear pan; may exit the world, which is a generation error.
    Pan { start: (i64, i64), velocity: (i64, i64) },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RigConfig {
    ThirdPerson { path: CameraPath },
    /// Follows its wearer's trajectory (clamped to the world) with
    /// optional per-frame jitter of at most one pixel.
    FirstPerson { wearer: u32, jitter: bool },
}

/// Unresolved scene description: sizes, counts and rigs. `generate_scene`
/// turns this into a fully resolved [`SceneSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub seed: u64,
    pub scene_id: u32,
    pub split: Split,
    pub world: (usize, usize),
    pub view: (usize, usize),
    pub num_agents: usize,
    pub num_frames: usize,
    /// Inclusive range of sprite side lengths in pixels.
    pub agent_size: (usize, usize),
    /// Per-axis speed bound in pixels per frame.
    pub max_speed: i64,
    pub rigs: Vec<RigConfig>,
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_agents == 0 {
            return Err(Error::Config("a scene needs at least one agent".into()));
        }
        if self.num_frames < 2 {
            return Err(Error::Config("a scene needs at least two frames".into()));
        }
        if self.view.0 > self.world.0 || self.view.1 > self.world.1 {
            return Err(Error::Config("viewport larger than the world".into()));
        }
        if self.agent_size.0 < 3 || self.agent_size.0 > self.agent_size.1 {
            return Err(Error::Config("agent size range invalid".into()));
        }
        if self.agent_size.1 >= self.view.0.min(self.view.1) {
            return Err(Error::Config("agents must be smaller than the viewport".into()));
        }
        if self.max_speed < 0 {
            return Err(Error::Config("max speed must be non-negative".into()));
        }
        if self.rigs.is_empty() {
            return Err(Error::Config("a scene needs at least one camera rig".into()));
        }
        for rig in &self.rigs {
            if let RigConfig::FirstPerson { wearer, .. } = rig {
                if *wearer == 0 || *wearer as usize > self.num_agents {
                    return Err(Error::Config(format!("first-person rig wearer {wearer} does not exist")));
                }
            }
        }
        Ok(())
    }
}

/// Textured convex sprite. `alpha` is the shape: 1 inside, 0 outside.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sprite {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
    pub alpha: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Agent {
    pub identity: Identity,
    pub sprite: Sprite,
    /// Top-left world position per frame.
    pub positions: Vec<(i64, i64)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Camera {
    pub view_id: u32,
    pub kind: CameraKind,
    pub wearer: Option<Identity>,
    /// Viewport origin (top-left, world coordinates) per frame.
    pub origins: Vec<(i64, i64)>,
}

/// World-sized RGB texture, 8-bit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldTexture {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

/// Fully resolved scene: concrete textures, trajectories and camera paths.
/// A pure function of its [`SceneConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub config: SceneConfig,
    pub background: WorldTexture,
    pub agents: Vec<Agent>,
    pub cameras: Vec<Camera>,
}

impl SceneSpec {
    pub fn camera(&self, view_id: u32) -> Result<&Camera> {
        self.cameras
            .iter()
            .find(|cam| cam.view_id == view_id)
            .ok_or(Error::UnknownView(view_id))
    }
}

fn smooth_noise_texture(rng: &mut ChaCha8Rng, width: usize, height: usize) -> WorldTexture {
    // Coarse random grid, bilinearly upsampled: smooth but non-uniform.
    let cells = 9usize;
    let mut grid = vec![[0u8; 3]; cells * cells];
    let base: [i32; 3] = [
        rng.random_range(70..150),
        rng.random_range(70..150),
        rng.random_range(70..150),
    ];
    for cell in grid.iter_mut() {
        for (ch, b) in cell.iter_mut().zip(base) {
            let v = b + rng.random_range(-50..=50);
            *ch = v.clamp(20, 235) as u8;
        }
    }
    let mut rgb = vec![0u8; width * height * 3];
    for y in 0..height {
        for x in 0..width {
            let fx = x as f64 / (width - 1) as f64 * (cells - 1) as f64;
            let fy = y as f64 / (height - 1) as f64 * (cells - 1) as f64;
            let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(cells - 1), (y0 + 1).min(cells - 1));
            let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
            for ch in 0..3 {
                let v00 = grid[y0 * cells + x0][ch] as f64;
                let v01 = grid[y0 * cells + x1][ch] as f64;
                let v10 = grid[y1 * cells + x0][ch] as f64;
                let v11 = grid[y1 * cells + x1][ch] as f64;
                let v = v00 * (1.0 - tx) * (1.0 - ty)
                    + v01 * tx * (1.0 - ty)
                    + v10 * (1.0 - tx) * ty
                    + v11 * tx * ty;
                rgb[(y * width + x) * 3 + ch] = v.round() as u8;
            }
        }
    }
    WorldTexture { width, height, rgb }
}

#[derive(Clone, Copy)]
enum SpriteShape {
    Rectangle,
    Ellipse,
    Diamond,
}

fn striped_sprite(rng: &mut ChaCha8Rng, agent_index: usize, size_range: (usize, usize)) -> Sprite {
    let w = rng.random_range(size_range.0..=size_range.1);
    let h = rng.random_range(size_range.0..=size_range.1);
    let shape = match rng.random_range(0..3) {
        0 => SpriteShape::Rectangle,
        1 => SpriteShape::Ellipse,
        _ => SpriteShape::Diamond,
    };
    // Stripe orientation rotates with the agent index so textures within a
    // scene can never coincide.
    let orientation = (agent_index + rng.random_range(0..4)) % 4;
    let period = rng.random_range(3..=5) as i64 + agent_index as i64 % 2;
    let color_a: [u8; 3] = [
        rng.random_range(40..230),
        rng.random_range(40..230),
        rng.random_range(40..230),
    ];
    let color_b: [u8; 3] = [
        rng.random_range(40..230),
        rng.random_range(40..230),
        rng.random_range(40..230),
    ];

    let mut rgb = vec![0u8; w * h * 3];
    let mut alpha = vec![0u8; w * h];
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    for y in 0..h {
        for x in 0..w {
            let inside = match shape {
                SpriteShape::Rectangle => true,
                SpriteShape::Ellipse => {
                    let dx = (x as f64 - cx) / (w as f64 / 2.0);
                    let dy = (y as f64 - cy) / (h as f64 / 2.0);
                    dx * dx + dy * dy <= 1.0
                }
                SpriteShape::Diamond => {
                    let dx = (x as f64 - cx).abs() / (w as f64 / 2.0);
                    let dy = (y as f64 - cy).abs() / (h as f64 / 2.0);
                    dx + dy <= 1.0
                }
            };
            if !inside {
                continue;
            }
            alpha[y * w + x] = 1;
            let phase = match orientation {
                0 => x as i64,
                1 => y as i64,
                2 => x as i64 + y as i64,
                _ => x as i64 - y as i64,
            };
            let color = if phase.rem_euclid(2 * period) < period {
                color_a
            } else {
                color_b
            };
            for ch in 0..3 {
                rgb[(y * w + x) * 3 + ch] = color[ch];
            }
        }
    }
    Sprite { width: w, height: h, rgb, alpha }
}

/// Piecewise-linear integer trajectory reflected at the region border.
/// Velocity segments keep the agent's characteristic speed: the max-norm
/// of every segment velocity equals `speed`, so different people carry
/// distinguishable motion signatures across views.
fn trajectory(
    rng: &mut ChaCha8Rng,
    frames: usize,
    region: ((i64, i64), (i64, i64)),
    speed: i64,
) -> Vec<(i64, i64)> {
    let ((x_lo, x_hi), (y_lo, y_hi)) = region;
    let mut pos = (
        rng.random_range(x_lo..=x_hi.max(x_lo)),
        rng.random_range(y_lo..=y_hi.max(y_lo)),
    );
    let draw_vel = |rng: &mut ChaCha8Rng| -> (i64, i64) {
        if speed == 0 {
            return (0, 0);
        }
        loop {
            let v = (
                rng.random_range(-speed..=speed),
                rng.random_range(-speed..=speed),
            );
            if v.0.abs().max(v.1.abs()) == speed {
                return v;
            }
        }
    };
    let mut vel = draw_vel(rng);
    let mut remaining = rng.random_range(4..=7);
    let mut out = Vec::with_capacity(frames);
    for _ in 0..frames {
        out.push(pos);
        if remaining == 0 {
            vel = draw_vel(rng);
            remaining = rng.random_range(4..=7);
        }
        remaining -= 1;
        let mut next = (pos.0 + vel.0, pos.1 + vel.1);
        if next.0 < x_lo || next.0 > x_hi {
            vel.0 = -vel.0;
            next.0 = (pos.0 + vel.0).clamp(x_lo, x_hi);
        }
        if next.1 < y_lo || next.1 > y_hi {
            vel.1 = -vel.1;
            next.1 = (pos.1 + vel.1).clamp(y_lo, y_hi);
        }
        pos = next;
    }
    out
}

/// Resolve a scene config into concrete textures, trajectories and camera
/// paths. Deterministic: the same config yields an identical scene.
pub fn generate_scene(config: &SceneConfig) -> Result<SceneSpec> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (world_w, world_h) = config.world;
    let (view_w, view_h) = config.view;

    let background = smooth_noise_texture(&mut rng, world_w, world_h);

    // Agents stay inside the centered viewport footprint so the default
    // static rig sees every agent in every frame.
    let center_origin = (
        ((world_w - view_w) / 2) as i64,
        ((world_h - view_h) / 2) as i64,
    );
    let mut agents = Vec::with_capacity(config.num_agents);
    for i in 0..config.num_agents {
        let mut sprite = striped_sprite(&mut rng, i, config.agent_size);
        while agents.iter().any(|a: &Agent| a.sprite == sprite) {
            // Same raster drawn twice: nudge the period deterministically.
            sprite = striped_sprite(&mut rng, i, config.agent_size);
        }
        let region = (
            (
                center_origin.0,
                center_origin.0 + view_w as i64 - sprite.width as i64,
            ),
            (
                center_origin.1,
                center_origin.1 + view_h as i64 - sprite.height as i64,
            ),
        );
        // Alternate characteristic speeds across agents (camera wearers
        // come first, so they move at distinguishably different rates).
        let speed = if config.max_speed <= 1 {
            config.max_speed
        } else {
            config.max_speed - (i as i64 % 2)
        };
        let positions = trajectory(&mut rng, config.num_frames, region, speed);
        agents.push(Agent {
            identity: Identity(i as u32 + 1),
            sprite,
            positions,
        });
    }

    let max_origin = (
        world_w as i64 - view_w as i64,
        world_h as i64 - view_h as i64,
    );
    let mut cameras = Vec::with_capacity(config.rigs.len());
    for (view_id, rig) in config.rigs.iter().enumerate() {
        let (kind, wearer, origins) = match rig {
            RigConfig::ThirdPerson { path } => {
                let origins: Vec<(i64, i64)> = match *path {
                    CameraPath::Static { origin } => vec![origin; config.num_frames],
                    CameraPath::Pan { start, velocity } => (0..config.num_frames)
                        .map(|t| (start.0 + velocity.0 * t as i64, start.1 + velocity.1 * t as i64))
                        .collect(),
                };
                (CameraKind::ThirdPerson, None, origins)
            }
            RigConfig::FirstPerson { wearer, jitter } => {
                let agent = &agents[*wearer as usize - 1];
                let origins: Vec<(i64, i64)> = agent
                    .positions
                    .iter()
                    .map(|&(x, y)| {
                        let cx = x + agent.sprite.width as i64 / 2;
                        let cy = y + agent.sprite.height as i64 / 2;
                        let jx = if *jitter { rng.random_range(-1..=1) } else { 0 };
                        let jy = if *jitter { rng.random_range(-1..=1) } else { 0 };
                        (
                            (cx - view_w as i64 / 2 + jx).clamp(0, max_origin.0),
                            (cy - view_h as i64 / 2 + jy).clamp(0, max_origin.1),
                        )
                    })
                    .collect();
                (CameraKind::FirstPerson, Some(agent.identity), origins)
            }
        };
        for (t, &(ox, oy)) in origins.iter().enumerate() {
            if ox < 0 || oy < 0 || ox > max_origin.0 || oy > max_origin.1 {
                return Err(Error::Generation {
                    frame: t,
                    reason: format!("viewport of view {view_id} exits the world at ({ox},{oy})"),
                });
            }
        }
        cameras.push(Camera {
            view_id: view_id as u32,
            kind,
            wearer,
            origins,
        });
    }

    let scene = SceneSpec {
        config: config.clone(),
        background,
        agents,
        cameras,
    };

    // The matching problems need at least one identity seen by two views.
    let mut shared = false;
    'outer: for t in 0..config.num_frames {
        let mut seen = std::collections::HashMap::new();
        for cam in &scene.cameras {
            for id in visible_identities(&scene, cam.view_id, t)? {
                let count = seen.entry(id).or_insert(0usize);
                *count += 1;
                if *count >= 2 {
                    shared = true;
                    break 'outer;
                }
            }
        }
    }
    if !shared {
        return Err(Error::Generation {
            frame: 0,
            reason: "no identity is visible from two views; matching is impossible".into(),
        });
    }

    Ok(scene)
}

/// Configuration of the default multi-scene benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub seed: u64,
    pub scenes: usize,
    pub train_scenes: usize,
    pub num_agents: usize,
    pub num_frames: usize,
    pub world: (usize, usize),
    pub view: (usize, usize),
    pub first_person_rigs: usize,
    pub third_person_rigs: usize,
    pub agent_size: (usize, usize),
    pub max_speed: i64,
    pub camera_jitter: bool,
}

impl BenchmarkConfig {
    /// The desk-scale benchmark: 9 scenes (6 train / 3 test), 3 agents,
    /// 2 first-person + 1 third-person rig, 20 frames at 64x64.
    pub fn desk(seed: u64) -> Self {
        BenchmarkConfig {
            seed,
            scenes: 9,
            train_scenes: 6,
            num_agents: 3,
            num_frames: 20,
            world: (128, 128),
            view: (64, 64),
            first_person_rigs: 2,
            third_person_rigs: 1,
            agent_size: (11, 17),
            max_speed: 2,
            camera_jitter: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenes == 0 || self.train_scenes >= self.scenes {
            return Err(Error::Config(
                "benchmark needs at least one train and one test scene".into(),
            ));
        }
        if self.first_person_rigs > self.num_agents {
            return Err(Error::Config("more first-person rigs than agents".into()));
        }
        Ok(())
    }

    pub fn scene_config(&self, index: usize) -> SceneConfig {
        let center = (
            ((self.world.0 - self.view.0) / 2) as i64,
            ((self.world.1 - self.view.1) / 2) as i64,
        );
        let mut rigs = Vec::new();
        for ti in 0..self.third_person_rigs {
            // Additional static rigs sit slightly off-center.
            let offset = 4 * ti as i64;
            rigs.push(RigConfig::ThirdPerson {
                path: CameraPath::Static {
                    origin: (center.0 + offset, center.1),
                },
            });
        }
        for fi in 0..self.first_person_rigs {
            rigs.push(RigConfig::FirstPerson {
                wearer: fi as u32 + 1,
                jitter: self.camera_jitter,
            });
        }
        SceneConfig {
            seed: self.seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(index as u64),
            scene_id: index as u32,
            split: if index < self.train_scenes { Split::Train } else { Split::Test },
            world: self.world,
            view: self.view,
            num_agents: self.num_agents,
            num_frames: self.num_frames,
            agent_size: self.agent_size,
            max_speed: self.max_speed,
            rigs,
        }
    }
}

/// Generate all scenes of a benchmark.
pub fn generate_benchmark(config: &BenchmarkConfig) -> Result<Vec<SceneSpec>> {
    config.validate()?;
    (0..config.scenes)
        .map(|i| generate_scene(&config.scene_config(i)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config(seed: u64) -> SceneConfig {
        SceneConfig {
            seed,
            scene_id: 0,
            split: Split::Train,
            world: (96, 96),
            view: (48, 48),
            num_agents: 3,
            num_frames: 6,
            agent_size: (8, 12),
            max_speed: 2,
            rigs: vec![
                RigConfig::ThirdPerson {
                    path: CameraPath::Static { origin: (24, 24) },
                },
                RigConfig::FirstPerson { wearer: 1, jitter: true },
                RigConfig::FirstPerson { wearer: 2, jitter: false },
            ],
        }
    }

    #[test]
    fn same_seed_gives_byte_identical_scenes() {
        let a = generate_scene(&tiny_config(7)).unwrap();
        let b = generate_scene(&tiny_config(7)).unwrap();
        assert_eq!(
            serde_json::to_vec(&a).unwrap(),
            serde_json::to_vec(&b).unwrap()
        );
        let c = generate_scene(&tiny_config(8)).unwrap();
        assert_ne!(
            serde_json::to_vec(&a).unwrap(),
            serde_json::to_vec(&c).unwrap()
        );
    }

    #[test]
    fn wearer_map_matches_rigs() {
        let scene = generate_scene(&tiny_config(7)).unwrap();
        let wearers: Vec<_> = scene.cameras.iter().filter_map(|c| c.wearer).collect();
        assert_eq!(wearers, vec![Identity(1), Identity(2)]);
    }

    #[test]
    fn agent_textures_are_pairwise_distinct() {
        let scene = generate_scene(&tiny_config(3)).unwrap();
        for i in 0..scene.agents.len() {
            for j in (i + 1)..scene.agents.len() {
                assert_ne!(scene.agents[i].sprite, scene.agents[j].sprite);
            }
        }
    }

    #[test]
    fn panning_camera_out_of_world_names_the_frame() {
        let mut cfg = tiny_config(1);
        cfg.rigs = vec![
            RigConfig::ThirdPerson {
                path: CameraPath::Pan {
                    start: (40, 24),
                    velocity: (3, 0),
                },
            },
            RigConfig::ThirdPerson {
                path: CameraPath::Static { origin: (24, 24) },
            },
        ];
        match generate_scene(&cfg) {
            Err(Error::Generation { frame, .. }) => {
                // origin_x exceeds 48 once 40 + 3t > 48.
                assert_eq!(frame, 3);
            }
            other => panic!("expected generation error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn invalid_wearer_is_config_error() {
        let mut cfg = tiny_config(1);
        cfg.rigs.push(RigConfig::FirstPerson { wearer: 9, jitter: false });
        assert!(matches!(generate_scene(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn agents_move() {
        let scene = generate_scene(&tiny_config(5)).unwrap();
        let moving = scene
            .agents
            .iter()
            .filter(|a| a.positions.windows(2).any(|w| w[0] != w[1]))
            .count();
        assert!(moving >= 2, "expected most agents to move");
    }

    #[test]
    fn benchmark_split_counts() {
        let cfg = BenchmarkConfig::desk(1);
        assert_eq!(cfg.scenes, 9);
        let train = (0..cfg.scenes)
            .filter(|&i| cfg.scene_config(i).split == Split::Train)
            .count();
        assert_eq!(train, 6);
    }
}
