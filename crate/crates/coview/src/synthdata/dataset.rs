//! On-disk dataset format: a JSON manifest, 8-bit PNG frames, identity-map
//! mask PNGs (pixel value = identity, 0 = background) and a little-endian
//! binary flow format with magic "CVFL".

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::{CameraKind, FlowField, Frame, Identity, Mask, PersonInstance, Sequence};
use crate::error::{Error, Result};

use super::{scene_sequences, SceneSpec, Split};

pub const FLOW_MAGIC: &[u8; 4] = b"CVFL";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestView {
    pub view_id: u32,
    pub camera_kind: CameraKind,
    pub wearer_identity: Option<u32>,
    pub frames: Vec<String>,
    pub masks: Vec<String>,
    pub flows: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestScene {
    pub scene_id: u32,
    pub split: Split,
    pub identities: Vec<u32>,
    pub views: Vec<ManifestView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub scenes: Vec<ManifestScene>,
}

/// Write a flow field: magic, u32 width, u32 height, then
/// height x width x 2 little-endian f32 (u, v).
pub fn write_flow_file(path: &Path, flow: &FlowField) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + flow.data.len() * 4);
    buf.extend_from_slice(FLOW_MAGIC);
    buf.extend_from_slice(&(flow.width as u32).to_le_bytes());
    buf.extend_from_slice(&(flow.height as u32).to_le_bytes());
    for v in &flow.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_flow_file(path: &Path) -> Result<FlowField> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut header = [0u8; 12];
    file.read_exact(&mut header).map_err(|e| Error::io(path, e))?;
    if &header[0..4] != FLOW_MAGIC {
        return Err(Error::Integrity(format!(
            "{}: bad flow magic {:?}",
            path.display(),
            &header[0..4]
        )));
    }
    let width = u32::from_le_bytes(header[4..8].try_into().expect("4 bytes")) as usize;
    let height = u32::from_le_bytes(header[8..12].try_into().expect("4 bytes")) as usize;
    let mut payload = Vec::new();
    file.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
    let expect = width * height * 2 * 4;
    if payload.len() != expect {
        return Err(Error::Integrity(format!(
            "{}: flow payload is {} bytes, expected {expect}",
            path.display(),
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    FlowField::new(width, height, data)
}

fn write_frame_png(path: &Path, frame: &Frame) -> Result<()> {
    let bytes: Vec<u8> = frame
        .data
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let img = image::RgbImage::from_raw(frame.width as u32, frame.height as u32, bytes)
        .expect("frame buffer size");
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn read_frame_png(path: &Path) -> Result<Frame> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().iter().map(|&v| v as f32 / 255.0).collect();
    Frame::new(w, h, data)
}

/// Mask PNG: grayscale, pixel value = identity id (0 = background).
fn write_mask_png(path: &Path, masks: &[(Identity, &Mask)], width: usize, height: usize) -> Result<()> {
    let mut bytes = vec![0u8; width * height];
    for (id, mask) in masks {
        for (i, &m) in mask.data.iter().enumerate() {
            if m == 1 {
                bytes[i] = u8::try_from(id.0).expect("identity fits in u8");
            }
        }
    }
    let img = image::GrayImage::from_raw(width as u32, height as u32, bytes).expect("mask buffer size");
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn read_mask_png(path: &Path) -> Result<Vec<(Identity, Mask)>> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    let mut ids: Vec<u8> = raw.iter().copied().filter(|&v| v != 0).collect();
    ids.sort_unstable();
    ids.dedup();
    Ok(ids
        .into_iter()
        .map(|id| {
            let data = raw.iter().map(|&v| u8::from(v == id)).collect();
            (Identity(id as u32), Mask { width: w, height: h, data })
        })
        .collect())
}

/// Render and write a dataset. Returns the manifest, which is also saved
/// as `manifest.json` under the root.
pub fn export_dataset(scenes: &[SceneSpec], root: &Path) -> Result<DatasetManifest> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut manifest = DatasetManifest {
        schema_version: SCHEMA_VERSION,
        scenes: Vec::with_capacity(scenes.len()),
    };
    for scene in scenes {
        let scene_dir = format!("scene_{:03}", scene.config.scene_id);
        let mut views = Vec::new();
        for seq in scene_sequences(scene)? {
            let view_dir = root.join(&scene_dir).join(format!("view_{:02}", seq.view_id));
            fs::create_dir_all(&view_dir).map_err(|e| Error::io(&view_dir, e))?;
            let rel = |name: &str| format!("{scene_dir}/view_{:02}/{name}", seq.view_id);

            let mut frames = Vec::new();
            let mut masks = Vec::new();
            let mut flows = Vec::new();
            for (t, frame) in seq.frames.iter().enumerate() {
                let frame_name = format!("frame_{t:03}.png");
                write_frame_png(&view_dir.join(&frame_name), frame)?;
                frames.push(rel(&frame_name));

                let mask_name = format!("mask_{t:03}.png");
                let with_masks: Vec<(Identity, &Mask)> = seq.instances[t]
                    .iter()
                    .filter_map(|inst| inst.gt_mask.as_ref().map(|m| (inst.identity, m)))
                    .collect();
                write_mask_png(&view_dir.join(&mask_name), &with_masks, frame.width, frame.height)?;
                masks.push(rel(&mask_name));
            }
            for (t, flow) in seq.flows.iter().enumerate() {
                let flow_name = format!("flow_{t:03}.cvfl");
                write_flow_file(&view_dir.join(&flow_name), flow)?;
                flows.push(rel(&flow_name));
            }
            views.push(ManifestView {
                view_id: seq.view_id,
                camera_kind: seq.camera_kind,
                wearer_identity: seq.wearer_identity.map(|id| id.0),
                frames,
                masks,
                flows,
            });
        }
        manifest.scenes.push(ManifestScene {
            scene_id: scene.config.scene_id,
            split: scene.config.split,
            identities: scene.agents.iter().map(|a| a.identity.0).collect(),
            views,
        });
    }

    let manifest_path = root.join("manifest.json");
    let mut file = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    file.write_all(json.as_bytes()).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest)
}

/// One loaded scene: its views as fully populated [`Sequence`]s.
#[derive(Debug, Clone)]
pub struct DatasetScene {
    pub scene_id: u32,
    pub split: Split,
    pub identities: Vec<Identity>,
    pub views: Vec<Sequence>,
}

/// An in-memory dataset, either imported from disk or built directly from
/// generated scenes.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub scenes: Vec<DatasetScene>,
}

impl Dataset {
    /// Build directly from resolved scenes without touching disk.
    pub fn from_scenes(scenes: &[SceneSpec]) -> Result<Dataset> {
        let scenes = scenes
            .iter()
            .map(|scene| {
                Ok(DatasetScene {
                    scene_id: scene.config.scene_id,
                    split: scene.config.split,
                    identities: scene.agents.iter().map(|a| a.identity).collect(),
                    views: scene_sequences(scene)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Dataset { scenes })
    }

    pub fn split(&self, split: Split) -> Vec<&DatasetScene> {
        self.scenes.iter().filter(|s| s.split == split).collect()
    }

    pub fn scene(&self, scene_id: u32) -> Option<&DatasetScene> {
        self.scenes.iter().find(|s| s.scene_id == scene_id)
    }
}

fn resolve(root: &Path, rel: &str) -> Result<PathBuf> {
    let path = root.join(rel);
    if !path.exists() {
        return Err(Error::Integrity(format!(
            "manifest references missing file {rel}"
        )));
    }
    Ok(path)
}

/// Load a dataset from disk, verifying the manifest's integrity.
pub fn import_dataset(root: &Path) -> Result<Dataset> {
    let manifest_path = root.join("manifest.json");
    let json = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&json).map_err(|e| Error::Json {
        path: manifest_path.clone(),
        message: e.to_string(),
    })?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::Integrity(format!(
            "unsupported schema version {}",
            manifest.schema_version
        )));
    }

    let mut scenes = Vec::with_capacity(manifest.scenes.len());
    for ms in &manifest.scenes {
        let mut views = Vec::with_capacity(ms.views.len());
        for mv in &ms.views {
            if mv.flows.len() + 1 != mv.frames.len() || mv.masks.len() != mv.frames.len() {
                return Err(Error::Integrity(format!(
                    "scene {} view {}: {} frames, {} masks, {} flows",
                    ms.scene_id,
                    mv.view_id,
                    mv.frames.len(),
                    mv.masks.len(),
                    mv.flows.len()
                )));
            }
            let mut frames = Vec::with_capacity(mv.frames.len());
            let mut instances = Vec::with_capacity(mv.frames.len());
            for (t, (frame_rel, mask_rel)) in mv.frames.iter().zip(&mv.masks).enumerate() {
                frames.push(read_frame_png(&resolve(root, frame_rel)?)?);
                let id_masks = read_mask_png(&resolve(root, mask_rel)?)?;
                if let Some(wearer) = mv.wearer_identity {
                    if id_masks.iter().any(|(id, _)| id.0 == wearer) {
                        return Err(Error::Integrity(format!(
                            "scene {} view {}: wearer {wearer} appears in its own view at frame {t}",
                            ms.scene_id, mv.view_id
                        )));
                    }
                }
                instances.push(
                    id_masks
                        .into_iter()
                        .map(|(identity, mask)| PersonInstance {
                            scene_id: ms.scene_id,
                            view_id: mv.view_id,
                            frame_index: t,
                            identity,
                            gt_mask: Some(mask),
                        })
                        .collect(),
                );
            }
            let flows = mv
                .flows
                .iter()
                .map(|rel| read_flow_file(&resolve(root, rel)?))
                .collect::<Result<Vec<_>>>()?;
            views.push(Sequence {
                scene_id: ms.scene_id,
                view_id: mv.view_id,
                camera_kind: mv.camera_kind,
                wearer_identity: mv.wearer_identity.map(Identity),
                frames,
                flows,
                instances,
            });
        }
        scenes.push(DatasetScene {
            scene_id: ms.scene_id,
            split: ms.split,
            identities: ms.identities.iter().map(|&id| Identity(id)).collect(),
            views,
        });
    }
    Ok(Dataset { scenes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_scene, tests::tiny_config};
    use proptest::prelude::*;

    #[test]
    fn export_import_round_trips_bit_for_bit() {
        let scene = generate_scene(&tiny_config(21)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_dataset(std::slice::from_ref(&scene), dir.path()).unwrap();
        let loaded = import_dataset(dir.path()).unwrap();
        let direct = Dataset::from_scenes(std::slice::from_ref(&scene)).unwrap();

        assert_eq!(loaded.scenes.len(), 1);
        for (a, b) in loaded.scenes[0].views.iter().zip(&direct.scenes[0].views) {
            assert_eq!(a.frames, b.frames);
            assert_eq!(a.flows, b.flows);
            assert_eq!(a.wearer_identity, b.wearer_identity);
            for (ia, ib) in a.instances.iter().zip(&b.instances) {
                let mut ia = ia.clone();
                let mut ib = ib.clone();
                ia.sort_by_key(|i| i.identity);
                ib.sort_by_key(|i| i.identity);
                assert_eq!(ia, ib);
            }
        }
    }

    #[test]
    fn export_twice_same_seed_gives_identical_manifests() {
        let scene = generate_scene(&tiny_config(23)).unwrap();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = export_dataset(std::slice::from_ref(&scene), d1.path()).unwrap();
        let m2 = export_dataset(std::slice::from_ref(&scene), d2.path()).unwrap();
        assert_eq!(m1, m2);
        let j1 = std::fs::read(d1.path().join("manifest.json")).unwrap();
        let j2 = std::fs::read(d2.path().join("manifest.json")).unwrap();
        assert_eq!(j1, j2);
    }

    #[test]
    fn corrupt_flow_magic_is_rejected() {
        let scene = generate_scene(&tiny_config(25)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = export_dataset(std::slice::from_ref(&scene), dir.path()).unwrap();
        let flow_rel = &manifest.scenes[0].views[0].flows[0];
        let flow_path = dir.path().join(flow_rel);
        let mut bytes = std::fs::read(&flow_path).unwrap();
        bytes[0..4].copy_from_slice(b"XXXX");
        std::fs::write(&flow_path, bytes).unwrap();
        match import_dataset(dir.path()) {
            Err(Error::Integrity(msg)) => assert!(msg.contains("magic")),
            other => panic!("expected integrity error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn missing_file_is_integrity_error() {
        let scene = generate_scene(&tiny_config(27)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = export_dataset(std::slice::from_ref(&scene), dir.path()).unwrap();
        std::fs::remove_file(dir.path().join(&manifest.scenes[0].views[0].frames[2])).unwrap();
        assert!(matches!(import_dataset(dir.path()), Err(Error::Integrity(_))));
    }

    #[test]
    fn exported_first_person_views_exclude_wearer() {
        let scene = generate_scene(&tiny_config(29)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_dataset(std::slice::from_ref(&scene), dir.path()).unwrap();
        let loaded = import_dataset(dir.path()).unwrap();
        for view in &loaded.scenes[0].views {
            if let Some(wearer) = view.wearer_identity {
                for frame_insts in &view.instances {
                    assert!(frame_insts.iter().all(|i| i.identity != wearer));
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn flow_file_round_trip(w in 1usize..12, h in 1usize..12, seed in any::<u64>()) {
            let data: Vec<f32> = (0..w * h * 2)
                .map(|i| {
                    let x = seed.wrapping_mul(6364136223846793005).wrapping_add(i as u64);
                    ((x >> 32) as i32 as f32) / 65536.0
                })
                .collect();
            let flow = FlowField::new(w, h, data).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("f.cvfl");
            write_flow_file(&path, &flow).unwrap();
            let back = read_flow_file(&path).unwrap();
            prop_assert_eq!(flow, back);
        }
    }
}
