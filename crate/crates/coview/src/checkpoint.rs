//! Versioned binary checkpoint container: a JSON metadata blob (network
//! configurations) followed by named parameter tensors as little-endian
//! f32 payloads. Loading fails loudly on any name or shape mismatch.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::domain::Problem;
use crate::error::{Error, Result};
use crate::matchnet::{JointModel, MatchConfig};
use crate::nn::ParamSet;
use crate::segnet::{build_network, SegNet, SegNetConfig};

const MAGIC: &[u8; 4] = b"CVCK";
const VERSION: u32 = 1;

/// What a checkpoint holds besides raw tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// "fcn" after stage (a), "joint" after stage (b).
    pub stage: String,
    pub seg_config: SegNetConfig,
    pub match_config: Option<MatchConfig>,
    pub epoch: Option<usize>,
}

fn write_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn save(path: &Path, meta: &CheckpointMeta, params: &ParamSet) -> Result<()> {
    let meta_json = serde_json::to_vec(meta).expect("meta serializes");
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    write_u32(&mut buf, VERSION);
    write_u32(&mut buf, meta_json.len() as u32);
    buf.extend_from_slice(&meta_json);
    write_u32(&mut buf, params.len() as u32);
    for p in params.iter() {
        let name = p.name.as_bytes();
        write_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name);
        let value = p.value();
        let shape = value.shape();
        write_u32(&mut buf, shape.len() as u32);
        for &d in shape {
            write_u32(&mut buf, d as u32);
        }
        for v in value.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{}: truncated at byte {}",
                self.path.display(),
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn load(path: &Path) -> Result<(CheckpointMeta, Vec<(String, ArrayD<f32>)>)> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };

    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let meta_len = r.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?).map_err(|e| {
        Error::Checkpoint(format!("{}: bad metadata: {e}", path.display()))
    })?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{}: non-utf8 name", path.display())))?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let payload = r.take(len * 4)?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&shape), data)
            .map_err(|e| Error::Checkpoint(format!("{}: {name}: {e}", path.display())))?;
        tensors.push((name, arr));
    }
    Ok((meta, tensors))
}

/// Copy loaded tensors into an existing parameter set. The name sets must
/// match exactly in both directions and every shape must agree.
pub fn apply(tensors: &[(String, ArrayD<f32>)], params: &ParamSet) -> Result<()> {
    if tensors.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "parameter count mismatch: checkpoint has {}, network has {}",
            tensors.len(),
            params.len()
        )));
    }
    for (name, tensor) in tensors {
        let param = params
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint parameter {name} not in network")))?;
        if param.shape() != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: checkpoint shape {:?} vs network shape {:?}",
                tensor.shape(),
                param.shape()
            )));
        }
        param.set(tensor.clone());
    }
    Ok(())
}

pub fn save_segnet(path: &Path, net: &SegNet, epoch: Option<usize>) -> Result<()> {
    let meta = CheckpointMeta {
        stage: "fcn".into(),
        seg_config: net.config.clone(),
        match_config: None,
        epoch,
    };
    save(path, &meta, net.params())
}

pub fn load_segnet(path: &Path) -> Result<SegNet> {
    let (meta, tensors) = load(path)?;
    let net = build_network(&meta.seg_config, 0)?;
    apply(&tensors, net.params())?;
    Ok(net)
}

pub fn save_joint(path: &Path, model: &JointModel, epoch: Option<usize>) -> Result<()> {
    let meta = CheckpointMeta {
        stage: "joint".into(),
        seg_config: model.segnet.config.clone(),
        match_config: Some(model.match_config.clone()),
        epoch,
    };
    save(path, &meta, &model.all_params())
}

pub fn load_joint(path: &Path) -> Result<JointModel> {
    let (meta, tensors) = load(path)?;
    let match_config: MatchConfig = meta.match_config.ok_or_else(|| {
        Error::Checkpoint(format!("{}: not a joint checkpoint", path.display()))
    })?;
    let model = JointModel::build(&meta.seg_config, &match_config, 0)?;
    apply(&tensors, &model.all_params())?;
    Ok(model)
}

/// Peek at the metadata without materializing a network.
pub fn load_meta(path: &Path) -> Result<CheckpointMeta> {
    Ok(load(path)?.0)
}

/// Convenience for loading either kind of checkpoint for evaluation: a
/// bare FCN checkpoint gets a fresh (untrained) matching head attached.
pub fn load_model_for_eval(path: &Path, problem: Problem) -> Result<JointModel> {
    let (meta, tensors) = load(path)?;
    match meta.match_config {
        Some(match_config) => {
            let model = JointModel::build(&meta.seg_config, &match_config, 0)?;
            apply(&tensors, &model.all_params())?;
            Ok(model)
        }
        None => {
            let net = build_network(&meta.seg_config, 0)?;
            apply(&tensors, net.params())?;
            let match_config = MatchConfig::desk(problem, &meta.seg_config);
            JointModel::from_segnet(net, &match_config, 0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segnet::SegNetConfig;

    #[test]
    fn segnet_round_trip() {
        let cfg = SegNetConfig::desk(32, 32);
        let net = build_network(&cfg, 44).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.cvck");
        save_segnet(&path, &net, Some(3)).unwrap();
        let loaded = load_segnet(&path).unwrap();
        assert_eq!(loaded.config, cfg);
        assert_eq!(loaded.params().checksum(), net.params().checksum());
    }

    #[test]
    fn joint_round_trip() {
        let seg = SegNetConfig::desk(32, 32);
        let mc = MatchConfig::desk(Problem::ThirdFirst, &seg);
        let model = JointModel::build(&seg, &mc, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("joint.cvck");
        save_joint(&path, &model, None).unwrap();
        let loaded = load_joint(&path).unwrap();
        assert_eq!(loaded.all_params().checksum(), model.all_params().checksum());
        assert!(loaded.fp_encoder.is_some());
    }

    #[test]
    fn shape_mismatch_fails_loudly() {
        let net32 = build_network(&SegNetConfig::desk(32, 32), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.cvck");
        save_segnet(&path, &net32, None).unwrap();
        let (_, tensors) = load(&path).unwrap();
        // Same names, different backbone widths: shapes disagree.
        let mut other_cfg = SegNetConfig::desk(32, 32);
        other_cfg.stage_channels = [8, 16, 32, 32, 32];
        let other = build_network(&other_cfg, 1).unwrap();
        assert!(matches!(apply(&tensors, other.params()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn name_mismatch_fails_loudly() {
        let seg = SegNetConfig::desk(32, 32);
        let net = build_network(&seg, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.cvck");
        save_segnet(&path, &net, None).unwrap();
        let (_, tensors) = load(&path).unwrap();
        // A network with an extra stream has parameters the file lacks.
        let mut image_only = seg.clone();
        image_only.motion_stream = false;
        let other = build_network(&image_only, 1).unwrap();
        assert!(apply(&tensors, other.params()).is_err());
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let net = build_network(&SegNetConfig::desk(32, 32), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.cvck");
        save_segnet(&path, &net, None).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
    }
}
