//! Training-pair construction: positives pair the same identity across two
//! views at the same time (or a first-person window with its wearer seen
//! from a third view); negatives are drawn from the mismatched pool at a
//! configurable ratio, about 1:3 by default.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::domain::{CameraKind, ExamplePair, FirstPersonWindow, PairSide, Problem};
use crate::error::{Error, Result};

use super::{Dataset, DatasetScene, Split};

fn enumerate_third_third(scene: &DatasetScene) -> (Vec<ExamplePair>, Vec<ExamplePair>) {
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    let frames = scene.views.first().map(|v| v.frames.len()).unwrap_or(0);
    for t in 0..frames {
        for (vi, view_a) in scene.views.iter().enumerate() {
            for view_b in scene.views.iter().skip(vi + 1) {
                for inst_a in &view_a.instances[t] {
                    for inst_b in &view_b.instances[t] {
                        let pair = ExamplePair {
                            problem: Problem::ThirdThird,
                            side_a: inst_a.clone(),
                            side_b: PairSide::Instance(inst_b.clone()),
                            label: inst_a.identity == inst_b.identity,
                        };
                        if pair.label {
                            positives.push(pair);
                        } else {
                            negatives.push(pair);
                        }
                    }
                }
            }
        }
    }
    (positives, negatives)
}

fn enumerate_third_first(scene: &DatasetScene) -> (Vec<ExamplePair>, Vec<ExamplePair>) {
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    let frames = scene.views.first().map(|v| v.frames.len()).unwrap_or(0);
    for t in 0..frames {
        for fp_view in &scene.views {
            if fp_view.camera_kind != CameraKind::FirstPerson {
                continue;
            }
            let wearer = match fp_view.wearer_identity {
                Some(w) => w,
                None => continue,
            };
            let window = FirstPersonWindow {
                scene_id: scene.scene_id,
                view_id: fp_view.view_id,
                frame_index: t,
            };
            for third_view in &scene.views {
                if third_view.view_id == fp_view.view_id {
                    continue;
                }
                for inst in &third_view.instances[t] {
                    let pair = ExamplePair {
                        problem: Problem::ThirdFirst,
                        side_a: inst.clone(),
                        side_b: PairSide::FirstPerson(window.clone()),
                        label: inst.identity == wearer,
                    };
                    if pair.label {
                        positives.push(pair);
                    } else {
                        negatives.push(pair);
                    }
                }
            }
        }
    }
    (positives, negatives)
}

/// Enumerate all positives for `problem` and sample
/// `round(neg_ratio * positives)` negatives deterministically under `seed`.
/// When the negative pool is smaller than requested it is cycled.
pub fn sample_pairs(
    dataset: &Dataset,
    problem: Problem,
    neg_ratio: f64,
    seed: u64,
    split: Option<Split>,
) -> Result<Vec<ExamplePair>> {
    if neg_ratio <= 0.0 {
        return Err(Error::Parameter("negative ratio must be positive".into()));
    }
    let mut positives = Vec::new();
    let mut pool = Vec::new();
    for scene in &dataset.scenes {
        if let Some(want) = split {
            if scene.split != want {
                continue;
            }
        }
        let (pos, neg) = match problem {
            Problem::ThirdThird => enumerate_third_third(scene),
            Problem::ThirdFirst => enumerate_third_first(scene),
        };
        positives.extend(pos);
        pool.extend(neg);
    }
    if positives.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no positive {problem} pairs in the dataset"
        )));
    }

    let want_negatives = (neg_ratio * positives.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);
    let negatives: Vec<ExamplePair> = if pool.is_empty() {
        Vec::new()
    } else {
        (0..want_negatives).map(|i| pool[i % pool.len()].clone()).collect()
    };

    let mut out = positives;
    out.extend(negatives);
    Ok(out)
}
