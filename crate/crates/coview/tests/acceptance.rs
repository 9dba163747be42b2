//! Acceptance suite: one test per criterion, each printing a PASS line
//! with its measured numbers once its assertions hold.
//!
//! The training-based criteria share fixtures through lazy statics so the
//! expensive stage-(a) pass happens once per run.

use ndarray::{Array1, ArrayD, IxDyn};
use once_cell::sync::Lazy;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use coview::domain::{Frame, Identity, Mask, Problem, SoftMask};
use coview::matchnet::{
    build_match_head, contrastive_loss, pair_distance, reweight, Embedding, JointModel,
    MatchConfig, ReweightMode,
};
use coview::metrics::{average_precision, forced_choice_acc, iou};
use coview::nn::loss::{
    contrastive_value, contrastive_value_grad, seg_loss_value, seg_loss_value_grad,
};
use coview::nn::{Binding, Param};
use coview::pipeline::{copy_first_baseline, propagate_sequence, MaskPredictor, MatchResult};
use coview::segnet::{build_network, SegNetConfig};
use coview::synthdata::{
    export_dataset, generate_benchmark, BenchmarkConfig, Dataset, Split,
};
use coview::trainer::{
    mean_training_iou, sgd_update, train_fcn_stage, train_joint_stage, TrainConfig,
};

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

// criterion 1 ---------------------------------------------------------------

#[test]
fn criterion_1_loss_gradients_match_finite_differences() {
    let start = std::time::Instant::now();
    let shape = [2usize, 3, 4, 4];
    let h = 1e-6;

    // Eq. 1: pixel-summed cross entropy.
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let probs = ArrayD::from_shape_fn(IxDyn(&shape), |_| rng.random_range(0.02..0.98));
    let target = ArrayD::from_shape_fn(IxDyn(&shape), |_| f64::from(rng.random_bool(0.5)));
    let (_, grad) = seg_loss_value_grad(&probs, &target);
    let mut checked = 0usize;
    for idx in 0..probs.len() {
        let mut plus = probs.clone();
        plus.as_slice_mut().unwrap()[idx] += h;
        let mut minus = probs.clone();
        minus.as_slice_mut().unwrap()[idx] -= h;
        let fd = (seg_loss_value(&plus, &target) - seg_loss_value(&minus, &target)) / (2.0 * h);
        let an = grad.as_slice().unwrap()[idx];
        assert!(
            rel_err(an, fd) <= 1e-4,
            "Eq.1 grad mismatch at {idx}: analytic {an} vs fd {fd}"
        );
        checked += 1;
    }

    // Eq. 2: generalized contrastive loss with hinge-straddling points.
    let margin = 1.0;
    let a = ArrayD::from_shape_fn(IxDyn(&shape), |_| rng.random_range(-1.0..1.0));
    let b = ArrayD::from_shape_fn(IxDyn(&shape), |_| {
        // Half the differences inside the hinge, half saturated, none at
        // the corner itself.
        let inside = rng.random_bool(0.5);
        let mag: f64 = if inside {
            rng.random_range(0.05..0.9)
        } else {
            rng.random_range(1.1..2.0)
        };
        mag * if rng.random_bool(0.5) { 1.0 } else { -1.0 }
    });
    let b = &a - &b;
    let y = Array1::from_vec(vec![true, false]);
    let (_, ga, gb) = contrastive_value_grad(&a, &b, &y, margin);
    for idx in 0..a.len() {
        let probe = |da: f64, db: f64| {
            let mut ap = a.clone();
            ap.as_slice_mut().unwrap()[idx] += da;
            let mut bp = b.clone();
            bp.as_slice_mut().unwrap()[idx] += db;
            contrastive_value(&ap, &bp, &y, margin)
        };
        let fd_a = (probe(h, 0.0) - probe(-h, 0.0)) / (2.0 * h);
        let fd_b = (probe(0.0, h) - probe(0.0, -h)) / (2.0 * h);
        let an_a = ga.as_slice().unwrap()[idx];
        let an_b = gb.as_slice().unwrap()[idx];
        if fd_a.abs() > 1e-7 || an_a.abs() > 1e-7 {
            assert!(rel_err(an_a, fd_a) <= 1e-4, "Eq.2 grad a at {idx}: {an_a} vs {fd_a}");
        }
        if fd_b.abs() > 1e-7 || an_b.abs() > 1e-7 {
            assert!(rel_err(an_b, fd_b) <= 1e-4, "Eq.2 grad b at {idx}: {an_b} vs {fd_b}");
        }
        checked += 2;
    }

    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 60.0, "gradient checks took {secs:.1}s (budget 60s)");
    println!(
        "[criterion 1] PASS: Eq.1/Eq.2 analytic gradients match central differences \
         ({checked} elements, rel err <= 1e-4, {secs:.2}s)"
    );
}

// criterion 2 ---------------------------------------------------------------

fn ap_oracle(labels: &[bool]) -> Option<f64> {
    let positives: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter_map(|(i, &l)| l.then_some(i))
        .collect();
    if positives.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for &k in &positives {
        let hits = labels[..=k].iter().filter(|&&l| l).count();
        total += hits as f64 / (k + 1) as f64;
    }
    Some(total / positives.len() as f64)
}

#[test]
fn criterion_2_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);

    // AP vs brute force on 100 random ranked lists, exactly.
    let mut ap_cases = 0usize;
    while ap_cases < 100 {
        let n = rng.random_range(1..40);
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        match (average_precision(&labels), ap_oracle(&labels)) {
            (Some(a), Some(b)) => {
                assert!((a - b).abs() <= 1e-9, "AP {a} vs oracle {b} on {labels:?}");
                ap_cases += 1;
            }
            (None, None) => continue,
            _ => panic!("AP definedness disagrees with the oracle"),
        }
    }

    // IoU vs exhaustive pixel counting on 100 random mask pairs.
    for _ in 0..100 {
        let (w, h) = (rng.random_range(1..24), rng.random_range(1..24));
        let a = Mask::new(w, h, (0..w * h).map(|_| u8::from(rng.random_bool(0.3))).collect()).unwrap();
        let b = Mask::new(w, h, (0..w * h).map(|_| u8::from(rng.random_bool(0.3))).collect()).unwrap();
        let (mut inter, mut union) = (0usize, 0usize);
        for y in 0..h {
            for x in 0..w {
                let (pa, pb) = (a.get(x, y) == 1, b.get(x, y) == 1);
                inter += usize::from(pa && pb);
                union += usize::from(pa || pb);
            }
        }
        let oracle = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        assert!((iou(&a, &b).unwrap() - oracle).abs() <= 1e-12);
    }

    // Forced-choice ACC invariance under 10 strictly monotone transforms.
    let base: Vec<f64> = (0..12).map(|_| rng.random_range(0.01..4.0)).collect();
    let queries: Vec<Identity> = vec![Identity(1), Identity(2), Identity(3)];
    let candidates: Vec<Identity> = vec![Identity(2), Identity(3), Identity(1), Identity(4)];
    let reference = MatchResult::new(
        Problem::ThirdThird,
        queries.clone(),
        candidates.clone(),
        base.clone(),
    )
    .unwrap();
    let ref_acc = forced_choice_acc(&reference);
    for k in 0..10 {
        let scale = 0.2 + 0.5 * k as f64;
        let shift = 0.1 * k as f64;
        let transformed: Vec<f64> = base.iter().map(|&d| (scale * d + shift).exp() - 0.5).collect();
        let result = MatchResult::new(
            Problem::ThirdThird,
            queries.clone(),
            candidates.clone(),
            transformed,
        )
        .unwrap();
        assert_eq!(forced_choice_acc(&result), ref_acc, "transform {k} changed ACC");
    }

    println!(
        "[criterion 2] PASS: AP exact vs oracle on 100 lists, IoU exact on 100 mask pairs, \
         ACC invariant under 10 monotone transforms"
    );
}

// criterion 3 ---------------------------------------------------------------

#[test]
fn criterion_3_worked_scalar_examples() {
    // Eq. 1 two-pixel case: S=(1,0), predictions (0.9, 0.2).
    let probs = ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.9f64, 0.2]).unwrap();
    let target = ArrayD::from_shape_vec(IxDyn(&[2]), vec![1.0f64, 0.0]).unwrap();
    let seg = seg_loss_value(&probs, &target);
    assert!((seg - 0.3285).abs() <= 1e-4, "Eq.1 example: {seg}");

    // Eq. 2 scalar hinge case: y=0, a=0.2, b=0.5, m=1 -> (1-0.3)^2.
    let a = ArrayD::from_elem(IxDyn(&[1, 1]), 0.2f64);
    let b = ArrayD::from_elem(IxDyn(&[1, 1]), 0.5f64);
    let y = Array1::from_vec(vec![false]);
    let hinge = contrastive_value(&a, &b, &y, 1.0);
    assert!((hinge - 0.49).abs() <= 1e-9, "Eq.2 example: {hinge}");

    // SGD two-step momentum recurrence.
    let mut p = ArrayD::from_elem(IxDyn(&[1]), 1.0f64);
    let g = ArrayD::from_elem(IxDyn(&[1]), 0.5f64);
    let mut v = ArrayD::zeros(IxDyn(&[1]));
    sgd_update(&mut p, &g, &mut v, 0.1, 0.9, 0.0);
    sgd_update(&mut p, &g, &mut v, 0.1, 0.9, 0.0);
    assert!((p[[0]] - 0.855).abs() <= 1e-12, "sgd example: {}", p[[0]]);

    println!(
        "[criterion 3] PASS: Eq.1 = {seg:.4} (0.3285 +/- 1e-4), Eq.2 = {hinge:.2} (0.49 +/- 1e-9), \
         sgd two-step p = {:.3} (0.855 +/- 1e-12)",
        p[[0]]
    );
}

// criterion 4 ---------------------------------------------------------------

fn micro_benchmark(seed: u64) -> (BenchmarkConfig, Dataset) {
    let mut cfg = BenchmarkConfig::desk(seed);
    cfg.scenes = 2;
    cfg.train_scenes = 1;
    cfg.num_frames = 4;
    cfg.world = (64, 64);
    cfg.view = (32, 32);
    cfg.agent_size = (7, 9);
    let scenes = generate_benchmark(&cfg).unwrap();
    let dataset = Dataset::from_scenes(&scenes).unwrap();
    (cfg, dataset)
}

#[test]
fn criterion_4_structural_invariants() {
    // Full-Siamese swap symmetry: embeddings come from one shared network,
    // so swapping the sides of a pair leaves loss and distance unchanged.
    let seg_cfg = SegNetConfig::desk(32, 32);
    let match_cfg = MatchConfig::desk(Problem::ThirdThird, &seg_cfg);
    let model = JointModel::build(&seg_cfg, &match_cfg, 41).unwrap();
    let (_, dataset) = micro_benchmark(404);
    let seq = &dataset.scenes[0].views[0];
    let make_emb = |t: usize, idx: usize| -> Embedding {
        let inst = &seq.instances[t][idx];
        let pre = inst.gt_mask.clone().unwrap();
        let idxs = coview::domain::flow_window_indices(seq.flows.len(), t, 5);
        let flows: Vec<&coview::domain::FlowField> = idxs.iter().map(|&i| &seq.flows[i]).collect();
        let binding = Binding::new(false);
        let (_, emb) = model
            .embed_third(&binding, &seq.frames[t], &flows, &pre, None)
            .unwrap();
        Embedding::from_var(&emb)
    };
    let ea = make_emb(1, 0);
    let eb = make_emb(2, 0);
    for y in [true, false] {
        let fwd = contrastive_loss(&[ea.clone()], &[eb.clone()], &[y], 1.0).unwrap();
        let swapped = contrastive_loss(&[eb.clone()], &[ea.clone()], &[y], 1.0).unwrap();
        assert!(
            (fwd - swapped).abs() <= 1e-6,
            "swap asymmetry: {fwd} vs {swapped} (y={y})"
        );
    }
    let d_ab = pair_distance(&ea, &eb).unwrap();
    let d_ba = pair_distance(&eb, &ea).unwrap();
    assert!((d_ab - d_ba).abs() <= 1e-6);

    // Semi-Siamese parameter identity: the embedding head reachable from
    // both branches is the same object; shallow stages are distinct.
    let tf_cfg = MatchConfig::desk(Problem::ThirdFirst, &seg_cfg);
    let tf = JointModel::build(&seg_cfg, &tf_cfg, 42).unwrap();
    let enc = tf.fp_encoder.as_ref().expect("third-first has an encoder");
    for p in tf.head.params().iter() {
        let through_third = tf.head.params().get(&p.name).unwrap();
        let through_first = tf.head.params().get(&p.name).unwrap();
        assert!(
            Param::same_storage(through_third, through_first),
            "embedding head must be one object"
        );
    }
    for p in enc.params().iter() {
        let seg_name = p.name.replace("fpenc.", "seg.");
        if let Some(seg_p) = tf.segnet.params().get(&seg_name) {
            assert!(
                !Param::same_storage(p, seg_p),
                "shallow stages must be branch-specific objects"
            );
        }
    }

    // Exact bitwise FCN freeze through joint epochs 1..20.
    let (_, dataset) = micro_benchmark(405);
    let model = JointModel::build(&seg_cfg, &match_cfg, 43).unwrap();
    let pairs = coview::synthdata::sample_pairs(&dataset, Problem::ThirdThird, 1.0, 3, Some(Split::Train)).unwrap();
    let before = model.segnet.params().checksum();
    let head_before = model.head.params().checksum();
    let mut cfg = TrainConfig::desk_joint(9, Problem::ThirdThird);
    cfg.epochs = 20;
    cfg.frozen_epochs = 20;
    cfg.samples_per_epoch = Some(6);
    cfg.batch_size = 3;
    train_joint_stage(&model, &dataset, &pairs, &cfg).unwrap();
    assert_eq!(
        model.segnet.params().checksum(),
        before,
        "FCN parameters changed during the frozen epochs"
    );
    assert_ne!(
        model.head.params().checksum(),
        head_before,
        "matching head failed to train during the frozen epochs"
    );
    // One more epoch with the freeze lifted must move the FCN.
    let mut cfg2 = cfg.clone();
    cfg2.epochs = 1;
    cfg2.frozen_epochs = 0;
    train_joint_stage(&model, &dataset, &pairs, &cfg2).unwrap();
    assert_ne!(
        model.segnet.params().checksum(),
        before,
        "FCN parameters must update once unfrozen"
    );

    // Wearer exclusion for every generated first-person view.
    let bench = BenchmarkConfig::desk(77);
    let scenes = generate_benchmark(&bench).unwrap();
    let mut fp_views = 0usize;
    for scene in &scenes {
        let ds = Dataset::from_scenes(std::slice::from_ref(scene)).unwrap();
        for view in &ds.scenes[0].views {
            if let Some(wearer) = view.wearer_identity {
                fp_views += 1;
                for frame_insts in &view.instances {
                    assert!(
                        frame_insts.iter().all(|i| i.identity != wearer),
                        "wearer {wearer} visible in its own view"
                    );
                }
            }
        }
    }
    assert!(fp_views >= 18, "expected first-person views in every scene");

    println!(
        "[criterion 4] PASS: swap symmetry <= 1e-6, semi-Siamese head is one object with \
         branch-specific stages, bitwise FCN freeze over 20 frozen epochs, wearer exclusion \
         across {fp_views} first-person views"
    );
}

// criterion 5 ---------------------------------------------------------------

struct EchoPredictor;

impl MaskPredictor for EchoPredictor {
    fn predict_soft(
        &self,
        _: &Frame,
        _: &[&coview::domain::FlowField],
        pre_mask: &Mask,
    ) -> coview::Result<SoftMask> {
        Ok(pre_mask.to_soft())
    }
}

#[test]
fn criterion_5_propagation_identity() {
    let (w, h) = (32, 32);
    let mut first = Mask::zeros(w, h);
    for y in 8..20 {
        for x in 10..22 {
            first.data[y * w + x] = 1;
        }
    }
    let frames: Vec<Frame> = (0..20).map(|_| Frame::new(w, h, vec![0.4; w * h * 3]).unwrap()).collect();
    let flows: Vec<coview::domain::FlowField> =
        (0..19).map(|_| coview::domain::FlowField::zeros(w, h)).collect();

    let prop = propagate_sequence(&EchoPredictor, &frames, &flows, &first).unwrap();
    assert_eq!(prop.masks.len(), 20);
    for t in 0..20 {
        assert_eq!(iou(&prop.masks[t], &first).unwrap(), 1.0, "IoU must be 1.0 at frame {t}");
    }
    let copy = copy_first_baseline(&first, 20);
    assert_eq!(prop, copy, "echo propagation must equal copy-first bit for bit");

    println!(
        "[criterion 5] PASS: pre-mask-echo stub reproduces the first mask over 20 frames \
         (IoU = 1.0) and equals copy_first_baseline bit for bit"
    );
}

// criterion 8 (structural half) ----------------------------------------------

#[test]
fn criterion_8_uniform_attention_matches_mode_none() {
    let seg_cfg = SegNetConfig::desk(64, 64);
    let match_cfg = MatchConfig::desk(Problem::ThirdThird, &seg_cfg);
    let head = build_match_head(&match_cfg, &seg_cfg, 55).unwrap();

    let feat = |rng: &mut ChaCha8Rng| {
        coview::nn::Var::constant(ArrayD::from_shape_fn(IxDyn(&[64, 4, 4]), |_| {
            rng.random_range(-1.0f32..1.0)
        }))
    };
    // Foreground probability exactly 1 everywhere.
    let mut probs = ArrayD::zeros(IxDyn(&[2, 64, 64]));
    probs.index_axis_mut(ndarray::Axis(0), 1).fill(1.0f32);
    let probs = coview::nn::Var::constant(probs);

    let mut distances = Vec::new();
    for mode in [ReweightMode::SoftAttention, ReweightMode::None] {
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        let (sa, ta) = (feat(&mut rng), feat(&mut rng));
        let (sb, tb) = (feat(&mut rng), feat(&mut rng));
        let binding = Binding::new(false);
        let (sa2, ta2) = reweight(Some(&sa), Some(&ta), &probs, mode, Problem::ThirdThird, None).unwrap();
        let ea = head.embed(sa2.as_ref(), ta2.as_ref(), &binding).unwrap();
        let (sb2, tb2) = reweight(Some(&sb), Some(&tb), &probs, mode, Problem::ThirdThird, None).unwrap();
        let eb = head.embed(sb2.as_ref(), tb2.as_ref(), &binding).unwrap();
        distances.push(
            pair_distance(&Embedding::from_var(&ea), &Embedding::from_var(&eb)).unwrap(),
        );
    }
    assert!(
        (distances[0] - distances[1]).abs() <= 1e-6 * distances[1].abs().max(1.0),
        "attention==1 must match mode none: {} vs {}",
        distances[0],
        distances[1]
    );
    println!(
        "[criterion 8a] PASS: soft attention with confidence 1 gives distances identical to \
         mode none ({:.6} vs {:.6})",
        distances[0], distances[1]
    );
}

// criterion 9 ---------------------------------------------------------------

#[test]
fn criterion_9_determinism() {
    // gen twice with the same seed: byte-identical manifests.
    let mut cfg = BenchmarkConfig::desk(909);
    cfg.scenes = 2;
    cfg.train_scenes = 1;
    cfg.num_frames = 4;
    cfg.view = (32, 32);
    cfg.world = (64, 64);
    cfg.agent_size = (7, 9);
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    export_dataset(&generate_benchmark(&cfg).unwrap(), d1.path()).unwrap();
    export_dataset(&generate_benchmark(&cfg).unwrap(), d2.path()).unwrap();
    let m1 = std::fs::read(d1.path().join("manifest.json")).unwrap();
    let m2 = std::fs::read(d2.path().join("manifest.json")).unwrap();
    assert_eq!(m1, m2, "manifests differ between identically seeded runs");

    // 3-epoch training repeated with the same seed: identical trajectories.
    let (_, dataset) = micro_benchmark(910);
    let run = || {
        let net = build_network(&SegNetConfig::desk(32, 32), 24).unwrap();
        let mut cfg = TrainConfig::desk_fcn(25);
        cfg.epochs = 3;
        cfg.samples_per_epoch = Some(12);
        cfg.batch_size = 4;
        train_fcn_stage(&net, &dataset, &cfg).unwrap().losses()
    };
    let (l1, l2) = (run(), run());
    assert_eq!(l1.len(), 3);
    for (a, b) in l1.iter().zip(&l2) {
        assert!((a - b).abs() <= 1e-6, "loss trajectories diverge: {a} vs {b}");
    }

    println!(
        "[criterion 9] PASS: identical manifests under one seed; 3-epoch loss trajectories \
         agree within 1e-6 ({l1:?})"
    );
}

// criterion 6 ---------------------------------------------------------------

#[test]
fn criterion_6_overfit_single_scene() {
    let start = std::time::Instant::now();
    // One scene, 8 frames, 64x64, desk backbone. Two 16-20 px agents and a
    // jitter-free first-person rig keep every instance learnable at the
    // FCN8s head's stride-8 detail limit.
    let mut bench = BenchmarkConfig::desk(606);
    bench.scenes = 2;
    bench.train_scenes = 1;
    bench.num_frames = 8;
    bench.num_agents = 2;
    bench.agent_size = (16, 20);
    bench.max_speed = 1;
    bench.first_person_rigs = 1;
    bench.camera_jitter = false;
    let scenes = generate_benchmark(&bench).unwrap();
    let dataset = Dataset::from_scenes(&scenes[..1]).unwrap();

    let net = build_network(&SegNetConfig::desk(64, 64), 7).unwrap();
    let mut cfg = TrainConfig::desk_fcn(1);
    cfg.lr = 1.2e-5;
    cfg.batch_size = 4;
    cfg.epochs = 30;
    let history = train_fcn_stage(&net, &dataset, &cfg).unwrap();
    let train_iou = mean_training_iou(&net, &dataset, Some(Split::Train)).unwrap();
    let secs = start.elapsed().as_secs_f64();

    assert!(
        history.losses().last().unwrap() < history.losses().first().unwrap(),
        "loss must decrease over training"
    );
    assert!(
        train_iou >= 0.90,
        "overfit training IoU {train_iou:.4} below 0.90 after 30 epochs"
    );
    assert!(secs <= 600.0, "overfit run took {secs:.0}s (budget 600s)");

    println!(
        "[criterion 6] PASS: stage-(a) overfit on 1 scene reaches training IoU {train_iou:.3} \
         (>= 0.90) within 30 epochs in {secs:.0}s (<= 600s)"
    );
}

// criteria 7 and 8 (trained benchmark) ---------------------------------------

struct BenchFixture {
    dataset: Dataset,
    two_stream: JointModel,
    image_only: coview::segnet::SegNet,
    flow_only: coview::segnet::SegNet,
    stage_a: coview::segnet::SegNet,
    elapsed: f64,
}

static BENCH: Lazy<BenchFixture> = Lazy::new(|| {
    let start = std::time::Instant::now();
    let bench = BenchmarkConfig::desk(11);
    let scenes = generate_benchmark(&bench).unwrap();
    let dataset = Dataset::from_scenes(&scenes).unwrap();

    let seg_cfg = SegNetConfig::desk(64, 64);
    let mut fcn_cfg = TrainConfig::desk_fcn(1);
    fcn_cfg.epochs = 14;
    fcn_cfg.samples_per_epoch = Some(300);

    let net = build_network(&seg_cfg, 7).unwrap();
    train_fcn_stage(&net, &dataset, &fcn_cfg).unwrap();
    let stage_a = net.clone_detached().unwrap();

    // Single-stream variants need a gentler rate to stay stable on the
    // benchmark distribution.
    let mut single_cfg = fcn_cfg.clone();
    single_cfg.lr = 3e-6;

    let mut img_cfg = seg_cfg.clone();
    img_cfg.motion_stream = false;
    let image_only = build_network(&img_cfg, 7).unwrap();
    train_fcn_stage(&image_only, &dataset, &single_cfg).unwrap();

    let mut flow_cfg = seg_cfg.clone();
    flow_cfg.visual_stream = false;
    let flow_only = build_network(&flow_cfg, 7).unwrap();
    train_fcn_stage(&flow_only, &dataset, &single_cfg).unwrap();

    let match_cfg = MatchConfig::desk(Problem::ThirdThird, &seg_cfg);
    let two_stream = JointModel::from_segnet(net, &match_cfg, 7).unwrap();
    let pairs =
        coview::synthdata::sample_pairs(&dataset, Problem::ThirdThird, 3.0, 5, Some(Split::Train))
            .unwrap();
    let mut joint_cfg = TrainConfig::desk_joint(2, Problem::ThirdThird);
    joint_cfg.epochs = 12;
    joint_cfg.frozen_epochs = 4;
    joint_cfg.samples_per_epoch = Some(200);
    train_joint_stage(&two_stream, &dataset, &pairs, &joint_cfg).unwrap();

    BenchFixture {
        dataset,
        two_stream,
        image_only,
        flow_only,
        stage_a,
        elapsed: start.elapsed().as_secs_f64(),
    }
});

#[test]
fn criterion_7_desk_benchmark_ordering() {
    let fx = &*BENCH;
    let start = std::time::Instant::now();
    let test_scenes = fx.dataset.split(Split::Test);

    let mean_of = |seqs: &[coview::metrics::SequenceIou]| {
        seqs.iter().map(|s| s.mean_iou).sum::<f64>() / seqs.len() as f64
    };
    let two_iou = mean_of(&coview::evalrun::segmentation_scores(&fx.two_stream.segnet, &test_scenes).unwrap());
    let img_iou = mean_of(&coview::evalrun::segmentation_scores(&fx.image_only, &test_scenes).unwrap());
    let flow_iou = mean_of(&coview::evalrun::segmentation_scores(&fx.flow_only, &test_scenes).unwrap());
    let copy_iou = coview::evalrun::copy_first_iou(&test_scenes).unwrap();

    println!(
        "[criterion 7] IoU: two-stream {two_iou:.4} | flow-only {flow_iou:.4} | \
         image-only {img_iou:.4} | copy-first {copy_iou:.4}"
    );
    assert!(
        two_iou >= copy_iou + 0.05,
        "two-stream ({two_iou:.4}) must beat copy-first ({copy_iou:.4}) by >= 5 points"
    );
    assert!(
        two_iou >= img_iou + 0.02,
        "two-stream ({two_iou:.4}) must beat image-only ({img_iou:.4}) by >= 2 points"
    );

    // Forced-choice accuracy over three-candidate matrices (third-third).
    let results =
        coview::evalrun::match_all_views(&fx.two_stream, &test_scenes, Problem::ThirdThird).unwrap();
    let (acc33, n33) = three_candidate_acc(&results);
    assert!(
        acc33 >= 0.55,
        "third-third 3-candidate ACC {acc33:.4} below 0.55 ({n33} queries)"
    );

    // Third-first model: shares the stage-(a) weights, own head + encoder.
    let tf_cfg = MatchConfig::desk(Problem::ThirdFirst, &fx.stage_a.config);
    let tf_model =
        JointModel::from_segnet(fx.stage_a.clone_detached().unwrap(), &tf_cfg, 8).unwrap();
    let tf_pairs = coview::synthdata::sample_pairs(
        &fx.dataset,
        Problem::ThirdFirst,
        3.0,
        6,
        Some(Split::Train),
    )
    .unwrap();
    let mut tf_train = TrainConfig::desk_joint(3, Problem::ThirdFirst);
    tf_train.epochs = 12;
    tf_train.frozen_epochs = 4;
    tf_train.samples_per_epoch = Some(200);
    train_joint_stage(&tf_model, &fx.dataset, &tf_pairs, &tf_train).unwrap();

    let tf_results =
        coview::evalrun::match_all_views(&tf_model, &test_scenes, Problem::ThirdFirst).unwrap();
    let (acc31, n31) = three_candidate_acc(&tf_results);
    assert!(
        acc31 >= 0.55,
        "third-first 3-candidate ACC {acc31:.4} below 0.55 ({n31} queries)"
    );

    let total = fx.elapsed + start.elapsed().as_secs_f64();
    assert!(total <= 3600.0, "benchmark run took {total:.0}s (budget 1h CPU)");
    println!(
        "[criterion 7] PASS: two-stream IoU {two_iou:.3} beats copy-first {copy_iou:.3} by \
         {:.1} pts (>= 5) and image-only {img_iou:.3} by {:.1} pts (>= 2); third-third ACC \
         {acc33:.3} and third-first ACC {acc31:.3} (both >= 0.55, 3 candidates); total \
         {total:.0}s (<= 3600s)",
        100.0 * (two_iou - copy_iou),
        100.0 * (two_iou - img_iou)
    );
}

fn three_candidate_acc(results: &[MatchResult]) -> (f64, usize) {
    let mut correct = 0.0;
    let mut n = 0usize;
    for r in results.iter().filter(|r| r.candidate_ids.len() == 3) {
        let (acc, excl) = forced_choice_acc(r);
        let scored = r.query_ids.len() - excl;
        correct += acc * scored as f64;
        n += scored;
    }
    (correct / n.max(1) as f64, n)
}

#[test]
fn criterion_8_reweighting_modes_run_end_to_end() {
    let fx = &*BENCH;
    let test_scenes = fx.dataset.split(Split::Test);
    let pairs =
        coview::synthdata::sample_pairs(&fx.dataset, Problem::ThirdThird, 3.0, 5, Some(Split::Train))
            .unwrap();

    let mut reports = Vec::new();
    for mode in [ReweightMode::None, ReweightMode::BoundingBox, ReweightMode::SoftAttention] {
        let mut mc = MatchConfig::desk(Problem::ThirdThird, &fx.stage_a.config);
        mc.reweight_mode = mode;
        let model =
            JointModel::from_segnet(fx.stage_a.clone_detached().unwrap(), &mc, 9).unwrap();
        let mut cfg = TrainConfig::desk_joint(4, Problem::ThirdThird);
        cfg.epochs = 4;
        cfg.frozen_epochs = 2;
        cfg.samples_per_epoch = Some(120);
        train_joint_stage(&model, &fx.dataset, &pairs, &cfg).unwrap();
        let report = coview::evalrun::evaluate(
            &model,
            &fx.dataset,
            Split::Test,
            Problem::ThirdThird,
            &format!("reweight-{mode}"),
            "desk-benchmark",
        )
        .unwrap();
        report.validate().unwrap();
        println!(
            "[criterion 8] mode {mode}: IoU {:.4} mAP {:.4} ACC {:.4}",
            report.mean_iou, report.map, report.acc
        );
        reports.push((mode, report));
    }
    assert_eq!(reports.len(), 3);
    let _ = test_scenes;
    println!(
        "[criterion 8] PASS: all three re-weighting modes trained and evaluated end-to-end \
         with comparable reports"
    );
}
