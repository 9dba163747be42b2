// Scratch harness: full desk-benchmark run for margin tuning.
use std::time::Instant;

use coview::domain::Problem;
use coview::evalrun::{copy_first_iou, evaluate, match_all_views, match_all_views_with, segmentation_scores};
use coview::pipeline::Aggregation;
use coview::matchnet::{JointModel, MatchConfig};
use coview::metrics::forced_choice_acc;
use coview::segnet::{build_network, SegNetConfig};
use coview::synthdata::{generate_benchmark, BenchmarkConfig, Dataset, Split};
use coview::trainer::{train_fcn_stage, train_joint_stage, TrainConfig};

fn env_usize(name: &str, default: usize) -> usize {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn env_f64(name: &str, default: f64) -> f64 {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() {
    let t_all = Instant::now();
    let fcn_epochs = env_usize("B_FCN_EPOCHS", 14);
    let fcn_cap = env_usize("B_FCN_CAP", 300);
    let joint_epochs = env_usize("B_JOINT_EPOCHS", 12);
    let joint_frozen = env_usize("B_JOINT_FROZEN", 4);
    let joint_cap = env_usize("B_JOINT_CAP", 200);
    let joint_lr = env_f64("B_JOINT_LR", 1e-5);
    let lam = env_f64("B_LAMBDA", TrainConfig::desk_joint(0, Problem::ThirdThird).loss_mix);

    let mut bench = BenchmarkConfig::desk(11);
    if std::env::var("B_NO_JITTER").is_ok() {
        bench.camera_jitter = false;
    }
    let scenes = generate_benchmark(&bench).unwrap();
    let dataset = Dataset::from_scenes(&scenes).unwrap();
    println!("dataset ready at {:.1}s", t_all.elapsed().as_secs_f64());

    // Stage a, two-stream.
    let seg_cfg = SegNetConfig::desk(64, 64);
    let net = build_network(&seg_cfg, 7).unwrap();
    let mut cfg = TrainConfig::desk_fcn(1);
    cfg.lr = env_f64("B_FCN_LR", cfg.lr);
    cfg.epochs = fcn_epochs;
    cfg.samples_per_epoch = Some(fcn_cap);
    let t0 = Instant::now();
    let hist = train_fcn_stage(&net, &dataset, &cfg).unwrap();
    println!("stage a (two-stream): {:.1}s", t0.elapsed().as_secs_f64());
    let losses = hist.losses();
    println!("  losses: {:?}", losses.iter().map(|v| *v as i64).collect::<Vec<_>>());

    // Stage a, image-only and flow-only variants.
    let mut single_cfg = cfg.clone();
    single_cfg.lr = env_f64("B_SINGLE_LR", cfg.lr);

    let mut img_cfg = seg_cfg.clone();
    img_cfg.motion_stream = false;
    let img_net = build_network(&img_cfg, 7).unwrap();
    let t0 = Instant::now();
    let img_hist = train_fcn_stage(&img_net, &dataset, &single_cfg).unwrap();
    println!("stage a (image-only): {:.1}s", t0.elapsed().as_secs_f64());
    println!("  losses: {:?}", img_hist.losses().iter().map(|v| *v as i64).collect::<Vec<_>>());

    let mut flow_cfg = seg_cfg.clone();
    flow_cfg.visual_stream = false;
    let flow_net = build_network(&flow_cfg, 7).unwrap();
    let t0 = Instant::now();
    let flow_hist = train_fcn_stage(&flow_net, &dataset, &single_cfg).unwrap();
    println!("stage a (flow-only): {:.1}s", t0.elapsed().as_secs_f64());
    println!("  losses: {:?}", flow_hist.losses().iter().map(|v| *v as i64).collect::<Vec<_>>());

    // Joint third-third.
    let mc = MatchConfig::desk(Problem::ThirdThird, &seg_cfg);
    let model = JointModel::from_segnet(net, &mc, 7).unwrap();
    let pairs = coview::synthdata::sample_pairs(&dataset, Problem::ThirdThird, 3.0, 5, Some(Split::Train)).unwrap();
    println!("third-third pairs: {}", pairs.len());
    if joint_epochs > 0 {
        let mut jcfg = TrainConfig::desk_joint(2, Problem::ThirdThird);
        jcfg.lr = joint_lr;
        jcfg.epochs = joint_epochs;
        jcfg.frozen_epochs = joint_frozen;
        jcfg.samples_per_epoch = Some(joint_cap);
        jcfg.loss_mix = lam;
        let t0 = Instant::now();
        let hist = train_joint_stage(&model, &dataset, &pairs, &jcfg).unwrap();
        println!("joint third-third: {:.1}s", t0.elapsed().as_secs_f64());
        for e in &hist.epochs {
            println!(
                "  epoch {:2}: total {:9.2} seg {:9.2} siam {:9.2}",
                e.epoch, e.mean_loss, e.mean_seg_loss, e.mean_siam_loss
            );
        }
    }

    // Evaluation.
    let t0 = Instant::now();
    let test_scenes = dataset.split(Split::Test);
    let copy_iou = copy_first_iou(&test_scenes).unwrap();

    let two_seqs = segmentation_scores(&model.segnet, &test_scenes).unwrap();
    let two_iou = two_seqs.iter().map(|s| s.mean_iou).sum::<f64>() / two_seqs.len() as f64;

    let img_seqs = segmentation_scores(&img_net, &test_scenes).unwrap();
    let img_iou = img_seqs.iter().map(|s| s.mean_iou).sum::<f64>() / img_seqs.len() as f64;

    let flow_seqs = segmentation_scores(&flow_net, &test_scenes).unwrap();
    let flow_iou = flow_seqs.iter().map(|s| s.mean_iou).sum::<f64>() / flow_seqs.len() as f64;

    println!(
        "IoU: two-stream {two_iou:.4} | flow-only {flow_iou:.4} | image-only {img_iou:.4} | copy-first {copy_iou:.4}"
    );
    println!(
        "margins: vs copy {:.1} pts (need >= 5), vs image {:.1} pts (need >= 2)",
        100.0 * (two_iou - copy_iou),
        100.0 * (two_iou - img_iou)
    );

    // Matching ACC on three-candidate matrices.
    let results = match_all_views(&model, &test_scenes, Problem::ThirdThird).unwrap();
    let three: Vec<_> = results.iter().filter(|r| r.candidate_ids.len() == 3).collect();
    let mut correct = 0.0;
    let mut n = 0usize;
    for r in &three {
        let (acc, excl) = forced_choice_acc(r);
        let scored = r.query_ids.len() - excl;
        correct += acc * scored as f64;
        n += scored;
    }
    println!(
        "third-third ACC (3 candidates): {:.4} over {} queries ({} matrices)",
        correct / n.max(1) as f64,
        n,
        three.len()
    );

    let report = evaluate(&model, &dataset, Split::Test, Problem::ThirdThird, "bench", "desk").unwrap();
    println!("overall: IoU {:.4} mAP {:.4} ACC {:.4}", report.mean_iou, report.map, report.acc);
    println!("eval took {:.1}s; total {:.1}s", t0.elapsed().as_secs_f64(), t_all.elapsed().as_secs_f64());

    // Third-first problem.
    let stage_a = model.segnet.clone_detached().unwrap();
    let tf_cfg = MatchConfig::desk(Problem::ThirdFirst, &seg_cfg);
    let tf_model = JointModel::from_segnet(stage_a, &tf_cfg, 8).unwrap();
    let tf_pairs =
        coview::synthdata::sample_pairs(&dataset, Problem::ThirdFirst, 3.0, 6, Some(Split::Train)).unwrap();
    println!("third-first pairs: {}", tf_pairs.len());
    let mut tf_train = TrainConfig::desk_joint(3, Problem::ThirdFirst);
    tf_train.lr = env_f64("B_TF_LR", tf_train.lr);
    tf_train.epochs = env_usize("B_TF_EPOCHS", joint_epochs);
    tf_train.frozen_epochs = if std::env::var("B_TF_FROZEN_ALL").is_ok() {
        tf_train.epochs
    } else {
        joint_frozen
    };
    tf_train.samples_per_epoch = Some(env_usize("B_TF_CAP", joint_cap));
    let t0 = Instant::now();
    let hist = train_joint_stage(&tf_model, &dataset, &tf_pairs, &tf_train).unwrap();
    println!("joint third-first: {:.1}s", t0.elapsed().as_secs_f64());
    for e in &hist.epochs {
        println!(
            "  epoch {:2}: total {:9.2} seg {:9.2} siam {:9.2}",
            e.epoch, e.mean_loss, e.mean_seg_loss, e.mean_siam_loss
        );
    }
    let agg = if std::env::var("B_TF_MIN").is_ok() {
        Aggregation::MinFrameDistance
    } else {
        Aggregation::MeanEmbedding
    };
    let tf_results = match_all_views_with(&tf_model, &test_scenes, Problem::ThirdFirst, agg).unwrap();
    let three: Vec<_> = tf_results.iter().filter(|r| r.candidate_ids.len() == 3).collect();
    let mut correct = 0.0;
    let mut n = 0usize;
    for r in &three {
        let (acc, excl) = forced_choice_acc(r);
        let scored = r.query_ids.len() - excl;
        correct += acc * scored as f64;
        n += scored;
    }
    println!(
        "third-first ACC (3 candidates): {:.4} over {} queries",
        correct / n.max(1) as f64,
        n
    );
    let tf_train_results = match_all_views_with(&tf_model, &dataset.split(Split::Train), Problem::ThirdFirst, agg).unwrap();
    let mut c = 0.0;
    let mut m = 0usize;
    for r in &tf_train_results {
        let (acc, excl) = forced_choice_acc(r);
        let scored = r.query_ids.len() - excl;
        c += acc * scored as f64;
        m += scored;
    }
    println!("third-first TRAIN ACC (all): {:.4} over {} queries", c / m.max(1) as f64, m);
    for r in tf_results.iter().take(6) {
        let row: Vec<String> = (0..r.candidate_ids.len()).map(|ci| format!("{}:{:.1}", r.candidate_ids[ci].0, r.get(0, ci))).collect();
        println!("  query wearer {} -> {}", r.query_ids[0].0, row.join("  "));
    }
    let tf_report = evaluate(&tf_model, &dataset, Split::Test, Problem::ThirdFirst, "bench", "desk").unwrap();
    println!(
        "third-first overall: IoU {:.4} mAP {:.4} ACC {:.4}; total {:.1}s",
        tf_report.mean_iou,
        tf_report.map,
        tf_report.acc,
        t_all.elapsed().as_secs_f64()
    );
}
