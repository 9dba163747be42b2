// Scratch harness for training-speed and learning-rate experiments.
use std::time::Instant;

use coview::domain::Problem;
use coview::matchnet::{JointModel, MatchConfig};
use coview::segnet::{build_network, SegNetConfig};
use coview::synthdata::{BenchmarkConfig, Dataset};
use coview::trainer::{
    collect_seg_samples, mean_training_iou, train_fcn_stage, train_joint_stage, TrainConfig,
};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("fcn");
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2e-5);
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(6);

    let mut bench = BenchmarkConfig::desk(42);
    bench.scenes = 2;
    bench.train_scenes = 1;
    bench.num_frames = 8;
    if std::env::var("SMOKE_CLEAN").is_ok() {
        bench.num_agents = 2;
        bench.agent_size = (16, 20);
        bench.max_speed = 1;
        bench.first_person_rigs = 1;
        bench.camera_jitter = false;
    }
    let scenes = coview::synthdata::generate_benchmark(&bench).unwrap();
    let dataset = Dataset::from_scenes(&scenes).unwrap();
    let samples = collect_seg_samples(&dataset, Some(coview::synthdata::Split::Train));
    println!("train samples: {}", samples.len());

    let seg_cfg = SegNetConfig::desk(64, 64);
    let net = build_network(&seg_cfg, 7).unwrap();

    match mode {
        "fcn" => {
            let mut cfg = TrainConfig::desk_fcn(1);
            cfg.lr = lr;
            cfg.epochs = epochs;
            if let Ok(b) = std::env::var("SMOKE_BATCH") { cfg.batch_size = b.parse().unwrap(); }
            let t0 = Instant::now();
            let history = train_fcn_stage(&net, &dataset, &cfg).unwrap();
            let dt = t0.elapsed().as_secs_f64();
            println!(
                "lr {lr:.1e}: {:.1}s total, {:.2}s/epoch",
                dt,
                dt / epochs as f64
            );
            for e in &history.epochs {
                println!("epoch {:2}: loss {:10.2}", e.epoch, e.mean_loss);
            }
            let iou = mean_training_iou(&net, &dataset, Some(coview::synthdata::Split::Train)).unwrap();
            println!("train IoU after {epochs} epochs: {iou:.4}");

            // Per-sample breakdown: IoU vs ground-truth area.
            use coview::domain::threshold_mask;
            let mut rows = Vec::new();
            for s in &samples {
                let seq = &dataset.scenes[s.scene_idx].views[s.view_idx];
                let gt = seq.instances[s.t]
                    .iter()
                    .find(|i| i.identity == s.identity)
                    .unwrap()
                    .gt_mask
                    .clone()
                    .unwrap();
                let pre_t = if s.t == 0 { 0 } else { s.t - 1 };
                let pre = seq.instances[pre_t]
                    .iter()
                    .find(|i| i.identity == s.identity)
                    .unwrap()
                    .gt_mask
                    .clone()
                    .unwrap();
                let k = net.config.flow_stack;
                let idx = coview::domain::flow_window_indices(seq.flows.len(), s.t, k);
                let flows: Vec<&coview::domain::FlowField> = idx.iter().map(|&i| &seq.flows[i]).collect();
                let out = net.predict(&seq.frames[s.t], &flows, &pre).unwrap();
                let pred = threshold_mask(&out.soft_mask(), 0.5).unwrap();
                let i = coview::metrics::iou(&pred, &gt).unwrap();
                rows.push((gt.area(), i));
            }
            rows.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
            for (area, i) in rows.iter().take(8) {
                println!("  worst: area {area:4} iou {i:.3}");
            }
            for (area, i) in rows.iter().rev().take(3) {
                println!("  best:  area {area:4} iou {i:.3}");
            }
        }
        "joint" => {
            let mut fcn_cfg = TrainConfig::desk_fcn(1);
            fcn_cfg.epochs = 10;
            let t0 = Instant::now();
            train_fcn_stage(&net, &dataset, &fcn_cfg).unwrap();
            println!("stage a done in {:.1}s", t0.elapsed().as_secs_f64());

            let mc = MatchConfig::desk(Problem::ThirdThird, &seg_cfg);
            let model = JointModel::from_segnet(net, &mc, 7).unwrap();
            let pairs = coview::synthdata::sample_pairs(
                &dataset,
                Problem::ThirdThird,
                3.0,
                5,
                Some(coview::synthdata::Split::Train),
            )
            .unwrap();
            println!("pairs: {}", pairs.len());
            let mut cfg = TrainConfig::desk_joint(2, Problem::ThirdThird);
            cfg.lr = lr;
            cfg.epochs = epochs;
            cfg.frozen_epochs = epochs / 2;
            let t0 = Instant::now();
            let history = train_joint_stage(&model, &dataset, &pairs, &cfg).unwrap();
            let dt = t0.elapsed().as_secs_f64();
            println!("joint: {:.1}s total, {:.2}s/epoch", dt, dt / epochs as f64);
            for e in &history.epochs {
                println!(
                    "epoch {:2}: total {:9.2} seg {:9.2} siam {:9.3}",
                    e.epoch, e.mean_loss, e.mean_seg_loss, e.mean_siam_loss
                );
            }
        }
        other => eprintln!("unknown mode {other}"),
    }
}
