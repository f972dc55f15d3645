use mfp_models::metrics::foot_skate;
use mfp_models::vae::{ContextPair, InbetweenVae, VaeConfig, VaeLossWeights};
use mfp_motion::{
    generate_gait, load_dataset, save_dataset, ActionLabel, DatasetSplit, GaitStart,
    MotionSequence, Skeleton, ANKLE_JOINTS,
};
use std::path::Path;

fn smoke_split() -> DatasetSplit {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for action in 0..4usize {
        for i in 0..150 {
            let seed = (action * 100000 + i) as u64;
            let turn = -1.57 + 3.14 * (i as f64 / 150.0);
            let seq = generate_gait(ActionLabel::new(action, 4), 60, turn, seed, GaitStart::default()).unwrap();
            if i < 100 { train.push(seq); } else { test.push(seq); }
        }
    }
    DatasetSplit::new(train, test).unwrap()
}

fn cached() -> (InbetweenVae, DatasetSplit) {
    let dir = Path::new("/tmp/mfp_probe");
    std::fs::create_dir_all(dir).unwrap();
    let data_path = dir.join("gait.jsonl");
    let vae_path = dir.join("vae.mfpk");
    let split = if data_path.exists() {
        load_dataset(&data_path).unwrap()
    } else {
        let s = smoke_split();
        save_dataset(&s, &data_path).unwrap();
        s
    };
    let vae = if vae_path.exists() {
        InbetweenVae::load(&vae_path).unwrap()
    } else {
        let mut v = InbetweenVae::init(VaeConfig::default(), split.norm.clone(), 7);
        let w = VaeLossWeights::default();
        for round in 0..5u64 {
            v.train(&split, &w, 20, 1e-3, 32, 7 + round).unwrap();
            eprintln!("phase1 round {round} done");
        }
        for round in 0..3u64 {
            v.train(&split, &w, 20, 3e-4, 32, 77 + round).unwrap();
            eprintln!("phase2 round {round} done");
        }
        v.save(&vae_path).unwrap();
        v
    };
    (vae, split)
}

#[test]
#[ignore]
fn probe_cleanup_detail() {
    let (vae, split) = cached();
    let cfg = &vae.config;
    let mut skates = Vec::new();
    for (i, s) in split.test.iter().take(50).enumerate() {
        let ctx = ContextPair {
            start: s.slice(10, cfg.t_start),
            end: s.slice(10 + cfg.t_start + cfg.t_between - 2, cfg.t_end),
        };
        let sample = vae.sample_inbetween(&ctx, &s.label, 900 + i as u64).unwrap();
        let v = foot_skate(&sample);
        skates.push((v, i, s.label.index));
    }
    skates.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mean: f64 = skates.iter().map(|x| x.0).sum::<f64>() / skates.len() as f64;
    println!("cleaned mean {mean:.4}; worst 10:");
    for (v, i, a) in skates.iter().take(10) {
        println!("  sample {i} (action {a}): {v:.4}");
    }

    // dissect the worst sample: per contact frame speeds
    let (_, worst_i, _) = skates[0];
    let s = &split.test[worst_i];
    let ctx = ContextPair {
        start: s.slice(10, cfg.t_start),
        end: s.slice(10 + cfg.t_start + cfg.t_between - 2, cfg.t_end),
    };
    let sample = vae.sample_inbetween(&ctx, &s.label, 900 + worst_i as u64).unwrap();
    dissect(&sample);
}

fn dissect(seq: &MotionSequence) {
    let fk: Vec<_> = seq.frames.iter().map(Skeleton::joint_positions).collect();
    let mut min_h = f64::INFINITY;
    for f in &fk {
        for &a in &ANKLE_JOINTS {
            min_h = min_h.min(f[a][1]);
        }
    }
    let thr = min_h + 0.02;
    println!("worst sample dissection (threshold {thr:.4}):");
    for (side, &ankle) in ANKLE_JOINTS.iter().enumerate() {
        let mut line = String::new();
        for k in 0..seq.len() {
            let c = fk[k][ankle][1] <= thr;
            line.push(if c { 'C' } else { '.' });
        }
        println!("  foot {side}: {line}");
        for k in 0..seq.len() - 1 {
            if fk[k][ankle][1] <= thr {
                let dx = fk[k + 1][ankle][0] - fk[k][ankle][0];
                let dz = fk[k + 1][ankle][2] - fk[k][ankle][2];
                let speed = (dx * dx + dz * dz).sqrt() * seq.fps;
                if speed > 0.05 {
                    println!("    frame {k}: speed {speed:.3} (h {:.4})", fk[k][ankle][1]);
                }
            }
        }
    }
}
