use mfp_models::classifier::{ClassifierConfig, MotionClassifier};
use mfp_models::metrics::{action_faithfulness, boundary_gap, foot_skate};
use mfp_models::vae::{extract_window, ContextPair, InbetweenVae, VaeConfig, VaeLossWeights};
use mfp_motion::{generate_gait, mean_frame_step, ActionLabel, DatasetSplit, GaitStart, MotionSequence};

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

#[test]
#[ignore]
fn probe_criterion5() {
    let split = smoke_split();
    let cfg = VaeConfig::default();
    let weights = VaeLossWeights::default();

    // eval windows from test sequences at fixed offset
    let eval_windows: Vec<_> = split.test.iter().take(50)
        .map(|s| extract_window(s, 10, &cfg, &split.norm)).collect();

    let mut vae = InbetweenVae::init(cfg.clone(), split.norm.clone(), 7);
    let init_mse = vae.reconstruction_mse(&eval_windows);
    println!("init recon mse: {init_mse:.4}");

    let t0 = std::time::Instant::now();
    for round in 0..5 {
        let losses = vae.train(&split, &weights, 20, 1e-3, 32, 7 + round).unwrap();
        let mse = vae.reconstruction_mse(&eval_windows);
        println!("epoch {}: loss {:.3}, eval mse {:.5} (drop {:.1}%), {:.0}s",
            (round+1)*20, losses.last().unwrap(), mse, 100.0*(1.0 - mse/init_mse), t0.elapsed().as_secs_f64());
    }
    for round in 0..3 {
        let losses = vae.train(&split, &weights, 20, 3e-4, 32, 77 + round).unwrap();
        let mse = vae.reconstruction_mse(&eval_windows);
        println!("epoch {}: loss {:.3}, eval mse {:.5} (drop {:.1}%), {:.0}s",
            100 + (round+1)*20, losses.last().unwrap(), mse, 100.0*(1.0 - mse/init_mse), t0.elapsed().as_secs_f64());
    }

    // samples for 50 test contexts with the true action label
    let mut samples: Vec<MotionSequence> = Vec::new();
    let mut gaps = Vec::new();
    let mut real_skate = 0.0;
    for (i, s) in split.test.iter().take(50).enumerate() {
        let ctx = ContextPair {
            start: s.slice(10, cfg.t_start),
            end: s.slice(10 + cfg.t_start + cfg.t_between - 2, cfg.t_end),
        };
        let sample = vae.sample_inbetween(&ctx, &s.label, 900 + i as u64).unwrap();
        gaps.push(boundary_gap(&sample, ctx.start.frames.last().unwrap()));
        real_skate += foot_skate(&s.slice(10 + cfg.t_start - 1, cfg.t_between)) / 50.0;
        samples.push(sample);
    }
    let gen_skate: f64 = samples.iter().map(foot_skate).sum::<f64>() / 50.0;
    let step = mean_frame_step(&split.train);
    let mean_gap: f64 = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let max_gap = gaps.iter().cloned().fold(0.0f64, f64::max);
    println!("mean step {step:.4}; boundary gap mean {mean_gap:.4} max {max_gap:.4} (limit {:.4})", 0.2*step);
    println!("foot skate: real {real_skate:.4}, generated {gen_skate:.4} (limit {:.4})", 2.0*real_skate);

    // classifier + AF
    let t1 = std::time::Instant::now();
    let mut clf = MotionClassifier::init(ClassifierConfig::default(), split.norm.clone(), 5);
    clf.train(&split, 60, 3e-3, 16, 5).unwrap();
    println!("classifier heldout {:.3} in {:.0}s", clf.accuracy(&split.test), t1.elapsed().as_secs_f64());
    let af = action_faithfulness(&samples, &clf).unwrap();
    println!("AF of generated in-betweenings: {af:.3}");
    println!("total {:.0}s", t0.elapsed().as_secs_f64());
}
