use mfp_models::vae::{extract_window, window_span, TrainWindow, VaeConfig};
use mfp_motion::{generate_gait, ActionLabel, DatasetSplit, GaitStart, MotionSequence};

/// Tiny gait split for smoke-scale tests.
#[allow(dead_code)]
pub fn tiny_gait_split(per_action: usize, frames: usize) -> DatasetSplit {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for action in 0..4usize {
        for i in 0..per_action {
            let turn = -0.9 + 1.8 * (i as f64 / per_action.max(1) as f64);
            let seed = (action * 10000 + i) as u64;
            let seq = generate_gait(
                ActionLabel::new(action, 4),
                frames,
                turn,
                seed,
                GaitStart::default(),
            )
            .unwrap();
            if i % 4 == 3 {
                test.push(seq);
            } else {
                train.push(seq);
            }
        }
    }
    DatasetSplit::new(train, test).unwrap()
}

#[allow(dead_code)]
pub fn windows_for(
    split: &DatasetSplit,
    cfg: &VaeConfig,
    seqs: &[MotionSequence],
    s0: usize,
) -> Vec<TrainWindow> {
    let span = window_span(cfg.t_start, cfg.t_between, cfg.t_end);
    seqs.iter()
        .filter(|s| s.len() >= s0 + span)
        .map(|s| extract_window(s, s0, cfg, &split.norm))
        .collect()
}

/// Small config used across tests; full-size settings live in acceptance.
#[allow(dead_code)]
pub fn small_vae_config() -> VaeConfig {
    VaeConfig {
        width: 16,
        heads: 4,
        depth: 1,
        ffn: 32,
        latent: 8,
        t_start: 3,
        t_end: 3,
        t_between: 6,
        period: 25,
        num_actions: 4,
        mode: mfp_models::vae::AblationMode::Full,
        coeffs: 4,
    }
}
