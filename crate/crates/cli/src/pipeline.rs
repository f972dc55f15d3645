use crate::CliError;
use mfp_models::diffusion::{reverse_sample, MotionGenerator};
use mfp_models::sampler::{map_with, DiversitySampler};
use mfp_models::vae::{reparameterize, ContextPair, InbetweenVae};
use mfp_models::ModelError;
use mfp_motion::{ActionLabel, MotionSequence};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// splitmix64 of seed xor a salted odd constant; every stage derives its
/// stream from the request seed this way.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E3779B97F4A7C15);
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

pub fn sample_seed(request_seed: u64, sample: usize) -> u64 {
    mix_seed(request_seed, 0x5A11 + sample as u64)
}

pub fn rollout_round_seed(rollout_seed: u64, round: usize) -> u64 {
    mix_seed(rollout_seed, 0x0110 + round as u64)
}

/// Where stage two draws its latent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LatentSource {
    Prior,
    SamplerBranch(usize),
}

#[derive(Clone, Debug)]
pub struct PredictionRequest {
    pub history: MotionSequence,
    pub future_action: ActionLabel,
    pub inbetween_action: ActionLabel,
    pub t_between: usize,
    pub samples: usize,
    pub seed: u64,
    pub latent: LatentSource,
}

pub struct PipelineModels {
    pub vaes: BTreeMap<usize, InbetweenVae>,
    pub generator: MotionGenerator,
    pub sampler: Option<DiversitySampler>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentKind {
    History,
    Transition,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub start: usize,
    pub len: usize,
}

#[derive(Clone, Debug)]
pub struct Prediction {
    /// transition then target, t_between + t_frames frames
    pub sequence: MotionSequence,
    pub segments: Vec<Segment>,
    /// exact conditioning slices handed to the decoder
    pub context_start: MotionSequence,
    pub context_end: MotionSequence,
    pub diffusion_seed: u64,
    pub latent_seed: u64,
}

/// Stage one synthesizes the target motion for the future action; stage
/// two in-betweens from the observed tail to the target's head. The
/// returned sequence is their concatenation.
pub fn predict_two_stage(
    req: &PredictionRequest,
    models: &PipelineModels,
) -> Result<Prediction, CliError> {
    if req.history.is_empty() {
        return Err(CliError::Usage("history must have at least one frame".into()));
    }
    let vae = models.vaes.get(&req.t_between).ok_or_else(|| {
        CliError::Model(ModelError::LengthMismatch {
            requested: req.t_between,
            available: models.vaes.keys().copied().collect(),
        })
    })?;
    if req.future_action.index >= models.generator.config.num_actions {
        return Err(CliError::Model(ModelError::LabelOutOfRange {
            index: req.future_action.index,
            num_classes: models.generator.config.num_actions,
        }));
    }

    let diffusion_seed = mix_seed(req.seed, 1);
    let latent_seed = mix_seed(req.seed, 2);

    let sched = models.generator.schedule();
    let target = reverse_sample(
        &models.generator,
        &req.future_action,
        &sched,
        &models.generator.norm,
        req.history.fps,
        diffusion_seed,
    )?;

    let t_start = vae.config.t_start.min(req.history.len());
    let context_start = req.history.slice(req.history.len() - t_start, t_start);
    let t_end = vae.config.t_end.min(target.len());
    let context_end = target.slice(0, t_end);
    let ctx = ContextPair {
        start: context_start.clone(),
        end: context_end.clone(),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(latent_seed);
    let draw: Vec<f64> = (0..vae.config.latent)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let z = match req.latent {
        LatentSource::Prior => {
            let prior = vae.prior_params(&ctx, &req.inbetween_action)?;
            reparameterize(&prior, &draw)
        }
        LatentSource::SamplerBranch(branch) => {
            let sampler = models.sampler.as_ref().ok_or_else(|| {
                CliError::Usage("sampler branch requested but no sampler checkpoint loaded".into())
            })?;
            if branch >= sampler.config.branches {
                return Err(CliError::Usage(format!(
                    "branch {branch} outside the sampler's {} branches",
                    sampler.config.branches
                )));
            }
            let cond = vae.context_features(&ctx, &req.inbetween_action)?;
            let maps = sampler.branch_maps(&cond);
            map_with(&maps, &draw).swap_remove(branch)
        }
    };

    let transition = vae.decode(&ctx, &req.inbetween_action, &z, req.t_between)?;
    let mut frames = transition.frames.clone();
    frames.extend(target.frames.iter().cloned());
    let sequence = MotionSequence::new(
        format!("prediction-{}", req.seed),
        req.history.fps,
        req.future_action,
        frames,
    );
    let segments = vec![
        Segment {
            kind: SegmentKind::Transition,
            start: 0,
            len: req.t_between,
        },
        Segment {
            kind: SegmentKind::Target,
            start: req.t_between,
            len: target.len(),
        },
    ];
    Ok(Prediction {
        sequence,
        segments,
        context_start,
        context_end,
        diffusion_seed,
        latent_seed,
    })
}

/// S predictions with per-sample derived seeds (future-motion diversity
/// via fresh diffusion noise).
pub fn predict_samples(
    req: &PredictionRequest,
    models: &PipelineModels,
) -> Result<Vec<Prediction>, CliError> {
    if req.samples == 0 {
        return Err(CliError::Usage("samples must be at least 1".into()));
    }
    (0..req.samples)
        .map(|i| {
            let mut one = req.clone();
            one.seed = sample_seed(req.seed, i);
            predict_two_stage(&one, models)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Rollout {
    /// history plus every predicted segment
    pub sequence: MotionSequence,
    pub segments: Vec<Segment>,
}

/// Alternate the two stages over a label schedule; each round re-anchors
/// on the tail of the running output.
pub fn long_term_rollout(
    history: &MotionSequence,
    schedule: &[(ActionLabel, ActionLabel)],
    t_between: usize,
    seed: u64,
    models: &PipelineModels,
) -> Result<Rollout, CliError> {
    if schedule.is_empty() {
        return Err(CliError::Usage("rollout needs at least one label pair".into()));
    }
    let t_start = models
        .vaes
        .get(&t_between)
        .map(|v| v.config.t_start)
        .unwrap_or(5);
    let mut frames = history.frames.clone();
    let mut segments = vec![Segment {
        kind: SegmentKind::History,
        start: 0,
        len: history.len(),
    }];
    for (round, (future_action, inbetween_action)) in schedule.iter().enumerate() {
        let tail = t_start.min(frames.len());
        let running = MotionSequence::new(
            format!("rollout-tail-{round}"),
            history.fps,
            *inbetween_action,
            frames[frames.len() - tail..].to_vec(),
        );
        let req = PredictionRequest {
            history: running,
            future_action: *future_action,
            inbetween_action: *inbetween_action,
            t_between,
            samples: 1,
            seed: rollout_round_seed(seed, round),
            latent: LatentSource::Prior,
        };
        let pred = predict_two_stage(&req, models)?;
        let offset = frames.len();
        for seg in &pred.segments {
            segments.push(Segment {
                kind: seg.kind,
                start: offset + seg.start,
                len: seg.len,
            });
        }
        frames.extend(pred.sequence.frames.into_iter());
    }
    let label = schedule.last().unwrap().0;
    Ok(Rollout {
        sequence: MotionSequence::new(
            format!("rollout-{seed}"),
            history.fps,
            label,
            frames,
        ),
        segments,
    })
}
