use crate::config::RunConfig;
use crate::export::{export_frames, ExportFormat};
use crate::pipeline::{
    long_term_rollout, predict_samples, sample_seed, LatentSource, PipelineModels,
    PredictionRequest, Segment,
};
use crate::CliError;
use clap::{Args, Parser, Subcommand};
use mfp_models::classifier::MotionClassifier;
use mfp_models::diffusion::MotionGenerator;
use mfp_models::metrics::{
    action_faithfulness, ade_min, apd, feature_stats, fid, foot_skate, MetricsReport,
};
use mfp_models::sampler::{prepare_context, DiversitySampler};
use mfp_models::vae::{extract_window, window_span, AblationMode, InbetweenVae, VaeLossWeights};
use mfp_motion::{
    generate_gait, generate_target, load_dataset, save_dataset, ActionLabel, DatasetSplit,
    GaitStart, MotionSequence, GAIT_ACTIONS, TARGET_ACTIONS,
};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "mfp", version, about = "Action-driven motion prediction toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration file (JSON)
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic motion dataset
    GenData {
        /// Comma-separated action names
        #[arg(long, default_value = "walk,jog,run,step")]
        actions: String,
        #[arg(long, default_value_t = 100)]
        per_action: usize,
        #[arg(long, default_value_t = 60)]
        frames: usize,
        /// Turn angles are drawn uniformly from [-turn-range, turn-range]
        #[arg(long, default_value_t = std::f64::consts::FRAC_PI_2)]
        turn_range: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// "gait" (arcs with leg IK) or "target" (stationary upper body)
        #[arg(long, default_value = "gait")]
        kind: String,
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
    },
    /// Train the in-betweening model
    TrainVae {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        t_between: Option<usize>,
        /// full | no-ofe | mhsa
        #[arg(long, default_value = "full")]
        ablation: String,
    },
    /// Train the target-motion diffusion model
    TrainMdm {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train the diversity sampler against a frozen in-betweening model
    TrainSampler {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        t_between: Option<usize>,
    },
    /// Train the action classifier used by the metrics
    TrainClassifier {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
        /// "gait" or "target" dataset
        #[arg(long, default_value = "gait")]
        on: String,
    },
    /// Sample in-betweenings for a held-out context
    Inbetween {
        #[command(flatten)]
        common: Common,
        /// Test-set sequence index
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value_t = 0)]
        window_start: usize,
        #[arg(long, default_value_t = 5)]
        count: usize,
        #[arg(long)]
        t_between: Option<usize>,
        /// Draw latents from sampler branches instead of the prior
        #[arg(long, default_value_t = false)]
        use_sampler: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Two-stage prediction from an observed history
    Predict {
        #[command(flatten)]
        common: Common,
        /// Dataset file providing the history (defaults to the gait set)
        #[arg(long)]
        history: Option<PathBuf>,
        /// Test-sequence index inside the history dataset
        #[arg(long, default_value_t = 0)]
        history_index: usize,
        /// Observed frames taken from the front of that sequence
        #[arg(long, default_value_t = 10)]
        history_frames: usize,
        #[arg(long)]
        future_action: String,
        #[arg(long)]
        inbetween_action: String,
        #[arg(long, default_value_t = 1)]
        samples: usize,
        #[arg(long)]
        t_between: Option<usize>,
        /// "prior" or "branch:N"
        #[arg(long, default_value = "prior")]
        latent: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recursive long-term prediction over a label schedule
    Rollout {
        #[command(flatten)]
        common: Common,
        /// Schedule like "wave:walk,reach:run" (future:inbetween pairs)
        #[arg(long)]
        labels: String,
        #[arg(long)]
        history: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        history_index: usize,
        #[arg(long, default_value_t = 10)]
        history_frames: usize,
        #[arg(long)]
        t_between: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// jsonl | csv for the exported frames
        #[arg(long, default_value = "csv")]
        format: String,
    },
    /// Compute the metric report for generated samples
    Eval {
        #[command(flatten)]
        common: Common,
        /// Manifest written by `inbetween` or `predict`
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference audit of every layer and loss
    GradCheck {
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
}

/// Parse and dispatch; returns the process exit code (0 ok, 1 runtime
/// failure, 2 usage).
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::GenData {
            actions,
            per_action,
            frames,
            turn_range,
            seed,
            out,
            kind,
            test_fraction,
        } => gen_data(&actions, per_action, frames, turn_range, seed, &out, &kind, test_fraction),
        Cmd::TrainVae {
            common,
            epochs,
            t_between,
            ablation,
        } => train_vae(&common, epochs, t_between, &ablation),
        Cmd::TrainMdm { common, epochs } => train_mdm(&common, epochs),
        Cmd::TrainSampler {
            common,
            epochs,
            t_between,
        } => train_sampler(&common, epochs, t_between),
        Cmd::TrainClassifier { common, epochs, on } => train_classifier(&common, epochs, &on),
        Cmd::Inbetween {
            common,
            index,
            window_start,
            count,
            t_between,
            use_sampler,
            out,
        } => inbetween(&common, index, window_start, count, t_between, use_sampler, &out),
        Cmd::Predict {
            common,
            history,
            history_index,
            history_frames,
            future_action,
            inbetween_action,
            samples,
            t_between,
            latent,
            out,
        } => predict(
            &common,
            history.as_deref(),
            history_index,
            history_frames,
            &future_action,
            &inbetween_action,
            samples,
            t_between,
            &latent,
            &out,
        ),
        Cmd::Rollout {
            common,
            labels,
            history,
            history_index,
            history_frames,
            t_between,
            out,
            format,
        } => rollout(
            &common,
            &labels,
            history.as_deref(),
            history_index,
            history_frames,
            t_between,
            &out,
            &format,
        ),
        Cmd::Eval { common, pred, out } => eval(&common, &pred, out.as_deref()),
        Cmd::GradCheck { tol, seeds } => grad_check(tol, seeds),
    }
}

fn parse_action(name: &str, vocab: &[&str]) -> Result<ActionLabel, CliError> {
    let lower = name.to_lowercase();
    vocab
        .iter()
        .position(|a| a.to_lowercase() == lower)
        .map(|i| ActionLabel::new(i, vocab.len()))
        .ok_or_else(|| CliError::Usage(format!("unknown action '{name}' (expected one of {vocab:?})")))
}

#[allow(clippy::too_many_arguments)]
fn gen_data(
    actions: &str,
    per_action: usize,
    frames: usize,
    turn_range: f64,
    seed: u64,
    out: &Path,
    kind: &str,
    test_fraction: f64,
) -> Result<(), CliError> {
    let vocab: &[&str] = match kind {
        "gait" => &GAIT_ACTIONS,
        "target" => &TARGET_ACTIONS,
        other => return Err(CliError::Usage(format!("unknown kind '{other}'"))),
    };
    let labels: Vec<ActionLabel> = actions
        .split(',')
        .map(|a| parse_action(a.trim(), vocab))
        .collect::<Result<_, _>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for label in &labels {
        let n_test = ((per_action as f64) * test_fraction).round() as usize;
        for i in 0..per_action {
            let seq_seed = crate::pipeline::mix_seed(seed, (label.index * 1_000_003 + i) as u64);
            let seq = if kind == "gait" {
                let turn = rng.gen_range(-turn_range..=turn_range);
                generate_gait(*label, frames, turn, seq_seed, GaitStart::default())?
            } else {
                generate_target(*label, frames, seq_seed)?
            };
            if i >= per_action - n_test {
                test.push(seq);
            } else {
                train.push(seq);
            }
        }
    }
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let split = DatasetSplit::new(train, test)?;
    save_dataset(&split, out)?;
    println!(
        "wrote {} train / {} test sequences to {}",
        split.train.len(),
        split.test.len(),
        out.display()
    );
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn train_vae(
    common: &Common,
    epochs: Option<usize>,
    t_between: Option<usize>,
    ablation: &str,
) -> Result<(), CliError> {
    let cfg = RunConfig::load(&common.config)?;
    let split = load_dataset(&cfg.dataset)?;
    let mut vae_cfg = cfg.vae.clone();
    if let Some(t) = t_between {
        vae_cfg.t_between = t;
    }
    vae_cfg.mode = AblationMode::parse(ablation)?;
    let seed = common.seed.unwrap_or(cfg.seed);
    let mut model = InbetweenVae::init(vae_cfg.clone(), split.norm.clone(), seed);
    let epochs = epochs.unwrap_or(cfg.training.vae_epochs);
    let losses = model.train(
        &split,
        &VaeLossWeights::default(),
        epochs,
        cfg.training.vae_lr,
        cfg.training.vae_batch,
        seed,
    )?;
    let path = cfg.vae_checkpoint(vae_cfg.t_between)?.clone();
    ensure_parent(&path)?;
    model.save(&path)?;
    println!(
        "trained {} epochs (loss {:.4} -> {:.4}), saved {}",
        epochs,
        losses.first().unwrap_or(&f64::NAN),
        losses.last().unwrap_or(&f64::NAN),
        path.display()
    );
    Ok(())
}

fn train_mdm(common: &Common, epochs: Option<usize>) -> Result<(), CliError> {
    let cfg = RunConfig::load(&common.config)?;
    let target_path = cfg
        .target_dataset
        .as_ref()
        .ok_or_else(|| CliError::Config("target_dataset required for train-mdm".into()))?;
    let split = load_dataset(target_path)?;
    let seed = common.seed.unwrap_or(cfg.seed);
    let mut mdm_cfg = cfg.mdm.clone();
    let t_frames = split.train.iter().map(|s| s.len()).min().unwrap_or(0);
    if t_frames == 0 {
        return Err(CliError::Config("target dataset has no training data".into()));
    }
    if mdm_cfg.t_frames > t_frames {
        mdm_cfg.t_frames = t_frames;
    }
    let mut gen = MotionGenerator::init(mdm_cfg.clone(), split.norm.clone(), seed);
    let sched = gen.schedule();
    let vecs: Vec<(mfp_tensor::Tensor, ActionLabel)> = split
        .train
        .iter()
        .map(|s| (crate::seq_to_tensor(&s.slice(0, mdm_cfg.t_frames), &split.norm), s.label))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let epochs = epochs.unwrap_or(cfg.training.mdm_epochs);
    let mut first = f64::NAN;
    let mut last = f64::NAN;
    let mut order: Vec<usize> = (0..vecs.len()).collect();
    for epoch in 0..epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.training.mdm_batch) {
            let batch: Vec<(mfp_tensor::Tensor, ActionLabel)> =
                chunk.iter().map(|&i| vecs[i].clone()).collect();
            epoch_loss += gen.train_step(&batch, &sched, cfg.training.mdm_lr, &mut rng)?;
            batches += 1;
        }
        let mean = epoch_loss / batches as f64;
        if epoch == 0 {
            first = mean;
        }
        last = mean;
    }
    ensure_parent(&cfg.checkpoints.mdm)?;
    gen.save(&cfg.checkpoints.mdm)?;
    println!(
        "trained {epochs} epochs (loss {first:.2} -> {last:.2}), saved {}",
        cfg.checkpoints.mdm.display()
    );
    Ok(())
}

fn train_sampler(
    common: &Common,
    epochs: Option<usize>,
    t_between: Option<usize>,
) -> Result<(), CliError> {
    let cfg = RunConfig::load(&common.config)?;
    let split = load_dataset(&cfg.dataset)?;
    let t_b = t_between.unwrap_or(cfg.vae.t_between);
    let vae = InbetweenVae::load(cfg.vae_checkpoint(t_b)?)?;
    let seed = common.seed.unwrap_or(cfg.seed);
    let span = window_span(vae.config.t_start, vae.config.t_between, vae.config.t_end);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let contexts: Vec<_> = split
        .train
        .iter()
        .filter(|s| s.len() >= span)
        .map(|s| {
            let s0 = rng.gen_range(0..=s.len() - span);
            prepare_context(&vae, &extract_window(s, s0, &vae.config, &split.norm))
        })
        .collect();
    let mut sampler_cfg = cfg.sampler.clone();
    sampler_cfg.latent = vae.config.latent;
    sampler_cfg.cond_width = vae.config.width;
    let mut sampler = DiversitySampler::init(sampler_cfg, seed)?;
    let epochs = epochs.unwrap_or(cfg.training.sampler_epochs);
    let losses = sampler.train(&vae, &contexts, epochs, cfg.training.sampler_lr, seed)?;
    ensure_parent(&cfg.checkpoints.sampler)?;
    sampler.save(&cfg.checkpoints.sampler)?;
    println!(
        "trained {epochs} epochs over {} contexts (loss {:.2} -> {:.2}), saved {}",
        contexts.len(),
        losses.first().unwrap_or(&f64::NAN),
        losses.last().unwrap_or(&f64::NAN),
        cfg.checkpoints.sampler.display()
    );
    Ok(())
}

fn train_classifier(common: &Common, epochs: Option<usize>, on: &str) -> Result<(), CliError> {
    let cfg = RunConfig::load(&common.config)?;
    let data_path = match on {
        "gait" => cfg.dataset.clone(),
        "target" => cfg
            .target_dataset
            .clone()
            .ok_or_else(|| CliError::Config("target_dataset required".into()))?,
        other => return Err(CliError::Usage(format!("unknown dataset '{other}'"))),
    };
    let split = load_dataset(&data_path)?;
    let seed = common.seed.unwrap_or(cfg.seed);
    let mut clf = MotionClassifier::init(cfg.classifier.clone(), split.norm.clone(), seed);
    let epochs = epochs.unwrap_or(cfg.training.classifier_epochs);
    clf.train(
        &split,
        epochs,
        cfg.training.classifier_lr,
        cfg.training.classifier_batch,
        seed,
    )?;
    let heldout = if split.test.is_empty() {
        f64::NAN
    } else {
        clf.accuracy(&split.test)
    };
    ensure_parent(&cfg.checkpoints.classifier)?;
    clf.save(&cfg.checkpoints.classifier)?;
    println!(
        "trained {epochs} epochs, held-out accuracy {heldout:.3}, saved {}",
        cfg.checkpoints.classifier.display()
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub files: Vec<String>,
    pub seeds: Vec<u64>,
    pub t_between: usize,
    #[serde(default)]
    pub t_frames: Option<usize>,
    #[serde(default)]
    pub inbetween_action: Option<ActionLabel>,
    #[serde(default)]
    pub future_action: Option<ActionLabel>,
    #[serde(default)]
    pub source_dataset: Option<PathBuf>,
    #[serde(default)]
    pub test_index: Option<usize>,
    #[serde(default)]
    pub gt_start: Option<usize>,
    #[serde(default)]
    pub segments: Option<Vec<Segment>>,
}

fn write_sample(seq: &MotionSequence, path: &Path) -> Result<(), CliError> {
    let split = DatasetSplit::new(vec![seq.clone()], vec![])?;
    save_dataset(&split, path)?;
    Ok(())
}

fn read_sample(path: &Path) -> Result<MotionSequence, CliError> {
    let split = load_dataset(path)?;
    split
        .train
        .into_iter()
        .next()
        .ok_or_else(|| CliError::Config(format!("{} holds no sequence", path.display())))
}

fn inbetween(
    common: &Common,
    index: usize,
    window_start: usize,
    count: usize,
    t_between: Option<usize>,
    use_sampler: bool,
    out: &Path,
) -> Result<(), CliError> {
    let cfg = RunConfig::load(&common.config)?;
    let split = load_dataset(&cfg.dataset)?;
    let t_b = t_between.unwrap_or(cfg.vae.t_between);
    let vae = InbetweenVae::load(cfg.vae_checkpoint(t_b)?)?;
    let seed = common.seed.unwrap_or(cfg.seed);
    let seq = split
        .test
        .get(index)
        .ok_or_else(|| CliError::Usage(format!("test index {index} out of {}", split.test.len())))?;
    let span = window_span(vae.config.t_start, vae.config.t_between, vae.config.t_end);
    if seq.len() < window_start + span {
        return Err(CliError::Usage(format!(
            "sequence {index} too short for a window at {window_start}"
        )));
    }
    let ctx = mfp_models::vae::ContextPair {
        start: seq.slice(window_start, vae.config.t_start),
        end: seq.slice(
            window_start + vae.config.t_start + vae.config.t_between - 2,
            vae.config.t_end,
        ),
    };
    let sampler = if use_sampler {
        Some(DiversitySampler::load(&cfg.checkpoints.sampler)?)
    } else {
        None
    };
    std::fs::create_dir_all(out)?;
    let mut files = Vec::new();
    let mut seeds = Vec::new();
    for i in 0..count {
        let s = sample_seed(seed, i);
        let sample = match &sampler {
            None => vae.sample_inbetween(&ctx, &seq.label, s)?,
            Some(ds) => {
                let cond = vae.context_features(&ctx, &seq.label)?;
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                use rand_distr::StandardNormal;
                let draw: Vec<f64> = (0..vae.config.latent)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let z = mfp_models::sampler::map_with(&ds.branch_maps(&cond), &draw)
                    .swap_remove(i % ds.config.branches);
                vae.decode(&ctx, &seq.label, &z, t_b)?
            }
        };
        let name = format!("sample_{i:03}.jsonl");
        write_sample(&sample, &out.join(&name))?;
        files.push(name);
        seeds.push(s);
    }
    let manifest = Manifest {
        kind: "inbetween".into(),
        files,
        seeds,
        t_between: t_b,
        t_frames: None,
        inbetween_action: Some(seq.label),
        future_action: None,
        source_dataset: Some(cfg.dataset.clone()),
        test_index: Some(index),
        gt_start: Some(window_start + vae.config.t_start - 1),
        segments: None,
    };
    std::fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    println!("wrote {count} in-betweenings to {}", out.display());
    Ok(())
}

fn load_models(cfg: &RunConfig, t_between: usize, want_sampler: bool) -> Result<PipelineModels, CliError> {
    let mut vaes = std::collections::BTreeMap::new();
    let path = cfg.vae_checkpoint(t_between)?;
    vaes.insert(t_between, InbetweenVae::load(path)?);
    let generator = MotionGenerator::load(&cfg.checkpoints.mdm)?;
    let sampler = if want_sampler && cfg.checkpoints.sampler.exists() {
        Some(DiversitySampler::load(&cfg.checkpoints.sampler)?)
    } else {
        None
    };
    Ok(PipelineModels {
        vaes,
        generator,
        sampler,
    })
}

fn history_from(
    cfg: &RunConfig,
    path: Option<&Path>,
    index: usize,
    frames: usize,
) -> Result<MotionSequence, CliError> {
    let data_path = path.map(Path::to_path_buf).unwrap_or_else(|| cfg.dataset.clone());
    let split = load_dataset(&data_path)?;
    let pool = if split.test.is_empty() { &split.train } else { &split.test };
    let seq = pool
        .get(index)
        .ok_or_else(|| CliError::Usage(format!("history index {index} out of {}", pool.len())))?;
    let n = frames.min(seq.len());
    Ok(seq.slice(0, n))
}

fn parse_latent(s: &str) -> Result<LatentSource, CliError> {
    if s == "prior" {
        return Ok(LatentSource::Prior);
    }
    if let Some(rest) = s.strip_prefix("branch:") {
        let idx: usize = rest
            .parse()
            .map_err(|_| CliError::Usage(format!("bad branch index '{rest}'")))?;
        return Ok(LatentSource::SamplerBranch(idx));
    }
    Err(CliError::Usage(format!(
        "latent must be 'prior' or 'branch:N', got '{s}'"
    )))
}

#[allow(clippy::too_many_arguments)]
fn predict(
    common: &Common,
    history: Option<&Path>,
    history_index: usize,
    history_frames: usize,
    future_action: &str,
    inbetween_action: &str,
    samples: usize,
    t_between: Option<usize>,
    latent: &str,
    out: &Path,
) -> Result<(), CliError> {
    let cfg = RunConfig::load(&common.config)?;
    let t_b = t_between.unwrap_or(cfg.vae.t_between);
    let latent = parse_latent(latent)?;
    let models = load_models(&cfg, t_b, matches!(latent, LatentSource::SamplerBranch(_)))?;
    let req = PredictionRequest {
        history: history_from(&cfg, history, history_index, history_frames)?,
        future_action: parse_action(future_action, &TARGET_ACTIONS)?,
        inbetween_action: parse_action(inbetween_action, &GAIT_ACTIONS)?,
        t_between: t_b,
        samples,
        seed: common.seed.unwrap_or(cfg.seed),
        latent,
    };
    let preds = predict_samples(&req, &models)?;
    std::fs::create_dir_all(out)?;
    let mut files = Vec::new();
    let mut seeds = Vec::new();
    let mut segments = None;
    for (i, p) in preds.iter().enumerate() {
        let name = format!("sample_{i:03}.jsonl");
        write_sample(&p.sequence, &out.join(&name))?;
        files.push(name);
        seeds.push(p.diffusion_seed);
        segments.get_or_insert_with(|| p.segments.clone());
    }
    let manifest = Manifest {
        kind: "predict".into(),
        files,
        seeds,
        t_between: t_b,
        t_frames: Some(models.generator.config.t_frames),
        inbetween_action: Some(req.inbetween_action),
        future_action: Some(req.future_action),
        source_dataset: cfg.target_dataset.clone(),
        test_index: None,
        gt_start: None,
        segments,
    };
    std::fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    println!("wrote {} predictions to {}", preds.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn rollout(
    common: &Common,
    labels: &str,
    history: Option<&Path>,
    history_index: usize,
    history_frames: usize,
    t_between: Option<usize>,
    out: &Path,
    format: &str,
) -> Result<(), CliError> {
    let cfg = RunConfig::load(&common.config)?;
    let t_b = t_between.unwrap_or(cfg.vae.t_between);
    let models = load_models(&cfg, t_b, false)?;
    let schedule: Vec<(ActionLabel, ActionLabel)> = labels
        .split(',')
        .map(|pair| {
            let (f, b) = pair
                .split_once(':')
                .ok_or_else(|| CliError::Usage(format!("label pair '{pair}' must be future:inbetween")))?;
            Ok((
                parse_action(f.trim(), &TARGET_ACTIONS)?,
                parse_action(b.trim(), &GAIT_ACTIONS)?,
            ))
        })
        .collect::<Result<_, CliError>>()?;
    let hist = history_from(&cfg, history, history_index, history_frames)?;
    let seed = common.seed.unwrap_or(cfg.seed);
    let roll = long_term_rollout(&hist, &schedule, t_b, seed, &models)?;
    std::fs::create_dir_all(out)?;
    write_sample(&roll.sequence, &out.join("rollout.jsonl"))?;
    let fmt = ExportFormat::parse(format)?;
    let frames_name = match fmt {
        ExportFormat::Csv => "frames.csv",
        ExportFormat::Jsonl => "frames.jsonl",
    };
    export_frames(&roll.sequence, &roll.segments, &out.join(frames_name), fmt)?;
    let manifest = Manifest {
        kind: "rollout".into(),
        files: vec!["rollout.jsonl".into()],
        seeds: vec![seed],
        t_between: t_b,
        t_frames: Some(models.generator.config.t_frames),
        inbetween_action: None,
        future_action: None,
        source_dataset: None,
        test_index: None,
        gt_start: None,
        segments: Some(roll.segments.clone()),
    };
    std::fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    println!(
        "rollout of {} frames across {} segments written to {}",
        roll.sequence.len(),
        roll.segments.len(),
        out.display()
    );
    Ok(())
}

fn eval(common: &Common, pred: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let cfg = RunConfig::load(&common.config)?;
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(pred)?)?;
    let base = pred.parent().unwrap_or_else(|| Path::new("."));
    let samples: Vec<MotionSequence> = manifest
        .files
        .iter()
        .map(|f| read_sample(&base.join(f)))
        .collect::<Result<_, _>>()?;
    if samples.is_empty() {
        return Err(CliError::Usage("manifest lists no samples".into()));
    }
    let clf = MotionClassifier::load(&cfg.checkpoints.classifier)?;
    let report = match manifest.kind.as_str() {
        "inbetween" => eval_inbetween(&cfg, &manifest, &samples, &clf)?,
        "predict" => eval_predict(&cfg, &manifest, &samples, &clf)?,
        other => return Err(CliError::Usage(format!("cannot eval manifest kind '{other}'"))),
    };
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    if let Some(path) = out {
        std::fs::write(path, &json)?;
    }
    Ok(())
}

fn eval_inbetween(
    cfg: &RunConfig,
    manifest: &Manifest,
    samples: &[MotionSequence],
    clf: &MotionClassifier,
) -> Result<MetricsReport, CliError> {
    let source = manifest
        .source_dataset
        .clone()
        .unwrap_or_else(|| cfg.dataset.clone());
    let split = load_dataset(&source)?;
    let label = manifest
        .inbetween_action
        .ok_or_else(|| CliError::Config("manifest lacks the in-betweening action".into()))?;
    let labeled: Vec<MotionSequence> = samples
        .iter()
        .map(|s| {
            let mut c = s.clone();
            c.label = label;
            c
        })
        .collect();
    let ade = match (manifest.test_index, manifest.gt_start) {
        (Some(idx), Some(gt0)) => {
            let seq = split
                .test
                .get(idx)
                .ok_or_else(|| CliError::Config(format!("test index {idx} missing from {}", source.display())))?;
            let gt = seq.slice(gt0, manifest.t_between);
            ade_min(samples, &gt)?
        }
        _ => f64::NAN,
    };
    let af = action_faithfulness(&labeled, clf)?;
    let apd_v = if samples.len() >= 2 { apd(samples)? } else { 0.0 };
    let gen_stats = feature_stats(samples, clf)?;
    let train_stats = feature_stats(&split.train, clf)?;
    let test_stats = feature_stats(&split.test, clf)?;
    let skate = samples.iter().map(foot_skate).sum::<f64>() / samples.len() as f64;
    Ok(MetricsReport {
        fid_train: fid(&gen_stats, &train_stats)?,
        fid_test: fid(&gen_stats, &test_stats)?,
        af,
        ade,
        apd: apd_v,
        foot_skate: skate,
        s: samples.len(),
    })
}

fn eval_predict(
    cfg: &RunConfig,
    manifest: &Manifest,
    samples: &[MotionSequence],
    clf: &MotionClassifier,
) -> Result<MetricsReport, CliError> {
    let t_b = manifest.t_between;
    let future = manifest
        .future_action
        .ok_or_else(|| CliError::Config("manifest lacks the future action".into()))?;
    let target_path = manifest
        .source_dataset
        .clone()
        .or_else(|| cfg.target_dataset.clone())
        .ok_or_else(|| CliError::Config("no target dataset for predict eval".into()))?;
    let split = load_dataset(&target_path)?;
    // the paper's protocol: distribution metrics on the synthesized
    // target, diversity on the whole prediction
    let mut targets = Vec::new();
    let mut transitions = Vec::new();
    for s in samples {
        if s.len() <= t_b {
            return Err(CliError::Config("sample shorter than its transition".into()));
        }
        let mut tgt = s.slice(t_b, s.len() - t_b);
        tgt.label = future;
        targets.push(tgt);
        transitions.push(s.slice(0, t_b));
    }
    let af = action_faithfulness(&targets, clf)?;
    let gt = split
        .test
        .iter()
        .chain(split.train.iter())
        .find(|s| s.label.index == future.index)
        .ok_or_else(|| CliError::Config("no reference sequence with the future action".into()))?;
    let gt_window = gt.slice(0, targets[0].len().min(gt.len()));
    let trimmed: Vec<MotionSequence> = targets
        .iter()
        .map(|t| t.slice(0, gt_window.len()))
        .collect();
    let ade = ade_min(&trimmed, &gt_window)?;
    let apd_v = if samples.len() >= 2 { apd(samples)? } else { 0.0 };
    let gen_stats = feature_stats(&targets, clf)?;
    let train_stats = feature_stats(&split.train, clf)?;
    let test_stats = if split.test.len() >= 2 {
        feature_stats(&split.test, clf)?
    } else {
        train_stats.clone()
    };
    let skate = transitions.iter().map(foot_skate).sum::<f64>() / transitions.len() as f64;
    Ok(MetricsReport {
        fid_train: fid(&gen_stats, &train_stats)?,
        fid_test: fid(&gen_stats, &test_stats)?,
        af,
        ade,
        apd: apd_v,
        foot_skate: skate,
        s: samples.len(),
    })
}

fn grad_check(tol: f64, seeds: u64) -> Result<(), CliError> {
    let entries = mfp_models::gradsuite::gradient_suite(seeds);
    let mut worst: std::collections::BTreeMap<String, f64> = Default::default();
    for e in &entries {
        let w = worst.entry(e.name.clone()).or_insert(0.0);
        if e.max_rel_err > *w {
            *w = e.max_rel_err;
        }
    }
    let mut failed = false;
    for (name, err) in &worst {
        let ok = *err < tol;
        failed |= !ok;
        println!(
            "{name}: max rel err {err:.3e} over {seeds} seeds .. {}",
            if ok { "ok" } else { "FAIL" }
        );
    }
    if failed {
        return Err(CliError::Model(mfp_models::ModelError::Invalid(format!(
            "gradient check exceeded tolerance {tol}"
        ))));
    }
    Ok(())
}
