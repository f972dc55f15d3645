//! Attention-based action classifier. The class-token output doubles as
//! the perception feature space for the distribution metrics.

use crate::nets::{Linear, SeqEncoder};
use crate::{Binder, ModelError};
use mfp_motion::{
    pose_vectorize, DatasetSplit, GroundFrame, MotionSequence, NormStats, POSE_DIM,
};
use mfp_tensor::{load_checkpoint, save_checkpoint, Graph, ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassifierConfig {
    /// feature width; the class-token output has this many dims
    pub width: usize,
    pub heads: usize,
    pub depth: usize,
    pub ffn: usize,
    pub num_actions: usize,
    pub period: usize,
    /// training crops sequences to random lengths in this range so short
    /// windows classify as well as full clips
    pub crop_min: usize,
    pub crop_max: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            width: 32,
            heads: 4,
            depth: 2,
            ffn: 64,
            num_actions: 4,
            period: 25,
            crop_min: 15,
            crop_max: 60,
        }
    }
}

pub struct MotionClassifier {
    pub config: ClassifierConfig,
    pub norm: NormStats,
    pub store: ParamStore,
    encoder: SeqEncoder,
    head: Linear,
}

impl MotionClassifier {
    pub fn init(config: ClassifierConfig, norm: NormStats, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = SeqEncoder::init(
            &mut store,
            "clf",
            POSE_DIM,
            config.width,
            config.heads,
            config.ffn,
            config.depth,
            config.period,
            false,
            &mut rng,
        );
        let head = Linear::init(&mut store, "head", config.width, config.num_actions, &mut rng);
        MotionClassifier {
            config,
            norm,
            store,
            encoder,
            head,
        }
    }

    /// Canonicalize on the first frame and normalize; position and heading
    /// never leak into the features.
    fn prep(&self, frames: &[mfp_motion::Pose]) -> Tensor {
        let anchor = GroundFrame::from_anchor(&frames[0]);
        let mut data = Vec::with_capacity(frames.len() * POSE_DIM);
        for f in frames {
            data.extend(pose_vectorize(&anchor.to_local(f), Some(&self.norm)));
        }
        Tensor::matrix(frames.len(), POSE_DIM, data)
    }

    /// Class-token activations ahead of the classification head.
    pub fn features(&self, seq: &MotionSequence) -> Vec<f64> {
        let mut g = Graph::new();
        let b = Binder::frozen(&self.store);
        let frames = g.constant(self.prep(&seq.frames));
        let tok = self.encoder.encode(&mut g, &b, frames);
        g.value(tok).data().to_vec()
    }

    pub fn logits(&self, seq: &MotionSequence) -> Vec<f64> {
        let mut g = Graph::new();
        let b = Binder::frozen(&self.store);
        let frames = g.constant(self.prep(&seq.frames));
        let tok = self.encoder.encode(&mut g, &b, frames);
        let out = self.head.forward(&mut g, &b, tok);
        g.value(out).data().to_vec()
    }

    pub fn predict(&self, seq: &MotionSequence) -> usize {
        let logits = self.logits(seq);
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        best
    }

    /// Softmax confidence assigned to a class.
    pub fn confidence(&self, seq: &MotionSequence, class: usize) -> f64 {
        let logits = self.logits(seq);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
        exps[class] / exps.iter().sum::<f64>()
    }

    /// Cross-entropy training on random crops. Rejects a split whose
    /// training labels are all identical.
    pub fn train(
        &mut self,
        split: &DatasetSplit,
        epochs: usize,
        lr: f64,
        batch_size: usize,
        seed: u64,
    ) -> Result<Vec<f64>, ModelError> {
        let first = split
            .train
            .first()
            .ok_or_else(|| ModelError::Invalid("empty training split".into()))?;
        if split.train.iter().all(|s| s.label == first.label) {
            return Err(ModelError::Invalid(
                "classifier training needs more than one class".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut losses = Vec::with_capacity(epochs);
        let idx: Vec<usize> = (0..split.train.len()).collect();
        for _ in 0..epochs {
            let mut order = idx.clone();
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(batch_size) {
                let mut batch_loss = 0.0;
                let mut store = std::mem::take(&mut self.store);
                for &i in chunk {
                    let seq = &split.train[i];
                    let lo = self.config.crop_min.min(seq.len());
                    let hi = self.config.crop_max.min(seq.len());
                    let len = if lo >= hi { hi } else { rng.gen_range(lo..=hi) };
                    let s0 = rng.gen_range(0..=seq.len() - len);
                    let mut g = Graph::new();
                    let b = Binder::trainable(&store);
                    let frames = g.constant(self.prep(&seq.frames[s0..s0 + len]));
                    let tok = self.encoder.encode(&mut g, &b, frames);
                    let logits = self.head.forward(&mut g, &b, tok);
                    let loss = g.cross_entropy_mean(logits, &[seq.label.index]);
                    let v = g.value(loss).data()[0];
                    if !v.is_finite() {
                        self.store = store;
                        return Err(ModelError::NanLoss {
                            step: self.store.step_count(),
                            detail: "classifier loss non-finite".into(),
                        });
                    }
                    batch_loss += v;
                    g.backward(loss)?;
                    g.accumulate_grads(&mut store);
                }
                self.store = store;
                self.store.scale_grads(1.0 / chunk.len() as f64);
                self.store.adam_step(lr)?;
                epoch_loss += batch_loss / chunk.len() as f64;
                batches += 1;
            }
            losses.push(epoch_loss / batches as f64);
        }
        Ok(losses)
    }

    /// Fraction of sequences whose argmax class matches their label.
    pub fn accuracy(&self, seqs: &[MotionSequence]) -> f64 {
        assert!(!seqs.is_empty(), "accuracy over an empty set");
        let hits = seqs
            .iter()
            .filter(|s| self.predict(s) == s.label.index)
            .count();
        hits as f64 / seqs.len() as f64
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        save_checkpoint(&self.store, path)?;
        let sidecar = ClassifierSidecar {
            config: self.config.clone(),
            norm: self.norm.clone(),
        };
        std::fs::write(
            crate::vae::sidecar_path(path),
            serde_json::to_string_pretty(&sidecar)?,
        )?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let json = std::fs::read_to_string(crate::vae::sidecar_path(path))?;
        let sidecar: ClassifierSidecar = serde_json::from_str(&json)?;
        let store = load_checkpoint(path)?;
        let mut model = MotionClassifier::init(sidecar.config, sidecar.norm, 0);
        for name in model.store.names().map(str::to_string).collect::<Vec<_>>() {
            model.store.set(&name, store.get(&name).clone());
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct ClassifierSidecar {
    config: ClassifierConfig,
    norm: NormStats,
}
