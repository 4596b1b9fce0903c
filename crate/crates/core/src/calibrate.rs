//! Few-shot writer classifier on top of a pre-trained encoder.
//!
//! The classifier is the encoder, a mean pool over tokens and a linear map to
//! writer logits. Patch weights come from the same boost/prune rounds used in
//! pre-training. During calibration the saliency is the gradient of the
//! labelled cross-entropy. At inference no label exists, so it is the gradient
//! of the predictive entropy.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_in_place, NodeId, Tape};
use crate::encoder::{self, EncoderConfig, EncoderState, Layout};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::matching::{saliency, MatchingConfig, MatchingState};
use crate::optim::{adamw_step, AdamState, OptimizerConfig};
use crate::params::ParamSet;
use crate::patches::{patchify, PatchSequence};
use crate::seed;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    pub shots_per_writer: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Also update encoder parameters, not just the head.
    pub fine_tune_encoder: bool,
    /// Matching rounds per image, during calibration and at inference.
    pub matching_rounds: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            shots_per_writer: 5,
            epochs: 40,
            batch_size: 8,
            fine_tune_encoder: true,
            matching_rounds: 5,
            seed: 0,
            optimizer: OptimizerConfig {
                learning_rate: 1e-3,
                beta1: 0.9,
                beta2: 0.999,
                weight_decay: 0.0,
                eps: 1e-8,
            },
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shots_per_writer == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "shots_per_writer and batch_size must be positive".into(),
            ));
        }
        self.optimizer.validate()
    }
}

/// An image with its (claimed) writer.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub id: String,
    pub writer: u32,
    /// Drawn in another writer's style while claiming `writer`.
    pub forged: bool,
    pub image: Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierState {
    pub encoder_config: EncoderConfig,
    /// Encoder parameters only; heads used for pre-training are dropped.
    pub encoder: ParamSet,
    /// `head.weight` (D×W) and `head.bias` (1×W).
    pub head: ParamSet,
    /// Writer id for each class index, ascending.
    pub labels: Vec<u32>,
}

impl ClassifierState {
    /// Fresh head over the online encoder of `state`.
    pub fn from_encoder(state: &EncoderState, labels: Vec<u32>, seed_value: u64) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Config(
                "a classifier needs at least one writer".into(),
            ));
        }
        let mut sorted = labels.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted != labels {
            return Err(Error::Config(
                "writer labels must be strictly ascending".into(),
            ));
        }
        let layout = state.layout()?;
        let d = state.config.embed_dim;
        let w = labels.len();
        let mut rng = seed::rng_for(seed_value, "classifier-head");
        let normal = Normal::new(0.0, 0.01).expect("finite std");
        let mut head = ParamSet::new();
        head.push(
            "head.weight",
            Matrix::from_vec(d, w, (0..d * w).map(|_| normal.sample(&mut rng)).collect()),
        );
        head.push("head.bias", Matrix::zeros(1, w));
        Ok(Self {
            encoder_config: state.config.clone(),
            encoder: state.online.prefix(layout.encoder_len),
            head,
            labels,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn class_of(&self, writer: u32) -> Option<usize> {
        self.labels.binary_search(&writer).ok()
    }

    fn layout(&self) -> Result<Layout> {
        let layout = Layout::for_config(&self.encoder_config)?;
        if self.encoder.len() != layout.encoder_len {
            return Err(Error::State(format!(
                "classifier has {} encoder parameters, layout expects {}",
                self.encoder.len(),
                layout.encoder_len
            )));
        }
        Ok(layout)
    }
}

struct ClassForward {
    tape: Tape,
    encoder: Vec<NodeId>,
    head: Vec<NodeId>,
    input: NodeId,
    logits: NodeId,
}

fn class_forward(
    clf: &ClassifierState,
    layout: &Layout,
    seqs: &[&PatchSequence],
    weights: &[Option<&[f64]>],
    grad_params: bool,
) -> Result<ClassForward> {
    let mut tape = Tape::new();
    let enc = encoder::bind(&mut tape, &clf.encoder, grad_params);
    let head = encoder::bind(&mut tape, &clf.head, grad_params);
    let x = encoder::weighted_input(seqs, weights)?;
    let input = tape.leaf(x, true);
    let b = seqs.len();
    let tokens = encoder::encode_on(&mut tape, &clf.encoder_config, layout, &enc, input, b)?;
    let pooled = encoder::pool_on(&mut tape, tokens, b, clf.encoder_config.token_len);
    let logits = tape.matmul(pooled, head[0]);
    let logits = tape.add_row(logits, head[1]);
    Ok(ClassForward {
        tape,
        encoder: enc,
        head,
        input,
        logits,
    })
}

fn patch_all(images: &[&Image], patch_size: usize) -> Result<Vec<PatchSequence>> {
    images.iter().map(|im| patchify(im, patch_size)).collect()
}

/// Pick `shots` samples per writer without replacement, seeded.
pub fn select_shots(samples: &[LabeledImage], shots: usize, seed_value: u64) -> Result<Vec<usize>> {
    let mut by_writer: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_writer.entry(s.writer).or_default().push(i);
    }
    let mut chosen = Vec::new();
    for (writer, mut idx) in by_writer {
        if idx.len() < shots {
            return Err(Error::Config(format!(
                "writer {writer} has {} calibration samples, {shots} requested",
                idx.len()
            )));
        }
        idx.shuffle(&mut seed::rng(seed::derive_indexed(
            seed_value,
            "shots",
            &[u64::from(writer)],
        )));
        idx.truncate(shots);
        idx.sort_unstable();
        chosen.extend(idx);
    }
    Ok(chosen)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationOutcome {
    pub classifier: ClassifierState,
    /// Mean cross-entropy per epoch, measured during the epoch.
    pub epoch_losses: Vec<f64>,
    /// Loss of the initial classifier on the chosen shots.
    pub initial_loss: f64,
}

/// Fine-tune a fresh head (and optionally the encoder) on a few shots per writer.
pub fn calibrate(
    state: &EncoderState,
    samples: &[LabeledImage],
    cfg: &CalibrationConfig,
    matching: &MatchingConfig,
) -> Result<CalibrationOutcome> {
    cfg.validate()?;
    let chosen = select_shots(samples, cfg.shots_per_writer, cfg.seed)?;
    let mut labels: Vec<u32> = chosen.iter().map(|&i| samples[i].writer).collect();
    labels.sort_unstable();
    labels.dedup();
    let mut clf = ClassifierState::from_encoder(state, labels, cfg.seed)?;
    let layout = clf.layout()?;
    let images: Vec<&Image> = chosen.iter().map(|&i| &samples[i].image).collect();
    let seqs = patch_all(&images, clf.encoder_config.patch_size)?;
    let targets: Vec<usize> = chosen
        .iter()
        .map(|&i| clf.class_of(samples[i].writer).expect("label present"))
        .collect();
    let rounds_cfg = MatchingConfig {
        max_rounds: cfg.matching_rounds,
        ..matching.clone()
    };
    let m = clf.encoder_config.token_len;
    let mut weights: Vec<MatchingState> = (0..seqs.len())
        .map(|_| MatchingState::new(m))
        .collect::<Result<_>>()?;

    let initial_loss = {
        let refs: Vec<&PatchSequence> = seqs.iter().collect();
        let w = vec![None; refs.len()];
        let mut f = class_forward(&clf, &layout, &refs, &w, false)?;
        let loss = f.tape.cross_entropy(f.logits, targets.clone());
        f.tape.scalar(loss)
    };

    let mut enc_opt = AdamState::new(&clf.encoder);
    let mut head_opt = AdamState::new(&clf.head);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        order.shuffle(&mut seed::rng(seed::derive_indexed(
            cfg.seed,
            "calibrate-epoch",
            &[epoch as u64],
        )));
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&PatchSequence> = chunk.iter().map(|&i| &seqs[i]).collect();
            let w: Vec<Option<&[f64]>> = chunk
                .iter()
                .map(|&i| Some(weights[i].weights.weights()))
                .collect();
            let mut f = class_forward(&clf, &layout, &refs, &w, true)?;
            let loss = f
                .tape
                .cross_entropy(f.logits, chunk.iter().map(|&i| targets[i]).collect());
            total += f.tape.scalar(loss) * chunk.len() as f64;
            f.tape.backward(loss)?;
            let head_grads = encoder::gradients(&f.tape, &f.head, &clf.head)?;
            adamw_step(&mut clf.head, &head_grads, &mut head_opt, &cfg.optimizer)?;
            if cfg.fine_tune_encoder {
                let enc_grads = encoder::gradients(&f.tape, &f.encoder, &clf.encoder)?;
                adamw_step(&mut clf.encoder, &enc_grads, &mut enc_opt, &cfg.optimizer)?;
            }
            let g = f
                .tape
                .grad(f.input)?
                .ok_or_else(|| Error::State("input has no gradient".into()))?;
            let sal = saliency(matching.saliency, g, &refs)?;
            for (pos, &i) in chunk.iter().enumerate() {
                weights[i].round(&sal[pos], &rounds_cfg)?;
            }
        }
        epoch_losses.push(total / seqs.len() as f64);
    }
    Ok(CalibrationOutcome {
        classifier: clf,
        epoch_losses,
        initial_loss,
    })
}

/// Inference weights for a batch: `rounds` boost/prune rounds driven by the
/// gradient of the mean predictive entropy. Parameters are not updated.
pub fn inference_weights(
    clf: &ClassifierState,
    seqs: &[&PatchSequence],
    matching: &MatchingConfig,
    rounds: usize,
) -> Result<Vec<MatchingState>> {
    let layout = clf.layout()?;
    let m = clf.encoder_config.token_len;
    let cfg = MatchingConfig {
        max_rounds: rounds,
        ..matching.clone()
    };
    let mut states: Vec<MatchingState> = (0..seqs.len())
        .map(|_| MatchingState::new(m))
        .collect::<Result<_>>()?;
    for _ in 0..rounds {
        let w: Vec<Option<&[f64]>> = states.iter().map(|s| Some(s.weights.weights())).collect();
        let mut f = class_forward(clf, &layout, seqs, &w, false)?;
        let h = f.tape.entropy(f.logits);
        f.tape.backward(h)?;
        let g = f
            .tape
            .grad(f.input)?
            .ok_or_else(|| Error::State("input has no gradient".into()))?;
        let sal = saliency(cfg.saliency, g, seqs)?;
        for (s, sal) in states.iter_mut().zip(&sal) {
            s.round(sal, &cfg)?;
        }
    }
    Ok(states)
}

/// Class probabilities for each image, in label order.
pub fn predict_batch(
    clf: &ClassifierState,
    images: &[&Image],
    matching: &MatchingConfig,
    rounds: usize,
) -> Result<Vec<Vec<f64>>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let layout = clf.layout()?;
    if clf.head.values()[0].cols != clf.num_classes() {
        return Err(Error::Shape(format!(
            "head has {} outputs for {} writers",
            clf.head.values()[0].cols,
            clf.num_classes()
        )));
    }
    let seqs = patch_all(images, clf.encoder_config.patch_size)?;
    let refs: Vec<&PatchSequence> = seqs.iter().collect();
    let states = inference_weights(clf, &refs, matching, rounds)?;
    let w: Vec<Option<&[f64]>> = states.iter().map(|s| Some(s.weights.weights())).collect();
    let f = class_forward(clf, &layout, &refs, &w, false)?;
    let logits = f.tape.value(f.logits);
    Ok((0..logits.rows)
        .map(|r| {
            let mut row = logits.row(r).to_vec();
            softmax_in_place(&mut row);
            row
        })
        .collect())
}

/// Scores for a single image.
pub fn predict(
    clf: &ClassifierState,
    image: &Image,
    matching: &MatchingConfig,
    rounds: usize,
) -> Result<Vec<f64>> {
    Ok(predict_batch(clf, &[image], matching, rounds)?.remove(0))
}
