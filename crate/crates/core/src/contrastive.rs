//! Momentum contrastive pre-training with adaptive patch weights.
//!
//! Each step draws a batch, makes two augmented views per image, encodes the
//! first (reweighted) view with the online branch and the second (unweighted)
//! view with the momentum branch, and minimizes InfoNCE with in-batch keys plus
//! an optional FIFO queue of past keys as negatives.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autograd::{log_sum_exp, NodeId, Tape};
use crate::encoder::{self, Branch, EncoderState};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::matching::{self, MatchingConfig, MatchingState};
use crate::optim::{adamw_step, AdamState, OptimizerConfig};
use crate::patches::{augment, patchify, AugmentPolicy, PatchSequence};
use crate::seed;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastConfig {
    pub temperature: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub steps: u64,
    /// Keys kept from earlier steps as extra negatives; 0 disables the queue.
    pub queue_size: usize,
    pub log_interval: u64,
    /// Record elapsed milliseconds in the metrics log. Off by default so that
    /// logs from identical runs are byte-identical.
    pub log_wall_time: bool,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            temperature: 0.2,
            momentum: 0.99,
            batch_size: 32,
            steps: 500,
            queue_size: 0,
            log_interval: 10,
            log_wall_time: false,
            seed: 0,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::range(
                "temperature",
                self.temperature,
                "finite and > 0",
            ));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::range("momentum", self.momentum, "in [0, 1]"));
        }
        if self.batch_size < 2 && self.queue_size == 0 {
            return Err(Error::Config(
                "batch_size must be >= 2 when the key queue is disabled".into(),
            ));
        }
        if self.batch_size == 0 || self.log_interval == 0 {
            return Err(Error::Config(
                "batch_size and log_interval must be positive".into(),
            ));
        }
        self.optimizer.validate()
    }
}

/// `−log softmax(p·k/τ)[positive]` over the given keys.
pub fn info_nce(query: &[f64], keys: &[&[f64]], positive: usize, temperature: f64) -> Result<f64> {
    if !(temperature > 0.0) {
        return Err(Error::range("temperature", temperature, "> 0"));
    }
    if keys.is_empty() || positive >= keys.len() {
        return Err(Error::Config(format!(
            "positive index {positive} with {} keys",
            keys.len()
        )));
    }
    if query.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("query"));
    }
    let mut logits = Vec::with_capacity(keys.len());
    for k in keys {
        if k.len() != query.len() {
            return Err(Error::Shape(format!(
                "key of length {} for query of length {}",
                k.len(),
                query.len()
            )));
        }
        if k.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("key"));
        }
        logits.push(query.iter().zip(*k).map(|(a, b)| a * b).sum::<f64>() / temperature);
    }
    // rounding can leave a tiny negative value when the positive dominates
    Ok((log_sum_exp(&logits) - logits[positive]).max(0.0))
}

/// `momentum ← m·momentum + (1 − m)·online` for every paired parameter.
pub fn ema_update(state: &mut EncoderState, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::range("momentum", m, "in [0, 1]"));
    }
    let n = state.momentum.len();
    if n > state.online.len() {
        return Err(Error::Shape(
            "momentum branch has more parameters than the online branch".into(),
        ));
    }
    state
        .online
        .prefix(n)
        .ensure_matches(&state.momentum, "ema update")?;
    for k in 0..n {
        let online = &state.online.values()[k];
        let target = &mut state.momentum.values_mut()[k];
        for (t, o) in target.data.iter_mut().zip(&online.data) {
            *t = m * *t + (1.0 - m) * o;
        }
    }
    Ok(())
}

/// A recorded contrastive forward pass.
pub struct ContrastForward {
    pub tape: Tape,
    /// Online parameters as bound on the tape.
    pub online: Vec<NodeId>,
    /// Momentum parameters as bound on the tape; never require gradients.
    pub momentum: Vec<NodeId>,
    /// Stacked weighted online input; its gradient drives patch saliency.
    pub input: NodeId,
    pub loss: NodeId,
    /// Momentum keys for this batch, `B×D`.
    pub keys: Matrix,
}

/// Build the batch loss: query `i` is positive with key `i`, and every other
/// key in the batch or the queue is a negative.
pub fn contrast_forward(
    state: &EncoderState,
    online_views: &[&PatchSequence],
    weights: &[Option<&[f64]>],
    momentum_views: &[&PatchSequence],
    queue: &[Vec<f64>],
    temperature: f64,
) -> Result<ContrastForward> {
    let b = online_views.len();
    if b == 0 || momentum_views.len() != b {
        return Err(Error::Shape(
            "online and momentum views must pair up".into(),
        ));
    }
    if b + queue.len() < 2 {
        return Err(Error::Config("need at least one negative key".into()));
    }
    let layout = state.layout()?;
    let cfg = &state.config;
    let mut tape = Tape::new();
    let online = encoder::bind(&mut tape, &state.online, true);
    let momentum = encoder::bind(&mut tape, &state.momentum, false);

    let x = encoder::weighted_input(online_views, weights)?;
    let input = tape.leaf(x, true);
    let tokens = encoder::encode_on(&mut tape, cfg, &layout, &online, input, b)?;
    let queries = encoder::heads_on(&mut tape, cfg, &layout, &online, tokens, b, Branch::Online)?;

    let none = vec![None; b];
    let x = encoder::weighted_input(momentum_views, &none)?;
    let key_input = tape.leaf(x, false);
    let tokens = encoder::encode_on(&mut tape, cfg, &layout, &momentum, key_input, b)?;
    let key_node = encoder::heads_on(
        &mut tape,
        cfg,
        &layout,
        &momentum,
        tokens,
        b,
        Branch::Momentum,
    )?;
    let keys = tape.value(key_node).clone();

    let all_keys = if queue.is_empty() {
        key_node
    } else {
        let d = keys.cols;
        let mut data = Vec::with_capacity(queue.len() * d);
        for q in queue {
            if q.len() != d {
                return Err(Error::Shape(format!(
                    "queued key of length {} for dimension {d}",
                    q.len()
                )));
            }
            data.extend_from_slice(q);
        }
        let q = tape.leaf(Matrix::from_vec(queue.len(), d, data), false);
        tape.concat_rows(vec![key_node, q])
    };
    let logits = tape.matmul_t(queries, all_keys);
    let logits = tape.scale(logits, 1.0 / temperature);
    let loss = tape.cross_entropy(logits, (0..b).collect());
    Ok(ContrastForward {
        tape,
        online,
        momentum,
        input,
        loss,
        keys,
    })
}

/// An image available for pre-training.
#[derive(Debug, Clone)]
pub struct TrainImage {
    pub id: String,
    pub image: Image,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub contrast: ContrastConfig,
    pub matching: MatchingConfig,
    pub augment: AugmentPolicy,
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.contrast.validate()?;
        self.matching.validate()?;
        self.augment.validate()
    }
}

/// Everything that evolves during pre-training.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainState {
    pub encoder: EncoderState,
    pub optimizer: AdamState,
    /// One entry per training image, in input order.
    pub matching: Vec<MatchingState>,
    pub queue: VecDeque<Vec<f64>>,
}

impl PretrainState {
    pub fn new(encoder: EncoderState, images: usize) -> Result<Self> {
        let m = encoder.config.token_len;
        Ok(Self {
            optimizer: AdamState::new(&encoder.online),
            matching: (0..images)
                .map(|_| MatchingState::new(m))
                .collect::<Result<_>>()?,
            queue: VecDeque::new(),
            encoder,
        })
    }

    pub fn step(&self) -> u64 {
        self.encoder.step
    }

    pub fn mean_active_patches(&self) -> f64 {
        if self.matching.is_empty() {
            return 0.0;
        }
        let total: usize = self.matching.iter().map(|s| s.weights.active_count()).sum();
        total as f64 / self.matching.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub mean_active_patches: f64,
    pub matching_round: bool,
}

/// Batch indices for a step: distinct, ordered, a pure function of seed and step.
pub fn batch_indices(seed_value: u64, step: u64, images: usize, batch_size: usize) -> Vec<usize> {
    let mut rng = seed::rng(seed::derive_indexed(seed_value, "batch", &[step]));
    rand::seq::index::sample(&mut rng, images, batch_size.min(images)).into_vec()
}

/// One optimizer step plus EMA, queue and (on round steps) matching updates.
pub fn pretrain_step(
    state: &mut PretrainState,
    data: &[TrainImage],
    cfg: &PretrainConfig,
) -> Result<StepOutcome> {
    if data.len() != state.matching.len() {
        return Err(Error::State(format!(
            "{} training images but {} matching states",
            data.len(),
            state.matching.len()
        )));
    }
    let step = state.encoder.step;
    let c = &cfg.contrast;
    let batch = batch_indices(c.seed, step, data.len(), c.batch_size);
    if batch.len() < 2 && state.queue.is_empty() {
        return Err(Error::Config(
            "a step needs at least 2 images or a non-empty key queue".into(),
        ));
    }
    let patch_size = state.encoder.config.patch_size;
    let mut online_views = Vec::with_capacity(batch.len());
    let mut momentum_views = Vec::with_capacity(batch.len());
    for (pos, &i) in batch.iter().enumerate() {
        let item = &data[i];
        let partner = &data[batch[(pos + 1) % batch.len()]].image;
        let a = augment(&item.image, &cfg.augment, &item.id, 2 * step, Some(partner))?;
        let b = augment(
            &item.image,
            &cfg.augment,
            &item.id,
            2 * step + 1,
            Some(partner),
        )?;
        online_views.push(patchify(&a, patch_size)?);
        momentum_views.push(patchify(&b, patch_size)?);
    }
    let online_refs: Vec<&PatchSequence> = online_views.iter().collect();
    let momentum_refs: Vec<&PatchSequence> = momentum_views.iter().collect();
    let weights: Vec<Option<&[f64]>> = batch
        .iter()
        .map(|&i| Some(state.matching[i].weights.weights()))
        .collect();
    let queue: Vec<Vec<f64>> = state.queue.iter().cloned().collect();

    let mut fwd = contrast_forward(
        &state.encoder,
        &online_refs,
        &weights,
        &momentum_refs,
        &queue,
        c.temperature,
    )?;
    let loss = fwd.tape.scalar(fwd.loss);
    if !loss.is_finite() {
        return Err(Error::NonFinite("contrastive loss"));
    }
    fwd.tape.backward(fwd.loss)?;
    let grads = encoder::gradients(&fwd.tape, &fwd.online, &state.encoder.online)?;
    let saliency = {
        let g = fwd
            .tape
            .grad(fwd.input)?
            .ok_or_else(|| Error::State("online input has no gradient".into()))?;
        matching::saliency(cfg.matching.saliency, g, &online_refs)?
    };

    adamw_step(
        &mut state.encoder.online,
        &grads,
        &mut state.optimizer,
        &c.optimizer,
    )?;
    ema_update(&mut state.encoder, c.momentum)?;
    if c.queue_size > 0 {
        for r in 0..fwd.keys.rows {
            state.queue.push_back(fwd.keys.row(r).to_vec());
        }
        while state.queue.len() > c.queue_size {
            state.queue.pop_front();
        }
    }
    let matching_round = cfg.matching.is_round_step(step);
    if matching_round {
        for (pos, &i) in batch.iter().enumerate() {
            state.matching[i].round(&saliency[pos], &cfg.matching)?;
        }
    }
    state.encoder.step += 1;
    Ok(StepOutcome {
        loss,
        mean_active_patches: state.mean_active_patches(),
        matching_round,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub loss: f64,
    pub mean_active_patches: f64,
    pub wall_ms: u64,
}

pub const METRICS_HEADER: &str = "step,loss,mean_active_patches,wall_ms";

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.12e},{:.6},{}",
            r.step, r.loss, r.mean_active_patches, r.wall_ms
        );
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Parse("metrics log header missing".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(Error::Parse(format!("metrics row {line:?}")));
            }
            let bad = |_| Error::Parse(format!("metrics row {line:?}"));
            Ok(MetricRow {
                step: f[0]
                    .parse()
                    .map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                loss: f[1]
                    .parse()
                    .map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
                mean_active_patches: f[2]
                    .parse()
                    .map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
                wall_ms: f[3]
                    .parse()
                    .map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            })
        })
        .collect()
}

/// Run steps until `cfg.contrast.steps`, logging every `log_interval` steps.
///
/// `after_step` sees the state after each step and may stop the run early by
/// returning `false` (used for periodic checkpoints and interruption tests).
pub fn pretrain(
    state: &mut PretrainState,
    data: &[TrainImage],
    cfg: &PretrainConfig,
    mut after_step: impl FnMut(&PretrainState, &StepOutcome) -> Result<bool>,
) -> Result<Vec<MetricRow>> {
    cfg.validate()?;
    let start = Instant::now();
    let mut rows = Vec::new();
    while state.step() < cfg.contrast.steps {
        let step = state.step();
        let outcome = pretrain_step(state, data, cfg)?;
        if step % cfg.contrast.log_interval == 0 {
            rows.push(MetricRow {
                step,
                loss: outcome.loss,
                mean_active_patches: outcome.mean_active_patches,
                wall_ms: if cfg.contrast.log_wall_time {
                    start.elapsed().as_millis() as u64
                } else {
                    0
                },
            });
        }
        if !after_step(state, &outcome)? {
            break;
        }
    }
    Ok(rows)
}
