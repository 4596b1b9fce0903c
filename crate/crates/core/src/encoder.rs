//! Patch-token transformer encoder with online and momentum heads.
//!
//! A batch of `B` patch sequences is stacked into one `(B·L)×(P²·C)` matrix;
//! linear layers and norms run on the stack, attention runs per sample. The
//! online branch is encoder → patch head → projection → prediction; the momentum
//! branch is a parameter copy without the prediction head.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::patches::PatchSequence;
use crate::seed;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// Tokens per sequence; must equal the patch count of the inputs.
    pub token_len: usize,
    pub mlp_ratio: f64,
    pub patch_size: usize,
    pub channels: usize,
    pub projection_layers: usize,
    pub prediction_layers: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            depth: 2,
            heads: 4,
            token_len: 64,
            mlp_ratio: 2.0,
            patch_size: 16,
            channels: 1,
            projection_layers: 3,
            prediction_layers: 2,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.token_len == 0 || self.patch_size == 0 || self.channels == 0 {
            return Err(Error::Config(
                "token_len, patch_size and channels must be positive".into(),
            ));
        }
        if self.projection_layers == 0 || self.prediction_layers == 0 {
            return Err(Error::Config("head layer counts must be positive".into()));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(Error::range("mlp_ratio", self.mlp_ratio, "must be > 0"));
        }
        Ok(())
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn hidden_dim(&self) -> usize {
        ((self.embed_dim as f64 * self.mlp_ratio).round() as usize).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Online,
    Momentum,
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gain: usize,
    shift: usize,
}

#[derive(Debug, Clone)]
struct Block {
    norm1: Norm,
    qkv: Linear,
    out: Linear,
    norm2: Norm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Debug, Clone, Copy)]
struct HeadLayer {
    fc: Linear,
    norm: Norm,
}

/// Parameter indices for one configuration. Momentum sets share the prefix
/// up to and including the projection head.
#[derive(Debug, Clone)]
pub struct Layout {
    embed: Linear,
    position: usize,
    blocks: Vec<Block>,
    final_norm: Norm,
    patch_head: Linear,
    projection: Vec<HeadLayer>,
    prediction: Vec<HeadLayer>,
    /// Number of leading parameters that form the bare encoder.
    pub encoder_len: usize,
    /// Number of leading parameters mirrored by the momentum branch.
    pub momentum_len: usize,
}

struct Builder<'a, R: Rng> {
    params: ParamSet,
    rng: &'a mut R,
}

impl<R: Rng> Builder<'_, R> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..fan_in * fan_out)
            .map(|_| normal.sample(self.rng))
            .collect();
        Linear {
            weight: self.params.push(
                format!("{name}.weight"),
                Matrix::from_vec(fan_in, fan_out, data),
            ),
            bias: self
                .params
                .push(format!("{name}.bias"), Matrix::zeros(1, fan_out)),
        }
    }

    fn norm(&mut self, name: &str, dim: usize) -> Norm {
        Norm {
            gain: self
                .params
                .push(format!("{name}.gain"), Matrix::filled(1, dim, 1.0)),
            shift: self
                .params
                .push(format!("{name}.shift"), Matrix::zeros(1, dim)),
        }
    }

    fn head(&mut self, name: &str, layers: usize, dim: usize) -> Vec<HeadLayer> {
        (0..layers)
            .map(|i| HeadLayer {
                fc: self.linear(&format!("{name}.{i}.fc"), dim, dim),
                norm: self.norm(&format!("{name}.{i}.norm"), dim),
            })
            .collect()
    }
}

fn build(config: &EncoderConfig) -> (ParamSet, Layout) {
    let mut rng = seed::rng_for(config.seed, "encoder-init");
    let d = config.embed_dim;
    let mut b = Builder {
        params: ParamSet::new(),
        rng: &mut rng,
    };
    let embed = b.linear("encoder.embed", config.patch_dim(), d);
    let normal = Normal::new(0.0, 0.02).expect("finite std");
    let pos = (0..config.token_len * d)
        .map(|_| normal.sample(b.rng))
        .collect();
    let position = b.params.push(
        "encoder.position",
        Matrix::from_vec(config.token_len, d, pos),
    );
    let blocks = (0..config.depth)
        .map(|i| {
            let p = format!("encoder.block{i}");
            Block {
                norm1: b.norm(&format!("{p}.norm1"), d),
                qkv: b.linear(&format!("{p}.qkv"), d, 3 * d),
                out: b.linear(&format!("{p}.out"), d, d),
                norm2: b.norm(&format!("{p}.norm2"), d),
                fc1: b.linear(&format!("{p}.fc1"), d, config.hidden_dim()),
                fc2: b.linear(&format!("{p}.fc2"), config.hidden_dim(), d),
            }
        })
        .collect();
    let final_norm = b.norm("encoder.final_norm", d);
    let encoder_len = b.params.len();
    let patch_head = b.linear("patch_head", d, d);
    let projection = b.head("projection", config.projection_layers, d);
    let momentum_len = b.params.len();
    let prediction = b.head("prediction", config.prediction_layers, d);
    let layout = Layout {
        embed,
        position,
        blocks,
        final_norm,
        patch_head,
        projection,
        prediction,
        encoder_len,
        momentum_len,
    };
    (b.params, layout)
}

impl Layout {
    pub fn for_config(config: &EncoderConfig) -> Result<Layout> {
        config.validate()?;
        // layout is cheap relative to a training step; rebuild rather than store indices twice
        Ok(build(config).1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderState {
    pub config: EncoderConfig,
    pub online: ParamSet,
    pub momentum: ParamSet,
    pub step: u64,
}

pub fn init_state(config: &EncoderConfig) -> Result<EncoderState> {
    config.validate()?;
    let (online, layout) = build(config);
    let momentum = online.prefix(layout.momentum_len);
    Ok(EncoderState {
        config: config.clone(),
        online,
        momentum,
        step: 0,
    })
}

impl EncoderState {
    pub fn layout(&self) -> Result<Layout> {
        Layout::for_config(&self.config)
    }

    pub fn params(&self, branch: Branch) -> &ParamSet {
        match branch {
            Branch::Online => &self.online,
            Branch::Momentum => &self.momentum,
        }
    }
}

/// Put every parameter of `params` on the tape as a leaf.
pub fn bind(tape: &mut Tape, params: &ParamSet, requires_grad: bool) -> Vec<NodeId> {
    params
        .values()
        .iter()
        .map(|m| tape.leaf(m.clone(), requires_grad))
        .collect()
}

/// Gradients for every bound parameter; parameters off the graph get zeros.
pub fn gradients(tape: &Tape, bound: &[NodeId], params: &ParamSet) -> Result<Vec<Matrix>> {
    bound
        .iter()
        .zip(params.values())
        .map(|(&id, m)| {
            Ok(tape
                .grad(id)?
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(m.rows, m.cols)))
        })
        .collect()
}

/// Stack sequences into `(B·L)×(P²·C)` with each patch scaled by `w_i·M`.
///
/// Absent weights leave patches unscaled, which is the uniform `1/M` vector.
pub fn weighted_input(seqs: &[&PatchSequence], weights: &[Option<&[f64]>]) -> Result<Matrix> {
    if seqs.is_empty() || seqs.len() != weights.len() {
        return Err(Error::Shape("need one weight entry per sequence".into()));
    }
    let (m, dim) = seqs[0].patches.shape();
    let mut out = Matrix::zeros(seqs.len() * m, dim);
    for (b, (seq, w)) in seqs.iter().zip(weights).enumerate() {
        if seq.patches.shape() != (m, dim) {
            return Err(Error::Shape(format!(
                "sequence {b} has shape {:?}, expected {:?}",
                seq.patches.shape(),
                (m, dim)
            )));
        }
        if let Some(w) = w {
            if w.len() != m {
                return Err(Error::Shape(format!(
                    "weight vector of length {} for {m} patches",
                    w.len()
                )));
            }
        }
        for i in 0..m {
            let scale = w.map_or(1.0, |w| w[i] * m as f64);
            let row = out.row_mut(b * m + i);
            for (o, x) in row.iter_mut().zip(seq.patches.row(i)) {
                *o = x * scale;
            }
        }
    }
    Ok(out)
}

fn linear(tape: &mut Tape, p: &[NodeId], l: Linear, x: NodeId) -> NodeId {
    let y = tape.matmul(x, p[l.weight]);
    tape.add_row(y, p[l.bias])
}

fn norm(tape: &mut Tape, p: &[NodeId], n: Norm, x: NodeId) -> NodeId {
    let y = tape.standardize(x);
    let y = tape.mul_row(y, p[n.gain]);
    tape.add_row(y, p[n.shift])
}

/// Encoder tokens for a stacked input of `batch` sequences: `(B·L)×D`.
pub fn encode_on(
    tape: &mut Tape,
    config: &EncoderConfig,
    layout: &Layout,
    p: &[NodeId],
    input: NodeId,
    batch: usize,
) -> Result<NodeId> {
    let l = config.token_len;
    let (rows, cols) = tape.value(input).shape();
    if rows != batch * l || cols != config.patch_dim() {
        return Err(Error::Shape(format!(
            "input {rows}x{cols} does not match {batch} sequences of {l} patches of size {}",
            config.patch_dim()
        )));
    }
    let d = config.embed_dim;
    let dh = d / config.heads;
    let mut h = linear(tape, p, layout.embed, input);
    let pos = tape.concat_rows(vec![p[layout.position]; batch]);
    h = tape.add(h, pos);
    for block in &layout.blocks {
        let a = norm(tape, p, block.norm1, h);
        let qkv = linear(tape, p, block.qkv, a);
        let mut samples = Vec::with_capacity(batch);
        for b in 0..batch {
            let s = tape.slice_rows(qkv, b * l, l);
            let mut heads = Vec::with_capacity(config.heads);
            for hd in 0..config.heads {
                let q = tape.slice_cols(s, hd * dh, dh);
                let k = tape.slice_cols(s, d + hd * dh, dh);
                let v = tape.slice_cols(s, 2 * d + hd * dh, dh);
                let scores = tape.matmul_t(q, k);
                let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
                let attn = tape.softmax_rows(scores);
                heads.push(tape.matmul(attn, v));
            }
            samples.push(tape.concat_cols(heads));
        }
        let o = tape.concat_rows(samples);
        let o = linear(tape, p, block.out, o);
        h = tape.add(h, o);
        let a = norm(tape, p, block.norm2, h);
        let f = linear(tape, p, block.fc1, a);
        let f = tape.gelu(f);
        let f = linear(tape, p, block.fc2, f);
        h = tape.add(h, f);
    }
    Ok(norm(tape, p, layout.final_norm, h))
}

/// Mean of each sample's `L` tokens: `B×D`.
pub fn pool_on(tape: &mut Tape, tokens: NodeId, batch: usize, token_len: usize) -> NodeId {
    let pooled: Vec<NodeId> = (0..batch)
        .map(|b| {
            let s = tape.slice_rows(tokens, b * token_len, token_len);
            tape.mean_rows(s)
        })
        .collect();
    tape.concat_rows(pooled)
}

fn mlp_head(tape: &mut Tape, p: &[NodeId], layers: &[HeadLayer], mut x: NodeId) -> NodeId {
    for (i, layer) in layers.iter().enumerate() {
        x = linear(tape, p, layer.fc, x);
        x = norm(tape, p, layer.norm, x);
        if i + 1 < layers.len() {
            x = tape.gelu(x);
        }
    }
    x
}

/// Unit-norm embeddings `B×D` from encoder tokens.
pub fn heads_on(
    tape: &mut Tape,
    config: &EncoderConfig,
    layout: &Layout,
    p: &[NodeId],
    tokens: NodeId,
    batch: usize,
    branch: Branch,
) -> Result<NodeId> {
    let need = match branch {
        Branch::Online => layout.momentum_len + 2 * 2 * layout.prediction.len(),
        Branch::Momentum => layout.momentum_len,
    };
    if p.len() != need {
        return Err(Error::State(format!(
            "{branch:?} heads need {need} bound parameters, got {}",
            p.len()
        )));
    }
    let pooled = pool_on(tape, tokens, batch, config.token_len);
    let mut x = linear(tape, p, layout.patch_head, pooled);
    x = mlp_head(tape, p, &layout.projection, x);
    if branch == Branch::Online {
        x = mlp_head(tape, p, &layout.prediction, x);
    }
    Ok(tape.l2_normalize(x))
}

/// Encoder output for one sequence, `L×D`, without gradients.
pub fn encode(
    seq: &PatchSequence,
    weights: Option<&[f64]>,
    branch: Branch,
    state: &EncoderState,
) -> Result<Matrix> {
    let layout = state.layout()?;
    let params = state.params(branch);
    let mut tape = Tape::new();
    let p = bind(&mut tape, params, false);
    let x = weighted_input(&[seq], &[weights])?;
    let x = tape.leaf(x, false);
    let tokens = encode_on(&mut tape, &state.config, &layout, &p, x, 1)?;
    Ok(tape.value(tokens).clone())
}

/// Head embedding for one token set, without gradients.
pub fn head_forward(tokens: &Matrix, branch: Branch, state: &EncoderState) -> Result<Vec<f64>> {
    let layout = state.layout()?;
    if tokens.shape() != (state.config.token_len, state.config.embed_dim) {
        return Err(Error::Shape(format!("token set {:?}", tokens.shape())));
    }
    let mut tape = Tape::new();
    let p = bind(&mut tape, state.params(branch), false);
    let t = tape.leaf(tokens.clone(), false);
    let out = heads_on(&mut tape, &state.config, &layout, &p, t, 1, branch)?;
    Ok(tape.value(out).data.clone())
}
