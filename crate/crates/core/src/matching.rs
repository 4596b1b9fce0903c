//! Online patch reweighting: gradient-guided boosts and change-based pruning.

use serde::{Deserialize, Serialize};

use crate::autograd::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::patches::PatchSequence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    weights: Vec<f64>,
    active: Vec<bool>,
}

impl WeightVector {
    /// Uniform weights over `m` active patches.
    pub fn uniform(m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::Config(
                "a weight vector needs at least one patch".into(),
            ));
        }
        Ok(Self {
            weights: vec![1.0 / m as f64; m],
            active: vec![true; m],
        })
    }

    /// Rebuild from stored parts, checking the invariants.
    pub fn from_parts(weights: Vec<f64>, active: Vec<bool>) -> Result<Self> {
        let v = Self { weights, active };
        v.validate()?;
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn active(&self) -> &[bool] {
        &self.active
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    fn renormalize(&mut self) {
        let total: f64 = self
            .weights
            .iter()
            .zip(&self.active)
            .filter(|(_, &a)| a)
            .map(|(w, _)| w)
            .sum();
        for (w, &a) in self.weights.iter_mut().zip(&self.active) {
            *w = if a && total > 0.0 { *w / total } else { 0.0 };
        }
    }

    /// Check the sum, sign and inactive-zero invariants.
    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != self.active.len() {
            return Err(Error::Shape("weights and mask differ in length".into()));
        }
        let mut sum = 0.0;
        for (i, (&w, &a)) in self.weights.iter().zip(&self.active).enumerate() {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::State(format!("weight {i} is {w}")));
            }
            if !a && w != 0.0 {
                return Err(Error::State(format!("inactive patch {i} has weight {w}")));
            }
            sum += w;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::State(format!("active weights sum to {sum}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchingConfig {
    /// Inner increments per boost.
    pub boost_steps: usize,
    /// Patches boosted per round.
    pub boost_count: usize,
    /// Total weight added to each boosted patch over one round.
    pub boost: f64,
    /// Training iterations between rounds.
    pub interval: usize,
    /// Active-patch floor for pruning, also the early-stop run length.
    pub min_active: usize,
    pub max_rounds: usize,
    pub change_divisor: f64,
    pub saliency: SaliencyRule,
}

/// How a patch's saliency is read off the gradient at the weighted input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencyRule {
    /// Norm of the gradient at the weighted patch.
    InputGradient,
    /// Magnitude of the gradient with respect to the patch weight.
    WeightGradient,
    /// Loss decrease per unit weight increase, clipped at 0.
    Descent,
}

impl Default for MatchingConfig {
    fn default() -> Self {
        Self {
            boost_steps: 3,
            boost_count: 10,
            boost: 0.5,
            interval: 10,
            min_active: 20,
            max_rounds: 20,
            change_divisor: 3.0,
            saliency: SaliencyRule::WeightGradient,
        }
    }
}

impl MatchingConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("boost_steps", self.boost_steps),
            ("boost_count", self.boost_count),
            ("interval", self.interval),
            ("min_active", self.min_active),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("matching {name} must be positive")));
            }
        }
        if !(self.boost >= 0.0) || !self.boost.is_finite() {
            return Err(Error::range("boost", self.boost, "finite and >= 0"));
        }
        if !(self.change_divisor > 0.0) {
            return Err(Error::range("change_divisor", self.change_divisor, "> 0"));
        }
        Ok(())
    }

    /// Whether a round runs after the 0-based training step `step`.
    pub fn is_round_step(&self, step: u64) -> bool {
        (step + 1) % self.interval as u64 == 0
    }
}

fn check_scores(scores: &[f64], m: usize, what: &str) -> Result<()> {
    if scores.len() != m {
        return Err(Error::Shape(format!(
            "{} {what} values for {m} patches",
            scores.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(Error::State(format!(
            "{what} values must be finite and >= 0"
        )));
    }
    Ok(())
}

/// Indices of the active patches that a boost would raise.
pub fn boosted_set(weights: &WeightVector, saliency: &[f64], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..weights.len()).filter(|&i| weights.active[i]).collect();
    order.sort_by(|&a, &b| saliency[b].total_cmp(&saliency[a]).then(a.cmp(&b)));
    order.truncate(count);
    order
}

/// Add `boost / boost_steps` to the top-saliency patches, `boost_steps` times,
/// renormalizing after each increment.
pub fn boost_step(
    weights: &WeightVector,
    saliency: &[f64],
    config: &MatchingConfig,
) -> Result<WeightVector> {
    check_scores(saliency, weights.len(), "saliency")?;
    let chosen = boosted_set(weights, saliency, config.boost_count);
    let inc = config.boost / config.boost_steps as f64;
    let mut out = weights.clone();
    if inc == 0.0 {
        return Ok(out);
    }
    for _ in 0..config.boost_steps {
        for &i in &chosen {
            out.weights[i] += inc;
        }
        out.renormalize();
    }
    Ok(out)
}

/// Mean active change divided by the configured divisor.
pub fn change_threshold(weights: &WeightVector, changes: &[f64], config: &MatchingConfig) -> f64 {
    let (sum, n) = changes
        .iter()
        .zip(&weights.active)
        .filter(|(_, &a)| a)
        .fold((0.0, 0usize), |(s, n), (c, _)| (s + c, n + 1));
    if n == 0 {
        return 0.0;
    }
    sum / n as f64 / config.change_divisor
}

/// Deactivate low-change patches, lowest change first, down to the floor.
pub fn prune_step(
    weights: &WeightVector,
    changes: &[f64],
    config: &MatchingConfig,
) -> Result<WeightVector> {
    check_scores(changes, weights.len(), "change")?;
    let threshold = change_threshold(weights, changes, config);
    let floor = config.min_active.min(weights.len());
    let mut candidates: Vec<usize> = (0..weights.len())
        .filter(|&i| weights.active[i] && changes[i] < threshold)
        .collect();
    candidates.sort_by(|&a, &b| changes[a].total_cmp(&changes[b]).then(a.cmp(&b)));
    let mut out = weights.clone();
    let mut active = out.active_count();
    for i in candidates {
        if active <= floor {
            break;
        }
        out.active[i] = false;
        out.weights[i] = 0.0;
        active -= 1;
    }
    out.renormalize();
    Ok(out)
}

/// Weight changes below this are rounding noise and count as zero. Without it
/// a converged patch, whose change has rounded to exactly 0, is pruned against
/// residual changes of order 1e-12 on the others.
pub const CHANGE_FLOOR: f64 = 1e-12;

/// Matching progress for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchingState {
    pub weights: WeightVector,
    /// Weights at the end of the previous round.
    previous: Vec<f64>,
    pub rounds: usize,
    /// Consecutive rounds with at least `min_active` patches over threshold.
    stable_rounds: usize,
    pub stopped: bool,
}

impl MatchingState {
    pub fn new(m: usize) -> Result<Self> {
        let weights = WeightVector::uniform(m)?;
        Ok(Self {
            previous: weights.weights.clone(),
            weights,
            rounds: 0,
            stable_rounds: 0,
            stopped: false,
        })
    }

    /// Rebuild a state saved mid-training.
    pub fn from_parts(
        weights: WeightVector,
        previous: Vec<f64>,
        rounds: usize,
        stable_rounds: usize,
        stopped: bool,
    ) -> Result<Self> {
        if previous.len() != weights.len() {
            return Err(Error::Shape(format!(
                "{} previous weights for {} patches",
                previous.len(),
                weights.len()
            )));
        }
        Ok(Self {
            weights,
            previous,
            rounds,
            stable_rounds,
            stopped,
        })
    }

    pub fn previous(&self) -> &[f64] {
        &self.previous
    }

    pub fn stable_rounds(&self) -> usize {
        self.stable_rounds
    }

    pub fn is_finished(&self, config: &MatchingConfig) -> bool {
        self.stopped || self.rounds >= config.max_rounds
    }

    /// One boost-then-prune round. No-op once finished.
    pub fn round(&mut self, saliency: &[f64], config: &MatchingConfig) -> Result<()> {
        if self.is_finished(config) {
            return Ok(());
        }
        let boosted = boost_step(&self.weights, saliency, config)?;
        let changes: Vec<f64> = boosted
            .weights
            .iter()
            .zip(&self.previous)
            .map(|(a, b)| {
                let c = (a - b).abs();
                if c < CHANGE_FLOOR {
                    0.0
                } else {
                    c
                }
            })
            .collect();
        let threshold = change_threshold(&boosted, &changes, config);
        let over = changes
            .iter()
            .zip(&boosted.active)
            .filter(|(c, &a)| a && **c >= threshold)
            .count();
        self.weights = prune_step(&boosted, &changes, config)?;
        self.previous = self.weights.weights.clone();
        self.rounds += 1;
        self.stable_rounds = if over >= config.min_active {
            self.stable_rounds + 1
        } else {
            0
        };
        if self.stable_rounds >= config.min_active || self.rounds >= config.max_rounds {
            self.stopped = true;
        }
        Ok(())
    }
}

/// Per-row L2 norms of `grad`, shaped `(B·M)×d`, reshaped to `B` lists of `M`.
pub fn sample_saliency(grad: &crate::tensor::Matrix, batch: usize) -> Result<Vec<Vec<f64>>> {
    if batch == 0 || grad.rows % batch != 0 {
        return Err(Error::Shape(format!(
            "{} gradient rows for a batch of {batch}",
            grad.rows
        )));
    }
    let m = grad.rows / batch;
    Ok((0..batch)
        .map(|b| {
            (0..m)
                .map(|i| {
                    grad.row(b * m + i)
                        .iter()
                        .map(|g| g * g)
                        .sum::<f64>()
                        .sqrt()
                })
                .collect()
        })
        .collect())
}

/// Per-sample saliency under `rule`. `grad` is the gradient at the stacked
/// weighted input and `patches` are the unweighted sequences behind it.
///
/// With `x̃_i = w_i·M·x_i`, the weight gradient is `M·⟨∂L/∂x̃_i, x_i⟩`, which
/// vanishes on blank patches.
pub fn saliency(
    rule: SaliencyRule,
    grad: &crate::tensor::Matrix,
    patches: &[&PatchSequence],
) -> Result<Vec<Vec<f64>>> {
    let batch = patches.len();
    if rule == SaliencyRule::InputGradient {
        return sample_saliency(grad, batch);
    }
    let m = patches.first().map_or(0, |p| p.patches.rows);
    let dim = patches.first().map_or(0, |p| p.patches.cols);
    if grad.shape() != (batch * m, dim) {
        return Err(Error::Shape(format!(
            "gradient {:?} for {batch} sequences of {m}x{dim}",
            grad.shape()
        )));
    }
    Ok(patches
        .iter()
        .enumerate()
        .map(|(b, seq)| {
            (0..m)
                .map(|i| {
                    let d: f64 = grad
                        .row(b * m + i)
                        .iter()
                        .zip(seq.patches.row(i))
                        .map(|(g, x)| g * x)
                        .sum();
                    let dw = d * m as f64;
                    match rule {
                        SaliencyRule::Descent => (-dw).max(0.0),
                        _ => dw.abs(),
                    }
                })
                .collect()
        })
        .collect())
}

/// Saliency per patch: gradient norm at the weighted input, averaged over the batch.
pub fn patch_saliency(tape: &Tape, input: NodeId, batch: usize) -> Result<Vec<f64>> {
    let grad = tape
        .grad(input)?
        .ok_or_else(|| Error::State("weighted input was not recorded with gradients".into()))?;
    let per_sample = sample_saliency(grad, batch)?;
    let m = per_sample[0].len();
    Ok((0..m)
        .map(|i| per_sample.iter().map(|s| s[i]).sum::<f64>() / batch as f64)
        .collect())
}
