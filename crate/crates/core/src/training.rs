//! Tuple mining from tagged submaps, Adam, the step-decay schedule and the
//! training loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Array, Real, Tape};
use crate::error::{Error, Result};
use crate::geometry::{NeighborTable, Submap};
use crate::losses::{batch_loss, LossConfig, TupleVars};
use crate::model::{descriptor, ModelConfig, ModelParams, ParamVars};

/// Match radii in meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MiningRule {
    pub positive_radius: f64,
    pub negative_radius: f64,
    pub eval_radius: f64,
}

impl Default for MiningRule {
    fn default() -> Self {
        MiningRule {
            positive_radius: 10.0,
            negative_radius: 50.0,
            eval_radius: 25.0,
        }
    }
}

impl MiningRule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.positive_radius
            && self.positive_radius < self.eval_radius
            && self.eval_radius < self.negative_radius)
        {
            return Err(Error::Invalid(format!(
                "radii must satisfy 0 < positive ({}) < eval ({}) < negative ({})",
                self.positive_radius, self.eval_radius, self.negative_radius
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub n_positives: usize,
    /// Total negatives per tuple, counting the extra negative.
    pub n_negatives: usize,
    pub lr0: f64,
    pub decay_factor: f64,
    pub decay_steps: u64,
    pub epochs: usize,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0 disables).
    pub checkpoint_every: u64,
}

impl TrainConfig {
    /// 2 positives, 9 negatives, lr 5e-4 decayed by 0.7 every 200k steps, 20 epochs.
    pub fn full_size() -> Self {
        TrainConfig {
            n_positives: 2,
            n_negatives: 9,
            lr0: 0.0005,
            decay_factor: 0.7,
            decay_steps: 200_000,
            epochs: 20,
            seed: 0,
            checkpoint_every: 0,
        }
    }

    /// Same tuple shape and optimizer with a schedule that fits a desk world.
    pub fn desk() -> Self {
        TrainConfig {
            decay_steps: 2000,
            epochs: DESK_EPOCHS,
            ..Self::full_size()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_positives == 0 {
            return Err(Error::Invalid("n_positives must be >= 1".into()));
        }
        if self.n_negatives < 2 {
            return Err(Error::Invalid(
                "n_negatives must be >= 2 (at least one negative plus the extra negative)".into(),
            ));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Invalid(format!("lr0 must be > 0, got {}", self.lr0)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Invalid(format!("decay_factor must be in (0, 1], got {}", self.decay_factor)));
        }
        if self.decay_steps == 0 {
            return Err(Error::Invalid("decay_steps must be >= 1".into()));
        }
        Ok(())
    }
}

pub const DESK_EPOCHS: usize = 4;

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Indices into a submap list forming one training tuple.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TupleIndices {
    pub anchor: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    pub other: usize,
}

impl TupleIndices {
    pub fn members(&self) -> impl Iterator<Item = usize> + '_ {
        std::iter::once(self.anchor)
            .chain(self.positives.iter().copied())
            .chain(self.negatives.iter().copied())
            .chain(std::iter::once(self.other))
    }
}

fn choose(pool: &[usize], k: usize, class: &'static str, anchor: &str, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if pool.len() < k {
        return Err(Error::Insufficient {
            class,
            anchor: anchor.to_string(),
            need: k,
            found: pool.len(),
        });
    }
    Ok(pool.choose_multiple(rng, k).copied().collect())
}

/// Draws positives within `positive_radius` of the anchor, `n_negatives - 1`
/// negatives beyond `negative_radius`, and an extra negative beyond
/// `negative_radius` of every member chosen so far.
pub fn sample_tuple(
    submaps: &[Submap],
    anchor: usize,
    n_positives: usize,
    n_negatives: usize,
    rule: &MiningRule,
    rng: &mut ChaCha8Rng,
) -> Result<TupleIndices> {
    let a = submaps
        .get(anchor)
        .ok_or_else(|| Error::Invalid(format!("anchor index {anchor} out of range")))?;
    if n_negatives < 2 {
        return Err(Error::Invalid("n_negatives must be >= 2".into()));
    }
    let dist = |i: usize, j: usize| submaps[i].location.distance(&submaps[j].location);
    let near: Vec<usize> = (0..submaps.len())
        .filter(|&i| i != anchor && dist(i, anchor) <= rule.positive_radius)
        .collect();
    let far: Vec<usize> = (0..submaps.len()).filter(|&i| dist(i, anchor) > rule.negative_radius).collect();
    let positives = choose(&near, n_positives, "positive", &a.id, rng)?;
    let negatives = choose(&far, n_negatives - 1, "negative", &a.id, rng)?;
    let chosen: Vec<usize> = std::iter::once(anchor).chain(positives.iter().copied()).chain(negatives.iter().copied()).collect();
    let others: Vec<usize> = far
        .iter()
        .copied()
        .filter(|&i| chosen.iter().all(|&c| c != i && dist(i, c) > rule.negative_radius))
        .collect();
    let other = choose(&others, 1, "extra negative", &a.id, rng)?[0];
    Ok(TupleIndices {
        anchor,
        positives,
        negatives,
        other,
    })
}

/// `lr0 * decay_factor ^ floor(step / decay_steps)`.
pub fn lr_at_step(step: u64, config: &TrainConfig) -> f64 {
    config.lr0 * config.decay_factor.powi((step / config.decay_steps) as i32)
}

/// Adam with bias correction; moments are kept in f64.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every tensor named in `grads`.
    pub fn step<T: Real>(
        &mut self,
        params: &mut ModelParams<T>,
        grads: &BTreeMap<String, Array<T>>,
        lr: f64,
    ) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::TensorMismatch { name: name.clone(), detail: "gradient for unknown tensor".into() })?;
            if p.shape() != g.shape() {
                return Err(Error::TensorMismatch {
                    name: name.clone(),
                    detail: format!("gradient shape {:?} vs parameter {:?}", g.shape(), p.shape()),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi.as_f64();
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
                *w = T::lit(w.as_f64() - update);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("step,loss,lr\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.step, r.loss, r.lr);
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub params: ModelParams<T>,
    pub metrics: Vec<MetricRow>,
}

/// Indices of submaps that have enough positives and negatives to anchor a tuple.
pub fn eligible_anchors(submaps: &[Submap], config: &TrainConfig, rule: &MiningRule) -> Vec<usize> {
    (0..submaps.len())
        .filter(|&a| {
            let d = |i: usize| submaps[i].location.distance(&submaps[a].location);
            let near = (0..submaps.len()).filter(|&i| i != a && d(i) <= rule.positive_radius).count();
            let far = (0..submaps.len()).filter(|&i| d(i) > rule.negative_radius).count();
            near >= config.n_positives && far >= config.n_negatives
        })
        .collect()
}

/// Trains from the seeded initialization. Each epoch visits every eligible
/// anchor once in shuffled order; each step embeds all tuple members on one
/// tape, applies the loss, backpropagates and takes an Adam step.
/// `on_step` sees every logged row; checkpoints go to `checkpoint_dir`.
pub fn train<T: Real>(
    submaps: &[Submap],
    model: &ModelConfig,
    config: &TrainConfig,
    loss: &LossConfig,
    rule: &MiningRule,
    checkpoint_dir: Option<&Path>,
    mut on_step: impl FnMut(&MetricRow),
) -> Result<TrainOutcome<T>> {
    model.validate()?;
    config.validate()?;
    loss.validate()?;
    rule.validate()?;
    let mut params = ModelParams::<T>::init(model, config.seed);
    let mut metrics = Vec::new();
    if config.epochs == 0 {
        return Ok(TrainOutcome { params, metrics });
    }
    let anchors = eligible_anchors(submaps, config, rule);
    if anchors.is_empty() {
        return Err(Error::Empty("set of eligible training anchors"));
    }
    let tables: Vec<NeighborTable> = submaps
        .iter()
        .map(|s| crate::geometry::s8n_neighbors(&s.cloud, model.s8n_radius))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::default();
    let mut step = 0u64;
    for _ in 0..config.epochs {
        let mut order = anchors.clone();
        order.shuffle(&mut rng);
        for &anchor in &order {
            let tuple = sample_tuple(submaps, anchor, config.n_positives, config.n_negatives, rule, &mut rng)?;
            let mut tape = Tape::new();
            let vars = ParamVars::register(&mut tape, &params)?;
            let mut embed = |i: usize| descriptor(&mut tape, &submaps[i].cloud, &tables[i], model, &vars);
            let tv = TupleVars {
                anchor: embed(tuple.anchor)?,
                positives: tuple.positives.iter().map(|&i| embed(i)).collect::<Result<_>>()?,
                negatives: tuple.negatives.iter().map(|&i| embed(i)).collect::<Result<_>>()?,
                other: embed(tuple.other)?,
            };
            let out = batch_loss(&mut tape, std::slice::from_ref(&tv), loss)?;
            let value = tape.value(out).data()[0].as_f64();
            if !value.is_finite() {
                return Err(Error::NonFiniteValue(format!("loss at step {step}")));
            }
            let grads = tape.backward(out)?.into_params();
            let lr = lr_at_step(step, config);
            adam.step(&mut params, &grads, lr)?;
            let row = MetricRow { step, loss: value, lr };
            on_step(&row);
            metrics.push(row);
            step += 1;
            if let Some(dir) = checkpoint_dir {
                if config.checkpoint_every > 0 && step.is_multiple_of(config.checkpoint_every) {
                    params.save(&dir.join(format!("checkpoint_{step:06}.sck")))?;
                }
            }
        }
    }
    Ok(TrainOutcome { params, metrics })
}
