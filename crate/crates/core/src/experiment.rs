//! End-to-end runs on a generated world: train on some traversals, index a
//! reference traversal, query with a held-out one.

use std::time::Instant;

use crate::datagen::{generate_world, select_traversals, WorldConfig};
use crate::diffcore::Real;
use crate::error::{Error, Result};
use crate::geometry::Submap;
use crate::losses::LossConfig;
use crate::model::{ModelConfig, ModelParams, SoeNet};
use crate::retrieval::{build_index, embed_queries, one_percent_n, recall_at_n, recall_curve, EvalProtocol};
use crate::training::{train, MetricRow, MiningRule, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub rule: MiningRule,
    pub train_traversals: Vec<usize>,
    pub reference_traversal: usize,
    pub query_traversal: usize,
    /// Largest `n` of the emitted recall curve.
    pub curve_max_n: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            world: WorldConfig::default(),
            model: ModelConfig::desk(),
            train: TrainConfig::desk(),
            loss: LossConfig::default(),
            rule: MiningRule::default(),
            train_traversals: vec![0, 1, 2],
            reference_traversal: 0,
            query_traversal: 3,
            curve_max_n: 25,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_traversals.contains(&self.query_traversal) {
            return Err(Error::Invalid(format!(
                "query traversal {} is also used for training",
                self.query_traversal
            )));
        }
        if self.reference_traversal == self.query_traversal {
            return Err(Error::Invalid("reference and query traversals must differ".into()));
        }
        let max = self.world.traversals;
        for t in self.train_traversals.iter().chain([&self.reference_traversal, &self.query_traversal]) {
            if *t >= max {
                return Err(Error::Invalid(format!("traversal {t} does not exist (world has {max})")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentResult<T> {
    pub recall_at_1: f64,
    pub recall_at_1pct: f64,
    pub curve: Vec<(usize, f64)>,
    pub metrics: Vec<MetricRow>,
    pub train_seconds: f64,
    pub params: ModelParams<T>,
}

/// Splits submaps into (training, reference, query) sets.
pub fn split(submaps: &[Submap], config: &ExperimentConfig) -> Result<(Vec<Submap>, Vec<Submap>, Vec<Submap>)> {
    Ok((
        select_traversals(submaps, &config.train_traversals)?,
        select_traversals(submaps, &[config.reference_traversal])?,
        select_traversals(submaps, &[config.query_traversal])?,
    ))
}

pub fn run_experiment<T: Real>(config: &ExperimentConfig) -> Result<ExperimentResult<T>> {
    config.validate()?;
    let world = generate_world(&config.world)?;
    let (train_set, reference, queries) = split(&world.submaps, config)?;
    let start = Instant::now();
    let outcome = train::<T>(&train_set, &config.model, &config.train, &config.loss, &config.rule, None, |_| {})?;
    let train_seconds = start.elapsed().as_secs_f64();
    let net = SoeNet::new(config.model.clone(), outcome.params)?;
    let db = build_index(&reference, &net)?;
    let queries = embed_queries(&queries, &net)?;
    let radius = config.rule.eval_radius;
    let protocol = EvalProtocol { correct_radius: radius, top_n: vec![1] };
    Ok(ExperimentResult {
        recall_at_1: recall_at_n(&db, &queries, protocol.top_n[0], radius)?,
        recall_at_1pct: recall_at_n(&db, &queries, one_percent_n(db.len()), radius)?,
        curve: recall_curve(&db, &queries, config.curve_max_n, radius)?,
        metrics: outcome.metrics,
        train_seconds,
        params: net.params,
    })
}
