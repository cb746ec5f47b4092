//! Gradient checks of whole pipelines: a tiny network feeding each loss,
//! differentiated end to end and compared with central differences in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{
    check_tape, grad_check_report, GradCheckEntry, GradCheckReport, Tape, FD_STEP, KINK_MARGIN,
};
use crate::error::{Error, Result};
use crate::geometry::{s8n_neighbors, PointCloud};
use crate::losses::{hphn_mine, tuple_loss, LossConfig, LossKind, TupleDistances, TupleVars};
use crate::model::{descriptor, ModelConfig, ModelParams, ParamVars};

/// Smallest allowed gap between the selected and the runner-up candidate when
/// a loss mines its terms; closer calls could flip under a finite-difference probe.
pub const MINING_GAP: f64 = 1e-4;

/// Network used by the composition checks: two stages, every unit enabled.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        n_points: 6,
        mlp_dims: vec![3, 4],
        vlad_k: 2,
        out_dim: 3,
        s8n_radius: 0.9,
        ..ModelConfig::desk()
    }
}

fn random_params(config: &ModelConfig, rng: &mut ChaCha8Rng) -> ModelParams<f64> {
    let mut p = ModelParams::<f64>::init(config, rng.gen());
    for (name, t) in p.tensors_mut() {
        for v in t.data_mut() {
            if *v == 0.0 {
                *v = if name == "attention.mu" {
                    rng.gen_range(0.2..1.0)
                } else {
                    rng.gen_range(-0.2..0.2)
                };
            }
        }
    }
    p
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> Result<PointCloud> {
    PointCloud::new(
        (0..n)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect(),
    )
}

fn second_gap(mut v: Vec<f64>, largest: bool) -> f64 {
    if v.len() < 2 {
        return f64::INFINITY;
    }
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    if largest {
        v[v.len() - 1] - v[v.len() - 2]
    } else {
        v[1] - v[0]
    }
}

/// Smallest margin by which the loss's discrete choices are made.
fn selection_gap(d: &TupleDistances, config: &LossConfig) -> f64 {
    match config.kind {
        LossKind::Quadruplet => f64::INFINITY,
        LossKind::Hphn => {
            let _ = hphn_mine(d);
            let negs: Vec<f64> = d.anchor_neg.iter().chain(&d.other_neg).copied().collect();
            second_gap(d.anchor_pos.clone(), true).min(second_gap(negs, false))
        }
        LossKind::Lazy => {
            let mut first = Vec::new();
            let mut second = Vec::new();
            for &p in &d.anchor_pos {
                for (&an, &on) in d.anchor_neg.iter().zip(&d.other_neg) {
                    first.push(p - an + config.alpha);
                    second.push(p - on + config.beta);
                }
            }
            second_gap(first, true).min(second_gap(second, true))
        }
    }
}

/// Full model plus one loss: `trials` accepted probes (active loss, no ReLU
/// input within the kink margin, unambiguous mining), worst relative error.
pub fn model_loss_check(kind: LossKind, trials: usize, seed: u64) -> Result<GradCheckEntry> {
    if trials == 0 {
        return Err(Error::Invalid("trials must be >= 1".into()));
    }
    let config = tiny_config();
    let loss_cfg = LossConfig { kind, ..LossConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut accepted = 0;
    let mut attempts = 0;
    while accepted < trials {
        attempts += 1;
        if attempts > 1000 * trials {
            return Err(Error::Invalid(format!("could not draw kink-free probes for model+{kind}")));
        }
        let params = random_params(&config, &mut rng);
        let mut tape = Tape::new();
        let vars = ParamVars::register(&mut tape, &params)?;
        let embed = |tape: &mut Tape<f64>, rng: &mut ChaCha8Rng| -> Result<_> {
            let cloud = random_cloud(rng, config.n_points)?;
            let table = s8n_neighbors(&cloud, config.s8n_radius)?;
            descriptor(tape, &cloud, &table, &config, &vars)
        };
        let anchor = embed(&mut tape, &mut rng)?;
        let positives = vec![embed(&mut tape, &mut rng)?, embed(&mut tape, &mut rng)?];
        let negatives = vec![embed(&mut tape, &mut rng)?, embed(&mut tape, &mut rng)?];
        let other = embed(&mut tape, &mut rng)?;
        let tuple = TupleVars { anchor, positives, negatives, other };
        let (loss, d) = tuple_loss(&mut tape, &tuple, &loss_cfg)?;
        let active = tape.value(loss).data()[0] > KINK_MARGIN;
        let smooth = tape.min_relu_margin().is_none_or(|m| m >= KINK_MARGIN);
        if !active || !smooth || selection_gap(&d, &loss_cfg) < MINING_GAP {
            continue;
        }
        worst = worst.max(check_tape(&tape, loss, FD_STEP)?);
        accepted += 1;
    }
    Ok(GradCheckEntry {
        op: format!("model+{kind}"),
        trials,
        max_rel_error: worst,
    })
}

/// Every primitive followed by the model composed with each loss.
pub fn full_report(trials: usize, seed: u64) -> Result<GradCheckReport> {
    let mut report = grad_check_report(trials, seed)?;
    for (i, kind) in LossKind::ALL.into_iter().enumerate() {
        report.entries.push(model_loss_check(kind, trials, seed.wrapping_add(7919 * (i as u64 + 1)))?);
    }
    Ok(report)
}
