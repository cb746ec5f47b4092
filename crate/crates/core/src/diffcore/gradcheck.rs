//! Central finite differences as an independent check on reverse mode.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::array::Array;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function: `(f(x+h e_i) - f(x-h e_i)) / 2h`.
pub fn finite_diff_grad<F>(mut f: F, x: &Array<f64>, step: f64) -> Result<Array<f64>>
where
    F: FnMut(&Array<f64>) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::Invalid(format!("finite-difference step must be > 0, got {step}")));
    }
    let mut probe = x.clone();
    let mut grad = Array::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFiniteValue(format!("function value at probe of element {i}")));
        }
        grad.data_mut()[i] = (up - down) / (2.0 * step);
    }
    Ok(grad)
}

/// `|a - b| / max(|a|, |b|, 1e-5)` with norms taken over the whole array.
/// The floor keeps exactly-zero gradients from being divided by their own
/// finite-difference round-off.
pub fn relative_error(a: &Array<f64>, b: &Array<f64>) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    diff / a.norm().max(b.norm()).max(1e-5)
}

/// Compares reverse-mode gradients of the scalar `output` against central
/// differences for every trainable leaf on `tape`. Returns the worst relative
/// error over all parameters.
pub fn check_tape(tape: &Tape<f64>, output: Var, step: f64) -> Result<f64> {
    let grads = tape.backward(output)?;
    let mut worst: f64 = 0.0;
    for (name, var) in tape.parameters() {
        let base = tape.value(var).clone();
        let numeric = finite_diff_grad(
            |x| {
                let mut inputs = BTreeMap::new();
                inputs.insert(name.to_string(), x.clone());
                Ok(tape.forward_eval(&inputs, &[output])?[0].data()[0])
            },
            &base,
            step,
        )?;
        let analytic = grads.param(name).expect("every parameter has a gradient");
        worst = worst.max(relative_error(analytic, &numeric));
    }
    Ok(worst)
}

/// Worst observed relative gradient error for one primitive.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub op: String,
    pub trials: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.entries.iter().all(|e| e.max_rel_error < tol)
    }

    pub fn get(&self, op: &str) -> Option<&GradCheckEntry> {
        self.entries.iter().find(|e| e.op == op)
    }

    pub fn to_text(&self, tol: f64) -> String {
        let mut s = String::from("op,trials,max_rel_error,status\n");
        for e in &self.entries {
            let status = if e.max_rel_error < tol { "pass" } else { "FAIL" };
            let _ = writeln!(s, "{},{},{:.3e},{}", e.op, e.trials, e.max_rel_error, status);
        }
        s
    }
}

pub const FD_STEP: f64 = 1e-5;
/// Probes whose ReLU inputs come closer than this to the kink are redrawn.
pub const KINK_MARGIN: f64 = 1e-3;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    Array::new(shape.to_vec(), data).expect("shape")
}

fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = rng.gen_range(-2.0..2.0);
            if v.abs() >= KINK_MARGIN {
                break v;
            }
        })
        .collect();
    Array::new(shape.to_vec(), data).expect("shape")
}

/// Sums `out` against a fixed random weighting so every output element contributes.
fn scalarize(tape: &mut Tape<f64>, out: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let r = tape.constant(uniform(rng, &shape))?;
    let prod = tape.mul(out, r)?;
    tape.sum(prod)
}

type Builder = fn(&mut Tape<f64>, &mut ChaCha8Rng) -> Result<Var>;

fn primitives() -> Vec<(&'static str, Builder)> {
    vec![
        ("matmul", |t, rng| {
            let (ta, tb) = (rng.gen_bool(0.5), rng.gen_bool(0.5));
            let (m, k, n) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));
            let a = t.param("a", uniform(rng, &if ta { [k, m] } else { [m, k] }))?;
            let b = t.param("b", uniform(rng, &if tb { [n, k] } else { [k, n] }))?;
            t.matmul_t(a, ta, b, tb)
        }),
        ("mlp_layer", |t, rng| {
            let (n, cin, cout) = (rng.gen_range(1..6), rng.gen_range(1..5), rng.gen_range(1..5));
            let x = t.param("x", uniform(rng, &[n, cin]))?;
            let w = t.param("w", uniform(rng, &[cin, cout]))?;
            let b = t.param("b", uniform(rng, &[cout]))?;
            let h = t.matmul(x, w)?;
            let h = t.add_bias(h, b)?;
            t.relu(h)
        }),
        ("relu", |t, rng| {
            let n = rng.gen_range(1..8);
            let x = t.param("x", away_from_zero(rng, &[n]))?;
            t.relu(x)
        }),
        ("softmax_rows", |t, rng| {
            let (r, c) = (rng.gen_range(1..4), rng.gen_range(1..6));
            let x = t.param("x", uniform(rng, &[r, c]))?;
            t.softmax_rows(x)
        }),
        ("l2_normalize", |t, rng| {
            let (r, c) = (rng.gen_range(1..4), rng.gen_range(1..6));
            let x = t.param("x", away_from_zero(rng, &[r, c]))?;
            t.l2_normalize_rows(x)
        }),
        ("oe_convolution", |t, rng| {
            let (n, c) = (rng.gen_range(1..4), rng.gen_range(1..4));
            let v = t.param("v", uniform(rng, &[n, 2, 2, 2, c]))?;
            let mut h = v;
            for (i, r) in [4usize, 2, 1].into_iter().enumerate() {
                let w = t.param(&format!("w{i}"), uniform(rng, &[2, c]))?;
                let b = t.param(&format!("b{i}"), uniform(rng, &[c]))?;
                let x = t.reshape(h, &[n, 2, r, c])?;
                let y = t.pair_conv(x, w, b)?;
                h = t.relu(y)?;
            }
            t.reshape(h, &[n, c])
        }),
        ("vlad_soft_assignment", |t, rng| {
            let (n, c, k) = (rng.gen_range(1..5), rng.gen_range(1..4), rng.gen_range(1..4));
            let f = t.param("features", uniform(rng, &[n, c]))?;
            let w = t.param("assign_w", uniform(rng, &[c, k]))?;
            let b = t.param("assign_b", uniform(rng, &[k]))?;
            let centers = t.param("centers", uniform(rng, &[k, c]))?;
            let logits = t.matmul(f, w)?;
            let logits = t.add_bias(logits, b)?;
            let a = t.softmax_rows(logits)?;
            t.vlad_residual(a, f, centers)
        }),
        ("gather_rows", |t, rng| {
            let (n, c) = (rng.gen_range(1..5), rng.gen_range(1..4));
            let x = t.param("x", uniform(rng, &[n, c]))?;
            let idx: Arc<[usize]> = (0..8 * n).map(|_| rng.gen_range(0..n)).collect();
            t.gather_rows(x, idx)
        }),
        ("scale_by", |t, rng| {
            let n = rng.gen_range(1..6);
            let x = t.param("x", uniform(rng, &[n, 2]))?;
            let s = t.param("s", uniform(rng, &[1]))?;
            t.scale_by(x, s)
        }),
        ("sq_dist", |t, rng| {
            let n = rng.gen_range(1..6);
            let a = t.param("a", uniform(rng, &[n]))?;
            let b = t.param("b", uniform(rng, &[n]))?;
            t.sq_dist(a, b)
        }),
    ]
}

/// Names of the primitives covered by [`grad_check_report`].
pub fn primitive_names() -> Vec<&'static str> {
    primitives().into_iter().map(|(n, _)| n).collect()
}

/// Runs `trials` random instances of each primitive and records the worst
/// relative error between reverse mode and central differences.
/// Deterministic in `seed`.
pub fn grad_check_report(trials: usize, seed: u64) -> Result<GradCheckReport> {
    if trials == 0 {
        return Err(Error::Invalid("trials must be >= 1".into()));
    }
    let mut report = GradCheckReport::default();
    for (op_index, (name, build)) in primitives().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(op_index as u64));
        let mut worst: f64 = 0.0;
        let mut done = 0;
        while done < trials {
            let mut tape = Tape::new();
            let out = build(&mut tape, &mut rng)?;
            if tape.min_relu_margin().is_some_and(|m| m < KINK_MARGIN) {
                continue;
            }
            let loss = scalarize(&mut tape, out, &mut rng)?;
            let err = check_tape(&tape, loss, FD_STEP).unwrap_or(f64::INFINITY);
            worst = worst.max(err);
            done += 1;
        }
        report.entries.push(GradCheckEntry {
            op: name.to_string(),
            trials,
            max_rel_error: worst,
        });
    }
    Ok(report)
}
