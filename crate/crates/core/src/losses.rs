//! Quadruplet-family metric losses on squared Euclidean descriptor distances,
//! with hardest-positive / hardest-negative mining.
//!
//! Each loss exists twice: as a plain function of tuple distances (used for
//! reporting and as a test oracle) and as a tape builder (used for training).
//! Mining always happens on values; only the selected distances enter the tape.

use std::fmt;
use std::str::FromStr;

use crate::diffcore::{Real, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossKind {
    Quadruplet,
    Lazy,
    #[default]
    Hphn,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Quadruplet, LossKind::Lazy, LossKind::Hphn];
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quadruplet" => Ok(LossKind::Quadruplet),
            "lazy" => Ok(LossKind::Lazy),
            "hphn" => Ok(LossKind::Hphn),
            other => Err(Error::Invalid(format!(
                "unknown loss `{other}` (expected quadruplet, lazy or hphn)"
            ))),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Quadruplet => "quadruplet",
            LossKind::Lazy => "lazy",
            LossKind::Hphn => "hphn",
        })
    }
}

/// Loss choice and margins. `alpha`/`beta` serve the (lazy) quadruplet loss,
/// `gamma` the HPHN loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::Hphn,
            alpha: 0.5,
            beta: 0.2,
            gamma: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, m) in [("margin_alpha", self.alpha), ("margin_beta", self.beta), ("margin_gamma", self.gamma)] {
            if !(m >= 0.0 && m.is_finite()) {
                return Err(Error::Invalid(format!("{name} must be a finite value >= 0, got {m}")));
            }
        }
        Ok(())
    }
}

/// Descriptors of one training tuple: anchor, positives, negatives and the
/// extra negative `other` that is far from all of them.
#[derive(Clone, Debug, PartialEq)]
pub struct TupleBatch {
    pub anchor: Vec<f64>,
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<f64>>,
    pub other: Vec<f64>,
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl TupleBatch {
    pub fn validate(&self) -> Result<()> {
        if self.positives.is_empty() || self.negatives.is_empty() {
            return Err(Error::Invalid("a tuple needs at least one positive and one negative".into()));
        }
        let d = self.anchor.len();
        let all = std::iter::once(&self.other).chain(&self.positives).chain(&self.negatives);
        for v in all {
            if v.len() != d {
                return Err(Error::Shape(format!("descriptor of length {} in a tuple of dimension {d}", v.len())));
            }
        }
        Ok(())
    }

    pub fn distances(&self) -> Result<TupleDistances> {
        self.validate()?;
        Ok(TupleDistances {
            anchor_pos: self.positives.iter().map(|p| squared_distance(&self.anchor, p)).collect(),
            anchor_neg: self.negatives.iter().map(|n| squared_distance(&self.anchor, n)).collect(),
            other_neg: self.negatives.iter().map(|n| squared_distance(&self.other, n)).collect(),
        })
    }
}

/// Squared distances `d(a, p_i)`, `d(a, n_j)` and `d(n*, n_j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TupleDistances {
    pub anchor_pos: Vec<f64>,
    pub anchor_neg: Vec<f64>,
    pub other_neg: Vec<f64>,
}

impl TupleDistances {
    pub fn new(anchor_pos: Vec<f64>, anchor_neg: Vec<f64>, other_neg: Vec<f64>) -> Result<Self> {
        if anchor_pos.is_empty() || anchor_neg.is_empty() {
            return Err(Error::Invalid("a tuple needs at least one positive and one negative".into()));
        }
        if anchor_neg.len() != other_neg.len() {
            return Err(Error::Shape(format!(
                "{} anchor-negative distances but {} other-negative distances",
                anchor_neg.len(),
                other_neg.len()
            )));
        }
        Ok(TupleDistances {
            anchor_pos,
            anchor_neg,
            other_neg,
        })
    }
}

/// Which reference the hardest negative was measured from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Anchor,
    Other,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mined {
    /// Largest anchor-positive distance.
    pub d_hp: f64,
    pub hardest_positive: usize,
    /// Smallest negative distance over both branches.
    pub d_hn: f64,
    pub branch: Branch,
    pub hardest_negative: usize,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x < v[best] {
            best = i;
        }
    }
    best
}

/// Hardest positive and hardest negative. Ties prefer the anchor branch, then
/// the lowest index.
pub fn hphn_mine(d: &TupleDistances) -> Mined {
    let hp = argmax(&d.anchor_pos);
    let an = argmin(&d.anchor_neg);
    let on = argmin(&d.other_neg);
    let (d_hn, branch, hardest_negative) = if d.other_neg[on] < d.anchor_neg[an] {
        (d.other_neg[on], Branch::Other, on)
    } else {
        (d.anchor_neg[an], Branch::Anchor, an)
    };
    Mined {
        d_hp: d.anchor_pos[hp],
        hardest_positive: hp,
        d_hn,
        branch,
        hardest_negative,
    }
}

fn hinge(x: f64) -> f64 {
    x.max(0.0)
}

/// Quadruplet loss, averaged over every (positive, negative) pair. With one
/// positive and one negative this is the plain two-hinge quadruplet loss.
pub fn quadruplet_loss(d: &TupleDistances, alpha: f64, beta: f64) -> f64 {
    let mut total = 0.0;
    for &p in &d.anchor_pos {
        for (&an, &on) in d.anchor_neg.iter().zip(&d.other_neg) {
            total += hinge(p - an + alpha);
            total += hinge(p - on + beta);
        }
    }
    total * (1.0 / (d.anchor_pos.len() * d.anchor_neg.len()) as f64)
}

/// Lazy quadruplet loss: the largest violation of each hinge over all pairs.
pub fn lazy_quadruplet_loss(d: &TupleDistances, alpha: f64, beta: f64) -> f64 {
    let (first, second) = lazy_terms(d, alpha, beta);
    first.0 + second.0
}

/// (value, positive index, negative index) of the worst pair for each hinge.
fn lazy_terms(d: &TupleDistances, alpha: f64, beta: f64) -> ((f64, usize, usize), (f64, usize, usize)) {
    let mut first = (f64::NEG_INFINITY, 0, 0);
    let mut second = (f64::NEG_INFINITY, 0, 0);
    for (i, &p) in d.anchor_pos.iter().enumerate() {
        for (j, (&an, &on)) in d.anchor_neg.iter().zip(&d.other_neg).enumerate() {
            let a = hinge(p - an + alpha);
            if a > first.0 {
                first = (a, i, j);
            }
            let b = hinge(p - on + beta);
            if b > second.0 {
                second = (b, i, j);
            }
        }
    }
    (first, second)
}

pub fn hphn_loss(d: &TupleDistances, gamma: f64) -> f64 {
    let m = hphn_mine(d);
    hinge(m.d_hp - m.d_hn + gamma)
}

pub fn loss_value(d: &TupleDistances, config: &LossConfig) -> f64 {
    match config.kind {
        LossKind::Quadruplet => quadruplet_loss(d, config.alpha, config.beta),
        LossKind::Lazy => lazy_quadruplet_loss(d, config.alpha, config.beta),
        LossKind::Hphn => hphn_loss(d, config.gamma),
    }
}

/// Descriptor handles of one tuple recorded on a tape.
#[derive(Clone, Debug)]
pub struct TupleVars {
    pub anchor: Var,
    pub positives: Vec<Var>,
    pub negatives: Vec<Var>,
    pub other: Var,
}

struct DistVars {
    anchor_pos: Vec<Var>,
    anchor_neg: Vec<Var>,
    other_neg: Vec<Var>,
}

fn record_distances<T: Real>(tape: &mut Tape<T>, t: &TupleVars) -> Result<(DistVars, TupleDistances)> {
    let mut vars = DistVars {
        anchor_pos: Vec::new(),
        anchor_neg: Vec::new(),
        other_neg: Vec::new(),
    };
    for &p in &t.positives {
        vars.anchor_pos.push(tape.sq_dist(t.anchor, p)?);
    }
    for &n in &t.negatives {
        vars.anchor_neg.push(tape.sq_dist(t.anchor, n)?);
        vars.other_neg.push(tape.sq_dist(t.other, n)?);
    }
    let read = |tape: &Tape<T>, vs: &[Var]| vs.iter().map(|&v| tape.value(v).data()[0].as_f64()).collect();
    let values = TupleDistances::new(
        read(tape, &vars.anchor_pos),
        read(tape, &vars.anchor_neg),
        read(tape, &vars.other_neg),
    )?;
    Ok((vars, values))
}

/// `relu(pos - neg + margin)` on the tape.
fn hinge_node<T: Real>(tape: &mut Tape<T>, pos: Var, neg: Var, margin: f64) -> Result<Var> {
    let gap = tape.sub(pos, neg)?;
    let shifted = tape.affine(gap, 1.0, margin)?;
    tape.relu(shifted)
}

fn sum_nodes<T: Real>(tape: &mut Tape<T>, nodes: &[Var]) -> Result<Var> {
    let mut acc = nodes[0];
    for &n in &nodes[1..] {
        acc = tape.add(acc, n)?;
    }
    Ok(acc)
}

/// Records the loss of one tuple. Returns the scalar node and the distances it
/// was mined from.
pub fn tuple_loss<T: Real>(tape: &mut Tape<T>, tuple: &TupleVars, config: &LossConfig) -> Result<(Var, TupleDistances)> {
    if tuple.positives.is_empty() || tuple.negatives.is_empty() {
        return Err(Error::Invalid("a tuple needs at least one positive and one negative".into()));
    }
    let (v, d) = record_distances(tape, tuple)?;
    let loss = match config.kind {
        LossKind::Quadruplet => {
            let mut terms = Vec::new();
            for &p in &v.anchor_pos {
                for (&an, &on) in v.anchor_neg.iter().zip(&v.other_neg) {
                    terms.push(hinge_node(tape, p, an, config.alpha)?);
                    terms.push(hinge_node(tape, p, on, config.beta)?);
                }
            }
            let total = sum_nodes(tape, &terms)?;
            let pairs = (v.anchor_pos.len() * v.anchor_neg.len()) as f64;
            if pairs == 1.0 {
                total
            } else {
                tape.affine(total, 1.0 / pairs, 0.0)?
            }
        }
        LossKind::Lazy => {
            let ((_, i1, j1), (_, i2, j2)) = lazy_terms(&d, config.alpha, config.beta);
            let first = hinge_node(tape, v.anchor_pos[i1], v.anchor_neg[j1], config.alpha)?;
            let second = hinge_node(tape, v.anchor_pos[i2], v.other_neg[j2], config.beta)?;
            tape.add(first, second)?
        }
        LossKind::Hphn => {
            let m = hphn_mine(&d);
            let neg = match m.branch {
                Branch::Anchor => v.anchor_neg[m.hardest_negative],
                Branch::Other => v.other_neg[m.hardest_negative],
            };
            hinge_node(tape, v.anchor_pos[m.hardest_positive], neg, config.gamma)?
        }
    };
    Ok((loss, d))
}

/// Mean loss over several tuples recorded on one tape.
pub fn batch_loss<T: Real>(tape: &mut Tape<T>, tuples: &[TupleVars], config: &LossConfig) -> Result<Var> {
    if tuples.is_empty() {
        return Err(Error::Empty("tuple batch"));
    }
    let mut losses = Vec::with_capacity(tuples.len());
    for t in tuples {
        losses.push(tuple_loss(tape, t, config)?.0);
    }
    let total = sum_nodes(tape, &losses)?;
    if tuples.len() == 1 {
        Ok(total)
    } else {
        tape.affine(total, 1.0 / tuples.len() as f64, 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single(ap: f64, an: f64, on: f64) -> TupleDistances {
        TupleDistances::new(vec![ap], vec![an], vec![on]).unwrap()
    }

    #[test]
    fn quadruplet_examples() {
        assert_eq!(quadruplet_loss(&single(0.0, 1.0, 1.0), 0.5, 0.2), 0.0);
        assert_eq!(quadruplet_loss(&single(0.0, 0.0, 0.0), 0.5, 0.2), 0.7);
        let v = quadruplet_loss(&single(0.3, 0.6, 0.4), 0.5, 0.2);
        assert!((v - 0.3).abs() < 1e-12);
    }

    #[test]
    fn lazy_examples() {
        let d = single(0.3, 0.6, 0.4);
        assert_eq!(lazy_quadruplet_loss(&d, 0.5, 0.2), quadruplet_loss(&d, 0.5, 0.2));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let base = TupleDistances::new(vec![0.2, 0.7], vec![0.4, 0.9], vec![0.3, 0.5]).unwrap();
        let mut dup = base.clone();
        dup.anchor_pos.push(0.7);
        assert_eq!(lazy_quadruplet_loss(&base, 0.5, 0.2), lazy_quadruplet_loss(&dup, 0.5, 0.2));

        let unit = |rng: &mut ChaCha8Rng| {
            let mut v: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= n);
            v
        };
        let batch = TupleBatch {
            anchor: unit(&mut rng),
            positives: vec![unit(&mut rng), unit(&mut rng)],
            negatives: vec![unit(&mut rng), unit(&mut rng)],
            other: unit(&mut rng),
        };
        let d = batch.distances().unwrap();
        let mut t1: f64 = 0.0;
        let mut t2: f64 = 0.0;
        for p in &batch.positives {
            for n in &batch.negatives {
                let dp = squared_distance(&batch.anchor, p);
                t1 = t1.max(dp - squared_distance(&batch.anchor, n) + 0.5);
                t2 = t2.max(dp - squared_distance(&batch.other, n) + 0.2);
            }
        }
        assert_eq!(lazy_quadruplet_loss(&d, 0.5, 0.2), t1.max(0.0) + t2.max(0.0));
    }

    #[test]
    fn mining_examples() {
        let d = TupleDistances::new(vec![0.1, 0.3], vec![0.8, 0.6], vec![0.5, 0.9]).unwrap();
        let m = hphn_mine(&d);
        assert_eq!((m.d_hp, m.hardest_positive), (0.3, 1));
        assert_eq!((m.d_hn, m.branch, m.hardest_negative), (0.5, Branch::Other, 0));
        let tie = hphn_mine(&TupleDistances::new(vec![0.1], vec![0.4, 0.4], vec![0.4, 0.4]).unwrap());
        assert_eq!((tie.branch, tie.hardest_negative), (Branch::Anchor, 0));
    }

    #[test]
    fn hphn_examples() {
        let d = TupleDistances::new(vec![0.1, 0.3], vec![0.8, 0.5], vec![0.6]).unwrap_err();
        assert!(matches!(d, Error::Shape(_)));
        let d = TupleDistances::new(vec![0.1, 0.3], vec![0.8, 0.5], vec![0.6, 0.7]).unwrap();
        assert!((hphn_loss(&d, 0.5) - 0.3).abs() < 1e-12);
        let far = TupleDistances::new(vec![0.1], vec![0.7], vec![0.9]).unwrap();
        assert_eq!(hphn_loss(&far, 0.5), 0.0);
        assert_eq!(LossConfig::default().gamma, 0.5);
        assert_eq!(LossConfig::default().kind, LossKind::Hphn);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let b = TupleBatch {
            anchor: vec![1.0, 0.0],
            positives: vec![vec![1.0]],
            negatives: vec![vec![0.0, 1.0]],
            other: vec![0.0, 1.0],
        };
        assert!(matches!(b.distances(), Err(Error::Shape(_))));
    }

    #[test]
    fn tape_losses_match_values_and_route_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for kind in LossKind::ALL {
            let cfg = LossConfig { kind, ..LossConfig::default() };
            let mut tape = Tape::<f64>::new();
            let mut leaf = |tape: &mut Tape<f64>, name: String| {
                let v: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.4..0.4)).collect();
                tape.param(&name, Array::from_f64(&[1, 3], &v).unwrap()).unwrap()
            };
            let anchor = leaf(&mut tape, "a".into());
            let positives = (0..2).map(|i| leaf(&mut tape, format!("p{i}"))).collect();
            let negatives = (0..3).map(|i| leaf(&mut tape, format!("n{i}"))).collect();
            let other = leaf(&mut tape, "o".into());
            let t = TupleVars { anchor, positives, negatives, other };
            let (loss, d) = tuple_loss(&mut tape, &t, &cfg).unwrap();
            assert_eq!(tape.value(loss).data()[0], loss_value(&d, &cfg));
            let g = tape.backward(loss).unwrap();
            if kind == LossKind::Hphn && tape.value(loss).data()[0] > 0.0 {
                let m = hphn_mine(&d);
                let p = format!("p{}", 1 - m.hardest_positive);
                assert!(g.param(&p).unwrap().data().iter().all(|&x| x == 0.0));
            }
        }
    }

    fn brute_hphn(d: &TupleDistances, gamma: f64) -> f64 {
        let mut best = f64::NEG_INFINITY;
        for &p in &d.anchor_pos {
            for &n in d.anchor_neg.iter().chain(&d.other_neg) {
                best = best.max(p - n + gamma);
            }
        }
        best.max(0.0)
    }

    #[test]
    fn hphn_matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let (phi, psi) = (rng.gen_range(1..4), rng.gen_range(1..9));
            let draw = |rng: &mut ChaCha8Rng, n: usize| (0..n).map(|_| rng.gen_range(0.0..4.0)).collect();
            let d = TupleDistances::new(draw(&mut rng, phi), draw(&mut rng, psi), draw(&mut rng, psi)).unwrap();
            assert_eq!(hphn_loss(&d, 0.5), brute_hphn(&d, 0.5));
        }
    }

    proptest! {
        #[test]
        fn losses_nonnegative_and_lazy_dominates(
            ap in prop::collection::vec(0.0f64..4.0, 1..4),
            an in prop::collection::vec(0.0f64..4.0, 1..5),
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let on: Vec<f64> = an.iter().map(|_| rng.gen_range(0.0..4.0)).collect();
            let d = TupleDistances::new(ap, an, on).unwrap();
            let lazy = lazy_quadruplet_loss(&d, 0.5, 0.2);
            prop_assert!(lazy >= 0.0 && hphn_loss(&d, 0.5) >= 0.0 && quadruplet_loss(&d, 0.5, 0.2) >= 0.0);
            let (i, j) = (rng.gen_range(0..d.anchor_pos.len()), rng.gen_range(0..d.anchor_neg.len()));
            let one = single(d.anchor_pos[i], d.anchor_neg[j], d.other_neg[j]);
            prop_assert!(lazy >= quadruplet_loss(&one, 0.5, 0.2));
        }

        #[test]
        fn mining_is_monotone(
            ap in prop::collection::vec(0.0f64..4.0, 1..4),
            an in prop::collection::vec(0.0f64..4.0, 2..5),
            bump in 0.0f64..1.0,
            k in 0usize..8,
        ) {
            let on: Vec<f64> = an.iter().rev().cloned().collect();
            let d = TupleDistances::new(ap, an, on).unwrap();
            let base = hphn_mine(&d);
            let mut up = d.clone();
            let i = k % up.anchor_pos.len();
            up.anchor_pos[i] += bump;
            prop_assert!(hphn_mine(&up).d_hp >= base.d_hp);
            let mut down = d.clone();
            let j = k % down.anchor_neg.len();
            down.anchor_neg[j] -= bump;
            down.other_neg[j] -= bump;
            prop_assert!(hphn_mine(&down).d_hn <= base.d_hn);
        }
    }
}
