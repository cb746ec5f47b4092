//! Define-by-run tape: every primitive is evaluated when recorded, and the
//! record can be replayed with substituted leaves or differentiated in reverse.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::array::{Array, Real};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input(String),
    Param(String),
    Const,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    AddBias { x: Var, bias: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScaleBy { x: Var, s: Var },
    Affine { x: Var, mul: f64, add: f64 },
    Relu(Var),
    SoftmaxRows(Var),
    L2NormalizeRows(Var),
    GatherRows { x: Var, index: Arc<[usize]> },
    PairConv { x: Var, w: Var, b: Var },
    VladResidual { assign: Var, feats: Var, centers: Var },
    Reshape { x: Var, shape: Vec<usize> },
    Sum(Var),
    SqDist(Var, Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Const => "const",
            Op::MatMul { .. } => "matmul",
            Op::AddBias { .. } => "add_bias",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::ScaleBy { .. } => "scale_by",
            Op::Affine { .. } => "affine",
            Op::Relu(_) => "relu",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::L2NormalizeRows(_) => "l2_normalize_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::PairConv { .. } => "pair_conv",
            Op::VladResidual { .. } => "vlad_residual",
            Op::Reshape { .. } => "reshape",
            Op::Sum(_) => "sum",
            Op::SqDist(..) => "sq_dist",
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op,
    value: Array<T>,
}

/// Recorded differentiable computation.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Reverse-mode gradients of a scalar output.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    nodes: Vec<Option<Array<T>>>,
    shapes: Vec<Vec<usize>>,
    params: BTreeMap<String, Array<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a trainable parameter by name.
    pub fn param(&self, name: &str) -> Option<&Array<T>> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Array<T>> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Array<T>> {
        self.params
    }

    /// Gradient with respect to any node; zeros when the node does not reach the output.
    pub fn wrt(&self, v: Var) -> Array<T> {
        self.nodes[v.0]
            .clone()
            .unwrap_or_else(|| Array::zeros(&self.shapes[v.0]))
    }
}

fn same_shape<T: Real>(a: &Array<T>, b: &Array<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn matrix<T: Real>(a: &Array<T>, what: &str) -> Result<(usize, usize)> {
    match a.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Shape(format!("{what}: expected a matrix, got {s:?}"))),
    }
}

fn matmul_dims<T: Real>(
    a: &Array<T>,
    b: &Array<T>,
    ta: bool,
    tb: bool,
) -> Result<(usize, usize, usize)> {
    let (ar, ac) = matrix(a, "matmul lhs")?;
    let (br, bc) = matrix(b, "matmul rhs")?;
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul inner extents {k} vs {k2} ({:?}{} x {:?}{})",
            a.shape(),
            if ta { "^T" } else { "" },
            b.shape(),
            if tb { "^T" } else { "" }
        )));
    }
    Ok((m, k, n))
}

fn softmax_rows<T: Real>(x: &Array<T>) -> Array<T> {
    let (rows, cols) = x.matrix_dims();
    let mut out = x.clone();
    let d = out.data_mut();
    for r in 0..rows {
        let row = &mut d[r * cols..(r + 1) * cols];
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    out
}

fn eval<T: Real, V>(op: &Op, vals: &V) -> Result<Array<T>>
where
    V: std::ops::Index<usize, Output = Array<T>> + ?Sized,
{
    let v = |x: &Var| &vals[x.0];
    match op {
        Op::Input(_) | Op::Param(_) | Op::Const => unreachable!("leaves are not evaluated"),
        Op::MatMul { a, b, ta, tb } => {
            let (a, b) = (v(a), v(b));
            let (m, k, n) = matmul_dims(a, b, *ta, *tb)?;
            let mut out = Array::zeros(&[m, n]);
            T::gemm(m, k, n, a.data(), *ta, b.data(), *tb, T::zero(), out.data_mut());
            Ok(out)
        }
        Op::AddBias { x, bias } => {
            let (x, bias) = (v(x), v(bias));
            let (_, cols) = x.matrix_dims();
            if bias.len() != cols {
                return Err(Error::Shape(format!(
                    "bias of {} values for rows of width {cols}",
                    bias.len()
                )));
            }
            let mut out = x.clone();
            for row in out.data_mut().chunks_mut(cols) {
                for (o, &b) in row.iter_mut().zip(bias.data()) {
                    *o += b;
                }
            }
            Ok(out)
        }
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
            let (a, b) = (v(a), v(b));
            same_shape(a, b, op.name())?;
            let f = |x: T, y: T| match op {
                Op::Add(..) => x + y,
                Op::Sub(..) => x - y,
                _ => x * y,
            };
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Array::new(a.shape().to_vec(), data)
        }
        Op::ScaleBy { x, s } => {
            let (x, s) = (v(x), v(s));
            if s.len() != 1 {
                return Err(Error::Shape(format!("scale must be a scalar, got {:?}", s.shape())));
            }
            let s = s.data()[0];
            Array::new(x.shape().to_vec(), x.data().iter().map(|&e| e * s).collect())
        }
        Op::Affine { x, mul, add } => {
            let x = v(x);
            let (m, a) = (T::lit(*mul), T::lit(*add));
            Array::new(x.shape().to_vec(), x.data().iter().map(|&e| e * m + a).collect())
        }
        Op::Relu(x) => {
            let x = v(x);
            Array::new(
                x.shape().to_vec(),
                x.data().iter().map(|&e| if e > T::zero() { e } else { T::zero() }).collect(),
            )
        }
        Op::SoftmaxRows(x) => Ok(softmax_rows(v(x))),
        Op::L2NormalizeRows(x) => {
            let x = v(x);
            let (_, cols) = x.matrix_dims();
            let mut out = x.clone();
            for row in out.data_mut().chunks_mut(cols) {
                let norm = row.iter().map(|&e| e * e).sum::<T>().sqrt();
                if norm.as_f64() < 1e-12 {
                    return Err(Error::Degenerate { norm: norm.as_f64() });
                }
                row.iter_mut().for_each(|e| *e = *e / norm);
            }
            Ok(out)
        }
        Op::GatherRows { x, index } => {
            let x = v(x);
            let (rows, cols) = matrix(x, "gather source")?;
            let mut data = Vec::with_capacity(index.len() * cols);
            for &i in index.iter() {
                if i >= rows {
                    return Err(Error::Shape(format!("gather index {i} out of range for {rows} rows")));
                }
                data.extend_from_slice(x.row(i));
            }
            Array::new(vec![index.len(), cols], data)
        }
        Op::PairConv { x, w, b } => {
            let (x, w, b) = (v(x), v(w), v(b));
            let [n, two, r, c] = x.shape() else {
                return Err(Error::Shape(format!("pair_conv input must be [N,2,R,C], got {:?}", x.shape())));
            };
            let (n, r, c) = (*n, *r, *c);
            if *two != 2 || w.len() != 2 * c || b.len() != c {
                return Err(Error::Shape(format!(
                    "pair_conv input {:?}, weight {:?}, bias {:?}",
                    x.shape(),
                    w.shape(),
                    b.shape()
                )));
            }
            let (xd, wd, bd) = (x.data(), w.data(), b.data());
            let mut out = Array::zeros(&[n, r, c]);
            let od = out.data_mut();
            for p in 0..n {
                for cell in 0..r {
                    let lo = &xd[((p * 2) * r + cell) * c..][..c];
                    let hi = &xd[((p * 2 + 1) * r + cell) * c..][..c];
                    let o = &mut od[(p * r + cell) * c..][..c];
                    for ch in 0..c {
                        o[ch] = wd[ch] * lo[ch] + wd[c + ch] * hi[ch] + bd[ch];
                    }
                }
            }
            Ok(out)
        }
        Op::VladResidual { assign, feats, centers } => {
            let (a, f, cen) = (v(assign), v(feats), v(centers));
            let (n, k) = matrix(a, "vlad assignment")?;
            let (n2, c) = matrix(f, "vlad features")?;
            let (k2, c2) = matrix(cen, "vlad centers")?;
            if n != n2 || k != k2 || c != c2 {
                return Err(Error::Shape(format!(
                    "vlad assignment {:?}, features {:?}, centers {:?}",
                    a.shape(),
                    f.shape(),
                    cen.shape()
                )));
            }
            // sum_i a[i,k] f[i,:] - (sum_i a[i,k]) v[k,:]
            let mut out = Array::zeros(&[k, c]);
            T::gemm(k, n, c, a.data(), true, f.data(), false, T::zero(), out.data_mut());
            let od = out.data_mut();
            for kk in 0..k {
                let mass: T = (0..n).map(|i| a.data()[i * k + kk]).sum();
                for ch in 0..c {
                    od[kk * c + ch] = od[kk * c + ch] - mass * cen.data()[kk * c + ch];
                }
            }
            Ok(out)
        }
        Op::Reshape { x, shape } => v(x).reshaped(shape),
        Op::Sum(x) => Ok(Array::scalar(v(x).sum())),
        Op::SqDist(a, b) => {
            let (a, b) = (v(a), v(b));
            if a.len() != b.len() {
                return Err(Error::Shape(format!(
                    "sq_dist operands {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            let mut acc = T::zero();
            for (&x, &y) in a.data().iter().zip(b.data()) {
                let d = x - y;
                acc += d * d;
            }
            Ok(Array::scalar(acc))
        }
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf_exists(&self, name: &str) -> bool {
        self.nodes.iter().any(|n| match &n.op {
            Op::Input(s) | Op::Param(s) => s == name,
            _ => false,
        })
    }

    fn push_leaf(&mut self, op: Op, value: Array<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                node: self.nodes.len(),
                op: op.name(),
            });
        }
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let value = eval(&op, &ValuesView(&self.nodes))?;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                node: self.nodes.len(),
                op: op.name(),
            });
        }
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Named input leaf, replaceable in [`Tape::forward_eval`].
    pub fn input(&mut self, name: &str, value: Array<T>) -> Result<Var> {
        if self.leaf_exists(name) {
            return Err(Error::Invalid(format!("duplicate leaf name `{name}`")));
        }
        self.push_leaf(Op::Input(name.to_string()), value)
    }

    /// Named trainable leaf; [`Tape::backward`] reports a gradient for it.
    pub fn param(&mut self, name: &str, value: Array<T>) -> Result<Var> {
        if self.leaf_exists(name) {
            return Err(Error::Invalid(format!("duplicate leaf name `{name}`")));
        }
        self.push_leaf(Op::Param(name.to_string()), value)
    }

    pub fn constant(&mut self, value: Array<T>) -> Result<Var> {
        self.push_leaf(Op::Const, value)
    }

    pub fn value(&self, v: Var) -> &Array<T> {
        &self.nodes[v.0].value
    }

    /// Names and handles of all trainable leaves, in recording order.
    pub fn parameters(&self) -> Vec<(&str, Var)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.op {
                Op::Param(s) => Some((s.as_str(), Var(i))),
                _ => None,
            })
            .collect()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul { a, b, ta: false, tb: false })
    }

    /// Matrix product with optional transposition of either operand.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        self.push(Op::MatMul { a, b, ta, tb })
    }

    /// Adds `bias` to every row (last axis).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.push(Op::AddBias { x, bias })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    /// Multiplies every element of `x` by the scalar node `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        self.push(Op::ScaleBy { x, s })
    }

    /// `x * mul + add` with constant coefficients.
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Result<Var> {
        self.push(Op::Affine { x, mul, add })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Relu(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.push(Op::SoftmaxRows(x))
    }

    /// Normalizes each row (last axis) to unit L2 norm. Rows with norm below
    /// 1e-12 are an error.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        self.push(Op::L2NormalizeRows(x))
    }

    /// Row gather from an `[rows, cols]` matrix.
    pub fn gather_rows(&mut self, x: Var, index: Arc<[usize]>) -> Result<Var> {
        self.push(Op::GatherRows { x, index })
    }

    /// Depthwise convolution collapsing axis 1 (extent 2) of an `[N,2,R,C]`
    /// input: `y[n,r,c] = w[0,c] x[n,0,r,c] + w[1,c] x[n,1,r,c] + b[c]`.
    pub fn pair_conv(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.push(Op::PairConv { x, w, b })
    }

    /// `out[k,:] = sum_i assign[i,k] (feats[i,:] - centers[k,:])`.
    pub fn vlad_residual(&mut self, assign: Var, feats: Var, centers: Var) -> Result<Var> {
        self.push(Op::VladResidual { assign, feats, centers })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.push(Op::Reshape { x, shape: shape.to_vec() })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sum(x))
    }

    /// Squared Euclidean distance between two equally sized arrays.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::SqDist(a, b))
    }

    /// Smallest |pre-activation| over all ReLU nodes, if any.
    pub fn min_relu_margin(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(
                    self.nodes[x.0]
                        .value
                        .data()
                        .iter()
                        .map(|v| v.as_f64().abs())
                        .fold(f64::INFINITY, f64::min),
                ),
                _ => None,
            })
            .reduce(f64::min)
    }

    /// Replays the tape with some leaves replaced by name and returns the
    /// values of `outputs`. Leaves not named in `inputs` keep their recorded
    /// values. The tape itself is not modified.
    pub fn forward_eval(
        &self,
        inputs: &BTreeMap<String, Array<T>>,
        outputs: &[Var],
    ) -> Result<Vec<Array<T>>> {
        for name in inputs.keys() {
            if !self.leaf_exists(name) {
                return Err(Error::Invalid(format!("tape has no leaf named `{name}`")));
            }
        }
        let mut vals: Vec<Array<T>> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let value = match &node.op {
                Op::Input(name) | Op::Param(name) => match inputs.get(name) {
                    Some(v) => {
                        if v.shape() != node.value.shape() {
                            return Err(Error::Shape(format!(
                                "leaf `{name}` declared {:?}, given {:?}",
                                node.value.shape(),
                                v.shape()
                            )));
                        }
                        v.clone()
                    }
                    None => node.value.clone(),
                },
                Op::Const => node.value.clone(),
                op => eval(op, &vals)?,
            };
            if !value.is_finite() {
                return Err(Error::NonFinite { node: i, op: node.op.name() });
            }
            vals.push(value);
        }
        outputs
            .iter()
            .map(|o| {
                vals.get(o.0)
                    .cloned()
                    .ok_or_else(|| Error::Invalid(format!("output node {} not on tape", o.0)))
            })
            .collect()
    }

    /// Reverse-mode gradient of the scalar node `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::Empty("tape"));
        }
        let out_val = &self
            .nodes
            .get(output.0)
            .ok_or_else(|| Error::Invalid(format!("output node {} not on tape", output.0)))?
            .value;
        if out_val.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar output, got {:?}",
                out_val.shape()
            )));
        }
        let mut grads: Vec<Option<Array<T>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Array::full(out_val.shape(), T::one()));

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut params = BTreeMap::new();
        for (name, v) in self.parameters() {
            let g = grads[v.0]
                .clone()
                .unwrap_or_else(|| Array::zeros(self.nodes[v.0].value.shape()));
            params.insert(name.to_string(), g);
        }
        Ok(Gradients {
            nodes: grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params,
        })
    }

    fn propagate(&self, i: usize, g: &Array<T>, grads: &mut [Option<Array<T>>]) {
        let val = |v: &Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, d: Array<T>| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&d),
            slot => *slot = Some(d),
        };
        let node = &self.nodes[i];
        match &node.op {
            Op::Input(_) | Op::Param(_) | Op::Const => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (val(a), val(b));
                let (m, k, n) = matmul_dims(av, bv, *ta, *tb).expect("recorded shapes");
                // gradient of op(a) is g * op(b)^T, of op(b) is op(a)^T * g
                let mut da = Array::zeros(av.shape());
                if *ta {
                    // a is k x m: da = op(b) * g^T
                    T::gemm(k, n, m, bv.data(), *tb, g.data(), true, T::zero(), da.data_mut());
                } else {
                    T::gemm(m, n, k, g.data(), false, bv.data(), !*tb, T::zero(), da.data_mut());
                }
                let mut db = Array::zeros(bv.shape());
                if *tb {
                    // b is n x k: db = g^T * op(a)
                    T::gemm(n, m, k, g.data(), true, av.data(), *ta, T::zero(), db.data_mut());
                } else {
                    T::gemm(k, m, n, av.data(), !*ta, g.data(), false, T::zero(), db.data_mut());
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::AddBias { x, bias } => {
                let cols = val(bias).len();
                let mut db = Array::zeros(val(bias).shape());
                for row in g.data().chunks(cols) {
                    for (d, &e) in db.data_mut().iter_mut().zip(row) {
                        *d += e;
                    }
                }
                acc(*x, g.clone());
                acc(*bias, db);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                let neg = g.data().iter().map(|&e| -e).collect();
                acc(*b, Array::new(g.shape().to_vec(), neg).expect("shape"));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let da = g.data().iter().zip(bv.data()).map(|(&e, &y)| e * y).collect();
                let db = g.data().iter().zip(av.data()).map(|(&e, &x)| e * x).collect();
                acc(*a, Array::new(av.shape().to_vec(), da).expect("shape"));
                acc(*b, Array::new(bv.shape().to_vec(), db).expect("shape"));
            }
            Op::ScaleBy { x, s } => {
                let (xv, sv) = (val(x), val(s));
                let s0 = sv.data()[0];
                let dx = g.data().iter().map(|&e| e * s0).collect();
                let ds: T = g.data().iter().zip(xv.data()).map(|(&e, &v)| e * v).sum();
                acc(*x, Array::new(xv.shape().to_vec(), dx).expect("shape"));
                acc(*s, Array::full(sv.shape(), ds));
            }
            Op::Affine { x, mul, .. } => {
                let m = T::lit(*mul);
                let dx = g.data().iter().map(|&e| e * m).collect();
                acc(*x, Array::new(g.shape().to_vec(), dx).expect("shape"));
            }
            Op::Relu(x) => {
                let xv = val(x);
                let dx = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&e, &v)| if v > T::zero() { e } else { T::zero() })
                    .collect();
                acc(*x, Array::new(xv.shape().to_vec(), dx).expect("shape"));
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let (_, cols) = y.matrix_dims();
                let mut dx = Array::zeros(y.shape());
                for ((yr, gr), dr) in y
                    .data()
                    .chunks(cols)
                    .zip(g.data().chunks(cols))
                    .zip(dx.data_mut().chunks_mut(cols))
                {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &yy), &gg) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yy * (gg - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::L2NormalizeRows(x) => {
                let (xv, y) = (val(x), &node.value);
                let (_, cols) = y.matrix_dims();
                let mut dx = Array::zeros(y.shape());
                for (((xr, yr), gr), dr) in xv
                    .data()
                    .chunks(cols)
                    .zip(y.data().chunks(cols))
                    .zip(g.data().chunks(cols))
                    .zip(dx.data_mut().chunks_mut(cols))
                {
                    let norm = xr.iter().map(|&e| e * e).sum::<T>().sqrt();
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &yy), &gg) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = (gg - yy * dot) / norm;
                    }
                }
                acc(*x, dx);
            }
            Op::GatherRows { x, index } => {
                let xv = val(x);
                let (_, cols) = xv.matrix_dims();
                let mut dx = Array::zeros(xv.shape());
                let d = dx.data_mut();
                for (r, &src) in index.iter().enumerate() {
                    for c in 0..cols {
                        d[src * cols + c] += g.data()[r * cols + c];
                    }
                }
                acc(*x, dx);
            }
            Op::PairConv { x, w, b } => {
                let (xv, wv) = (val(x), val(w));
                let s = xv.shape();
                let (n, r, c) = (s[0], s[2], s[3]);
                let mut dx = Array::zeros(s);
                let mut dw = Array::zeros(wv.shape());
                let mut db = Array::zeros(val(b).shape());
                let (xd, wd, gd) = (xv.data(), wv.data(), g.data());
                {
                    let dxd = dx.data_mut();
                    for p in 0..n {
                        for cell in 0..r {
                            let lo = ((p * 2) * r + cell) * c;
                            let hi = ((p * 2 + 1) * r + cell) * c;
                            let o = (p * r + cell) * c;
                            for ch in 0..c {
                                let e = gd[o + ch];
                                dxd[lo + ch] += wd[ch] * e;
                                dxd[hi + ch] += wd[c + ch] * e;
                                dw.data_mut()[ch] += xd[lo + ch] * e;
                                dw.data_mut()[c + ch] += xd[hi + ch] * e;
                                db.data_mut()[ch] += e;
                            }
                        }
                    }
                }
                acc(*x, dx);
                acc(*w, dw);
                acc(*b, db);
            }
            Op::VladResidual { assign, feats, centers } => {
                let (av, fv, cv) = (val(assign), val(feats), val(centers));
                let (n, k) = av.matrix_dims();
                let (_, c) = fv.matrix_dims();
                // d assign[i,k] = sum_c g[k,c] (f[i,c] - v[k,c])
                let mut da = Array::zeros(av.shape());
                T::gemm(n, c, k, fv.data(), false, g.data(), true, T::zero(), da.data_mut());
                for kk in 0..k {
                    let gv: T = (0..c).map(|ch| g.data()[kk * c + ch] * cv.data()[kk * c + ch]).sum();
                    for i in 0..n {
                        da.data_mut()[i * k + kk] = da.data()[i * k + kk] - gv;
                    }
                }
                // d feats = assign * g
                let mut df = Array::zeros(fv.shape());
                T::gemm(n, k, c, av.data(), false, g.data(), false, T::zero(), df.data_mut());
                let mut dc = Array::zeros(cv.shape());
                for kk in 0..k {
                    let mass: T = (0..n).map(|i| av.data()[i * k + kk]).sum();
                    for ch in 0..c {
                        dc.data_mut()[kk * c + ch] = -mass * g.data()[kk * c + ch];
                    }
                }
                acc(*assign, da);
                acc(*feats, df);
                acc(*centers, dc);
            }
            Op::Reshape { x, .. } => {
                let shape = val(x).shape().to_vec();
                acc(*x, g.reshaped(&shape).expect("reshape"));
            }
            Op::Sum(x) => {
                acc(*x, Array::full(val(x).shape(), g.data()[0]));
            }
            Op::SqDist(a, b) => {
                let (av, bv) = (val(a), val(b));
                let two = T::lit(2.0) * g.data()[0];
                let da: Vec<T> = av.data().iter().zip(bv.data()).map(|(&x, &y)| two * (x - y)).collect();
                let db = da.iter().map(|&e| -e).collect();
                acc(*a, Array::new(av.shape().to_vec(), da).expect("shape"));
                acc(*b, Array::new(bv.shape().to_vec(), db).expect("shape"));
            }
        }
    }
}

/// Indexable view of recorded node values.
struct ValuesView<'a, T>(&'a [Node<T>]);

impl<T> std::ops::Index<usize> for ValuesView<'_, T> {
    type Output = Array<T>;
    fn index(&self, i: usize) -> &Array<T> {
        &self.0[i].value
    }
}
