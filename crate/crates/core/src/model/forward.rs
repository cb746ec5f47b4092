//! Forward pipeline recorded on a [`Tape`]: PointOE local descriptors,
//! self-attention, NetVLAD, and the compressing head.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::config::ModelConfig;
use super::params::{stage_prefix, ModelParams};
use crate::diffcore::{Real, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{s8n_neighbors, NeighborTable, PointCloud};

/// Handles of the parameters registered on a tape.
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    /// Registers every tensor of `params` as a trainable leaf.
    pub fn register<T: Real>(tape: &mut Tape<T>, params: &ModelParams<T>) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (name, value) in params.tensors() {
            vars.insert(name.clone(), tape.param(name, value.clone())?);
        }
        Ok(ParamVars { vars })
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::TensorMismatch {
            name: name.to_string(),
            detail: "not registered".into(),
        })
    }
}

/// Orientation-encoding unit on `N x C` features: gather the 2x2x2 neighbor
/// cube, then collapse x, y and z with depthwise convolutions and ReLU.
pub fn oe_unit<T: Real>(
    tape: &mut Tape<T>,
    features: Var,
    index: &Arc<[usize]>,
    params: &ParamVars,
    prefix: &str,
) -> Result<Var> {
    let (n, c) = match tape.value(features).shape() {
        [n, c] => (*n, *c),
        s => return Err(Error::Shape(format!("oe unit input must be N x C, got {s:?}"))),
    };
    if index.len() != 8 * n {
        return Err(Error::Shape(format!(
            "neighbor table covers {} points, features have {n}",
            index.len() / 8
        )));
    }
    let mut h = tape.gather_rows(features, index.clone())?;
    for (axis, remaining) in [("x", 4), ("y", 2), ("z", 1)] {
        let w = params.get(&format!("{prefix}.w_{axis}"))?;
        let b = params.get(&format!("{prefix}.b_{axis}"))?;
        let x = tape.reshape(h, &[n, 2, remaining, c])?;
        let y = tape.pair_conv(x, w, b)?;
        h = tape.relu(y)?;
    }
    tape.reshape(h, &[n, c])
}

/// Shared pointwise layer `relu(x W + b)`.
pub fn pointwise_mlp<T: Real>(tape: &mut Tape<T>, x: Var, params: &ParamVars, prefix: &str) -> Result<Var> {
    let w = params.get(&format!("{prefix}.weight"))?;
    let b = params.get(&format!("{prefix}.bias"))?;
    let h = tape.matmul(x, w)?;
    let h = tape.add_bias(h, b)?;
    tape.relu(h)
}

/// Alternating OE unit and pointwise MLP per stage; returns `N x mlp_dims.last()`.
pub fn pointoe<T: Real>(
    tape: &mut Tape<T>,
    coords: Var,
    table: &NeighborTable,
    config: &ModelConfig,
    params: &ParamVars,
) -> Result<Var> {
    let index = table.flat_index();
    let mut h = coords;
    for i in 0..config.mlp_dims.len() {
        let p = stage_prefix(i);
        if config.use_oe {
            h = oe_unit(tape, h, &index, params, &format!("{p}.oe"))?;
        }
        h = pointwise_mlp(tape, h, params, &format!("{p}.mlp"))?;
    }
    Ok(h)
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    /// `F_L' = mu * W^T Z + F_L`.
    pub output: Var,
    /// `N x N` map, row `j` a softmax over `i` of `Y_j . X_i`.
    pub attention: Var,
}

fn projection<T: Real>(tape: &mut Tape<T>, x: Var, params: &ParamVars, name: &str) -> Result<Var> {
    let w = params.get(&format!("attention.{name}.weight"))?;
    let b = params.get(&format!("attention.{name}.bias"))?;
    let h = tape.matmul(x, w)?;
    tape.add_bias(h, b)
}

pub fn self_attention<T: Real>(tape: &mut Tape<T>, local: Var, params: &ParamVars) -> Result<AttentionVars> {
    let x = projection(tape, local, params, "x")?;
    let y = projection(tape, local, params, "y")?;
    let z = projection(tape, local, params, "z")?;
    let logits = tape.matmul_t(y, false, x, true)?;
    let attention = tape.softmax_rows(logits)?;
    let context = tape.matmul_t(attention, true, z, false)?;
    let mu = params.get("attention.mu")?;
    let scaled = tape.scale_by(context, mu)?;
    let output = tape.add(scaled, local)?;
    Ok(AttentionVars { output, attention })
}

/// NetVLAD with soft assignment, intra-normalization and a final L2 norm.
/// Returns a `1 x (K * C)` row.
pub fn netvlad<T: Real>(tape: &mut Tape<T>, features: Var, params: &ParamVars) -> Result<Var> {
    let w = params.get("netvlad.assign.weight")?;
    let b = params.get("netvlad.assign.bias")?;
    let centers = params.get("netvlad.centers")?;
    let logits = tape.matmul(features, w)?;
    let logits = tape.add_bias(logits, b)?;
    let assign = tape.softmax_rows(logits)?;
    let residual = tape.vlad_residual(assign, features, centers)?;
    let intra = tape.l2_normalize_rows(residual)?;
    let len = tape.value(intra).len();
    let flat = tape.reshape(intra, &[1, len])?;
    tape.l2_normalize_rows(flat)
}

/// Fully connected compression followed by L2 normalization.
pub fn head<T: Real>(tape: &mut Tape<T>, vlad: Var, params: &ParamVars) -> Result<Var> {
    let w = params.get("head.weight")?;
    let y = tape.matmul(vlad, w)?;
    tape.l2_normalize_rows(y)
}

/// Full pipeline from coordinates to a `1 x D` unit descriptor.
pub fn descriptor<T: Real>(
    tape: &mut Tape<T>,
    cloud: &PointCloud,
    table: &NeighborTable,
    config: &ModelConfig,
    params: &ParamVars,
) -> Result<Var> {
    if table.len() != cloud.len() {
        return Err(Error::Shape(format!(
            "neighbor table for {} points, cloud has {}",
            table.len(),
            cloud.len()
        )));
    }
    let coords = tape.constant(cloud.to_array())?;
    let local = pointoe(tape, coords, table, config, params)?;
    let enhanced = if config.use_attention {
        self_attention(tape, local, params)?.output
    } else {
        local
    };
    let vlad = netvlad(tape, enhanced, params)?;
    head(tape, vlad, params)
}

/// Unit-L2-norm global descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalDescriptor(Vec<f32>);

impl GlobalDescriptor {
    /// Accepts `values` if their L2 norm is within 1e-5 of one.
    pub fn new(values: Vec<f32>) -> Result<Self> {
        let norm = values.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if values.is_empty() || (norm - 1.0).abs() > 1e-5 {
            return Err(Error::Format(format!("descriptor norm {norm} is not 1 within 1e-5")));
        }
        Ok(GlobalDescriptor(values))
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn distance(&self, other: &GlobalDescriptor) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// A configured network with its parameters.
#[derive(Clone, Debug)]
pub struct SoeNet<T> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
}

impl<T: Real> SoeNet<T> {
    pub fn new(config: ModelConfig, params: ModelParams<T>) -> Result<Self> {
        config.validate()?;
        params.validate(&config)?;
        Ok(SoeNet { config, params })
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config, seed);
        Ok(SoeNet { config, params })
    }

    pub fn neighbors(&self, cloud: &PointCloud) -> Result<NeighborTable> {
        s8n_neighbors(cloud, self.config.s8n_radius)
    }

    /// Global descriptor of one cloud.
    pub fn describe(&self, cloud: &PointCloud) -> Result<GlobalDescriptor> {
        let table = self.neighbors(cloud)?;
        self.describe_with_table(cloud, &table)
    }

    pub fn describe_with_table(&self, cloud: &PointCloud, table: &NeighborTable) -> Result<GlobalDescriptor> {
        let mut tape = Tape::new();
        let vars = ParamVars::register(&mut tape, &self.params)?;
        let out = descriptor(&mut tape, cloud, table, &self.config, &vars)?;
        GlobalDescriptor::new(tape.value(out).data().iter().map(|v| v.as_f64() as f32).collect())
    }
}
