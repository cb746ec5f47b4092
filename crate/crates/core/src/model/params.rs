use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::diffcore::{checkpoint, Array, Real};
use crate::error::{Error, Result};

/// How a tensor is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Uniform { fan_in: usize, fan_out: usize },
    /// Uniform in `[0, 1)`, so each pair convolution starts near an average.
    Positive,
    Zero,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    init: Init,
}

fn spec(name: String, shape: &[usize], init: Init) -> TensorSpec {
    TensorSpec {
        name,
        shape: shape.to_vec(),
        init,
    }
}

pub fn stage_prefix(i: usize) -> String {
    format!("pointoe.{i}")
}

/// Every learnable tensor of the network for `config`, in a fixed order.
pub fn tensor_specs(config: &ModelConfig) -> Vec<TensorSpec> {
    let mut out = Vec::new();
    let mut width = 3;
    for (i, &next) in config.mlp_dims.iter().enumerate() {
        let p = stage_prefix(i);
        let conv = Init::Positive;
        out.push(spec(format!("{p}.oe.w_x"), &[2, 1, 1, width], conv));
        out.push(spec(format!("{p}.oe.w_y"), &[1, 2, 1, width], conv));
        out.push(spec(format!("{p}.oe.w_z"), &[1, 1, 2, width], conv));
        for b in ["b_x", "b_y", "b_z"] {
            out.push(spec(format!("{p}.oe.{b}"), &[width], Init::Zero));
        }
        out.push(spec(
            format!("{p}.mlp.weight"),
            &[width, next],
            Init::Uniform { fan_in: width, fan_out: next },
        ));
        out.push(spec(format!("{p}.mlp.bias"), &[next], Init::Zero));
        width = next;
    }
    let c = width;
    for m in ["x", "y", "z"] {
        out.push(spec(
            format!("attention.{m}.weight"),
            &[c, c],
            Init::Uniform { fan_in: c, fan_out: c },
        ));
        out.push(spec(format!("attention.{m}.bias"), &[c], Init::Zero));
    }
    out.push(spec("attention.mu".into(), &[1], Init::Zero));
    let k = config.vlad_k;
    out.push(spec("netvlad.centers".into(), &[k, c], Init::Uniform { fan_in: c, fan_out: k }));
    out.push(spec(
        "netvlad.assign.weight".into(),
        &[c, k],
        Init::Uniform { fan_in: c, fan_out: k },
    ));
    out.push(spec("netvlad.assign.bias".into(), &[k], Init::Zero));
    out.push(spec(
        "head.weight".into(),
        &[c * k, config.out_dim],
        Init::Uniform { fan_in: c * k, fan_out: config.out_dim },
    ));
    out
}

/// All learnable tensors, keyed by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    tensors: BTreeMap<String, Array<T>>,
}

impl<T: Real> ModelParams<T> {
    /// Fan-scaled uniform weights, nonnegative OE kernels, zero biases and
    /// zero attention scale.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = tensor_specs(config)
            .into_iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                let data = match s.init {
                    Init::Zero => vec![T::zero(); n],
                    Init::Positive => (0..n).map(|_| T::lit(rng.gen_range(0.0..1.0))).collect(),
                    Init::Uniform { fan_in, fan_out } => {
                        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                        (0..n).map(|_| T::lit(rng.gen_range(-bound..bound))).collect()
                    }
                };
                (s.name, Array::new(s.shape, data).expect("spec shape"))
            })
            .collect();
        ModelParams { tensors }
    }

    /// Wraps named tensors after checking them against `config`.
    pub fn from_tensors(tensors: BTreeMap<String, Array<T>>, config: &ModelConfig) -> Result<Self> {
        let p = ModelParams { tensors };
        p.validate(config)?;
        Ok(p)
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let specs = tensor_specs(config);
        for s in &specs {
            let t = self.tensors.get(&s.name).ok_or_else(|| Error::TensorMismatch {
                name: s.name.clone(),
                detail: "missing".into(),
            })?;
            if t.shape() != s.shape.as_slice() {
                return Err(Error::TensorMismatch {
                    name: s.name.clone(),
                    detail: format!("shape {:?}, config expects {:?}", t.shape(), s.shape),
                });
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| !specs.iter().any(|s| &s.name == *k)) {
            return Err(Error::TensorMismatch {
                name: extra.clone(),
                detail: "not part of this configuration".into(),
            });
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Array<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array<T>> {
        self.tensors.get_mut(name)
    }

    pub fn tensors(&self) -> &BTreeMap<String, Array<T>> {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array<T>)> {
        self.tensors.iter_mut()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Array::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Writes an `SCK1` checkpoint (values stored as f32).
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_tensors(path, &self.cast::<f32>().tensors)
    }

    /// Reads an `SCK1` checkpoint and validates every tensor against `config`.
    pub fn load(path: &Path, config: &ModelConfig) -> Result<Self> {
        let tensors = checkpoint::load_tensors(path)?;
        let p = ModelParams::<f32>::from_tensors(tensors, config)?;
        Ok(p.cast())
    }
}
