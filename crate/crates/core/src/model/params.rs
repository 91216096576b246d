use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::tensor::{Float, InitScheme, Tensor};

/// Role of a named tensor in the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight { fan_in: usize },
    Bias,
    BnGamma,
    BnBeta,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn is_trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    pub fn init_scheme(self) -> InitScheme {
        match self {
            ParamKind::ConvWeight { fan_in } => InitScheme::HeNormal { fan_in },
            ParamKind::Bias | ParamKind::BnBeta | ParamKind::RunningMean => InitScheme::Zeros,
            ParamKind::BnGamma | ParamKind::RunningVar => InitScheme::Ones,
        }
    }
}

/// Running statistics are state, not learnable weights.
pub fn is_trainable_name(name: &str) -> bool {
    !(name.ends_with(".running_mean") || name.ends_with(".running_var"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub(crate) fn conv_specs(out: &mut Vec<ParamSpec>, prefix: &str, shape: [usize; 4], bias: bool) {
    let fan_in = shape[1] * shape[2] * shape[3];
    out.push(ParamSpec {
        name: format!("{prefix}.weight"),
        shape: shape.to_vec(),
        kind: ParamKind::ConvWeight { fan_in },
    });
    if bias {
        out.push(ParamSpec {
            name: format!("{prefix}.bias"),
            shape: vec![shape[0]],
            kind: ParamKind::Bias,
        });
    }
}

pub(crate) fn bn_specs(out: &mut Vec<ParamSpec>, prefix: &str, channels: usize) {
    for (suffix, kind) in [
        ("gamma", ParamKind::BnGamma),
        ("beta", ParamKind::BnBeta),
        ("running_mean", ParamKind::RunningMean),
        ("running_var", ParamKind::RunningVar),
    ] {
        out.push(ParamSpec {
            name: format!("{prefix}.bn.{suffix}"),
            shape: vec![channels],
            kind,
        });
    }
}

/// All tensors of a network keyed by layer path, e.g.
/// `encoder.stage3.block1.expand.weight`. Includes batch-norm running
/// statistics.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ModelParams<T = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Float> ModelParams<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    /// Initializes every spec deterministically. Each tensor draws from its
    /// own stream derived from `(seed, name)`.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Self {
        let tensors = specs
            .iter()
            .map(|spec| {
                let stream = derive_seed(seed, &[spec.name.as_bytes()]);
                (
                    spec.name.clone(),
                    Tensor::init(&spec.shape, spec.kind.init_scheme(), stream),
                )
            })
            .collect();
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter `{name}`")))
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Option<Tensor<T>> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.iter().filter(|(name, _)| is_trainable_name(name))
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable().map(|(_, t)| t.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    pub fn cast<U: Float>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Checks names and shapes against `specs`, naming the first offender.
    pub fn check_against(&self, specs: &[ParamSpec]) -> Result<()> {
        for spec in specs {
            match self.tensors.get(&spec.name) {
                None => {
                    return Err(Error::InvalidArgument(format!(
                        "missing tensor `{}`",
                        spec.name
                    )));
                }
                Some(t) if t.shape() != spec.shape.as_slice() => {
                    return Err(Error::InvalidArgument(format!(
                        "tensor `{}` has shape {:?}, expected {:?}",
                        spec.name,
                        t.shape(),
                        spec.shape
                    )));
                }
                Some(_) => {}
            }
        }
        if self.tensors.len() != specs.len() {
            let known: std::collections::BTreeSet<&str> =
                specs.iter().map(|s| s.name.as_str()).collect();
            if let Some(extra) = self.names().find(|n| !known.contains(n)) {
                return Err(Error::InvalidArgument(format!(
                    "unexpected tensor `{extra}`"
                )));
            }
        }
        Ok(())
    }
}
