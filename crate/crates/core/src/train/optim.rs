use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdadeltaParams {
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
}

/// One Adadelta step on flat slices, in order:
/// `E[g²] ← ρ·E[g²] + (1−ρ)·g²`,
/// `Δx = −√(E[Δx²]+ε) / √(E[g²]+ε) · g`,
/// `E[Δx²] ← ρ·E[Δx²] + (1−ρ)·Δx²`,
/// `x ← x + lr·Δx`.
pub fn adadelta_update<T: Float>(
    param: &mut [T],
    grad: &[T],
    avg_sq_grad: &mut [T],
    avg_sq_update: &mut [T],
    hp: AdadeltaParams,
) {
    let rho = T::from_f64(hp.rho);
    let one_minus_rho = T::from_f64(1.0 - hp.rho);
    let eps = T::from_f64(hp.eps);
    let lr = T::from_f64(hp.lr);
    for (((x, &g), eg), ed) in param
        .iter_mut()
        .zip(grad)
        .zip(avg_sq_grad)
        .zip(avg_sq_update)
    {
        *eg = rho * *eg + one_minus_rho * g * g;
        let delta = -((*ed + eps).sqrt() / (*eg + eps).sqrt()) * g;
        *ed = rho * *ed + one_minus_rho * delta * delta;
        *x += lr * delta;
    }
}

/// Running averages `E[g²]` and `E[Δx²]` for every trainable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdadeltaState<T = f32> {
    pub avg_sq_grad: BTreeMap<String, Tensor<T>>,
    pub avg_sq_update: BTreeMap<String, Tensor<T>>,
}

impl<T: Float> AdadeltaState<T> {
    /// Zero accumulators shaped like the trainable tensors of `params`.
    pub fn zeros_like(params: &ModelParams<T>) -> Self {
        let zeros: BTreeMap<String, Tensor<T>> = params
            .trainable()
            .map(|(name, t)| (name.to_owned(), Tensor::zeros(t.shape())))
            .collect();
        Self {
            avg_sq_grad: zeros.clone(),
            avg_sq_update: zeros,
        }
    }

    /// Applies one step to every parameter named in `grads`. All gradients
    /// are checked for NaN/∞ before anything is modified.
    pub fn step(
        &mut self,
        params: &mut ModelParams<T>,
        grads: &BTreeMap<String, Tensor<T>>,
        hp: AdadeltaParams,
    ) -> Result<()> {
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
            let p = params.require(name)?;
            let eg = self.avg_sq_grad.get(name);
            if p.shape() != g.shape() || eg.map(Tensor::shape) != Some(p.shape()) {
                return Err(Error::shape(
                    "adadelta_step",
                    "parameter",
                    format!(
                        "`{name}`: parameter {:?}, gradient {:?}",
                        p.shape(),
                        g.shape()
                    ),
                ));
            }
        }
        for (name, g) in grads {
            let param = params.get_mut(name).expect("checked above");
            let eg = self.avg_sq_grad.get_mut(name).expect("checked above");
            let ed = self.avg_sq_update.get_mut(name).ok_or_else(|| {
                Error::InvalidArgument(format!("no update accumulator for `{name}`"))
            })?;
            adadelta_update(param.data_mut(), g.data(), eg.data_mut(), ed.data_mut(), hp);
        }
        Ok(())
    }

    pub fn is_nonnegative(&self) -> bool {
        self.avg_sq_grad
            .values()
            .chain(self.avg_sq_update.values())
            .all(|t| t.data().iter().all(|&v| v >= T::zero()))
    }

    /// Checks that accumulators exist for exactly the trainable tensors of
    /// `params`, with matching shapes.
    pub fn check_against(&self, params: &ModelParams<T>) -> Result<()> {
        let expected: Vec<(&str, &[usize])> =
            params.trainable().map(|(n, t)| (n, t.shape())).collect();
        for (label, map) in [
            ("avg_sq_grad", &self.avg_sq_grad),
            ("avg_sq_update", &self.avg_sq_update),
        ] {
            if map.len() != expected.len() {
                return Err(Error::Checkpoint(format!(
                    "optimizer {label} has {} tensors, model has {} trainable",
                    map.len(),
                    expected.len()
                )));
            }
            for &(name, shape) in &expected {
                match map.get(name) {
                    Some(t) if t.shape() == shape => {}
                    Some(t) => {
                        return Err(Error::Checkpoint(format!(
                            "optimizer {label} `{name}` has shape {:?}, expected {shape:?}",
                            t.shape()
                        )))
                    }
                    None => {
                        return Err(Error::Checkpoint(format!(
                            "optimizer {label} lacks `{name}`"
                        )))
                    }
                }
            }
        }
        Ok(())
    }
}
