use super::metrics::{dice_from_sums, overlap_sums};
use crate::error::{Error, Result};
use crate::tensor::{Float, GradFn, Graph, Tensor, Var};

struct DiceLossBackward {
    smooth: f64,
}

impl<T: Float> GradFn<T> for DiceLossBackward {
    fn name(&self) -> &str {
        "dice_loss"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_output: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (pred, target) = (inputs[0], inputs[1]);
        let (inter, sp, st) = overlap_sums(pred.data(), target.data());
        let denom = sp + st + self.smooth;
        let dice = dice_from_sums(inter, sp, st, self.smooth);
        let g = grad_output.data()[0].as_f64();
        // d(1 − D)/dp_i = −(2·t_i − D) / denom, symmetric in p and t
        let rule = |other: &Tensor<T>| {
            let data = other
                .data()
                .iter()
                .map(|&o| T::from_f64(-g * (2.0 * o.as_f64() - dice) / denom))
                .collect();
            Tensor::new(other.shape().to_vec(), data)
        };
        Ok(vec![
            if needs[0] { Some(rule(target)?) } else { None },
            if needs[1] { Some(rule(pred)?) } else { None },
        ])
    }
}

/// `1 − soft Dice` over the whole batch as a differentiable scalar.
pub fn dice_loss<T: Float>(
    graph: &mut Graph<T>,
    pred: Var,
    target: Var,
    smooth: f64,
) -> Result<Var> {
    let (p, t) = (graph.value(pred), graph.value(target));
    if p.shape() != t.shape() {
        return Err(Error::shape(
            "dice_loss",
            "shape",
            format!("prediction {:?} vs target {:?}", p.shape(), t.shape()),
        ));
    }
    let (inter, sp, st) = overlap_sums(p.data(), t.data());
    let loss = 1.0 - dice_from_sums(inter, sp, st, smooth);
    Ok(graph.record(
        &[pred, target],
        Tensor::scalar(T::from_f64(loss)),
        Box::new(DiceLossBackward { smooth }),
    ))
}
