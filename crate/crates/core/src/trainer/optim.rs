use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Tensor};

/// SGD with heavy-ball momentum: `v = mu * v + g`, `theta -= lr * v`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    /// Updates the parameters of `params` that have a gradient in `grads`
    /// and whose name satisfies `select`.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &ParamSet,
        lr: f64,
        select: impl Fn(&str) -> bool,
    ) -> Result<()> {
        for (name, p) in params.iter_mut().filter(|(n, _)| select(n)) {
            let Some(g) = grads.get(name) else { continue };
            if g.shape() != p.shape() {
                return Err(Error::shape(
                    format!("gradient of {name}"),
                    format!("{:?} vs parameter {:?}", g.shape(), p.shape()),
                ));
            }
            let v = self
                .velocity
                .entry(name.to_owned())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for ((vi, gi), pi) in v.data_mut().iter_mut().zip(g.data()).zip(p.data_mut()) {
                *vi = self.momentum * *vi + gi;
                *pi -= lr * *vi;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(v));
        p
    }

    #[test]
    fn momentum_accumulates() {
        let mut opt = Sgd::new(0.9);
        let mut p = one(1.0);
        opt.step(&mut p, &one(1.0), 0.1, |_| true).unwrap();
        assert!((p.get("w").unwrap().item().unwrap() - 0.9).abs() < 1e-15);
        opt.step(&mut p, &one(1.0), 0.1, |_| true).unwrap();
        // v = 1.9
        assert!((p.get("w").unwrap().item().unwrap() - 0.71).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_keeps_params() {
        let mut opt = Sgd::new(0.9);
        let mut p = one(2.5);
        opt.step(&mut p, &one(3.0), 0.0, |_| true).unwrap();
        assert_eq!(p, one(2.5));
    }

    #[test]
    fn unselected_params_are_untouched() {
        let mut opt = Sgd::new(0.0);
        let mut p = one(1.0);
        opt.step(&mut p, &one(1.0), 0.5, |n| n != "w").unwrap();
        assert_eq!(p, one(1.0));
    }
}
