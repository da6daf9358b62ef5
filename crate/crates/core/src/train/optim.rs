//! SGD with Nesterov momentum.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::Parameters;

/// Velocity form: `v <- mu*v - lr*g`, then `w <- w + mu*v - lr*g`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    pub fn velocity(&self, name: &str) -> Option<&[f64]> {
        self.velocity.get(name).map(Vec::as_slice)
    }

    /// Updates every parameter in `trainable` from `grads`; all others are
    /// untouched. A trainable parameter without a gradient is an error, and
    /// nothing is updated in that case.
    pub fn step<'a>(
        &mut self,
        params: &mut Parameters,
        trainable: impl IntoIterator<Item = &'a str>,
        grads: &BTreeMap<String, Vec<f64>>,
        lr: f64,
    ) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        let names: Vec<&str> = trainable.into_iter().collect();
        for &name in &names {
            let p = params
                .get(name)
                .ok_or_else(|| Error::Config(format!("unknown trainable parameter `{name}`")))?;
            match grads.get(name) {
                Some(g) if g.len() == p.len() => {}
                Some(g) => return Err(Error::dim("sgd", format!("`{name}`: {} grads for {} values", g.len(), p.len()))),
                None => return Err(Error::MissingGradient(name.to_string())),
            }
        }
        let mu = self.momentum;
        for name in names {
            let g = &grads[name];
            let w = params.get_mut(name).expect("checked above").data_mut();
            let v = self.velocity.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            for ((wi, vi), gi) in w.iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = mu * *vi - lr * gi;
                *wi += mu * *vi - lr * gi;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one_param(v: f64) -> Parameters {
        let mut p = Parameters::new();
        p.insert("w.weight", Tensor::full(&[2], v)).unwrap();
        p.insert("frozen.weight", Tensor::full(&[1], 7.0)).unwrap();
        p
    }

    fn grads(g: f64) -> BTreeMap<String, Vec<f64>> {
        [("w.weight".to_string(), vec![g, g])].into_iter().collect()
    }

    #[test]
    fn zero_momentum_is_plain_sgd() {
        let mut p = one_param(1.0);
        let mut opt = Sgd::new(0.0);
        opt.step(&mut p, ["w.weight"], &grads(0.5), 0.1).unwrap();
        assert_eq!(p.get("w.weight").unwrap().data(), &[0.95, 0.95]);
    }

    #[test]
    fn two_constant_steps_match_unrolled_recurrence() {
        let (mu, lr, g) = (0.9, 0.01, 2.0);
        let mut p = one_param(0.0);
        let mut opt = Sgd::new(mu);
        for _ in 0..2 {
            opt.step(&mut p, ["w.weight"], &grads(g), lr).unwrap();
        }
        // Step 1 moves lr*g*(1+mu); step 2 moves lr*g*(1+mu+mu^2).
        let expected = -lr * g * (2.0 + 2.0 * mu + mu * mu);
        assert!((p.get("w.weight").unwrap().data()[0] - expected).abs() < 1e-15);
        assert_eq!(p.get("frozen.weight").unwrap().data(), &[7.0]);
    }

    #[test]
    fn missing_gradient_is_an_error_and_changes_nothing() {
        let mut p = one_param(1.0);
        let mut opt = Sgd::new(0.9);
        let err = opt.step(&mut p, ["w.weight", "frozen.weight"], &grads(1.0), 0.1);
        assert!(matches!(err, Err(Error::MissingGradient(n)) if n == "frozen.weight"));
        assert_eq!(p.get("w.weight").unwrap().data(), &[1.0, 1.0]);
    }
}
