use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adam moments for a named parameter set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed steps.
    pub t: u64,
    #[serde(skip)]
    pub m: BTreeMap<String, Vec<f32>>,
    #[serde(skip)]
    pub v: BTreeMap<String, Vec<f32>>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl AdamState {
    /// Zeroed moments shaped like `params`.
    pub fn for_params(params: &BTreeMap<String, Tensor>) -> Self {
        let zeros = || params.iter().map(|(k, t)| (k.clone(), vec![0.0; t.len()])).collect();
        Self {
            m: zeros(),
            v: zeros(),
            ..Self::default()
        }
    }

    /// One bias-corrected Adam update of every parameter.
    pub fn step(&mut self, params: &mut BTreeMap<String, Tensor>, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        for (name, p) in params.iter() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::State(format!("no gradient for parameter {name}")))?;
            if g.len() != p.len() {
                return Err(Error::State(format!("gradient of {name} has the wrong size")));
            }
            match (self.m.get(name), self.v.get(name)) {
                (Some(m), Some(v)) if m.len() == p.len() && v.len() == p.len() => {}
                _ => return Err(Error::State(format!("optimizer state for {name} missing or mis-sized"))),
            }
        }
        if grads.len() != params.len() {
            return Err(Error::State("gradients for unknown parameters".into()));
        }
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (name, p) in params.iter_mut() {
            let g = grads[name].data();
            let m = self.m.get_mut(name).expect("checked above");
            let v = self.v.get_mut(name).expect("checked above");
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                let gi = f64::from(g[i]);
                let mi = b1 * f64::from(m[i]) + (1.0 - b1) * gi;
                let vi = b2 * f64::from(v[i]) + (1.0 - b2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                *x = (f64::from(*x) - update) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, t: Tensor) -> BTreeMap<String, Tensor> {
        BTreeMap::from([(name.to_string(), t)])
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = one("w", Tensor::full(&[3], 0.7));
        let mut s = AdamState::for_params(&p);
        s.step(&mut p, &one("w", Tensor::zeros(&[3])), 1e-3).unwrap();
        assert_eq!(p["w"].data(), &[0.7; 3]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let mut p = one("w", Tensor::zeros(&[2]));
        let mut s = AdamState::for_params(&p);
        let g = Tensor::new(vec![2], vec![0.3, -2.0]).unwrap();
        s.step(&mut p, &one("w", g), 5e-4).unwrap();
        assert!((p["w"].data()[0] + 5e-4).abs() < 1e-9);
        assert!((p["w"].data()[1] - 5e-4).abs() < 1e-9);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = one("w", Tensor::zeros(&[2]));
        let mut s = AdamState::for_params(&p);
        assert!(matches!(s.step(&mut p, &BTreeMap::new(), 1e-3), Err(Error::State(_))));
        assert_eq!(s.t, 0);
    }
}
