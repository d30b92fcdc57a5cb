use serde::{Deserialize, Serialize};

use super::{NetError, Param};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adam hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer with one moment pair per parameter tensor.
///
/// A parameter whose gradient is absent or identically zero is left alone:
/// neither its value nor its moments or step count change.
#[derive(Debug, Clone)]
pub struct Adam<S> {
    pub config: AdamConfig,
    first: Vec<Tensor<S>>,
    second: Vec<Tensor<S>>,
    steps: Vec<u64>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: AdamConfig, params: &[Param<S>]) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape().to_vec()))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            first: zeros(),
            second: zeros(),
            steps: vec![0; params.len()],
        }
    }

    pub fn moments(&self) -> (&[Tensor<S>], &[Tensor<S>]) {
        (&self.first, &self.second)
    }

    /// Applies one update. `grads[i]` belongs to `params[i]`.
    ///
    /// Every gradient is checked before anything is modified, so a
    /// non-finite entry leaves the parameters untouched.
    pub fn step(
        &mut self,
        params: &mut [Param<S>],
        grads: &[Option<&Tensor<S>>],
    ) -> Result<(), NetError> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(NetError::Invalid(format!(
                "optimizer tracks {} parameters, got {} parameters and {} gradients",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if let Some(g) = g {
                if g.shape() != p.value.shape() {
                    return Err(NetError::ParamShape {
                        name: p.name.clone(),
                        expected: p.value.shape().to_vec(),
                        found: g.shape().to_vec(),
                    });
                }
                if !g.all_finite() {
                    return Err(NetError::NonFiniteGradient(p.name.clone()));
                }
            }
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let (b1, b2) = (S::of(beta1), S::of(beta2));
        let (lr, eps) = (S::of(lr), S::of(eps));
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            if g.data().iter().all(|&v| v == S::zero()) {
                continue;
            }
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let c1 = S::one() - S::of(beta1.powi(t));
            let c2 = S::one() - S::of(beta2.powi(t));
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((w, &gi), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (S::one() - b1) * gi;
                *vi = b2 * *vi + (S::one() - b2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> Vec<Param<f64>> {
        vec![Param {
            name: "w".into(),
            value: Tensor::new(vec![1], vec![v]).unwrap(),
        }]
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = scalar_param(1.25);
        let mut opt = Adam::new(AdamConfig::default(), &params);
        let g = Tensor::zeros(vec![1]);
        opt.step(&mut params, &[Some(&g)]).unwrap();
        opt.step(&mut params, &[None]).unwrap();
        assert_eq!(params[0].value.data(), &[1.25]);

        // also after moments have built up
        let g1 = Tensor::new(vec![1], vec![0.3]).unwrap();
        opt.step(&mut params, &[Some(&g1)]).unwrap();
        let after = params[0].value.data()[0];
        opt.step(&mut params, &[Some(&g)]).unwrap();
        assert_eq!(params[0].value.data(), &[after]);
    }

    #[test]
    fn matches_hand_trace() {
        // lr 0.1, default betas, grads 0.5, -0.2, 1.0 from w = 1
        let expected = [0.900000002, 0.8654394181165108, 0.7965256089766647];
        let mut params = scalar_param(1.0);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut opt = Adam::new(cfg, &params);
        for (g, want) in [0.5, -0.2, 1.0].into_iter().zip(expected) {
            let g = Tensor::new(vec![1], vec![g]).unwrap();
            opt.step(&mut params, &[Some(&g)]).unwrap();
            assert!((params[0].value.data()[0] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn identical_params_stay_identical() {
        let mut params = vec![
            Param {
                name: "a".into(),
                value: Tensor::new(vec![2], vec![0.4, -0.1]).unwrap(),
            },
            Param {
                name: "b".into(),
                value: Tensor::new(vec![2], vec![0.4, -0.1]).unwrap(),
            },
        ];
        let mut opt = Adam::new(AdamConfig::default(), &params);
        for k in 0..25 {
            let g = Tensor::new(vec![2], vec![(k as f64).sin(), (k as f64 * 0.3).cos()]).unwrap();
            opt.step(&mut params, &[Some(&g), Some(&g)]).unwrap();
            assert_eq!(params[0].value, params[1].value);
        }
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut params = scalar_param(1.0);
        let mut opt = Adam::new(AdamConfig::default(), &params);
        let g = Tensor::new(vec![1], vec![f64::NAN]).unwrap();
        let err = opt.step(&mut params, &[Some(&g)]).unwrap_err();
        assert_eq!(err, NetError::NonFiniteGradient("w".into()));
        assert_eq!(params[0].value.data(), &[1.0]);
    }

    #[test]
    fn moments_match_param_shapes() {
        let params = vec![Param {
            name: "k".into(),
            value: Tensor::<f64>::zeros(vec![2, 3, 4]),
        }];
        let opt = Adam::new(AdamConfig::default(), &params);
        let (m, v) = opt.moments();
        assert_eq!(m[0].shape(), &[2, 3, 4]);
        assert_eq!(v[0].shape(), &[2, 3, 4]);
    }
}
