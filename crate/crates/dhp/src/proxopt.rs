//! SGD for hypernetwork parameters; proximal-gradient updates for latents.
//!
//! Sparsifiable latents take a plain gradient step at the SGD learning
//! rate followed by the closed-form proximal operator with threshold
//! lambda * lr. Momentum and weight decay apply only to ordinary
//! parameters, never to latents.

use crate::error::{DhpError, Result};
use crate::hypernet::LatentVector;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regularizer {
    L1,
    L2,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct OptimConfig {
    /// Learning rate mu; also the proximal step size.
    pub lr: f64,
    /// Momentum in [0, 1); applied to ordinary parameters only.
    pub momentum: f64,
    /// Weight decay gamma for hypernetwork weights and biases.
    pub weight_decay: f64,
    /// Sparsity factor lambda; the proximal threshold is lambda * lr.
    pub sparsity: f64,
    pub regularizer: Regularizer,
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(DhpError::arg("optim", "lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(DhpError::arg("optim", "momentum must be in [0, 1)"));
        }
        if self.weight_decay < 0.0 || self.sparsity < 0.0 {
            return Err(DhpError::arg("optim", "decay factors must be non-negative"));
        }
        Ok(())
    }
}

/// One SGD step with momentum buffering and decoupled-from-latents weight
/// decay: `v <- momentum*v + (g + gamma*p); p <- p - lr*v`.
pub fn sgd_step(
    param: &mut Tensor,
    grad: &Tensor,
    velocity: &mut Tensor,
    cfg: &OptimConfig,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != velocity.shape() {
        return Err(DhpError::shape(
            "sgd_step",
            format!(
                "param {:?}, grad {:?}, velocity {:?}",
                param.shape(),
                grad.shape(),
                velocity.shape()
            ),
        ));
    }
    if !grad.is_finite() {
        return Err(DhpError::NonFinite("sgd_step gradient"));
    }
    let lr = cfg.lr;
    for ((p, &g), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(velocity.data_mut())
    {
        *v = cfg.momentum * *v + g + cfg.weight_decay * *p;
        *p -= lr * *v;
    }
    Ok(())
}

/// Soft thresholding, the l1 proximal operator: `sgn(v) * max(|v| - t, 0)`.
pub fn prox_l1(v: &Tensor, t: f64) -> Result<Tensor> {
    if t < 0.0 {
        return Err(DhpError::arg("prox_l1", "negative threshold"));
    }
    Ok(v.map(|x| {
        if x > t {
            x - t
        } else if x < -t {
            x + t
        } else {
            0.0
        }
    }))
}

/// Block shrinkage, the l2-norm proximal operator applied to the whole
/// vector: `(1 - t / max(||v||, t)) * v`.
pub fn prox_l2(v: &Tensor, t: f64) -> Result<Tensor> {
    if t < 0.0 {
        return Err(DhpError::arg("prox_l2", "negative threshold"));
    }
    if t == 0.0 {
        return Ok(v.clone());
    }
    let norm = v.l2_norm();
    let factor = 1.0 - t / norm.max(t);
    Ok(v.map(|x| factor * x))
}

/// Group shrinkage across parallel vectors: element index i of every vector
/// forms one group, shrunk jointly by its l2 norm. Used for the
/// non-sharing ablation (l2,1 regularizer over correlated latents).
pub fn prox_group(vectors: &mut [&mut Tensor], t: f64) -> Result<()> {
    if t < 0.0 {
        return Err(DhpError::arg("prox_group", "negative threshold"));
    }
    let Some(first) = vectors.first() else {
        return Ok(());
    };
    let d = first.numel();
    if vectors.iter().any(|v| v.numel() != d) {
        return Err(DhpError::shape("prox_group", "group members differ in dimension".to_string()));
    }
    if t == 0.0 {
        return Ok(());
    }
    for i in 0..d {
        let norm = vectors
            .iter()
            .map(|v| v.data()[i] * v.data()[i])
            .sum::<f64>()
            .sqrt();
        let factor = 1.0 - t / norm.max(t);
        for v in vectors.iter_mut() {
            v.data_mut()[i] *= factor;
        }
    }
    Ok(())
}

/// Proximal-gradient update for one latent vector:
/// `z <- prox(z - lr*grad, lambda*lr)`. Non-sparsifiable latents take the
/// plain gradient step only. No momentum, no weight decay.
pub fn latent_step(z: &mut LatentVector, grad: &Tensor, cfg: &OptimConfig) -> Result<()> {
    gradient_step(z, grad, cfg)?;
    if !z.sparsifiable {
        return Ok(());
    }
    let t = cfg.sparsity * cfg.lr;
    if t == 0.0 {
        return Ok(());
    }
    z.values = match cfg.regularizer {
        Regularizer::L1 => prox_l1(&z.values, t)?,
        Regularizer::L2 => prox_l2(&z.values, t)?,
    };
    Ok(())
}

/// The descent half of the proximal update (task-loss gradient only; the
/// regularizer is handled entirely by the prox).
pub fn gradient_step(z: &mut LatentVector, grad: &Tensor, cfg: &OptimConfig) -> Result<()> {
    if z.values.shape() != grad.shape() {
        return Err(DhpError::shape(
            "latent_step",
            format!("latent {:?}, grad {:?}", z.values.shape(), grad.shape()),
        ));
    }
    if !grad.is_finite() {
        return Err(DhpError::NonFinite("latent gradient"));
    }
    for (p, &g) in z.values.data_mut().iter_mut().zip(grad.data()) {
        *p -= cfg.lr * g;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(sparsity: f64, regularizer: Regularizer) -> OptimConfig {
        OptimConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            sparsity,
            regularizer,
        }
    }

    #[test]
    fn soft_threshold_values() {
        let v = Tensor::from_vec(vec![0.3, -0.05, 0.08, -0.4, 0.0]);
        let p = prox_l1(&v, 0.1).unwrap();
        let expect = [0.2, 0.0, 0.0, -0.3, 0.0];
        for (a, e) in p.data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-15, "{a} vs {e}");
        }
    }

    #[test]
    fn l2_shrinkage_values() {
        let v = Tensor::from_vec(vec![3.0, 4.0]); // norm 5
        let p = prox_l2(&v, 1.0).unwrap();
        assert!((p.l2_norm() - 4.0).abs() < 1e-12);
        assert!((p.data()[0] - 2.4).abs() < 1e-12);
        // below the threshold the whole vector collapses
        let small = Tensor::from_vec(vec![0.3, 0.4]);
        let z = prox_l2(&small, 1.0).unwrap();
        assert!(z.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn prox_operators_are_non_expansive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let a = Tensor::randn(&[6], &mut rng);
            let b = Tensor::randn(&[6], &mut rng);
            let d0 = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            for t in [0.0, 0.05, 0.5, 2.0] {
                let (pa, pb) = (prox_l1(&a, t).unwrap(), prox_l1(&b, t).unwrap());
                let d1 = pa
                    .data()
                    .iter()
                    .zip(pb.data())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                assert!(d1 <= d0 + 1e-12, "l1 expanded: {d1} > {d0}");
                let (qa, qb) = (prox_l2(&a, t).unwrap(), prox_l2(&b, t).unwrap());
                let d2 = qa
                    .data()
                    .iter()
                    .zip(qb.data())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                assert!(d2 <= d0 + 1e-12, "l2 expanded: {d2} > {d0}");
            }
        }
    }

    #[test]
    fn sgd_momentum_hand_recurrence() {
        let c = cfg(0.0, Regularizer::L1);
        let mut p = Tensor::from_vec(vec![1.0]);
        let mut v = Tensor::zeros(&[1]);
        let g = Tensor::from_vec(vec![0.5]);
        // step 1: v = 0.5 + 1e-4*1.0; p -= 0.1*v
        sgd_step(&mut p, &g, &mut v, &c).unwrap();
        let v1 = 0.5 + 1e-4;
        let p1 = 1.0 - 0.1 * v1;
        assert!((v.data()[0] - v1).abs() < 1e-15);
        assert!((p.data()[0] - p1).abs() < 1e-15);
        // step 2: v = 0.9*v1 + 0.5 + 1e-4*p1
        sgd_step(&mut p, &g, &mut v, &c).unwrap();
        let v2 = 0.9 * v1 + 0.5 + 1e-4 * p1;
        let p2 = p1 - 0.1 * v2;
        assert!((v.data()[0] - v2).abs() < 1e-15);
        assert!((p.data()[0] - p2).abs() < 1e-15);
    }

    #[test]
    fn latent_step_without_sparsity_matches_plain_sgd() {
        let c = cfg(0.0, Regularizer::L1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let values = Tensor::randn(&[8], &mut rng);
        let grad = Tensor::randn(&[8], &mut rng);
        let mut z = LatentVector {
            values: values.clone(),
            sparsifiable: true,
            owner: 0,
        };
        latent_step(&mut z, &grad, &c).unwrap();
        let mut plain = values.clone();
        for (p, &g) in plain.data_mut().iter_mut().zip(grad.data()) {
            *p -= c.lr * g;
        }
        assert_eq!(z.values, plain); // bit-identical
    }

    #[test]
    fn latent_step_thresholds_sparsifiable_only() {
        let c = cfg(1.0, Regularizer::L1); // threshold 0.1
        let grad = Tensor::zeros(&[3]);
        let mut z = LatentVector {
            values: Tensor::from_vec(vec![0.05, -0.05, 0.5]),
            sparsifiable: true,
            owner: 0,
        };
        latent_step(&mut z, &grad, &c).unwrap();
        assert_eq!(z.values.data(), &[0.0, 0.0, 0.4]);
        let mut fixed = LatentVector {
            values: Tensor::from_vec(vec![0.05, -0.05, 0.5]),
            sparsifiable: false,
            owner: 1,
        };
        latent_step(&mut fixed, &grad, &c).unwrap();
        assert_eq!(fixed.values.data(), &[0.05, -0.05, 0.5]);
    }

    #[test]
    fn group_shrinkage_shares_support() {
        let mut a = Tensor::from_vec(vec![0.03, 3.0]);
        let mut b = Tensor::from_vec(vec![0.04, 4.0]);
        prox_group(&mut [&mut a, &mut b], 0.1).unwrap();
        // element 0 group norm 0.05 < 0.1: zeroed everywhere
        assert_eq!(a.data()[0], 0.0);
        assert_eq!(b.data()[0], 0.0);
        // element 1 group norm 5: shrunk by (1 - 0.1/5)
        assert!((a.data()[1] - 3.0 * 0.98).abs() < 1e-12);
        assert!((b.data()[1] - 4.0 * 0.98).abs() < 1e-12);
    }

    #[test]
    fn group_rejects_mismatched_dims() {
        let mut a = Tensor::from_vec(vec![1.0, 2.0]);
        let mut b = Tensor::from_vec(vec![1.0]);
        assert!(prox_group(&mut [&mut a, &mut b], 0.1).is_err());
    }
}
