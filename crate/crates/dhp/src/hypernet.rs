//! Latent-driven hypernetwork generating one conv layer's weight tensor.
//!
//! Three stages: an outer product of the two latent vectors forms a latent
//! matrix, each entry is projected to an m-dimensional embedding, and a
//! per-entry explicit matrix maps the embedding to the kernel elements.
//! The output is covariant with the latents: zeroing latent element i
//! zeroes output slice i (with zero biases), and deleting it deletes the
//! slice. Hypernetwork parameters are never shared across layers, even
//! when latent vectors are.

use crate::autodiff::{Tape, VarId};
use crate::error::{DhpError, Result};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Per-layer trainable latent vector, the pruning handle.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LatentVector {
    /// Values, shape `[d]`.
    pub values: Tensor,
    /// Non-sparsifiable latents are never passed to the proximal operator.
    pub sparsifiable: bool,
    /// Index of the owning node in the sharing graph's latent registry.
    pub owner: usize,
}

impl LatentVector {
    pub fn dim(&self) -> usize {
        self.values.numel()
    }
}

/// Parameters generating one backbone layer's weight tensor.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HyperLayer {
    pub n: usize,
    pub c: usize,
    pub kh: usize,
    pub kw: usize,
    pub m: usize,
    /// `[n, c]`
    pub b0: Tensor,
    /// `[n, c, m]`
    pub w1: Tensor,
    /// `[n, c, m]`
    pub b1: Tensor,
    /// `[n, c, kh*kw, m]`
    pub w2: Tensor,
    /// `[n, c, kh*kw]`
    pub b2: Tensor,
}

/// Tape handles for one layer's registered parameters.
#[derive(Clone, Copy, Debug)]
pub struct HyperLayerVars {
    pub b0: VarId,
    pub w1: VarId,
    pub b1: VarId,
    pub w2: VarId,
    pub b2: VarId,
}

/// `Z = z_out . z_in^T + B0`, shape `[n, c]`.
pub fn latent_matrix(tape: &mut Tape, z_out: VarId, z_in: VarId, b0: VarId) -> Result<VarId> {
    let n = expect_vec(tape, z_out, "latent_matrix")?;
    let c = expect_vec(tape, z_in, "latent_matrix")?;
    if tape.value(b0).shape() != [n, c] {
        return Err(DhpError::shape(
            "latent_matrix",
            format!("B0 {:?} vs latents [{n}]x[{c}]", tape.value(b0).shape()),
        ));
    }
    let col = tape.reshape(z_out, vec![n, 1])?;
    let row = tape.reshape(z_in, vec![1, c])?;
    let outer = tape.matmul(col, row)?;
    tape.add(outer, b0)
}

/// `E = U3(Z) o W1 + B1`, shape `[n, c, m]`; U3 inserts a trailing size-1 axis.
pub fn embed(tape: &mut Tape, z: VarId, w1: VarId, b1: VarId) -> Result<VarId> {
    let sz = tape.value(z).shape().to_vec();
    if sz.len() != 2 {
        return Err(DhpError::shape("embed", format!("Z {sz:?}")));
    }
    let sw = tape.value(w1).shape();
    if sw.len() != 3 || sw[0] != sz[0] || sw[1] != sz[1] || tape.value(b1).shape() != sw {
        return Err(DhpError::shape(
            "embed",
            format!("Z {:?}, W1 {:?}, B1 {:?}", sz, sw, tape.value(b1).shape()),
        ));
    }
    let z3 = tape.reshape(z, vec![sz[0], sz[1], 1])?;
    let prod = tape.broadcast_mul(z3, w1)?;
    tape.add(prod, b1)
}

/// `O = W2 * E + B2` via batched matrix multiplication, shape `[n, c, wh]`.
pub fn explicit(tape: &mut Tape, e: VarId, w2: VarId, b2: VarId) -> Result<VarId> {
    let prod = tape.batched_matmul(w2, e)?;
    tape.add(prod, b2)
}

impl HyperLayer {
    /// Zero biases, Xavier-uniform W1 (per-embedding fan_in 1, fan_out m),
    /// and W2 scaled so generated weights land at He fan-in variance
    /// 2/(c*kh*kw) for standard-normal latents.
    pub fn init(n: usize, c: usize, kh: usize, kw: usize, m: usize, rng: &mut impl Rng) -> Self {
        let wh = kh * kw;
        let w1_bound = (6.0 / (1.0 + m as f64)).sqrt();
        // Var(E) = Var(z_i z_j) * Var(W1) = 2/(1+m); Var(W2) = 2/(c*wh*m*Var(E)).
        let var_w2 = (1.0 + m as f64) / (c as f64 * wh as f64 * m as f64);
        let w2_bound = (3.0 * var_w2).sqrt();
        HyperLayer {
            n,
            c,
            kh,
            kw,
            m,
            b0: Tensor::zeros(&[n, c]),
            w1: Tensor::rand_uniform(&[n, c, m], w1_bound, rng),
            b1: Tensor::zeros(&[n, c, m]),
            w2: Tensor::rand_uniform(&[n, c, wh, m], w2_bound, rng),
            b2: Tensor::zeros(&[n, c, wh]),
        }
    }

    pub fn params(&self) -> [&Tensor; 5] {
        [&self.b0, &self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 5] {
        [
            &mut self.b0,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    pub fn register(&self, tape: &mut Tape) -> Result<HyperLayerVars> {
        Ok(HyperLayerVars {
            b0: tape.leaf(self.b0.clone())?,
            w1: tape.leaf(self.w1.clone())?,
            b1: tape.leaf(self.b1.clone())?,
            w2: tape.leaf(self.w2.clone())?,
            b2: tape.leaf(self.b2.clone())?,
        })
    }

    /// Full composition: latents in, 4-D conv weight `[n, c, kh, kw]` out.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &HyperLayerVars,
        z_out: VarId,
        z_in: VarId,
    ) -> Result<VarId> {
        let dn = expect_vec(tape, z_out, "hypernet forward")?;
        let dc = expect_vec(tape, z_in, "hypernet forward")?;
        if dn != self.n || dc != self.c {
            return Err(DhpError::shape(
                "hypernet forward",
                format!("latents [{dn}]/[{dc}] vs declared {}x{}", self.n, self.c),
            ));
        }
        let z = latent_matrix(tape, z_out, z_in, vars.b0)?;
        let e = embed(tape, z, vars.w1, vars.b1)?;
        let o = explicit(tape, e, vars.w2, vars.b2)?;
        tape.reshape(o, vec![self.n, self.c, self.kh, self.kw])
    }

    /// Convenience forward on a private tape, for materialization and tests.
    pub fn generate(&self, z_out: &Tensor, z_in: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let zo = tape.leaf(z_out.clone())?;
        let zi = tape.leaf(z_in.clone())?;
        let vars = self.register(&mut tape)?;
        let o = self.forward(&mut tape, &vars, zo, zi)?;
        Ok(tape.value(o).clone())
    }

    /// Physically smaller layer keeping only the listed output/input slices.
    pub fn sliced(&self, keep_out: &[usize], keep_in: &[usize]) -> Result<HyperLayer> {
        if keep_out.iter().any(|&i| i >= self.n) || keep_in.iter().any(|&j| j >= self.c) {
            return Err(DhpError::arg("hyperlayer slice", "index out of range"));
        }
        Ok(HyperLayer {
            n: keep_out.len(),
            c: keep_in.len(),
            kh: self.kh,
            kw: self.kw,
            m: self.m,
            b0: select2(&self.b0, keep_out, keep_in),
            w1: select2(&self.w1, keep_out, keep_in),
            b1: select2(&self.b1, keep_out, keep_in),
            w2: select2(&self.w2, keep_out, keep_in),
            b2: select2(&self.b2, keep_out, keep_in),
        })
    }
}

/// Select along the first two axes of a `[n, c, rest..]` tensor.
fn select2(t: &Tensor, keep_out: &[usize], keep_in: &[usize]) -> Tensor {
    let shape = t.shape();
    let (n, c) = (shape[0], shape[1]);
    let rest: usize = shape[2..].iter().product();
    let mut data = Vec::with_capacity(keep_out.len() * keep_in.len() * rest);
    for &i in keep_out {
        for &j in keep_in {
            let base = (i * c + j) * rest;
            data.extend_from_slice(&t.data()[base..base + rest]);
        }
    }
    let mut new_shape = vec![keep_out.len(), keep_in.len()];
    new_shape.extend_from_slice(&shape[2..]);
    debug_assert_eq!(n * c * rest, t.numel());
    Tensor::new(new_shape, data).expect("slice shape consistent")
}

fn expect_vec(tape: &Tape, v: VarId, op: &'static str) -> Result<usize> {
    let s = tape.value(v).shape();
    if s.len() != 1 {
        return Err(DhpError::shape(op, format!("expected 1-D latent, got {s:?}")));
    }
    Ok(s[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(seed: u64) -> HyperLayer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        HyperLayer::init(5, 4, 3, 3, 8, &mut rng)
    }

    #[test]
    fn init_biases_are_zero_and_weights_bounded() {
        let l = layer(1);
        assert!(l.b0.data().iter().all(|&v| v == 0.0));
        assert!(l.b1.data().iter().all(|&v| v == 0.0));
        assert!(l.b2.data().iter().all(|&v| v == 0.0));
        let w1_bound = (6.0 / 9.0f64).sqrt();
        assert!(l.w1.data().iter().all(|&v| v.abs() <= w1_bound));
        let var_w2: f64 = 9.0 / (4.0 * 9.0 * 8.0);
        let w2_bound = (3.0 * var_w2).sqrt();
        assert!(l.w2.data().iter().all(|&v| v.abs() <= w2_bound));
    }

    #[test]
    fn generate_shape_and_determinism() {
        let l = layer(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let zo = Tensor::randn(&[5], &mut rng);
        let zi = Tensor::randn(&[4], &mut rng);
        let a = l.generate(&zo, &zi).unwrap();
        let b = l.generate(&zo, &zi).unwrap();
        assert_eq!(a.shape(), &[5, 4, 3, 3]);
        assert_eq!(a, b);
    }

    #[test]
    fn zeroed_latent_element_zeroes_output_slice() {
        let l = layer(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut zo = Tensor::randn(&[5], &mut rng);
        let mut zi = Tensor::randn(&[4], &mut rng);
        zo.data_mut()[2] = 0.0;
        zi.data_mut()[1] = 0.0;
        let w = l.generate(&zo, &zi).unwrap();
        for j in 0..4 {
            for t in 0..9 {
                assert_eq!(w.data()[(2 * 4 + j) * 9 + t], 0.0, "output slice 2");
            }
        }
        for i in 0..5 {
            for t in 0..9 {
                assert_eq!(w.data()[(i * 4 + 1) * 9 + t], 0.0, "input slice 1");
            }
        }
    }

    #[test]
    fn sliced_layer_generates_sliced_weight() {
        let l = layer(6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let zo = Tensor::randn(&[5], &mut rng);
        let zi = Tensor::randn(&[4], &mut rng);
        let full = l.generate(&zo, &zi).unwrap();
        let keep_out = [0usize, 3, 4];
        let keep_in = [1usize, 2];
        let small = l.sliced(&keep_out, &keep_in).unwrap();
        let zo_s = Tensor::from_vec(keep_out.iter().map(|&i| zo.data()[i]).collect());
        let zi_s = Tensor::from_vec(keep_in.iter().map(|&j| zi.data()[j]).collect());
        let sliced = small.generate(&zo_s, &zi_s).unwrap();
        for (a, &i) in keep_out.iter().enumerate() {
            for (b, &j) in keep_in.iter().enumerate() {
                for t in 0..9 {
                    let lhs = sliced.data()[(a * 2 + b) * 9 + t];
                    let rhs = full.data()[(i * 4 + j) * 9 + t];
                    assert!((lhs - rhs).abs() <= 1e-15);
                }
            }
        }
    }

    #[test]
    fn tape_forward_matches_generate() {
        let l = layer(8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let zo = Tensor::randn(&[5], &mut rng);
        let zi = Tensor::randn(&[4], &mut rng);
        let direct = l.generate(&zo, &zi).unwrap();
        let mut tape = Tape::new();
        let vo = tape.leaf(zo).unwrap();
        let vi = tape.leaf(zi).unwrap();
        let vars = l.register(&mut tape).unwrap();
        let out = l.forward(&mut tape, &vars, vo, vi).unwrap();
        assert_eq!(tape.value(out), &direct);
    }

    #[test]
    fn generated_variance_is_calibrated() {
        // sampling oracle: empirical Var(O) within a factor 2 of the He
        // fan-in target 2/(c*kh*kw) for standard-normal latents
        let (n, c, k, m) = (16, 16, 3, 8);
        let target = 2.0 / (c as f64 * (k * k) as f64);
        let mut ratio_sum = 0.0;
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let l = HyperLayer::init(n, c, k, k, m, &mut rng);
            let zo = Tensor::randn(&[n], &mut rng);
            let zi = Tensor::randn(&[c], &mut rng);
            let w = l.generate(&zo, &zi).unwrap();
            ratio_sum += w.variance() / target;
        }
        let mean_ratio = ratio_sum / 10.0;
        assert!(
            (0.5..2.0).contains(&mean_ratio),
            "variance ratio {mean_ratio}"
        );
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let l = layer(10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let zo = Tensor::randn(&[6], &mut rng);
        let zi = Tensor::randn(&[4], &mut rng);
        assert!(l.generate(&zo, &zi).is_err());
    }
}
