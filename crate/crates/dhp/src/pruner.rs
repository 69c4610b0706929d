//! Mask derivation, FLOPs/parameter accounting, stopping rule, and
//! materialization of the pruned explicit network.
//!
//! During the search phase masks are advisory: forwards run with the full
//! generated weights and the account only reports what pruning *would*
//! remove. Materialization slices the surviving output/input channels out
//! of the generated weights and drops the hypernetworks entirely.

use crate::error::{DhpError, Result};
use crate::hypernet::HyperLayer;
use crate::sharegraph::SharingGraph;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// FLOPs and parameter totals for the full and masked network. One
/// multiply-accumulate counts as one FLOP; ratios are invariant under any
/// fixed per-MAC convention.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct CompressionAccount {
    pub full_flops: u64,
    pub masked_flops: u64,
    pub full_params: u64,
    pub masked_params: u64,
}

impl CompressionAccount {
    pub fn flops_ratio(&self) -> f64 {
        self.masked_flops as f64 / self.full_flops as f64
    }

    pub fn params_ratio(&self) -> f64 {
        self.masked_params as f64 / self.full_params as f64
    }
}

/// Stopping window half-width around the target FLOPs ratio.
pub const STOP_EPSILON: f64 = 0.02;

pub fn should_stop(account: &CompressionAccount, target: f64) -> bool {
    (account.flops_ratio() - target).abs() < STOP_EPSILON
}

/// Per-latent channel keep-masks: `|z_i| >= tau` keeps channel i.
/// Non-sparsifiable latents keep everything. Correlation groups (the
/// non-sharing ablation) are masked jointly by the per-element l2 norm
/// across the group, so every member keeps the same index set. Each mask
/// keeps at least its largest-magnitude element.
pub fn derive_masks(graph: &SharingGraph, values: &[Tensor], tau: f64) -> Result<Vec<Vec<bool>>> {
    if values.len() != graph.latents.len() {
        return Err(DhpError::shape(
            "derive_masks",
            format!("{} latents, {} value vectors", graph.latents.len(), values.len()),
        ));
    }
    if tau <= 0.0 {
        return Err(DhpError::arg("derive_masks", "tau must be positive"));
    }
    let mut masks: Vec<Option<Vec<bool>>> = vec![None; graph.latents.len()];
    for group in &graph.groups {
        let d = graph.latents[group[0].0].dim;
        let norms: Vec<f64> = (0..d)
            .map(|i| {
                group
                    .iter()
                    .map(|id| {
                        let v = values[id.0].data()[i];
                        v * v
                    })
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let mask = threshold_with_guard(&norms, tau);
        for id in group {
            masks[id.0] = Some(mask.clone());
        }
    }
    let out = masks
        .into_iter()
        .enumerate()
        .map(|(i, m)| {
            if let Some(m) = m {
                m
            } else if !graph.latents[i].sparsifiable {
                vec![true; graph.latents[i].dim]
            } else {
                let mags: Vec<f64> = values[i].data().iter().map(|v| v.abs()).collect();
                threshold_with_guard(&mags, tau)
            }
        })
        .collect();
    Ok(out)
}

fn threshold_with_guard(magnitudes: &[f64], tau: f64) -> Vec<bool> {
    let mut mask: Vec<bool> = magnitudes.iter().map(|&m| m >= tau).collect();
    if mask.iter().all(|&b| !b) {
        let argmax = magnitudes
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        mask[argmax] = true;
    }
    mask
}

fn popcount(mask: &[bool]) -> u64 {
    mask.iter().filter(|&&b| b).count() as u64
}

pub fn keep_indices(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter_map(|(i, &b)| b.then_some(i))
        .collect()
}

/// Count conv FLOPs and parameters for the full network and under the
/// given masks. Element-wise steps (adds, pooling, shuffle) are excluded;
/// they are identical across the comparison and cancel from ratios.
pub fn account(graph: &SharingGraph, masks: &[Vec<bool>]) -> Result<CompressionAccount> {
    let mut acc = CompressionAccount::default();
    for (layer, wiring) in graph.layers.iter().zip(&graph.wiring) {
        let out_mask = graph.ref_mask(&wiring.output, masks);
        let in_mask = graph.ref_mask(&wiring.input, masks);
        if out_mask.len() != layer.out_channels
            || in_mask.len() != layer.in_channels / layer.groups
        {
            return Err(DhpError::shape(
                "account",
                format!("layer {} mask lengths disagree with channel counts", layer.id),
            ));
        }
        let (kh, kw) = layer.kernel;
        let k = (kh * kw) as u64;
        let spatial = (layer.out_h * layer.out_w) as u64;
        let n = layer.out_channels as u64;
        let c = (layer.in_channels / layer.groups) as u64;
        let np = popcount(&out_mask);
        let cp = popcount(&in_mask);
        let bias = if layer.has_bias { 1 } else { 0 };
        let bn = if layer.has_bn { 2 } else { 0 };
        acc.full_params += n * c * k + n * (bias + bn);
        acc.masked_params += np * cp * k + np * (bias + bn);
        acc.full_flops += n * c * k * spatial;
        acc.masked_flops += np * cp * k * spatial;
    }
    Ok(acc)
}

/// Pruned backbone with explicit weights; hypernetworks are gone.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExplicitNetwork {
    pub graph: SharingGraph,
    /// Per-layer sliced weights, `[n', c'/g, kh, kw]`.
    pub weights: Vec<Tensor>,
    /// Per-layer sliced biases, `[n']`.
    pub biases: Vec<Tensor>,
    /// The masks the slicing used, indexed by latent id.
    pub masks: Vec<Vec<bool>>,
}

impl ExplicitNetwork {
    /// Group count after pruning: depthwise groups track the surviving
    /// channel count, everything else keeps its declared grouping.
    pub fn layer_groups(&self, layer: usize) -> usize {
        let spec = &self.graph.layers[layer];
        if spec.groups == spec.in_channels {
            self.weights[layer].shape()[0]
        } else {
            spec.groups
        }
    }
}

/// Generate every layer's weight from the (sparsified) latents, slice the
/// surviving channels, and return the standalone pruned network.
pub fn materialize(
    graph: &SharingGraph,
    hypers: &[HyperLayer],
    values: &[Tensor],
    biases: &[Tensor],
    masks: &[Vec<bool>],
) -> Result<ExplicitNetwork> {
    if hypers.len() != graph.layers.len() || biases.len() != graph.layers.len() {
        return Err(DhpError::shape(
            "materialize",
            "per-layer input lengths disagree with the graph".to_string(),
        ));
    }
    let mut weights = Vec::with_capacity(graph.layers.len());
    let mut sliced_biases = Vec::with_capacity(graph.layers.len());
    for ((layer, wiring), (hyper, bias)) in graph
        .layers
        .iter()
        .zip(&graph.wiring)
        .zip(hypers.iter().zip(biases))
    {
        let z_out = graph.ref_values(&wiring.output, values);
        let z_in = graph.ref_values(&wiring.input, values);
        let full = hyper.generate(&z_out, &z_in)?;
        let out_mask = graph.ref_mask(&wiring.output, masks);
        let in_mask = graph.ref_mask(&wiring.input, masks);
        let keep_out = keep_indices(&out_mask);
        let keep_in = keep_indices(&in_mask);
        weights.push(select_channels(&full, &keep_out, &keep_in));
        let b: Vec<f64> = keep_out.iter().map(|&i| bias.data()[i]).collect();
        if b.len() != keep_out.len() || bias.numel() != layer.out_channels {
            return Err(DhpError::shape(
                "materialize",
                format!("layer {} bias length {}", layer.id, bias.numel()),
            ));
        }
        sliced_biases.push(Tensor::from_vec(b));
    }
    Ok(ExplicitNetwork {
        graph: graph.clone(),
        weights,
        biases: sliced_biases,
        masks: masks.to_vec(),
    })
}

/// Same-shape weight with the pruned slices zeroed instead of removed;
/// the masked forward pass this supports must match the sliced network.
pub fn masked_weight(w: &Tensor, out_mask: &[bool], in_mask: &[bool]) -> Result<Tensor> {
    let shape = w.shape();
    if shape.len() != 4 || shape[0] != out_mask.len() || shape[1] != in_mask.len() {
        return Err(DhpError::shape(
            "masked_weight",
            format!("weight {shape:?} vs masks {}x{}", out_mask.len(), in_mask.len()),
        ));
    }
    let rest = shape[2] * shape[3];
    let mut out = w.clone();
    for (i, &keep_i) in out_mask.iter().enumerate() {
        for (j, &keep_j) in in_mask.iter().enumerate() {
            if keep_i && keep_j {
                continue;
            }
            let base = (i * in_mask.len() + j) * rest;
            out.data_mut()[base..base + rest].fill(0.0);
        }
    }
    Ok(out)
}

/// Select along the first two axes of a 4-D weight.
pub fn select_channels(t: &Tensor, keep_out: &[usize], keep_in: &[usize]) -> Tensor {
    let shape = t.shape();
    let c = shape[1];
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
    Tensor::new(new_shape, data).expect("selection shape consistent")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Family, NetDescription};
    use crate::sharegraph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chain_graph(widths: &[usize]) -> SharingGraph {
        let desc = NetDescription {
            family: Family::Chain,
            stage_widths: widths.to_vec(),
            blocks_per_stage: 2,
            kernel: 3,
            expansion: 6,
            growth: 8,
            upscale: 2,
            input_channels: 3,
            input_size: 16,
            num_classes: 10,
            output_channels: 3,
        };
        sharegraph::build(&desc, true).unwrap()
    }

    #[test]
    fn threshold_masks() {
        assert_eq!(
            threshold_with_guard(&[0.1, 0.004, 0.02], 5e-3),
            vec![true, false, true]
        );
        // guard keeps the largest element when everything is below tau
        assert_eq!(
            threshold_with_guard(&[0.001, 0.004, 0.002], 5e-3),
            vec![false, true, false]
        );
    }

    #[test]
    fn nonsparsifiable_masks_are_all_ones() {
        let g = chain_graph(&[4]);
        let values: Vec<Tensor> = g
            .latents
            .iter()
            .map(|l| Tensor::zeros(&[l.dim]))
            .collect();
        let masks = derive_masks(&g, &values, 5e-3).unwrap();
        assert_eq!(masks[0], vec![true; 3]); // input latent
        assert_eq!(masks.last().unwrap(), &vec![true; 10]); // head latent
    }

    #[test]
    fn hand_counted_layer_account() {
        // single 16 -> 32 conv, 3x3, on an 8x8 output map
        let mut g = chain_graph(&[32]);
        g.layers.truncate(1);
        g.wiring.truncate(1);
        g.layers[0].in_channels = 16;
        g.layers[0].out_h = 8;
        g.layers[0].out_w = 8;
        g.latents[0].dim = 16;
        let masks = vec![vec![true; 16], vec![true; 32], vec![true; 10]];
        let acc = account(&g, &masks).unwrap();
        assert_eq!(acc.full_flops, 294_912); // 32*16*9*64
        assert_eq!(acc.full_params, 4_640); // 32*16*9 + 32 bias
        assert_eq!(acc.masked_flops, acc.full_flops);

        let mut half = masks.clone();
        half[0] = (0..16).map(|i| i < 8).collect();
        half[1] = (0..32).map(|i| i < 16).collect();
        let acc = account(&g, &half).unwrap();
        assert_eq!(acc.masked_flops, 73_728); // 16*8*9*64
        assert!((acc.flops_ratio() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn stop_window() {
        let acc = CompressionAccount {
            full_flops: 10_000,
            masked_flops: 5_196,
            full_params: 1,
            masked_params: 1,
        };
        assert!(should_stop(&acc, 0.50));
        let acc = CompressionAccount {
            masked_flops: 5_250,
            ..acc
        };
        assert!(!should_stop(&acc, 0.50));
    }

    #[test]
    fn ratio_is_convention_invariant() {
        let acc = CompressionAccount {
            full_flops: 300,
            masked_flops: 120,
            full_params: 50,
            masked_params: 20,
        };
        let doubled = CompressionAccount {
            full_flops: 600,
            masked_flops: 240,
            ..acc
        };
        assert_eq!(acc.flops_ratio(), doubled.flops_ratio());
    }

    #[test]
    fn masking_is_monotone() {
        let g = chain_graph(&[8, 8]);
        let full: Vec<Vec<bool>> = g.latents.iter().map(|l| vec![true; l.dim]).collect();
        let mut prev = account(&g, &full).unwrap().flops_ratio();
        for kept in (1..8).rev() {
            let masks: Vec<Vec<bool>> = g
                .latents
                .iter()
                .enumerate()
                .map(|(i, l)| {
                    if g.latents[i].sparsifiable {
                        (0..l.dim).map(|j| j < kept).collect()
                    } else {
                        vec![true; l.dim]
                    }
                })
                .collect();
            let r = account(&g, &masks).unwrap().flops_ratio();
            assert!(r < prev, "kept {kept}: {r} !< {prev}");
            prev = r;
        }
    }

    #[test]
    fn sliced_weight_matches_selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let hyper = crate::hypernet::HyperLayer::init(6, 4, 3, 3, 8, &mut rng);
        let z_out = Tensor::randn(&[6], &mut rng);
        let z_in = Tensor::randn(&[4], &mut rng);
        let full = hyper.generate(&z_out, &z_in).unwrap();
        let keep_out = vec![0, 2, 5];
        let keep_in = vec![1, 3];
        let sliced = select_channels(&full, &keep_out, &keep_in);
        assert_eq!(sliced.shape(), &[3, 2, 3, 3]);
        for (a, &i) in keep_out.iter().enumerate() {
            for (b, &j) in keep_in.iter().enumerate() {
                for t in 0..9 {
                    assert_eq!(
                        sliced.data()[(a * 2 + b) * 9 + t],
                        full.data()[(i * 4 + j) * 9 + t]
                    );
                }
            }
        }
    }

    #[test]
    fn masked_weight_zeroes_dropped_slices() {
        let w = Tensor::full(&[2, 2, 1, 1], 3.0);
        let m = masked_weight(&w, &[true, false], &[true, true]).unwrap();
        assert_eq!(m.data(), &[3.0, 3.0, 0.0, 0.0]);
    }
}
