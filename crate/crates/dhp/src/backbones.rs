//! Backbone execution and synthetic tasks.
//!
//! One plan interpreter serves three weight sources: hypernetwork-generated
//! weights (search phase), mask-zeroed weights (equivalence checks), and
//! sliced explicit weights (after materialization). Channel counts flow
//! from the actual weight tensors, so the same plan executes full and
//! pruned networks alike.

use crate::autodiff::{Tape, VarId};
use crate::config::{NetDescription, TaskConfig, TaskKind};
use crate::error::{DhpError, Result};
use crate::hypernet::{HyperLayer, HyperLayerVars, LatentVector};
use crate::pruner::ExplicitNetwork;
use crate::sharegraph::{LatentRef, SharingGraph, Step};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Hypernetwork-parameterized backbone: the training-time representation.
#[derive(Clone, Debug)]
pub struct HyperBackbone {
    pub graph: SharingGraph,
    /// Per-layer hypernetworks (never shared, even when latents are).
    pub hypers: Vec<HyperLayer>,
    /// Per-latent-id vectors.
    pub latents: Vec<LatentVector>,
    /// Per-layer conv biases, trained directly.
    pub biases: Vec<Tensor>,
}

impl HyperBackbone {
    /// Deterministic init: latents first (graph order), then layer
    /// hypernetworks (layer order), all from one seeded stream.
    pub fn init(graph: SharingGraph, embedding_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let latents = graph
            .latents
            .iter()
            .enumerate()
            .map(|(i, info)| LatentVector {
                values: Tensor::randn(&[info.dim], &mut rng),
                sparsifiable: info.sparsifiable,
                owner: i,
            })
            .collect();
        let hypers = graph
            .layers
            .iter()
            .map(|l| {
                HyperLayer::init(
                    l.out_channels,
                    l.in_channels / l.groups,
                    l.kernel.0,
                    l.kernel.1,
                    embedding_dim,
                    &mut rng,
                )
            })
            .collect();
        let biases = graph
            .layers
            .iter()
            .map(|l| Tensor::zeros(&[l.out_channels]))
            .collect();
        HyperBackbone {
            graph,
            hypers,
            latents,
            biases,
        }
    }

    pub fn latent_values(&self) -> Vec<Tensor> {
        self.latents.iter().map(|l| l.values.clone()).collect()
    }
}

/// Tape handles from one hyper-backbone forward pass.
pub struct HyperForward {
    pub latent_vars: Vec<VarId>,
    pub hyper_vars: Vec<HyperLayerVars>,
    pub bias_vars: Vec<VarId>,
    pub weight_vars: Vec<VarId>,
    pub output: VarId,
}

/// Register everything, generate each layer's weight from its latent
/// references, and run the plan.
pub fn forward_hyper(backbone: &HyperBackbone, tape: &mut Tape, input: &Tensor) -> Result<HyperForward> {
    let graph = &backbone.graph;
    let latent_vars: Vec<VarId> = backbone
        .latents
        .iter()
        .map(|l| tape.leaf(l.values.clone()))
        .collect::<Result<_>>()?;
    let hyper_vars: Vec<HyperLayerVars> = backbone
        .hypers
        .iter()
        .map(|h| h.register(tape))
        .collect::<Result<_>>()?;
    let bias_vars: Vec<VarId> = backbone
        .biases
        .iter()
        .map(|b| tape.leaf(b.clone()))
        .collect::<Result<_>>()?;
    let mut weight_vars = Vec::with_capacity(graph.layers.len());
    for (i, wiring) in graph.wiring.iter().enumerate() {
        let z_out = resolve_ref(tape, &wiring.output, &latent_vars)?;
        let z_in = resolve_ref(tape, &wiring.input, &latent_vars)?;
        let w = backbone.hypers[i].forward(tape, &hyper_vars[i], z_out, z_in)?;
        weight_vars.push(w);
    }
    let groups: Vec<usize> = graph.layers.iter().map(|l| l.groups).collect();
    let output = execute_plan(tape, graph, &weight_vars, &bias_vars, &groups, input)?;
    Ok(HyperForward {
        latent_vars,
        hyper_vars,
        bias_vars,
        weight_vars,
        output,
    })
}

/// Turn a latent reference into a tape variable over the registered latents.
pub fn resolve_ref(tape: &mut Tape, r: &LatentRef, latent_vars: &[VarId]) -> Result<VarId> {
    match r {
        LatentRef::Single(id) => Ok(latent_vars[id.0]),
        LatentRef::Concat(ids) => {
            let parts: Vec<VarId> = ids.iter().map(|id| latent_vars[id.0]).collect();
            tape.concat(&parts, 0)
        }
        LatentRef::RepeatInterleave(id, k) => tape.repeat_interleave(latent_vars[id.0], *k),
    }
}

/// Tape handles from one explicit-network forward pass.
pub struct ExplicitForward {
    pub weight_vars: Vec<VarId>,
    pub bias_vars: Vec<VarId>,
    pub output: VarId,
}

pub fn forward_explicit(net: &ExplicitNetwork, tape: &mut Tape, input: &Tensor) -> Result<ExplicitForward> {
    let weight_vars: Vec<VarId> = net
        .weights
        .iter()
        .map(|w| tape.leaf(w.clone()))
        .collect::<Result<_>>()?;
    let bias_vars: Vec<VarId> = net
        .biases
        .iter()
        .map(|b| tape.leaf(b.clone()))
        .collect::<Result<_>>()?;
    let groups: Vec<usize> = (0..net.graph.layers.len())
        .map(|i| net.layer_groups(i))
        .collect();
    let output = execute_plan(tape, &net.graph, &weight_vars, &bias_vars, &groups, input)?;
    Ok(ExplicitForward {
        weight_vars,
        bias_vars,
        output,
    })
}

/// Run the graph's step plan with the given per-layer weights/biases.
/// Shapes come from the tensors themselves, so pruned and full networks
/// share this path.
pub fn execute_plan(
    tape: &mut Tape,
    graph: &SharingGraph,
    weights: &[VarId],
    biases: &[VarId],
    groups: &[usize],
    input: &Tensor,
) -> Result<VarId> {
    Ok(execute_plan_traced(tape, graph, weights, biases, groups, input)?.0)
}

/// Like `execute_plan`, but also returns each conv layer's pre-activation
/// variable (after bias, before relu) for scale calibration.
pub fn execute_plan_traced(
    tape: &mut Tape,
    graph: &SharingGraph,
    weights: &[VarId],
    biases: &[VarId],
    groups: &[usize],
    input: &Tensor,
) -> Result<(VarId, Vec<(usize, VarId)>)> {
    if input.shape().len() != 4 {
        return Err(DhpError::shape(
            "execute_plan",
            format!("input must be [N,C,H,W], got {:?}", input.shape()),
        ));
    }
    let mut slots: Vec<Option<VarId>> = vec![None; graph.num_slots];
    slots[0] = Some(tape.leaf(input.clone())?);
    let mut traces = Vec::with_capacity(graph.layers.len());
    let get = |slots: &[Option<VarId>], i: usize| -> Result<VarId> {
        slots[i].ok_or_else(|| DhpError::arg("execute_plan", format!("slot {i} used before written")))
    };
    for step in &graph.steps {
        match step {
            Step::Conv {
                layer,
                src,
                dst,
                relu,
            } => {
                let spec = &graph.layers[*layer];
                let x = get(&slots, *src)?;
                let mut y = tape.conv2d(x, weights[*layer], spec.stride, spec.padding, groups[*layer])?;
                y = tape.bias_add(y, biases[*layer])?;
                traces.push((*layer, y));
                if *relu {
                    y = tape.relu(y);
                }
                slots[*dst] = Some(y);
            }
            Step::Add { a, b, dst, relu } => {
                let x = get(&slots, *a)?;
                let y = get(&slots, *b)?;
                let mut z = tape.add(x, y)?;
                if *relu {
                    z = tape.relu(z);
                }
                slots[*dst] = Some(z);
            }
            Step::ConcatChannels { srcs, dst } => {
                let parts: Vec<VarId> = srcs
                    .iter()
                    .map(|&s| get(&slots, s))
                    .collect::<Result<_>>()?;
                slots[*dst] = Some(tape.concat(&parts, 1)?);
            }
            Step::PixelShuffle { src, dst, r } => {
                let x = get(&slots, *src)?;
                slots[*dst] = Some(tape.pixel_shuffle(x, *r)?);
            }
            Step::GlobalAvgPool { src, dst } => {
                let x = get(&slots, *src)?;
                slots[*dst] = Some(tape.global_avg_pool(x)?);
            }
            Step::FlattenLogits { src, dst } => {
                let x = get(&slots, *src)?;
                let s = tape.value(x).shape().to_vec();
                slots[*dst] = Some(tape.reshape(x, vec![s[0], s[1]])?);
            }
        }
    }
    Ok((get(&slots, graph.output_slot)?, traces))
}

/// Data-driven scale repair before fine-tuning. The proximal search
/// shrinks every latent, and without normalization layers that shrinkage
/// compounds multiplicatively with depth, leaving materialized weights too
/// small to train. Calibrate one conv layer at a time in execution order:
/// forward the calibration batch, scale that layer (weights and bias
/// together) so its pre-activation root-mean-square is one, then re-forward
/// before touching the next layer so every correction sees the upstream
/// corrections already applied. Scaling all layers at once from a single
/// forward pass oscillates on residual topologies instead of settling.
pub fn calibrate_gain(net: &mut ExplicitNetwork, input: &Tensor, rounds: usize) -> Result<()> {
    let groups: Vec<usize> = (0..net.graph.layers.len())
        .map(|i| net.layer_groups(i))
        .collect();
    let forward_rms = |net: &ExplicitNetwork| -> Result<Vec<(usize, f64)>> {
        let mut tape = Tape::new();
        let weight_vars: Vec<VarId> = net
            .weights
            .iter()
            .map(|w| tape.leaf(w.clone()))
            .collect::<Result<_>>()?;
        let bias_vars: Vec<VarId> = net
            .biases
            .iter()
            .map(|b| tape.leaf(b.clone()))
            .collect::<Result<_>>()?;
        let (_, traces) =
            execute_plan_traced(&mut tape, &net.graph, &weight_vars, &bias_vars, &groups, input)?;
        Ok(traces
            .into_iter()
            .map(|(layer, var)| {
                let t = tape.value(var);
                let rms =
                    (t.data().iter().map(|v| v * v).sum::<f64>() / t.numel() as f64).sqrt();
                (layer, rms)
            })
            .collect())
    };
    let num_traces = forward_rms(net)?.len();
    for _ in 0..rounds {
        for idx in 0..num_traces {
            let (layer, rms) = forward_rms(net)?[idx];
            if rms <= 1e-8 || !rms.is_finite() {
                continue;
            }
            let k = 1.0 / rms;
            for v in net.weights[layer].data_mut() {
                *v *= k;
            }
            for v in net.biases[layer].data_mut() {
                *v *= k;
            }
        }
    }
    Ok(())
}

/// He-initialized explicit network with full masks: the unpruned baseline.
pub fn baseline_network(graph: &SharingGraph, seed: u64) -> ExplicitNetwork {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::with_capacity(graph.layers.len());
    let mut biases = Vec::with_capacity(graph.layers.len());
    for l in &graph.layers {
        let c = l.in_channels / l.groups;
        let fan_in = (c * l.kernel.0 * l.kernel.1) as f64;
        let std = (2.0 / fan_in).sqrt();
        let w = Tensor::randn(&[l.out_channels, c, l.kernel.0, l.kernel.1], &mut rng)
            .map(|v| v * std);
        weights.push(w);
        biases.push(Tensor::zeros(&[l.out_channels]));
    }
    let masks = graph.latents.iter().map(|l| vec![true; l.dim]).collect();
    ExplicitNetwork {
        graph: graph.clone(),
        weights,
        biases,
        masks,
    }
}

/// One synthetic dataset split. Classification fills `labels`; regression
/// fills `targets`.
#[derive(Clone, Debug)]
pub struct Dataset {
    /// `[N, C, H, W]`
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub targets: Option<Tensor>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Contiguous mini-batch `[start, start+size)`.
    pub fn batch(&self, start: usize, size: usize) -> (Tensor, Vec<usize>, Option<Tensor>) {
        let s = self.inputs.shape();
        let row = s[1] * s[2] * s[3];
        let end = (start + size).min(self.len());
        let inputs = Tensor::new(
            vec![end - start, s[1], s[2], s[3]],
            self.inputs.data()[start * row..end * row].to_vec(),
        )
        .expect("batch slice consistent");
        let labels = if self.labels.is_empty() {
            Vec::new()
        } else {
            self.labels[start..end].to_vec()
        };
        let targets = self.targets.as_ref().map(|t| {
            let ts = t.shape();
            let trow = ts[1] * ts[2] * ts[3];
            Tensor::new(
                vec![end - start, ts[1], ts[2], ts[3]],
                t.data()[start * trow..end * trow].to_vec(),
            )
            .expect("target slice consistent")
        });
        (inputs, labels, targets)
    }
}

/// Generate train/validation splits for the configured task, fully
/// determined by the seed.
pub fn gen_task(task: &TaskConfig, desc: &NetDescription, seed: u64) -> Result<(Dataset, Dataset)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match task.kind {
        TaskKind::Clusters => {
            let (c, s, k) = (desc.input_channels, desc.input_size, desc.num_classes);
            // Class means drawn once; both splits share them. Each mean is a
            // spatial pattern plus a per-channel constant shift, so class
            // identity survives global average pooling.
            let means: Vec<Tensor> = (0..k)
                .map(|_| {
                    let pattern = Tensor::randn(&[c, s, s], &mut rng).map(|v| v * 0.5);
                    let shifts = Tensor::randn(&[c], &mut rng);
                    let mut m = pattern;
                    for ch in 0..c {
                        let shift = shifts.data()[ch];
                        for v in &mut m.data_mut()[ch * s * s..(ch + 1) * s * s] {
                            *v += shift;
                        }
                    }
                    m
                })
                .collect();
            let split = |n: usize, rng: &mut ChaCha8Rng| {
                let mut data = Vec::with_capacity(n * c * s * s);
                let mut labels = Vec::with_capacity(n);
                for i in 0..n {
                    let label = i % k;
                    let noise = Tensor::randn(&[c, s, s], rng);
                    for (m, e) in means[label].data().iter().zip(noise.data()) {
                        data.push(m + task.noise * e);
                    }
                    labels.push(label);
                }
                Dataset {
                    inputs: Tensor::new(vec![n, c, s, s], data).expect("split consistent"),
                    labels,
                    targets: None,
                }
            };
            let train = split(task.train_samples, &mut rng);
            let val = split(task.val_samples, &mut rng);
            Ok((train, val))
        }
        TaskKind::Filter => {
            if desc.output_channels != desc.input_channels {
                return Err(DhpError::InvalidConfig(
                    "filter task needs output_channels == input_channels".into(),
                ));
            }
            let (c, s, r) = (desc.input_channels, desc.input_size, desc.upscale);
            let split = |n: usize, rng: &mut ChaCha8Rng| {
                let inputs = Tensor::randn(&[n, c, s, s], rng);
                let targets = blur_upsampled(&inputs, r);
                Dataset {
                    inputs,
                    labels: Vec::new(),
                    targets: Some(targets),
                }
            };
            let train = split(task.train_samples, &mut rng);
            let val = split(task.val_samples, &mut rng);
            Ok((train, val))
        }
    }
}

/// Regression target: nearest-neighbor upsample by r, then a 3x3 box blur
/// with zero padding, per channel.
fn blur_upsampled(x: &Tensor, r: usize) -> Tensor {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (ho, wo) = (h * r, w * r);
    let mut up = vec![0.0; n * c * ho * wo];
    for img in 0..n * c {
        let ibase = img * h * w;
        let obase = img * ho * wo;
        for y in 0..ho {
            for xx in 0..wo {
                up[obase + y * wo + xx] = x.data()[ibase + (y / r) * w + xx / r];
            }
        }
    }
    let mut out = vec![0.0; n * c * ho * wo];
    for img in 0..n * c {
        let base = img * ho * wo;
        for y in 0..ho {
            for xx in 0..wo {
                let mut acc = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let yy = y as i64 + dy;
                        let xs = xx as i64 + dx;
                        if yy >= 0 && yy < ho as i64 && xs >= 0 && xs < wo as i64 {
                            acc += up[base + yy as usize * wo + xs as usize];
                        }
                    }
                }
                out[base + y * wo + xx] = acc / 9.0;
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], out).expect("blur shape consistent")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Family;
    use crate::pruner;
    use crate::sharegraph;

    fn desc(family: Family, widths: &[usize]) -> NetDescription {
        NetDescription {
            family,
            stage_widths: widths.to_vec(),
            blocks_per_stage: 2,
            kernel: 3,
            expansion: 2,
            growth: 4,
            upscale: 2,
            input_channels: 3,
            input_size: 8,
            num_classes: 5,
            output_channels: 3,
        }
    }

    fn forward_once(family: Family) -> Vec<usize> {
        let d = desc(family, &[6, 8]);
        let graph = sharegraph::build(&d, true).unwrap();
        let net = HyperBackbone::init(graph, 4, 3);
        let mut tape = Tape::new();
        let input = Tensor::randn(&[2, 3, 8, 8], &mut ChaCha8Rng::seed_from_u64(1));
        let fwd = forward_hyper(&net, &mut tape, &input).unwrap();
        tape.value(fwd.output).shape().to_vec()
    }

    #[test]
    fn forward_shapes_per_family() {
        assert_eq!(forward_once(Family::Chain), vec![2, 5]);
        assert_eq!(forward_once(Family::Resnet), vec![2, 5]);
        assert_eq!(forward_once(Family::Dense), vec![2, 5]);
        assert_eq!(forward_once(Family::InvertedResidual), vec![2, 5]);
        assert_eq!(forward_once(Family::UpsamplerChain), vec![2, 3, 16, 16]);
    }

    #[test]
    fn loss_reaches_latents() {
        let d = desc(Family::Chain, &[6]);
        let graph = sharegraph::build(&d, true).unwrap();
        let net = HyperBackbone::init(graph, 4, 3);
        let mut tape = Tape::new();
        let input = Tensor::randn(&[4, 3, 8, 8], &mut ChaCha8Rng::seed_from_u64(2));
        let fwd = forward_hyper(&net, &mut tape, &input).unwrap();
        let loss = tape
            .softmax_cross_entropy(fwd.output, &[0, 1, 2, 3])
            .unwrap();
        tape.backward(loss).unwrap();
        for (i, &v) in fwd.latent_vars.iter().enumerate() {
            let g = tape.grad(v).expect("latent should receive gradient");
            assert!(
                g.data().iter().any(|&x| x != 0.0),
                "latent {i} gradient all zero"
            );
        }
    }

    #[test]
    fn materialized_full_network_matches_hyper_forward() {
        for family in [
            Family::Chain,
            Family::Resnet,
            Family::Dense,
            Family::InvertedResidual,
            Family::UpsamplerChain,
        ] {
            let d = desc(family, &[6, 8]);
            let graph = sharegraph::build(&d, true).unwrap();
            let net = HyperBackbone::init(graph.clone(), 4, 9);
            let masks: Vec<Vec<bool>> =
                graph.latents.iter().map(|l| vec![true; l.dim]).collect();
            let explicit = pruner::materialize(
                &graph,
                &net.hypers,
                &net.latent_values(),
                &net.biases,
                &masks,
            )
            .unwrap();
            let input = Tensor::randn(&[2, 3, 8, 8], &mut ChaCha8Rng::seed_from_u64(4));
            let mut t1 = Tape::new();
            let a = forward_hyper(&net, &mut t1, &input).unwrap();
            let mut t2 = Tape::new();
            let b = forward_explicit(&explicit, &mut t2, &input).unwrap();
            let diff = t1.value(a.output).max_abs_diff(t2.value(b.output));
            assert!(diff <= 1e-10, "{family:?}: diff {diff}");
        }
    }

    #[test]
    fn cluster_task_is_deterministic_and_balanced() {
        let d = desc(Family::Chain, &[6]);
        let task = TaskConfig {
            kind: TaskKind::Clusters,
            train_samples: 20,
            val_samples: 10,
            noise: 0.5,
        };
        let (tr1, _) = gen_task(&task, &d, 42).unwrap();
        let (tr2, _) = gen_task(&task, &d, 42).unwrap();
        assert_eq!(tr1.inputs, tr2.inputs);
        let mut counts = vec![0usize; 5];
        for &l in &tr1.labels {
            counts[l] += 1;
        }
        assert!(counts.iter().all(|&c| c == 4));
    }

    #[test]
    fn filter_target_is_blur_of_upsample() {
        // constant image: interior blur output equals the constant
        let x = Tensor::full(&[1, 1, 4, 4], 2.0);
        let t = blur_upsampled(&x, 2);
        assert_eq!(t.shape(), &[1, 1, 8, 8]);
        let interior = t.data()[3 * 8 + 3];
        assert!((interior - 2.0).abs() < 1e-12);
        // corner sees 4 of 9 taps
        assert!((t.data()[0] - 2.0 * 4.0 / 9.0).abs() < 1e-12);
    }
}
