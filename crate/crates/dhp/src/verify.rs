//! Self-contained verification suites behind the `verify` CLI command.
//!
//! Each suite checks one contract against an independent oracle: proximal
//! operators against brute-force grid minimization, gradients against
//! central finite differences, pruning against mask-zeroed forwards,
//! sharing graphs against index-propagation oracles, and FLOPs accounting
//! against hand counts.

use crate::autodiff::{Tape, VarId};
use crate::backbones::{forward_explicit, forward_hyper, HyperBackbone};
use crate::config::{Family, NetDescription};
use crate::error::{DhpError, Result};
use crate::hypernet::HyperLayer;
use crate::proxopt::{prox_l1, prox_l2};
use crate::pruner;
use crate::sharegraph::{self, LatentRef};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

pub fn run_all() -> Vec<SuiteResult> {
    let suites: [(&'static str, fn() -> Result<String>); 5] = [
        ("prox", suite_prox),
        ("gradcheck", suite_gradcheck),
        ("equivalence", suite_equivalence),
        ("sharing", suite_sharing),
        ("accounting", suite_accounting),
    ];
    suites
        .iter()
        .map(|(name, f)| match f() {
            Ok(detail) => SuiteResult {
                name,
                passed: true,
                detail,
            },
            Err(e) => SuiteResult {
                name,
                passed: false,
                detail: e.to_string(),
            },
        })
        .collect()
}

fn fail(suite: &str, detail: String) -> DhpError {
    DhpError::VerifyFailed {
        suite: suite.to_string(),
        detail,
    }
}

// ---------------------------------------------------------------- prox --

/// Scalar oracle: minimize `0.5 (x-v)^2 + t |x|` by staged grid
/// refinement, coarse-to-fine down to ~1e-8 resolution.
fn oracle_scalar_l1(v: f64, t: f64) -> f64 {
    let mut center = v;
    let mut span = v.abs() + t + 1.0;
    let mut best = center;
    for _ in 0..4 {
        let n = 2000usize;
        let mut best_val = f64::INFINITY;
        for i in 0..=n {
            let x = center - span + 2.0 * span * i as f64 / n as f64;
            let val = 0.5 * (x - v) * (x - v) + t * x.abs();
            if val < best_val {
                best_val = val;
                best = x;
            }
        }
        center = best;
        span = 4.0 * span / n as f64;
    }
    best
}

/// Vector oracle for the l2 prox: the minimizer is colinear with v, so
/// minimize over the scale factor by the same staged grid.
fn oracle_scale_l2(norm: f64, t: f64) -> f64 {
    let mut center = 0.5;
    let mut span = 1.5;
    let mut best = center;
    for _ in 0..4 {
        let n = 2000usize;
        let mut best_val = f64::INFINITY;
        for i in 0..=n {
            let a = center - span + 2.0 * span * i as f64 / n as f64;
            let val = 0.5 * (a - 1.0) * (a - 1.0) * norm * norm + t * a.abs() * norm;
            if val < best_val {
                best_val = val;
                best = a;
            }
        }
        center = best;
        span = 4.0 * span / n as f64;
    }
    best
}

pub fn suite_prox() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut cases = 0;
    for _ in 0..50 {
        let v = rng.gen_range(-2.0..2.0);
        let t = rng.gen_range(0.0..1.0);
        let got = prox_l1(&Tensor::from_vec(vec![v]), t)?.item();
        let want = oracle_scalar_l1(v, t);
        if (got - want).abs() > 1e-6 {
            return Err(fail(
                "prox",
                format!("l1 case v={v} t={t}: got {got}, oracle {want}"),
            ));
        }
        cases += 1;
    }
    for _ in 0..50 {
        let d = rng.gen_range(1..=6);
        let v = Tensor::randn(&[d], &mut rng);
        let t = rng.gen_range(0.0..1.5);
        let got = prox_l2(&v, t)?;
        let norm = v.l2_norm();
        let scale = if norm == 0.0 { 0.0 } else { oracle_scale_l2(norm, t) };
        for (g, &x) in got.data().iter().zip(v.data()) {
            if (g - scale * x).abs() > 1e-6 {
                return Err(fail(
                    "prox",
                    format!("l2 case dim {d} t={t}: got {g}, oracle {}", scale * x),
                ));
            }
        }
        cases += 1;
    }
    Ok(format!("{cases} cases within 1e-6 of grid oracle"))
}

// ----------------------------------------------------------- gradcheck --

const FD_H: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom < 1e-8 {
        0.0
    } else {
        (a - b).abs() / denom
    }
}

/// Compare reverse-mode gradients of a scalar-valued builder against
/// central finite differences on every input element.
fn fd_check(
    suite: &str,
    label: &str,
    build: &dyn Fn(&mut Tape, &[VarId]) -> Result<VarId>,
    inputs: &[Tensor],
) -> Result<usize> {
    let mut tape = Tape::new();
    let ids: Vec<VarId> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone()))
        .collect::<Result<_>>()?;
    let out = build(&mut tape, &ids)?;
    tape.backward(out)?;
    let eval = |ts: &[Tensor]| -> Result<f64> {
        let mut tp = Tape::new();
        let ids: Vec<VarId> = ts.iter().map(|t| tp.leaf(t.clone())).collect::<Result<_>>()?;
        let o = build(&mut tp, &ids)?;
        Ok(tp.value(o).item())
    };
    let mut checked = 0;
    for (k, t) in inputs.iter().enumerate() {
        let g = tape
            .grad(ids[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(t.shape()));
        for i in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_H;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_H);
            let a = g.data()[i];
            if rel_err(a, fd) > FD_TOL {
                return Err(fail(
                    suite,
                    format!("{label}: input {k} element {i}: analytic {a}, fd {fd}"),
                ));
            }
            checked += 1;
        }
    }
    Ok(checked)
}

fn op_checks(seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut n = 0;
    let r = |rng: &mut ChaCha8Rng, s: &[usize]| Tensor::randn(s, rng);
    n += fd_check(
        "gradcheck",
        "matmul",
        &|t, v| {
            let p = t.matmul(v[0], v[1])?;
            Ok(t.sum(p))
        },
        &[r(&mut rng, &[2, 3]), r(&mut rng, &[3, 2])],
    )?;
    n += fd_check(
        "gradcheck",
        "conv2d",
        &|t, v| {
            let c = t.conv2d(v[0], v[1], 2, 1, 1)?;
            let a = t.relu(c);
            Ok(t.sum(a))
        },
        &[r(&mut rng, &[1, 2, 5, 5]), r(&mut rng, &[3, 2, 3, 3])],
    )?;
    n += fd_check(
        "gradcheck",
        "depthwise conv",
        &|t, v| {
            let c = t.conv2d(v[0], v[1], 1, 1, 3)?;
            Ok(t.sum(c))
        },
        &[r(&mut rng, &[1, 3, 4, 4]), r(&mut rng, &[3, 1, 3, 3])],
    )?;
    n += fd_check(
        "gradcheck",
        "broadcast_mul",
        &|t, v| {
            let p = t.broadcast_mul(v[0], v[1])?;
            Ok(t.sum(p))
        },
        &[r(&mut rng, &[2, 3, 1]), r(&mut rng, &[2, 3, 4])],
    )?;
    n += fd_check(
        "gradcheck",
        "batched_matmul",
        &|t, v| {
            let p = t.batched_matmul(v[0], v[1])?;
            Ok(t.sum(p))
        },
        &[r(&mut rng, &[2, 2, 3, 4]), r(&mut rng, &[2, 2, 4])],
    )?;
    n += fd_check(
        "gradcheck",
        "structural ops",
        &|t, v| {
            let c = t.concat(&[v[0], v[1]], 0)?;
            let ri = t.repeat_interleave(c, 2)?;
            Ok(t.mean(ri))
        },
        &[r(&mut rng, &[2]), r(&mut rng, &[3])],
    )?;
    n += fd_check(
        "gradcheck",
        "shuffle+pool+bias",
        &|t, v| {
            let b = t.bias_add(v[0], v[1])?;
            let p = t.pixel_shuffle(b, 2)?;
            let g = t.global_avg_pool(p)?;
            Ok(t.sum(g))
        },
        &[r(&mut rng, &[1, 4, 2, 2]), r(&mut rng, &[4])],
    )?;
    n += fd_check(
        "gradcheck",
        "cross entropy",
        &|t, v| t.softmax_cross_entropy(v[0], &[1, 0]),
        &[r(&mut rng, &[2, 3])],
    )?;
    n += fd_check(
        "gradcheck",
        "mse",
        &|t, v| t.mse(v[0], v[1]),
        &[r(&mut rng, &[2, 1, 2, 2]), r(&mut rng, &[2, 1, 2, 2])],
    )?;
    Ok(n)
}

/// End-to-end: loss gradient w.r.t. every latent entry of a small
/// hypernetwork-generated chain, against finite differences.
fn end_to_end_check(seed: u64) -> Result<usize> {
    let desc = NetDescription {
        family: Family::Chain,
        stage_widths: vec![4],
        blocks_per_stage: 1,
        kernel: 3,
        expansion: 2,
        growth: 2,
        upscale: 2,
        input_channels: 2,
        input_size: 5,
        num_classes: 3,
        output_channels: 2,
    };
    let graph = sharegraph::build(&desc, true)?;
    let mut net = HyperBackbone::init(graph, 3, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let input = Tensor::randn(&[2, 2, 5, 5], &mut rng);
    let labels = [0usize, 2];

    let loss_of = |net: &HyperBackbone| -> Result<f64> {
        let mut tape = Tape::new();
        let fwd = forward_hyper(net, &mut tape, &input)?;
        let l = tape.softmax_cross_entropy(fwd.output, &labels)?;
        Ok(tape.value(l).item())
    };

    let mut tape = Tape::new();
    let fwd = forward_hyper(&net, &mut tape, &input)?;
    let loss = tape.softmax_cross_entropy(fwd.output, &labels)?;
    tape.backward(loss)?;
    let grads: Vec<Tensor> = fwd
        .latent_vars
        .iter()
        .map(|&v| tape.grad(v).cloned().expect("latent gradient"))
        .collect();

    let mut checked = 0;
    for li in 0..net.latents.len() {
        for i in 0..net.latents[li].values.numel() {
            let orig = net.latents[li].values.data()[i];
            net.latents[li].values.data_mut()[i] = orig + FD_H;
            let plus = loss_of(&net)?;
            net.latents[li].values.data_mut()[i] = orig - FD_H;
            let minus = loss_of(&net)?;
            net.latents[li].values.data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * FD_H);
            let a = grads[li].data()[i];
            if rel_err(a, fd) > FD_TOL {
                return Err(fail(
                    "gradcheck",
                    format!("latent {li} element {i}: analytic {a}, fd {fd} (seed {seed})"),
                ));
            }
            checked += 1;
        }
    }
    Ok(checked)
}

pub fn suite_gradcheck() -> Result<String> {
    let mut total = 0;
    for seed in 0..20u64 {
        total += op_checks(seed)?;
        total += end_to_end_check(seed)?;
    }
    Ok(format!("{total} gradient entries within {FD_TOL} over 20 seeds"))
}

// --------------------------------------------------------- equivalence --

fn random_mask(rng: &mut ChaCha8Rng, d: usize) -> Vec<bool> {
    loop {
        let m: Vec<bool> = (0..d).map(|_| rng.gen_bool(0.6)).collect();
        if m.iter().any(|&b| b) {
            return m;
        }
    }
}

/// Masked forward (zeroed slices, full shapes) versus sliced forward
/// (slices removed) for one generated conv layer.
fn layer_equivalence_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let n = rng.gen_range(3..8);
    let c = rng.gen_range(2..6);
    let k = if rng.gen_bool(0.5) { 3 } else { 1 };
    let stride = rng.gen_range(1..3);
    let hyper = HyperLayer::init(n, c, k, k, 4, rng);
    let z_out = Tensor::randn(&[n], rng);
    let z_in = Tensor::randn(&[c], rng);
    let bias = Tensor::randn(&[n], rng);
    let out_mask = random_mask(rng, n);
    let in_mask = random_mask(rng, c);
    let x = Tensor::randn(&[2, c, 6, 6], rng);

    let full = hyper.generate(&z_out, &z_in)?;
    let masked_w = pruner::masked_weight(&full, &out_mask, &in_mask)?;
    let masked_b = Tensor::from_vec(
        bias.data()
            .iter()
            .zip(&out_mask)
            .map(|(&b, &keep)| if keep { b } else { 0.0 })
            .collect(),
    );
    let mut t1 = Tape::new();
    let xv = t1.leaf(x.clone())?;
    let wv = t1.leaf(masked_w)?;
    let bv = t1.leaf(masked_b)?;
    let y = t1.conv2d(xv, wv, stride, k / 2, 1)?;
    let y = t1.bias_add(y, bv)?;
    let masked_out = t1.value(y).clone();

    let keep_out = pruner::keep_indices(&out_mask);
    let keep_in = pruner::keep_indices(&in_mask);
    let sliced_w = pruner::select_channels(&full, &keep_out, &keep_in);
    let sliced_b = Tensor::from_vec(keep_in_values(&bias, &keep_out));
    let sliced_x = select_input_channels(&x, &keep_in);
    let mut t2 = Tape::new();
    let xv = t2.leaf(sliced_x)?;
    let wv = t2.leaf(sliced_w)?;
    let bv = t2.leaf(sliced_b)?;
    let y = t2.conv2d(xv, wv, stride, k / 2, 1)?;
    let y = t2.bias_add(y, bv)?;
    let sliced_out = t2.value(y).clone();

    // kept channels of the masked output must match the sliced output
    let ms = masked_out.shape();
    let (hb, wb) = (ms[2], ms[3]);
    let mut max_diff: f64 = 0.0;
    for b in 0..ms[0] {
        for (oi, &ch) in keep_out.iter().enumerate() {
            for p in 0..hb * wb {
                let a = masked_out.data()[(b * n + ch) * hb * wb + p];
                let s = sliced_out.data()[(b * keep_out.len() + oi) * hb * wb + p];
                max_diff = max_diff.max((a - s).abs());
            }
        }
        // dropped channels must be exactly zero
        for (ch, &keep) in out_mask.iter().enumerate() {
            if keep {
                continue;
            }
            for p in 0..hb * wb {
                max_diff = max_diff.max(masked_out.data()[(b * n + ch) * hb * wb + p].abs());
            }
        }
    }
    Ok(max_diff)
}

fn keep_in_values(v: &Tensor, keep: &[usize]) -> Vec<f64> {
    keep.iter().map(|&i| v.data()[i]).collect()
}

fn select_input_channels(x: &Tensor, keep: &[usize]) -> Tensor {
    let s = x.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let mut data = Vec::with_capacity(n * keep.len() * hw);
    for b in 0..n {
        for &ch in keep {
            let base = (b * c + ch) * hw;
            data.extend_from_slice(&x.data()[base..base + hw]);
        }
    }
    Tensor::new(vec![n, keep.len(), s[2], s[3]], data).expect("channel selection consistent")
}

/// Whole-network check: mask-zeroed hyper forward equals the materialized
/// sliced network's forward, for every family.
fn network_equivalence(family: Family) -> Result<f64> {
    let desc = NetDescription {
        family,
        stage_widths: vec![6, 8],
        blocks_per_stage: 2,
        kernel: 3,
        expansion: 2,
        growth: 4,
        upscale: 2,
        input_channels: 3,
        input_size: 8,
        num_classes: 4,
        output_channels: 3,
    };
    let graph = sharegraph::build(&desc, true)?;
    let mut net = HyperBackbone::init(graph.clone(), 4, 77);
    // sparsify: push some latent entries under tau
    let mut rng = ChaCha8Rng::seed_from_u64(78);
    for z in net.latents.iter_mut() {
        if !z.sparsifiable {
            continue;
        }
        for v in z.values.data_mut() {
            if rng.gen_bool(0.4) {
                *v *= 1e-4;
            }
        }
    }
    let tau = 5e-3;
    let masks = pruner::derive_masks(&graph, &net.latent_values(), tau)?;

    // masked forward: zeroed weights and biases on the full plan
    let mut t1 = Tape::new();
    let values = net.latent_values();
    let mut weight_vars = Vec::new();
    let mut bias_vars = Vec::new();
    for (i, wiring) in graph.wiring.iter().enumerate() {
        let z_out = graph.ref_values(&wiring.output, &values);
        let z_in = graph.ref_values(&wiring.input, &values);
        let full = net.hypers[i].generate(&z_out, &z_in)?;
        let out_mask = graph.ref_mask(&wiring.output, &masks);
        let in_mask = graph.ref_mask(&wiring.input, &masks);
        let mw = pruner::masked_weight(&full, &out_mask, &in_mask)?;
        let mb = Tensor::from_vec(
            net.biases[i]
                .data()
                .iter()
                .zip(&out_mask)
                .map(|(&b, &keep)| if keep { b } else { 0.0 })
                .collect(),
        );
        weight_vars.push(t1.leaf(mw)?);
        bias_vars.push(t1.leaf(mb)?);
    }
    let input = Tensor::randn(&[2, 3, 8, 8], &mut rng);
    let groups: Vec<usize> = graph.layers.iter().map(|l| l.groups).collect();
    let masked_out = crate::backbones::execute_plan(&mut t1, &graph, &weight_vars, &bias_vars, &groups, &input)?;
    let masked_out = t1.value(masked_out).clone();

    let explicit = pruner::materialize(&graph, &net.hypers, &values, &net.biases, &masks)?;
    let mut t2 = Tape::new();
    let fwd = forward_explicit(&explicit, &mut t2, &input)?;
    let sliced_out = t2.value(fwd.output).clone();

    if masked_out.shape() != sliced_out.shape() {
        return Err(fail(
            "equivalence",
            format!(
                "{family:?}: output shapes diverge: {:?} vs {:?}",
                masked_out.shape(),
                sliced_out.shape()
            ),
        ));
    }
    Ok(masked_out.max_abs_diff(&sliced_out))
}

pub fn suite_equivalence() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut worst: f64 = 0.0;
    for case in 0..20 {
        let diff = layer_equivalence_case(&mut rng)?;
        if diff > 1e-12 {
            return Err(fail(
                "equivalence",
                format!("layer case {case}: masked vs sliced diff {diff}"),
            ));
        }
        worst = worst.max(diff);
    }
    // structural slicing is exact: identical arithmetic on kept entries
    let hyper = HyperLayer::init(6, 5, 3, 3, 4, &mut rng);
    let z_out = Tensor::randn(&[6], &mut rng);
    let z_in = Tensor::randn(&[5], &mut rng);
    let full = hyper.generate(&z_out, &z_in)?;
    let keep_out = [1usize, 3, 4];
    let keep_in = [0usize, 2, 4];
    let small = hyper.sliced(&keep_out, &keep_in)?;
    let zo = Tensor::from_vec(keep_in_values(&z_out, &keep_out));
    let zi = Tensor::from_vec(keep_in_values(&z_in, &keep_in));
    let sliced = small.generate(&zo, &zi)?;
    let selected = pruner::select_channels(&full, &keep_out, &keep_in);
    if sliced != selected {
        return Err(fail(
            "equivalence",
            "structurally sliced hypernetwork output differs bitwise from selection".to_string(),
        ));
    }
    for family in [
        Family::Chain,
        Family::Resnet,
        Family::Dense,
        Family::InvertedResidual,
        Family::UpsamplerChain,
    ] {
        let diff = network_equivalence(family)?;
        if diff > 1e-12 {
            return Err(fail(
                "equivalence",
                format!("{family:?}: network masked vs materialized diff {diff}"),
            ));
        }
        worst = worst.max(diff);
    }
    Ok(format!(
        "20 layer shapes + 5 families within 1e-12 (worst {worst:.3e}); structural slicing exact"
    ))
}

// ------------------------------------------------------------- sharing --

pub fn suite_sharing() -> Result<String> {
    let mut checks = 0;
    for family in [
        Family::Chain,
        Family::Resnet,
        Family::Dense,
        Family::InvertedResidual,
        Family::UpsamplerChain,
    ] {
        for sharing in [true, false] {
            let desc = NetDescription {
                family,
                stage_widths: vec![6, 8],
                blocks_per_stage: 2,
                kernel: 3,
                expansion: 2,
                growth: 4,
                upscale: 2,
                input_channels: 3,
                input_size: 16,
                num_classes: 5,
                output_channels: 3,
            };
            let g = sharegraph::build(&desc, sharing)?;
            g.validate()
                .map_err(|e| fail("sharing", format!("{family:?} sharing={sharing}: {e}")))?;
            // first layer's input latent and the output latent are fixed
            let first = g
                .layers
                .iter()
                .position(|l| l.first_layer)
                .ok_or_else(|| fail("sharing", format!("{family:?}: no first layer")))?;
            if let LatentRef::Single(id) = &g.wiring[first].input {
                if g.latents[id.0].sparsifiable {
                    return Err(fail(
                        "sharing",
                        format!("{family:?}: first input latent is sparsifiable"),
                    ));
                }
            } else {
                return Err(fail("sharing", format!("{family:?}: composite first input ref")));
            }
            let last = g.wiring.last().expect("non-empty");
            if g.latents_of(&last.output).iter().any(|id| g.latents[id.0].sparsifiable) {
                return Err(fail(
                    "sharing",
                    format!("{family:?}: final output latent is sparsifiable"),
                ));
            }
            // depthwise layers: 1-dim fixed input latent
            for (l, w) in g.layers.iter().zip(&g.wiring) {
                if l.groups == l.in_channels && l.groups > 1 {
                    match &w.input {
                        LatentRef::Single(id)
                            if g.latents[id.0].dim == 1 && !g.latents[id.0].sparsifiable => {}
                        other => {
                            return Err(fail(
                                "sharing",
                                format!("{family:?}: depthwise input ref {other:?}"),
                            ))
                        }
                    }
                }
            }
            checks += 1;
        }
    }

    // index-propagation oracles
    let desc = NetDescription {
        family: Family::Dense,
        stage_widths: vec![6],
        blocks_per_stage: 3,
        kernel: 3,
        expansion: 2,
        growth: 4,
        upscale: 2,
        input_channels: 3,
        input_size: 8,
        num_classes: 5,
        output_channels: 3,
    };
    let g = sharegraph::build(&desc, true)?;
    let head = g.wiring.last().unwrap();
    let mut masks: Vec<Vec<bool>> = g.latents.iter().map(|l| vec![true; l.dim]).collect();
    if let LatentRef::Concat(ids) = &head.input {
        // drop element 2 of the stage latent and element 1 of growth 2;
        // the concatenated mask must drop exactly offsets 2 and 6+4+1
        masks[ids[0].0][2] = false;
        masks[ids[2].0][1] = false;
        let m = g.ref_mask(&head.input, &masks);
        let dropped: Vec<usize> = m
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| (!b).then_some(i))
            .collect();
        if dropped != vec![2, 6 + 4 + 1] {
            return Err(fail(
                "sharing",
                format!("dense concat offsets wrong: dropped {dropped:?}"),
            ));
        }
    } else {
        return Err(fail("sharing", "dense head input is not a concat ref".into()));
    }

    // pixel shuffle commutes with channel slicing on repeat-interleaved masks
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let r = 2usize;
    let c = 3usize;
    let x = Tensor::randn(&[1, c * r * r, 4, 4], &mut rng);
    let latent_mask = [true, false, true];
    let channel_mask: Vec<bool> = latent_mask
        .iter()
        .flat_map(|&b| std::iter::repeat(b).take(r * r))
        .collect();
    let keep_ch = pruner::keep_indices(&channel_mask);
    let mut t1 = Tape::new();
    let xv = t1.leaf(select_input_channels(&x, &keep_ch))?;
    let a = t1.pixel_shuffle(xv, r)?;
    let shuffled_sliced = t1.value(a).clone();
    let mut t2 = Tape::new();
    let xv = t2.leaf(x)?;
    let b = t2.pixel_shuffle(xv, r)?;
    let keep_out = pruner::keep_indices(&latent_mask);
    let sliced_shuffled = select_input_channels(t2.value(b), &keep_out);
    if shuffled_sliced != sliced_shuffled {
        return Err(fail(
            "sharing",
            "pixel shuffle does not commute with interleaved channel slicing".into(),
        ));
    }

    Ok(format!(
        "{checks} graph variants validated; concat/interleave/shuffle index oracles hold"
    ))
}

// ---------------------------------------------------------- accounting --

pub fn suite_accounting() -> Result<String> {
    // chain [8, 16] on 3x16x16 input, 3x3 kernels, 1x1 head over 10 classes
    let desc = NetDescription {
        family: Family::Chain,
        stage_widths: vec![8, 16],
        blocks_per_stage: 2,
        kernel: 3,
        expansion: 2,
        growth: 4,
        upscale: 2,
        input_channels: 3,
        input_size: 16,
        num_classes: 10,
        output_channels: 3,
    };
    let g = sharegraph::build(&desc, true)?;
    let full: Vec<Vec<bool>> = g.latents.iter().map(|l| vec![true; l.dim]).collect();
    let acc = pruner::account(&g, &full)?;
    // hand counts: 8*3*9*256 + 16*8*9*256 + 10*16*1*1
    let want_flops = 8 * 3 * 9 * 256 + 16 * 8 * 9 * 256 + 10 * 16;
    // params: (8*27+8) + (16*72+16) + (10*16+10)
    let want_params = (8 * 27 + 8) + (16 * 72 + 16) + (10 * 16 + 10);
    if acc.full_flops != want_flops {
        return Err(fail(
            "accounting",
            format!("full flops {} != hand count {want_flops}", acc.full_flops),
        ));
    }
    if acc.full_params != want_params {
        return Err(fail(
            "accounting",
            format!("full params {} != hand count {want_params}", acc.full_params),
        ));
    }
    // halve both hidden latents: layer flops scale by kept_out*kept_in
    let mut half = full.clone();
    half[1] = (0..8).map(|i| i < 4).collect();
    half[2] = (0..16).map(|i| i < 8).collect();
    let acc_half = pruner::account(&g, &half)?;
    let want_masked = 4 * 3 * 9 * 256 + 8 * 4 * 9 * 256 + 10 * 8;
    if acc_half.masked_flops != want_masked {
        return Err(fail(
            "accounting",
            format!("masked flops {} != hand count {want_masked}", acc_half.masked_flops),
        ));
    }
    // convention invariance: a fixed FLOPs-per-MAC factor cancels
    let r1 = acc_half.flops_ratio();
    let r2 = (2 * acc_half.masked_flops) as f64 / (2 * acc_half.full_flops) as f64;
    if (r1 - r2).abs() > 1e-15 {
        return Err(fail("accounting", format!("ratio not convention invariant: {r1} vs {r2}")));
    }
    Ok(format!(
        "hand counts match (full {want_flops} FLOPs, masked {want_masked}); ratios convention invariant"
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prox_suite_passes() {
        suite_prox().unwrap();
    }

    #[test]
    fn equivalence_suite_passes() {
        suite_equivalence().unwrap();
    }

    #[test]
    fn sharing_suite_passes() {
        suite_sharing().unwrap();
    }

    #[test]
    fn accounting_suite_passes() {
        suite_accounting().unwrap();
    }

    #[test]
    fn gradcheck_single_seed_passes() {
        // full 20-seed sweep runs in the acceptance tests
        op_checks(0).unwrap();
        end_to_end_check(0).unwrap();
    }

    #[test]
    fn scalar_oracle_matches_closed_form() {
        for (v, t) in [(0.7, 0.2), (-0.3, 0.5), (0.1, 0.4), (2.0, 0.0)] {
            let want = if v > t {
                v - t
            } else if v < -t {
                v + t
            } else {
                0.0
            };
            assert!((oracle_scalar_l1(v, t) - want).abs() < 1e-7);
        }
    }
}
