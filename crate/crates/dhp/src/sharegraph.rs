//! Latent-vector ownership and sharing structure for a backbone.
//!
//! Every conv layer binds one input-latent reference and one output-latent
//! reference. Correlated layers (residual-block outputs within a stage,
//! the three layers of an inverted-residual block, dense-block inputs,
//! upsampler convs) share or derive their references so that pruning one
//! latent consistently prunes every dimension-correlated layer. The graph
//! also carries the execution plan the backbone forward pass follows, so
//! layer indices stay in sync between wiring, accounting, and execution.

use crate::config::{Family, NetDescription};
use crate::error::{DhpError, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Standard,
    Pointwise,
    Depthwise,
    Group,
    Transposed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: usize,
    pub kind: LayerKind,
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub has_bias: bool,
    pub has_bn: bool,
    pub first_layer: bool,
    /// Upsampler scale r, when this conv feeds a pixel shuffle.
    pub upsampler: Option<usize>,
    pub stage: Option<usize>,
    pub block: Option<usize>,
    /// Output spatial size, fixed by the input shape at build time.
    pub out_h: usize,
    pub out_w: usize,
}

/// How a layer derives a latent vector from the registry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LatentRef {
    Single(LatentId),
    /// Ordered concatenation (dense-block inputs). References, not copies,
    /// so masks propagate without synchronization.
    Concat(Vec<LatentId>),
    /// Each element repeated k consecutive times (upsampler outputs).
    RepeatInterleave(LatentId, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wiring {
    pub input: LatentRef,
    pub output: LatentRef,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentInfo {
    pub dim: usize,
    pub sparsifiable: bool,
}

/// One step of the backbone execution plan. Activations live in numbered
/// slots; slot 0 is the network input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Step {
    Conv {
        layer: usize,
        src: usize,
        dst: usize,
        relu: bool,
    },
    Add {
        a: usize,
        b: usize,
        dst: usize,
        relu: bool,
    },
    ConcatChannels {
        srcs: Vec<usize>,
        dst: usize,
    },
    PixelShuffle {
        src: usize,
        dst: usize,
        r: usize,
    },
    GlobalAvgPool {
        src: usize,
        dst: usize,
    },
    /// `[N,K,1,1] -> [N,K]`
    FlattenLogits {
        src: usize,
        dst: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharingGraph {
    pub layers: Vec<LayerSpec>,
    pub latents: Vec<LatentInfo>,
    /// Parallel to `layers`.
    pub wiring: Vec<Wiring>,
    /// Correlation groups for the non-sharing ablation: latents that must
    /// prune to identical index sets (joint l2,1 shrinkage).
    pub groups: Vec<Vec<LatentId>>,
    pub steps: Vec<Step>,
    pub num_slots: usize,
    /// Slot holding the network output.
    pub output_slot: usize,
}

impl SharingGraph {
    pub fn ref_dim(&self, r: &LatentRef) -> usize {
        match r {
            LatentRef::Single(id) => self.latents[id.0].dim,
            LatentRef::Concat(ids) => ids.iter().map(|id| self.latents[id.0].dim).sum(),
            LatentRef::RepeatInterleave(id, k) => self.latents[id.0].dim * k,
        }
    }

    /// Channel keep-mask a reference induces from per-latent masks
    /// (indexed by latent id).
    pub fn ref_mask(&self, r: &LatentRef, masks: &[Vec<bool>]) -> Vec<bool> {
        match r {
            LatentRef::Single(id) => masks[id.0].clone(),
            LatentRef::Concat(ids) => ids
                .iter()
                .flat_map(|id| masks[id.0].iter().copied())
                .collect(),
            LatentRef::RepeatInterleave(id, k) => masks[id.0]
                .iter()
                .flat_map(|&b| std::iter::repeat(b).take(*k))
                .collect(),
        }
    }

    /// All latent ids a reference draws from.
    pub fn latents_of(&self, r: &LatentRef) -> Vec<LatentId> {
        match r {
            LatentRef::Single(id) => vec![*id],
            LatentRef::Concat(ids) => ids.clone(),
            LatentRef::RepeatInterleave(id, _) => vec![*id],
        }
    }

    /// Concrete latent values a reference resolves to, given per-latent
    /// value vectors (indexed by latent id).
    pub fn ref_values(&self, r: &LatentRef, values: &[crate::tensor::Tensor]) -> crate::tensor::Tensor {
        match r {
            LatentRef::Single(id) => values[id.0].clone(),
            LatentRef::Concat(ids) => {
                let data: Vec<f64> = ids
                    .iter()
                    .flat_map(|id| values[id.0].data().iter().copied())
                    .collect();
                crate::tensor::Tensor::from_vec(data)
            }
            LatentRef::RepeatInterleave(id, k) => {
                let data: Vec<f64> = values[id.0]
                    .data()
                    .iter()
                    .flat_map(|&v| std::iter::repeat(v).take(*k))
                    .collect();
                crate::tensor::Tensor::from_vec(data)
            }
        }
    }

    /// Dimension consistency: input-latent dim equals per-group input
    /// channels, output-latent dim equals output channels, for every layer.
    pub fn validate(&self) -> Result<()> {
        if self.layers.len() != self.wiring.len() {
            return Err(DhpError::UnsupportedTopology("wiring/layer length mismatch".into()));
        }
        for (layer, wiring) in self.layers.iter().zip(&self.wiring) {
            if matches!(layer.kind, LayerKind::Depthwise) && layer.groups != layer.in_channels {
                return Err(DhpError::UnsupportedTopology(format!(
                    "depthwise layer {} must have groups == in_channels",
                    layer.id
                )));
            }
            if layer.in_channels % layer.groups != 0 {
                return Err(DhpError::UnsupportedTopology(format!(
                    "layer {}: in_channels {} not divisible by groups {}",
                    layer.id, layer.in_channels, layer.groups
                )));
            }
            let expect_in = layer.in_channels / layer.groups;
            let got_in = self.ref_dim(&wiring.input);
            if got_in != expect_in {
                return Err(DhpError::UnsupportedTopology(format!(
                    "layer {}: input latent dim {got_in}, expected {expect_in}",
                    layer.id
                )));
            }
            let got_out = self.ref_dim(&wiring.output);
            if got_out != layer.out_channels {
                return Err(DhpError::UnsupportedTopology(format!(
                    "layer {}: output latent dim {got_out}, expected {}",
                    layer.id, layer.out_channels
                )));
            }
        }
        Ok(())
    }
}

/// Dense-block input: the stage-input latent concatenated with all previous
/// blocks' growth latents, in topological order.
pub fn wire_dense_block(stage_in: LatentId, prev_growths: &[LatentId]) -> LatentRef {
    if prev_growths.is_empty() {
        LatentRef::Single(stage_in)
    } else {
        let mut ids = Vec::with_capacity(prev_growths.len() + 1);
        ids.push(stage_in);
        ids.extend_from_slice(prev_growths);
        LatentRef::Concat(ids)
    }
}

/// Upsampler output: the input latent repeat-interleaved r^2 times, so
/// pruning input element i prunes the r^2 consecutive output slices.
pub fn wire_upsampler(input: LatentId, in_dim: usize, out_channels: usize, r: usize) -> Result<LatentRef> {
    if out_channels != r * r * in_dim {
        return Err(DhpError::UnsupportedTopology(format!(
            "upsampler needs out_channels == r^2 * in_channels, got {out_channels} != {}*{in_dim}",
            r * r
        )));
    }
    Ok(LatentRef::RepeatInterleave(input, r * r))
}

/// Inverted-residual wiring: the first pointwise conv's output latent also
/// controls the depthwise conv's group count and the second pointwise
/// conv's input channels.
pub struct InvertedResidualWiring {
    pub pw1: Wiring,
    pub dw: Wiring,
    pub pw2: Wiring,
}

pub fn wire_inverted_residual(
    block_in: LatentId,
    expansion_latent: LatentId,
    depthwise_latent: LatentId,
    block_out: LatentId,
) -> InvertedResidualWiring {
    InvertedResidualWiring {
        pw1: Wiring {
            input: LatentRef::Single(block_in),
            output: LatentRef::Single(expansion_latent),
        },
        dw: Wiring {
            input: LatentRef::Single(depthwise_latent),
            output: LatentRef::Single(expansion_latent),
        },
        pw2: Wiring {
            input: LatentRef::Single(expansion_latent),
            output: LatentRef::Single(block_out),
        },
    }
}

struct Builder {
    layers: Vec<LayerSpec>,
    wiring: Vec<Wiring>,
    latents: Vec<LatentInfo>,
    groups: Vec<Vec<LatentId>>,
    steps: Vec<Step>,
    /// Channel count per activation slot, for build-time validation.
    slot_channels: Vec<usize>,
    /// Spatial size per slot.
    slot_hw: Vec<(usize, usize)>,
}

impl Builder {
    fn new(desc: &NetDescription) -> Self {
        Builder {
            layers: Vec::new(),
            wiring: Vec::new(),
            latents: Vec::new(),
            groups: Vec::new(),
            steps: Vec::new(),
            slot_channels: vec![desc.input_channels],
            slot_hw: vec![(desc.input_size, desc.input_size)],
        }
    }

    fn latent(&mut self, dim: usize, sparsifiable: bool) -> LatentId {
        let id = LatentId(self.latents.len());
        self.latents.push(LatentInfo { dim, sparsifiable });
        id
    }

    fn slot(&mut self, channels: usize, hw: (usize, usize)) -> usize {
        self.slot_channels.push(channels);
        self.slot_hw.push(hw);
        self.slot_channels.len() - 1
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        kind: LayerKind,
        src: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        input: LatentRef,
        output: LatentRef,
        relu: bool,
        tags: Tags,
    ) -> Result<usize> {
        let in_channels = self.slot_channels[src];
        let (h, w) = self.slot_hw[src];
        if h + 2 * padding < kernel || w + 2 * padding < kernel {
            return Err(DhpError::UnsupportedTopology(format!(
                "kernel {kernel} too large for {h}x{w} feature map"
            )));
        }
        let out_h = (h + 2 * padding - kernel) / stride + 1;
        let out_w = (w + 2 * padding - kernel) / stride + 1;
        let id = self.layers.len();
        self.layers.push(LayerSpec {
            id,
            kind,
            out_channels,
            in_channels,
            kernel: (kernel, kernel),
            stride,
            padding,
            groups,
            has_bias: true,
            has_bn: false,
            first_layer: tags.first,
            upsampler: tags.upsampler,
            stage: tags.stage,
            block: tags.block,
            out_h,
            out_w,
        });
        self.wiring.push(Wiring { input, output });
        let dst = self.slot(out_channels, (out_h, out_w));
        self.steps.push(Step::Conv {
            layer: id,
            src,
            dst,
            relu,
        });
        Ok(dst)
    }

    fn finish_classifier(&mut self, src: usize, classes: usize, in_ref: LatentRef) -> Result<usize> {
        let pooled = self.slot(self.slot_channels[src], (1, 1));
        self.steps.push(Step::GlobalAvgPool { src, dst: pooled });
        let head_latent = self.latent(classes, false);
        let logits4 = self.conv(
            LayerKind::Pointwise,
            pooled,
            classes,
            1,
            1,
            0,
            1,
            in_ref,
            LatentRef::Single(head_latent),
            false,
            Tags::default(),
        )?;
        let out = self.slot(classes, (1, 1));
        self.steps.push(Step::FlattenLogits {
            src: logits4,
            dst: out,
        });
        Ok(out)
    }

    fn finish(self, output_slot: usize) -> SharingGraph {
        SharingGraph {
            layers: self.layers,
            latents: self.latents,
            wiring: self.wiring,
            groups: self.groups,
            steps: self.steps,
            num_slots: self.slot_channels.len(),
            output_slot,
        }
    }
}

#[derive(Default, Clone, Copy)]
struct Tags {
    first: bool,
    upsampler: Option<usize>,
    stage: Option<usize>,
    block: Option<usize>,
}

/// Build the sharing graph (and execution plan) for a network description.
/// Deterministic: latent and layer ids depend only on the description.
pub fn build(desc: &NetDescription, sharing: bool) -> Result<SharingGraph> {
    desc.validate()?;
    let graph = match desc.family {
        Family::Chain => build_chain(desc)?,
        Family::Resnet => build_resnet(desc, sharing)?,
        Family::Dense => build_dense(desc)?,
        Family::InvertedResidual => build_inverted_residual(desc, sharing)?,
        Family::UpsamplerChain => build_upsampler_chain(desc)?,
    };
    graph.validate()?;
    Ok(graph)
}

fn build_chain(desc: &NetDescription) -> Result<SharingGraph> {
    let mut b = Builder::new(desc);
    let k = desc.kernel;
    let input_latent = b.latent(desc.input_channels, false);
    let mut prev = input_latent;
    let mut slot = 0;
    let mut first = true;
    for &width in &desc.stage_widths {
        let out_latent = b.latent(width, true);
        slot = b.conv(
            LayerKind::Standard,
            slot,
            width,
            k,
            1,
            k / 2,
            1,
            LatentRef::Single(prev),
            LatentRef::Single(out_latent),
            true,
            Tags {
                first,
                ..Tags::default()
            },
        )?;
        prev = out_latent;
        first = false;
    }
    let out = b.finish_classifier(slot, desc.num_classes, LatentRef::Single(prev))?;
    Ok(b.finish(out))
}

fn build_resnet(desc: &NetDescription, sharing: bool) -> Result<SharingGraph> {
    let mut b = Builder::new(desc);
    let k = desc.kernel;
    let input_latent = b.latent(desc.input_channels, false);

    // First conv's output participates in stage 0's identity shortcuts.
    let w0 = desc.stage_widths[0];
    let first_out = b.latent(w0, true);
    let mut group0 = vec![first_out];
    let mut slot = b.conv(
        LayerKind::Standard,
        0,
        w0,
        k,
        1,
        k / 2,
        1,
        LatentRef::Single(input_latent),
        LatentRef::Single(first_out),
        true,
        Tags {
            first: true,
            ..Tags::default()
        },
    )?;
    let mut prev_out = first_out; // latent controlling the current activation channels
    let mut stage_shared = first_out; // sharing mode: one latent per stage

    for (s, &width) in desc.stage_widths.iter().enumerate() {
        let mut group: Vec<LatentId> = if s == 0 {
            std::mem::take(&mut group0)
        } else {
            Vec::new()
        };
        if s > 0 && sharing {
            stage_shared = b.latent(width, true);
        }
        for blk in 0..desc.blocks_per_stage {
            let downsample = s > 0 && blk == 0;
            let stride = if downsample { 2 } else { 1 };
            let tags = Tags {
                stage: Some(s),
                block: Some(blk),
                ..Tags::default()
            };
            let block_in_slot = slot;
            let block_in_latent = prev_out;

            let mid = b.latent(width, true);
            let c1 = b.conv(
                LayerKind::Standard,
                block_in_slot,
                width,
                k,
                stride,
                k / 2,
                1,
                LatentRef::Single(block_in_latent),
                LatentRef::Single(mid),
                true,
                tags,
            )?;
            let out_latent = if sharing {
                stage_shared
            } else {
                let l = b.latent(width, true);
                group.push(l);
                l
            };
            let c2 = b.conv(
                LayerKind::Standard,
                c1,
                width,
                k,
                1,
                k / 2,
                1,
                LatentRef::Single(mid),
                LatentRef::Single(out_latent),
                false,
                tags,
            )?;
            let shortcut_slot = if downsample {
                // Projection shortcut feeds the same addition, so its output
                // binds to the stage latent (or joins the stage group).
                let sc_latent = if sharing {
                    stage_shared
                } else {
                    let l = b.latent(width, true);
                    group.push(l);
                    l
                };
                b.conv(
                    LayerKind::Pointwise,
                    block_in_slot,
                    width,
                    1,
                    2,
                    0,
                    1,
                    LatentRef::Single(block_in_latent),
                    LatentRef::Single(sc_latent),
                    false,
                    tags,
                )?
            } else {
                block_in_slot
            };
            let dst = b.slot(width, b.slot_hw[c2]);
            b.steps.push(Step::Add {
                a: c2,
                b: shortcut_slot,
                dst,
                relu: true,
            });
            slot = dst;
            prev_out = out_latent;
        }
        if !sharing && group.len() > 1 {
            b.groups.push(group);
        }
    }
    let out = b.finish_classifier(slot, desc.num_classes, LatentRef::Single(prev_out))?;
    Ok(b.finish(out))
}

fn build_dense(desc: &NetDescription) -> Result<SharingGraph> {
    let mut b = Builder::new(desc);
    let k = desc.kernel;
    let input_latent = b.latent(desc.input_channels, false);
    let c0 = desc.stage_widths[0];
    let stage_in = b.latent(c0, true);
    let first_slot = b.conv(
        LayerKind::Standard,
        0,
        c0,
        k,
        1,
        k / 2,
        1,
        LatentRef::Single(input_latent),
        LatentRef::Single(stage_in),
        true,
        Tags {
            first: true,
            ..Tags::default()
        },
    )?;

    let mut growths: Vec<LatentId> = Vec::new();
    let mut act_slots = vec![first_slot];
    for blk in 0..desc.blocks_per_stage {
        let in_ref = wire_dense_block(stage_in, &growths);
        let src = if act_slots.len() == 1 {
            act_slots[0]
        } else {
            let channels = c0 + growths.iter().map(|g| b.latents[g.0].dim).sum::<usize>();
            let dst = b.slot(channels, b.slot_hw[first_slot]);
            b.steps.push(Step::ConcatChannels {
                srcs: act_slots.clone(),
                dst,
            });
            dst
        };
        let g = b.latent(desc.growth, true);
        let out = b.conv(
            LayerKind::Standard,
            src,
            desc.growth,
            k,
            1,
            k / 2,
            1,
            in_ref,
            LatentRef::Single(g),
            true,
            Tags {
                stage: Some(0),
                block: Some(blk),
                ..Tags::default()
            },
        )?;
        growths.push(g);
        act_slots.push(out);
    }
    // Block output = concatenation of stage input and every growth.
    let channels = c0 + growths.iter().map(|g| b.latents[g.0].dim).sum::<usize>();
    let cat = b.slot(channels, b.slot_hw[first_slot]);
    b.steps.push(Step::ConcatChannels {
        srcs: act_slots,
        dst: cat,
    });
    let head_ref = wire_dense_block(stage_in, &growths);
    let out = b.finish_classifier(cat, desc.num_classes, head_ref)?;
    Ok(b.finish(out))
}

fn build_inverted_residual(desc: &NetDescription, sharing: bool) -> Result<SharingGraph> {
    let mut b = Builder::new(desc);
    let k = desc.kernel;
    let input_latent = b.latent(desc.input_channels, false);
    let w0 = desc.stage_widths[0];
    let first_out = b.latent(w0, true);
    let mut group0 = vec![first_out];
    let mut slot = b.conv(
        LayerKind::Standard,
        0,
        w0,
        k,
        1,
        k / 2,
        1,
        LatentRef::Single(input_latent),
        LatentRef::Single(first_out),
        true,
        Tags {
            first: true,
            ..Tags::default()
        },
    )?;
    let mut prev_out = first_out;
    let mut stage_shared = first_out;

    for (s, &width) in desc.stage_widths.iter().enumerate() {
        let mut group: Vec<LatentId> = if s == 0 {
            std::mem::take(&mut group0)
        } else {
            Vec::new()
        };
        if s > 0 && sharing {
            stage_shared = b.latent(width, true);
        }
        for blk in 0..desc.blocks_per_stage {
            let downsample = s > 0 && blk == 0;
            let tags = Tags {
                stage: Some(s),
                block: Some(blk),
                ..Tags::default()
            };
            let block_in_slot = slot;
            let block_in_latent = prev_out;
            let in_width = b.slot_channels[block_in_slot];
            let expanded = desc.expansion * in_width;

            let expansion_latent = b.latent(expanded, true);
            let dw_latent = b.latent(1, false);
            let out_latent = if sharing {
                stage_shared
            } else {
                let l = b.latent(width, true);
                group.push(l);
                l
            };
            let wires = wire_inverted_residual(
                block_in_latent,
                expansion_latent,
                dw_latent,
                out_latent,
            );

            let pw1 = b.conv(
                LayerKind::Pointwise,
                block_in_slot,
                expanded,
                1,
                1,
                0,
                1,
                wires.pw1.input,
                wires.pw1.output,
                true,
                tags,
            )?;
            let dw = b.conv(
                LayerKind::Depthwise,
                pw1,
                expanded,
                k,
                if downsample { 2 } else { 1 },
                k / 2,
                expanded,
                wires.dw.input,
                wires.dw.output,
                true,
                tags,
            )?;
            let pw2 = b.conv(
                LayerKind::Pointwise,
                dw,
                width,
                1,
                1,
                0,
                1,
                wires.pw2.input,
                wires.pw2.output,
                false,
                tags,
            )?;
            // Linear bottleneck: residual add only when shapes carry over.
            slot = if downsample {
                pw2
            } else {
                let dst = b.slot(width, b.slot_hw[pw2]);
                b.steps.push(Step::Add {
                    a: pw2,
                    b: block_in_slot,
                    dst,
                    relu: false,
                });
                dst
            };
            prev_out = out_latent;
        }
        if !sharing && group.len() > 1 {
            b.groups.push(group);
        }
    }
    let out = b.finish_classifier(slot, desc.num_classes, LatentRef::Single(prev_out))?;
    Ok(b.finish(out))
}

fn build_upsampler_chain(desc: &NetDescription) -> Result<SharingGraph> {
    let mut b = Builder::new(desc);
    let k = desc.kernel;
    let r = desc.upscale;
    let input_latent = b.latent(desc.input_channels, false);
    let mut prev = input_latent;
    let mut slot = 0;
    let mut first = true;
    for &width in &desc.stage_widths {
        let out_latent = b.latent(width, true);
        slot = b.conv(
            LayerKind::Standard,
            slot,
            width,
            k,
            1,
            k / 2,
            1,
            LatentRef::Single(prev),
            LatentRef::Single(out_latent),
            true,
            Tags {
                first,
                ..Tags::default()
            },
        )?;
        prev = out_latent;
        first = false;
    }
    let c = *desc.stage_widths.last().expect("validated non-empty");
    let up_ref = wire_upsampler(prev, c, r * r * c, r)?;
    let up_slot = b.conv(
        LayerKind::Standard,
        slot,
        r * r * c,
        k,
        1,
        k / 2,
        1,
        LatentRef::Single(prev),
        up_ref,
        false,
        Tags {
            upsampler: Some(r),
            ..Tags::default()
        },
    )?;
    let (h, w) = b.slot_hw[up_slot];
    let shuffled = b.slot(c, (h * r, w * r));
    b.steps.push(Step::PixelShuffle {
        src: up_slot,
        dst: shuffled,
        r,
    });
    let out_latent = b.latent(desc.output_channels, false);
    let out = b.conv(
        LayerKind::Standard,
        shuffled,
        desc.output_channels,
        k,
        1,
        k / 2,
        1,
        LatentRef::Single(prev),
        LatentRef::Single(out_latent),
        false,
        Tags::default(),
    )?;
    Ok(b.finish(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Family, NetDescription};

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
            input_size: 16,
            num_classes: 10,
            output_channels: 3,
        }
    }

    #[test]
    fn chain_latent_registry() {
        let g = build(&desc(Family::Chain, &[8, 8]), true).unwrap();
        // input + two hidden + head
        assert_eq!(g.latents.len(), 4);
        assert_eq!(g.layers.len(), 3);
        assert!(!g.latents[0].sparsifiable);
        assert!(g.latents[1].sparsifiable && g.latents[2].sparsifiable);
        assert!(!g.latents[3].sparsifiable);
        assert_eq!(g.wiring[1].input, LatentRef::Single(LatentId(1)));
        assert_eq!(g.wiring[2].input, LatentRef::Single(LatentId(2)));
    }

    #[test]
    fn resnet_stage_sharing() {
        let g = build(&desc(Family::Resnet, &[8, 16]), true).unwrap();
        // first conv output latent is stage 0's shared latent
        let first_out = g.wiring[0].output.clone();
        let mut stage0_outputs = 0;
        for (layer, wiring) in g.layers.iter().zip(&g.wiring) {
            if layer.stage == Some(0) && layer.kernel == (3, 3) && !layer.first_layer {
                // second conv of each stage-0 block closes on the stage latent
                if wiring.output == first_out {
                    stage0_outputs += 1;
                }
            }
        }
        assert_eq!(stage0_outputs, 2);
        // stage 1: both block outputs and the projection shortcut share one latent
        let stage1_outs: Vec<_> = g
            .layers
            .iter()
            .zip(&g.wiring)
            .filter(|(l, _)| l.stage == Some(1))
            .map(|(l, w)| (l.kind, w.output.clone()))
            .collect();
        let shared = stage1_outs
            .iter()
            .find(|(k, _)| *k == LayerKind::Pointwise)
            .map(|(_, w)| w.clone())
            .unwrap();
        let closing: Vec<_> = stage1_outs
            .iter()
            .filter(|(_, w)| *w == shared)
            .collect();
        assert_eq!(closing.len(), 3); // 2 second convs + shortcut
        assert!(g.groups.is_empty());
    }

    #[test]
    fn resnet_nonsharing_groups() {
        let g = build(&desc(Family::Resnet, &[8, 16]), false).unwrap();
        // stage 0: first conv + 2 block outputs; stage 1: 2 block outputs + shortcut
        assert_eq!(g.groups.len(), 2);
        assert_eq!(g.groups[0].len(), 3);
        assert_eq!(g.groups[1].len(), 3);
        for group in &g.groups {
            let d0 = g.latents[group[0].0].dim;
            assert!(group.iter().all(|id| g.latents[id.0].dim == d0));
        }
    }

    #[test]
    fn inverted_residual_expansion_binding() {
        let g = build(&desc(Family::InvertedResidual, &[8]), true).unwrap();
        // layers: first conv, then pw1/dw/pw2 per block
        let pw1 = &g.wiring[1];
        let dw = &g.wiring[2];
        let pw2 = &g.wiring[3];
        assert_eq!(pw1.output, dw.output);
        assert_eq!(dw.output, pw2.input);
        // depthwise input latent is its own 1-dim non-sparsifiable vector
        if let LatentRef::Single(id) = dw.input {
            assert_eq!(g.latents[id.0].dim, 1);
            assert!(!g.latents[id.0].sparsifiable);
        } else {
            panic!("depthwise input should be a single latent");
        }
        assert_eq!(g.layers[2].groups, g.layers[2].in_channels);
        assert_eq!(g.ref_dim(&pw1.output), 2 * 8); // expansion 2
    }

    #[test]
    fn dense_concat_references() {
        let g = build(&desc(Family::Dense, &[8]), true).unwrap();
        // layer 0: first conv; layers 1..=2: dense blocks; last: head
        assert_eq!(g.wiring[1].input, LatentRef::Single(LatentId(1)));
        match &g.wiring[2].input {
            LatentRef::Concat(ids) => {
                assert_eq!(ids.len(), 2);
                assert_eq!(ids[0], LatentId(1));
            }
            other => panic!("expected concat ref, got {other:?}"),
        }
        let head = g.wiring.last().unwrap();
        assert_eq!(g.ref_dim(&head.input), 8 + 2 * 4);
    }

    #[test]
    fn upsampler_interleaved_mask() {
        let mut d = desc(Family::UpsamplerChain, &[2]);
        d.num_classes = 10;
        let g = build(&d, true).unwrap();
        let up = g
            .layers
            .iter()
            .position(|l| l.upsampler.is_some())
            .unwrap();
        let r = match &g.wiring[up].output {
            LatentRef::RepeatInterleave(id, k) => {
                assert_eq!(*k, 4);
                *id
            }
            other => panic!("expected repeat-interleave ref, got {other:?}"),
        };
        let mut masks = vec![Vec::new(); g.latents.len()];
        masks[r.0] = vec![true, false];
        let m = g.ref_mask(&g.wiring[up].output, &masks);
        assert_eq!(
            m,
            vec![true, true, true, true, false, false, false, false]
        );
    }

    #[test]
    fn build_is_deterministic() {
        for family in [
            Family::Chain,
            Family::Resnet,
            Family::Dense,
            Family::InvertedResidual,
            Family::UpsamplerChain,
        ] {
            let d = desc(family, &[8, 16]);
            let a = build(&d, true).unwrap();
            let b = build(&d, true).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn wire_upsampler_rejects_bad_shape() {
        assert!(wire_upsampler(LatentId(0), 4, 15, 2).is_err());
        assert!(wire_upsampler(LatentId(0), 4, 16, 2).is_ok());
    }
}
