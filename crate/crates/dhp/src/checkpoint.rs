//! Versioned, self-describing JSON checkpoints.
//!
//! A checkpoint is a flat map of named tensors plus the sharing graph and
//! an optional mask record, so it can be inspected or reloaded without
//! out-of-band knowledge. Exact round-tripping matters more than size at
//! this scale; serde_json preserves f64 exactly.

use crate::backbones::HyperBackbone;
use crate::error::{DhpError, Result};
use crate::hypernet::{HyperLayer, LatentVector};
use crate::pruner::ExplicitNetwork;
use crate::sharegraph::SharingGraph;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    /// "hyper" during search, "explicit" after materialization.
    pub kind: String,
    pub graph: SharingGraph,
    /// Deterministically ordered named tensors.
    pub tensors: BTreeMap<String, Tensor>,
    pub masks: Option<Vec<Vec<bool>>>,
}

impl Checkpoint {
    pub fn from_hyper(net: &HyperBackbone) -> Self {
        let mut tensors = BTreeMap::new();
        for (i, l) in net.latents.iter().enumerate() {
            tensors.insert(format!("latent.{i:03}"), l.values.clone());
        }
        for (i, h) in net.hypers.iter().enumerate() {
            tensors.insert(format!("layer.{i:03}.b0"), h.b0.clone());
            tensors.insert(format!("layer.{i:03}.w1"), h.w1.clone());
            tensors.insert(format!("layer.{i:03}.b1"), h.b1.clone());
            tensors.insert(format!("layer.{i:03}.w2"), h.w2.clone());
            tensors.insert(format!("layer.{i:03}.b2"), h.b2.clone());
        }
        for (i, b) in net.biases.iter().enumerate() {
            tensors.insert(format!("bias.{i:03}"), b.clone());
        }
        Checkpoint {
            version: FORMAT_VERSION,
            kind: "hyper".to_string(),
            graph: net.graph.clone(),
            tensors,
            masks: None,
        }
    }

    pub fn to_hyper(&self) -> Result<HyperBackbone> {
        self.expect_kind("hyper")?;
        let get = |name: String| -> Result<Tensor> {
            self.tensors
                .get(&name)
                .cloned()
                .ok_or_else(|| DhpError::Serde(format!("checkpoint missing tensor '{name}'")))
        };
        let latents = self
            .graph
            .latents
            .iter()
            .enumerate()
            .map(|(i, info)| {
                Ok(LatentVector {
                    values: get(format!("latent.{i:03}"))?,
                    sparsifiable: info.sparsifiable,
                    owner: i,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let hypers = self
            .graph
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let w1 = get(format!("layer.{i:03}.w1"))?;
                let m = *w1.shape().last().expect("w1 is 3-D");
                Ok(HyperLayer {
                    n: l.out_channels,
                    c: l.in_channels / l.groups,
                    kh: l.kernel.0,
                    kw: l.kernel.1,
                    m,
                    b0: get(format!("layer.{i:03}.b0"))?,
                    w1,
                    b1: get(format!("layer.{i:03}.b1"))?,
                    w2: get(format!("layer.{i:03}.w2"))?,
                    b2: get(format!("layer.{i:03}.b2"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let biases = (0..self.graph.layers.len())
            .map(|i| get(format!("bias.{i:03}")))
            .collect::<Result<Vec<_>>>()?;
        Ok(HyperBackbone {
            graph: self.graph.clone(),
            hypers,
            latents,
            biases,
        })
    }

    pub fn from_explicit(net: &ExplicitNetwork) -> Self {
        let mut tensors = BTreeMap::new();
        for (i, w) in net.weights.iter().enumerate() {
            tensors.insert(format!("weight.{i:03}"), w.clone());
        }
        for (i, b) in net.biases.iter().enumerate() {
            tensors.insert(format!("bias.{i:03}"), b.clone());
        }
        Checkpoint {
            version: FORMAT_VERSION,
            kind: "explicit".to_string(),
            graph: net.graph.clone(),
            tensors,
            masks: Some(net.masks.clone()),
        }
    }

    pub fn to_explicit(&self) -> Result<ExplicitNetwork> {
        self.expect_kind("explicit")?;
        let get = |name: String| -> Result<Tensor> {
            self.tensors
                .get(&name)
                .cloned()
                .ok_or_else(|| DhpError::Serde(format!("checkpoint missing tensor '{name}'")))
        };
        let weights = (0..self.graph.layers.len())
            .map(|i| get(format!("weight.{i:03}")))
            .collect::<Result<Vec<_>>>()?;
        let biases = (0..self.graph.layers.len())
            .map(|i| get(format!("bias.{i:03}")))
            .collect::<Result<Vec<_>>>()?;
        let masks = self
            .masks
            .clone()
            .ok_or_else(|| DhpError::Serde("explicit checkpoint missing masks".into()))?;
        Ok(ExplicitNetwork {
            graph: self.graph.clone(),
            weights,
            biases,
            masks,
        })
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.version != FORMAT_VERSION {
            return Err(DhpError::Serde(format!(
                "checkpoint version {} unsupported (expected {FORMAT_VERSION})",
                self.version
            )));
        }
        if self.kind != kind {
            return Err(DhpError::Serde(format!(
                "checkpoint kind '{}' (expected '{kind}')",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| DhpError::Serde(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| DhpError::Serde(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Family, NetDescription};
    use crate::sharegraph;

    fn backbone() -> HyperBackbone {
        let desc = NetDescription {
            family: Family::Resnet,
            stage_widths: vec![4, 6],
            blocks_per_stage: 2,
            kernel: 3,
            expansion: 2,
            growth: 4,
            upscale: 2,
            input_channels: 3,
            input_size: 8,
            num_classes: 5,
            output_channels: 3,
        };
        let graph = sharegraph::build(&desc, true).unwrap();
        HyperBackbone::init(graph, 4, 17)
    }

    #[test]
    fn hyper_round_trip_is_exact() {
        let net = backbone();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        Checkpoint::from_hyper(&net).save(&path).unwrap();
        let restored = Checkpoint::load(&path).unwrap().to_hyper().unwrap();
        assert_eq!(net.graph, restored.graph);
        for (a, b) in net.latents.iter().zip(&restored.latents) {
            assert_eq!(a.values, b.values);
        }
        for (a, b) in net.hypers.iter().zip(&restored.hypers) {
            assert_eq!(a.params(), b.params());
        }
        assert_eq!(net.biases, restored.biases);
    }

    #[test]
    fn explicit_round_trip_is_exact() {
        let net = backbone();
        let masks: Vec<Vec<bool>> = net
            .graph
            .latents
            .iter()
            .map(|l| vec![true; l.dim])
            .collect();
        let explicit = crate::pruner::materialize(
            &net.graph,
            &net.hypers,
            &net.latent_values(),
            &net.biases,
            &masks,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        Checkpoint::from_explicit(&explicit).save(&path).unwrap();
        let restored = Checkpoint::load(&path).unwrap().to_explicit().unwrap();
        assert_eq!(explicit.weights, restored.weights);
        assert_eq!(explicit.biases, restored.biases);
        assert_eq!(explicit.masks, restored.masks);
    }

    #[test]
    fn kind_mismatch_is_rejected() {
        let net = backbone();
        let ckpt = Checkpoint::from_hyper(&net);
        assert!(ckpt.to_explicit().is_err());
    }
}
