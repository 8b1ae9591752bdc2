//! Edge modules on the three shallow encoder blocks.
//!
//! Each module projects every convolution layer of its block through its own
//! 3x3 convolution, fuses the projections by elementwise sum, and produces
//! edge features `a_e` plus a sigmoid edge map. Edge features are residually
//! injected into the block's mutual-learning module through a zero-initialized
//! 1x1 projection, so injection starts as the identity. A separate merger
//! upsamples the three feature maps and fuses them into the full-resolution
//! edge prediction.
//!
//! On a saliency-image pass only `forward_features` runs; edge maps and the
//! merged prediction are computed (and supervised) only on edge-image passes.
//! The eval counters exist so tests can assert that split.

use std::cell::Cell;

use rand_chacha::ChaCha8Rng;

use crate::backbone::BlockFeatureNodes;
use crate::config::CONVS_PER_BLOCK;
use crate::error::{Error, Result};
use crate::nn::{Binding, Conv2dLayer, Init, ParamGroup, ParamStore};
use crate::tape::{NodeId, Tape};
use crate::tensor::{ProbabilityMap, Tensor};

pub struct EdgeModule {
    pub block_index: usize,
    projs: Vec<Conv2dLayer>,
    fuse: Conv2dLayer,
    head: Conv2dLayer,
    inject: Conv2dLayer,
    pub feature_evals: Cell<u64>,
    pub map_evals: Cell<u64>,
}

/// Value-level output of one edge module.
#[derive(Debug, Clone)]
pub struct EmOutput {
    pub edge_features: Tensor,
    pub edge_map: ProbabilityMap,
}

impl EdgeModule {
    pub fn build(
        block_index: usize,
        block_channels: usize,
        em_channels: usize,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if block_index > 2 {
            return Err(Error::Config(format!(
                "edge modules exist only for blocks 0-2, got {block_index}"
            )));
        }
        let n_layers = CONVS_PER_BLOCK[block_index];
        let prefix = format!("em{block_index}");
        let mut projs = Vec::with_capacity(n_layers);
        for li in 0..n_layers {
            projs.push(Conv2dLayer::new(
                store,
                rng,
                &format!("{prefix}.proj{li}"),
                ParamGroup::Encoder,
                block_channels,
                em_channels,
                3,
                1,
                Init::HeNormal,
            )?);
        }
        let fuse = Conv2dLayer::new(
            store,
            rng,
            &format!("{prefix}.fuse"),
            ParamGroup::Encoder,
            em_channels,
            em_channels,
            3,
            1,
            Init::HeNormal,
        )?;
        let head = Conv2dLayer::new(
            store,
            rng,
            &format!("{prefix}.head"),
            ParamGroup::Encoder,
            em_channels,
            1,
            1,
            1,
            Init::HeNormal,
        )?;
        let inject = Conv2dLayer::new(
            store,
            rng,
            &format!("{prefix}.inject"),
            ParamGroup::Encoder,
            em_channels,
            block_channels,
            1,
            1,
            Init::Zero,
        )?;
        Ok(EdgeModule {
            block_index,
            projs,
            fuse,
            head,
            inject,
            feature_evals: Cell::new(0),
            map_evals: Cell::new(0),
        })
    }

    /// Edge features `a_e`: per-layer projections summed, then one more conv.
    /// Consumes every convolution layer of the block.
    pub fn forward_features(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        block: &BlockFeatureNodes,
    ) -> Result<NodeId> {
        if block.block_index != self.block_index {
            return Err(Error::Config(format!(
                "edge module {} fed block {}",
                self.block_index, block.block_index
            )));
        }
        if block.layers.len() != self.projs.len() {
            return Err(Error::Shape(format!(
                "block {} has {} layers, edge module expects {}",
                block.block_index,
                block.layers.len(),
                self.projs.len()
            )));
        }
        let mut acc: Option<NodeId> = None;
        for (proj, &layer) in self.projs.iter().zip(&block.layers) {
            let p = proj.forward(tape, bind, layer)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, p)?,
                None => p,
            });
        }
        let summed = tape.relu(acc.expect("at least one layer"));
        let features = self.fuse.forward(tape, bind, summed)?;
        self.feature_evals.set(self.feature_evals.get() + 1);
        Ok(features)
    }

    /// Edge probability map from already-computed features.
    pub fn forward_map(&self, tape: &mut Tape, bind: &Binding, features: NodeId) -> Result<NodeId> {
        let logits = self.head.forward(tape, bind, features)?;
        self.map_evals.set(self.map_evals.get() + 1);
        Ok(tape.sigmoid(logits))
    }

    /// `block_layer + project(edge_features)`: the residual transfer into the
    /// mutual-learning module. The projection is zero-initialized, so this is
    /// the identity on `block_layer` before any training.
    pub fn residual_inject(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        edge_features: NodeId,
        block_layer: NodeId,
    ) -> Result<NodeId> {
        let (eh, ew) = (tape.value(edge_features).h(), tape.value(edge_features).w());
        let (bh, bw) = (tape.value(block_layer).h(), tape.value(block_layer).w());
        if (eh, ew) != (bh, bw) {
            return Err(Error::Shape(format!(
                "residual inject: edge features {eh}x{ew} vs block layer {bh}x{bw}"
            )));
        }
        let projected = self.inject.forward(tape, bind, edge_features)?;
        tape.add(block_layer, projected)
    }

    /// Full value-level module output (features and map) for a standalone block.
    pub fn forward_values(
        &self,
        store: &ParamStore,
        block_layers: &[Tensor],
        block_index: usize,
    ) -> Result<EmOutput> {
        let mut tape = Tape::new();
        let bind = Binding::bind(store, &mut tape);
        let layers: Vec<NodeId> = block_layers.iter().map(|t| tape.leaf(t.clone())).collect();
        let block = BlockFeatureNodes {
            block_index,
            layers,
            spatial_scale: 1 << block_index,
        };
        let feat = self.forward_features(&mut tape, &bind, &block)?;
        let map = self.forward_map(&mut tape, &bind, feat)?;
        Ok(EmOutput {
            edge_features: tape.value(feat).clone(),
            edge_map: tape.value(map).clone(),
        })
    }
}

/// Fuses the three edge modules' features into the final edge prediction:
/// bilinear upsample to the input resolution, channel concat, 1x1 conv,
/// sigmoid.
pub struct EdgeMerger {
    fusion: Conv2dLayer,
}

impl EdgeMerger {
    pub fn build(em_channels: usize, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(EdgeMerger {
            fusion: Conv2dLayer::new(
                store,
                rng,
                "em.merge",
                ParamGroup::Encoder,
                3 * em_channels,
                1,
                1,
                1,
                Init::HeNormal,
            )?,
        })
    }

    pub fn merge(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        edge_features: &[NodeId],
        target_size: usize,
    ) -> Result<NodeId> {
        if edge_features.len() != 3 {
            return Err(Error::Arity(format!(
                "edge merging takes exactly 3 feature maps, got {}",
                edge_features.len()
            )));
        }
        let upsampled: Vec<NodeId> = edge_features
            .iter()
            .map(|&f| tape.upsample_bilinear(f, target_size, target_size))
            .collect();
        let cat = tape.concat_channels(&upsampled)?;
        let logits = self.fusion.forward(tape, bind, cat)?;
        Ok(tape.sigmoid(logits))
    }
}
