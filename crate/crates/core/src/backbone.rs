//! VGG-16-shaped encoder truncated after the final pooling stage.
//!
//! Thirteen 3x3 convolutions in five blocks (2-2-3-3-3), each followed by
//! ReLU, with 2x2 max pooling between blocks; the sixth block is the final
//! pooled map alone. Every convolution's activations are exposed because the
//! mutual-learning and edge modules index individual layers within a block.

use rand_chacha::ChaCha8Rng;

use crate::archive::Archive;
use crate::config::{BackboneConfig, InitPolicy, CONVS_PER_BLOCK, NUM_BLOCKS};
use crate::error::{Error, Result};
use crate::nn::{Binding, Conv2dLayer, Init, ParamGroup, ParamStore};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Per-block activations at the tape level.
#[derive(Debug, Clone)]
pub struct BlockFeatureNodes {
    pub block_index: usize,
    /// One entry per convolution layer (post-ReLU); block 5 holds the single
    /// pooled map.
    pub layers: Vec<NodeId>,
    /// Downsampling factor of this block's maps relative to the input.
    pub spatial_scale: usize,
}

impl BlockFeatureNodes {
    /// The layer the block's mutual-learning module consumes: the second
    /// convolution for blocks 0-1, the third for blocks 2-4, the pooled map
    /// for block 5.
    pub fn mlm_layer(&self) -> NodeId {
        match self.block_index {
            0 | 1 => self.layers[1],
            2..=4 => self.layers[2],
            _ => self.layers[0],
        }
    }
}

/// Value-level counterpart of [`BlockFeatureNodes`] for inspection and tests.
#[derive(Debug, Clone)]
pub struct BlockFeatures {
    pub block_index: usize,
    pub layers: Vec<Tensor>,
    pub spatial_scale: usize,
}

pub struct Backbone {
    cfg: BackboneConfig,
    blocks: Vec<Vec<Conv2dLayer>>,
}

impl Backbone {
    /// Registers the thirteen convolution layers. Random parameters come from
    /// `rng`; the external-weights policy overwrites them from the archive at
    /// `cfg.weights_file`.
    pub fn build(cfg: &BackboneConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut blocks = Vec::with_capacity(5);
        let mut cin = 3;
        for (bi, &width) in cfg.block_widths.iter().enumerate() {
            let mut layers = Vec::with_capacity(CONVS_PER_BLOCK[bi]);
            for li in 0..CONVS_PER_BLOCK[bi] {
                layers.push(Conv2dLayer::new(
                    store,
                    rng,
                    &format!("backbone.block{bi}.conv{li}"),
                    ParamGroup::Encoder,
                    cin,
                    width,
                    3,
                    1,
                    Init::HeNormal,
                )?);
                cin = width;
            }
            blocks.push(layers);
        }
        let backbone = Backbone {
            cfg: cfg.clone(),
            blocks,
        };
        if cfg.init_policy == InitPolicy::ExternalWeightsFile {
            let path = cfg
                .weights_file
                .as_ref()
                .ok_or_else(|| Error::Config("missing weights_file".into()))?;
            backbone.load_weights(store, &Archive::read_from(path)?)?;
        }
        Ok(backbone)
    }

    /// Overwrites convolution parameters from archive entries keyed
    /// `block{i}.conv{j}.weight|bias`. Shapes must match exactly.
    pub fn load_weights(&self, store: &mut ParamStore, archive: &Archive) -> Result<()> {
        for (bi, layers) in self.blocks.iter().enumerate() {
            for (li, layer) in layers.iter().enumerate() {
                for (suffix, pid) in [("weight", layer.weight), ("bias", layer.bias)] {
                    let key = format!("block{bi}.conv{li}.{suffix}");
                    let src = archive
                        .get(&key)
                        .ok_or_else(|| Error::Load(format!("weights file missing {key}")))?;
                    let dst = store.value_mut(pid);
                    if src.shape() != dst.shape() {
                        return Err(Error::Load(format!(
                            "{key}: expected shape {:?}, file has {:?}",
                            dst.shape(),
                            src.shape()
                        )));
                    }
                    *dst = src.clone();
                }
            }
        }
        Ok(())
    }

    /// Exports convolution parameters under the weights-file key scheme.
    pub fn export_weights(&self, store: &ParamStore) -> Archive {
        let mut entries = Vec::new();
        for (bi, layers) in self.blocks.iter().enumerate() {
            for (li, layer) in layers.iter().enumerate() {
                entries.push((
                    format!("block{bi}.conv{li}.weight"),
                    store.get(layer.weight).value.clone(),
                ));
                entries.push((
                    format!("block{bi}.conv{li}.bias"),
                    store.get(layer.bias).value.clone(),
                ));
            }
        }
        Archive {
            meta: "backbone weights".into(),
            entries,
        }
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Runs the encoder on an already-inserted image leaf and returns the six
    /// blocks' activations. The image must be `[3, input_size, input_size]`
    /// and finite.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        image: NodeId,
    ) -> Result<Vec<BlockFeatureNodes>> {
        self.forward_partial(tape, bind, image, NUM_BLOCKS)
    }

    /// Runs only the first `count` blocks (the edge pass needs just the three
    /// shallow ones). `count = 6` includes the final pooled stage.
    pub fn forward_partial(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        image: NodeId,
        count: usize,
    ) -> Result<Vec<BlockFeatureNodes>> {
        if count == 0 || count > NUM_BLOCKS {
            return Err(Error::Config(format!("block count {count} out of range")));
        }
        let s = self.cfg.input_size;
        {
            let img = tape.value(image);
            if img.shape() != [3, s, s] {
                return Err(Error::Shape(format!(
                    "backbone expects [3, {s}, {s}], got {:?}",
                    img.shape()
                )));
            }
            if !img.all_finite() {
                return Err(Error::Validation("non-finite input image".into()));
            }
        }
        let mut features = Vec::with_capacity(count);
        let mut x = image;
        for (bi, layers) in self.blocks.iter().enumerate().take(count) {
            let mut layer_nodes = Vec::with_capacity(layers.len());
            for layer in layers {
                x = layer.forward(tape, bind, x)?;
                x = tape.relu(x);
                layer_nodes.push(x);
            }
            features.push(BlockFeatureNodes {
                block_index: bi,
                layers: layer_nodes,
                spatial_scale: 1 << bi,
            });
            if features.len() == count {
                return Ok(features);
            }
            x = tape.maxpool2(x)?;
        }
        features.push(BlockFeatureNodes {
            block_index: 5,
            layers: vec![x],
            spatial_scale: 32,
        });
        Ok(features)
    }

    /// Convenience wrapper: builds a throwaway tape and returns activations as
    /// plain tensors.
    pub fn forward_values(&self, store: &ParamStore, image: &Tensor) -> Result<Vec<BlockFeatures>> {
        let mut tape = Tape::new();
        let bind = Binding::bind(store, &mut tape);
        let img = tape.leaf(image.clone());
        let nodes = self.forward(&mut tape, &bind, img)?;
        Ok(nodes
            .into_iter()
            .map(|b| BlockFeatures {
                block_index: b.block_index,
                layers: b.layers.iter().map(|&id| tape.value(id).clone()).collect(),
                spatial_scale: b.spatial_scale,
            })
            .collect())
    }
}
