//! Deeply supervised U-shaped decoder.
//!
//! Block D0 fuses the pooled block's mutual-learning features (upsampled x2 by
//! a transposed convolution) with block 4's; each later block Di fuses the
//! previous block's upsampled output with block (4-i)'s features. Every block
//! carries a one-channel sigmoid head; D4's head is the final full-resolution
//! saliency map.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mlm::MlmNodes;
use crate::nn::{Binding, Conv2dLayer, ConvT2Layer, Init, ParamGroup, ParamStore};
use crate::tape::{NodeId, Tape};
use crate::tensor::ProbabilityMap;

struct DecoderBlock {
    conv0: Conv2dLayer,
    conv1: Conv2dLayer,
    head: Conv2dLayer,
    /// Upsampling into the next block; absent on D4.
    up: Option<ConvT2Layer>,
}

pub struct Decoder {
    /// Transposed convolution lifting the pooled block's features into D0.
    seed_up: ConvT2Layer,
    blocks: Vec<DecoderBlock>,
}

/// Tape-level decoder outputs: five supervision heads ordered D0 -> D4.
pub struct DecoderNodes {
    pub predictions: Vec<NodeId>,
    /// Alias of `predictions[4]` (same node), at input resolution.
    pub final_map: NodeId,
}

/// Value-level decoder outputs.
#[derive(Debug, Clone)]
pub struct DecoderOutput {
    pub predictions: Vec<ProbabilityMap>,
    pub final_map: ProbabilityMap,
}

impl Decoder {
    pub fn build(
        mlm_channels: usize,
        decoder_channels: usize,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let seed_up = ConvT2Layer::new(
            store,
            rng,
            "decoder.seed_up",
            ParamGroup::Decoder,
            mlm_channels,
            decoder_channels,
        )?;
        let mut blocks = Vec::with_capacity(5);
        for i in 0..5 {
            let prefix = format!("decoder.d{i}");
            let cin = decoder_channels + mlm_channels;
            let conv0 = Conv2dLayer::new(
                store,
                rng,
                &format!("{prefix}.conv0"),
                ParamGroup::Decoder,
                cin,
                decoder_channels,
                3,
                1,
                Init::HeNormal,
            )?;
            let conv1 = Conv2dLayer::new(
                store,
                rng,
                &format!("{prefix}.conv1"),
                ParamGroup::Decoder,
                decoder_channels,
                decoder_channels,
                3,
                1,
                Init::HeNormal,
            )?;
            let head = Conv2dLayer::new(
                store,
                rng,
                &format!("{prefix}.head"),
                ParamGroup::Decoder,
                decoder_channels,
                1,
                1,
                1,
                Init::HeNormal,
            )?;
            let up = if i < 4 {
                Some(ConvT2Layer::new(
                    store,
                    rng,
                    &format!("{prefix}.up"),
                    ParamGroup::Decoder,
                    decoder_channels,
                    decoder_channels,
                )?)
            } else {
                None
            };
            blocks.push(DecoderBlock {
                conv0,
                conv1,
                head,
                up,
            });
        }
        Ok(Decoder { seed_up, blocks })
    }

    /// Consumes the six mutual-learning modules' decoder features and emits
    /// the five supervision heads. Inputs must be ordered block 0 -> block 5
    /// with strictly decreasing spatial sizes.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        mlm_outputs: &[MlmNodes],
    ) -> Result<DecoderNodes> {
        if mlm_outputs.len() != 6 {
            return Err(Error::Shape(format!(
                "decoder takes 6 module outputs, got {}",
                mlm_outputs.len()
            )));
        }
        let sizes: Vec<usize> = mlm_outputs
            .iter()
            .map(|m| tape.value(m.decoder_features).h())
            .collect();
        if sizes.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Shape(format!(
                "module features must strictly shrink toward deeper blocks, got {sizes:?}"
            )));
        }
        // carry: upsampled features entering block Di
        let mut carry = self.seed_up.forward(tape, bind, mlm_outputs[5].decoder_features)?;
        let mut predictions = Vec::with_capacity(5);
        for (i, block) in self.blocks.iter().enumerate() {
            let skip = mlm_outputs[4 - i].decoder_features;
            let cat = tape.concat_channels(&[carry, skip])?;
            let x = block.conv0.forward(tape, bind, cat)?;
            let x = tape.relu(x);
            let x = block.conv1.forward(tape, bind, x)?;
            let x = tape.relu(x);
            let logits = block.head.forward(tape, bind, x)?;
            predictions.push(tape.sigmoid(logits));
            if let Some(up) = &block.up {
                carry = up.forward(tape, bind, x)?;
            }
        }
        Ok(DecoderNodes {
            final_map: predictions[4],
            predictions,
        })
    }
}

/// Extracts plain tensors from decoder nodes.
pub fn decoder_values(tape: &Tape, nodes: &DecoderNodes) -> DecoderOutput {
    DecoderOutput {
        predictions: nodes
            .predictions
            .iter()
            .map(|&id| tape.value(id).clone())
            .collect(),
        final_map: tape.value(nodes.final_map).clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    fn fake_mlm_nodes(tape: &mut Tape, c: usize, sizes: &[usize]) -> Vec<MlmNodes> {
        sizes
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let feat = tape.leaf(Tensor::from_vec(
                    &[c, s, s],
                    (0..c * s * s)
                        .map(|j| ((j + i * 1000) as f64 * 0.013).sin() * 0.3)
                        .collect(),
                ).unwrap());
                MlmNodes {
                    student_features: vec![feat],
                    student_predictions: vec![],
                    decoder_features: feat,
                }
            })
            .collect()
    }

    fn build_decoder() -> (Decoder, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let dec = Decoder::build(32, 32, &mut store, &mut rng).unwrap();
        (dec, store)
    }

    #[test]
    fn tiny_chain_produces_doubling_predictions() {
        let (dec, store) = build_decoder();
        let mut tape = Tape::new();
        let bind = Binding::bind(&store, &mut tape);
        let mlms = fake_mlm_nodes(&mut tape, 32, &[64, 32, 16, 8, 4, 2]);
        let out = dec.forward(&mut tape, &bind, &mlms).unwrap();
        let sizes: Vec<usize> = out
            .predictions
            .iter()
            .map(|&p| tape.value(p).h())
            .collect();
        assert_eq!(sizes, vec![4, 8, 16, 32, 64]);
        assert_eq!(tape.value(out.final_map).shape(), &[1, 64, 64]);
        assert_eq!(out.final_map, out.predictions[4]);
        for &p in &out.predictions {
            assert!(tape.value(p).data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn wrong_count_or_non_monotone_sizes_rejected() {
        let (dec, store) = build_decoder();
        let mut tape = Tape::new();
        let bind = Binding::bind(&store, &mut tape);
        let five = fake_mlm_nodes(&mut tape, 32, &[64, 32, 16, 8, 4]);
        assert!(matches!(
            dec.forward(&mut tape, &bind, &five),
            Err(Error::Shape(_))
        ));
        let non_monotone = fake_mlm_nodes(&mut tape, 32, &[64, 32, 32, 8, 4, 2]);
        assert!(matches!(
            dec.forward(&mut tape, &bind, &non_monotone),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn forward_is_deterministic() {
        let (dec, store) = build_decoder();
        let run = || {
            let mut tape = Tape::new();
            let bind = Binding::bind(&store, &mut tape);
            let mlms = fake_mlm_nodes(&mut tape, 32, &[64, 32, 16, 8, 4, 2]);
            let out = dec.forward(&mut tape, &bind, &mlms).unwrap();
            tape.value(out.final_map).clone()
        };
        assert_eq!(run().data(), run().data());
    }

    #[test]
    fn gradients_reach_every_mlm_feature() {
        let (dec, store) = build_decoder();
        let mut tape = Tape::new();
        let bind = Binding::bind(&store, &mut tape);
        let mlms = fake_mlm_nodes(&mut tape, 32, &[64, 32, 16, 8, 4, 2]);
        let out = dec.forward(&mut tape, &bind, &mlms).unwrap();
        // scalar objective touching all five heads
        let sq: Vec<(NodeId, f64)> = out
            .predictions
            .iter()
            .map(|&p| (tape.sum_squares(p), 1.0))
            .collect();
        let loss = tape.combine(&sq).unwrap();
        tape.backward(loss).unwrap();
        for m in &mlms {
            let g = tape.grad(m.decoder_features).expect("gradient present");
            let norm: f64 = g.data().iter().map(|v| v * v).sum();
            assert!(norm > 0.0, "zero gradient at an encoder feature");
        }
    }
}
