//! The assembled network: backbone, six mutual-learning modules, the three
//! edge modules with their merger, and the decoder, plus the tape-level loss
//! graph for one training step.
//!
//! Two forward passes exist. The saliency pass runs the whole network; edge
//! modules contribute features (residually injected into the shallow
//! mutual-learning modules) but never compute edge maps. The edge pass runs
//! only the three shallow blocks and produces the per-block edge maps and the
//! merged full-resolution prediction.

use crate::backbone::Backbone;
use crate::config::{ModelConfig, NUM_BLOCKS, NUM_EDGE_MODULES};
use crate::decoder::{Decoder, DecoderNodes};
use crate::edge::{EdgeMerger, EdgeModule};
use crate::error::{Error, Result};
use crate::losses::{EncoderLosses, LossBreakdown};
use crate::mlm::{BranchPolicy, Mlm, MlmNodes};
use crate::nn::{Binding, ParamGroup, ParamStore};
use crate::rng::derive_rng;
use crate::supervision::{GroundTruthBundle, SupervisionSchedule};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

struct EdgeStack {
    modules: Vec<EdgeModule>,
    merger: EdgeMerger,
}

pub struct SaliencyNet {
    cfg: ModelConfig,
    pub store: ParamStore,
    backbone: Backbone,
    mlms: Vec<Mlm>,
    edge: Option<EdgeStack>,
    decoder: Decoder,
    schedule: SupervisionSchedule,
}

/// Everything the saliency-image pass produces, as tape nodes.
pub struct SaliencyPassNodes {
    pub mlm: Vec<MlmNodes>,
    pub decoder: DecoderNodes,
}

/// Everything the edge-image pass produces, as tape nodes.
pub struct EdgePassNodes {
    pub edge_maps: Vec<NodeId>,
    pub e_star: NodeId,
}

/// Scalar loss nodes of one training step.
pub struct LossNodes {
    pub l_s: NodeId,
    pub l_e: Option<NodeId>,
    pub l_mimicry: NodeId,
    pub l_enc: NodeId,
    pub l_dec: NodeId,
    pub total: NodeId,
}

impl SaliencyNet {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = derive_rng(seed, "model-init", 0);
        let backbone = Backbone::build(&cfg.backbone, &mut store, &mut rng)?;
        let mut mlms = Vec::with_capacity(NUM_BLOCKS);
        for block in 0..NUM_BLOCKS {
            mlms.push(Mlm::build(
                &cfg.mlm,
                block,
                cfg.mlm_input_channels(block),
                &mut store,
                &mut rng,
            )?);
        }
        let edge = if cfg.use_edge_modules {
            let mut modules = Vec::with_capacity(NUM_EDGE_MODULES);
            for block in 0..NUM_EDGE_MODULES {
                modules.push(EdgeModule::build(
                    block,
                    cfg.backbone.block_widths[block],
                    cfg.em_channels,
                    &mut store,
                    &mut rng,
                )?);
            }
            let merger = EdgeMerger::build(cfg.em_channels, &mut store, &mut rng)?;
            Some(EdgeStack { modules, merger })
        } else {
            None
        };
        let decoder = Decoder::build(
            cfg.mlm.hidden_channels,
            cfg.decoder_channels(),
            &mut store,
            &mut rng,
        )?;
        Ok(SaliencyNet {
            schedule: SupervisionSchedule::new(cfg.schedule),
            cfg: cfg.clone(),
            store,
            backbone,
            mlms,
            edge,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &SupervisionSchedule {
        &self.schedule
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn edge_modules(&self) -> Option<&[EdgeModule]> {
        self.edge.as_ref().map(|e| e.modules.as_slice())
    }

    pub fn has_edge_modules(&self) -> bool {
        self.edge.is_some()
    }

    pub fn student_count(&self) -> usize {
        self.cfg.mlm.k
    }

    /// Full saliency-image pass. `branch` selects which student's features
    /// feed the decoder (0 during training; the test-time policy may pick
    /// another).
    pub fn saliency_pass(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        image: NodeId,
        branch: usize,
    ) -> Result<SaliencyPassNodes> {
        if branch >= self.cfg.mlm.k {
            return Err(Error::Config(format!(
                "branch {branch} out of range for K={}",
                self.cfg.mlm.k
            )));
        }
        let blocks = self.backbone.forward(tape, bind, image)?;
        let mut mlm_nodes = Vec::with_capacity(NUM_BLOCKS);
        for (bi, block) in blocks.iter().enumerate() {
            let injected = match (&self.edge, bi < NUM_EDGE_MODULES) {
                (Some(stack), true) => {
                    let em = &stack.modules[bi];
                    let features = em.forward_features(tape, bind, block)?;
                    Some(em.residual_inject(tape, bind, features, block.mlm_layer())?)
                }
                _ => None,
            };
            let mut nodes = self.mlms[bi].forward(tape, bind, block, injected)?;
            nodes.decoder_features = nodes.student_features[branch];
            mlm_nodes.push(nodes);
        }
        let decoder = self.decoder.forward(tape, bind, &mlm_nodes)?;
        Ok(SaliencyPassNodes {
            mlm: mlm_nodes,
            decoder,
        })
    }

    /// Edge-image pass: the three shallow backbone blocks, per-block edge
    /// maps, and the merged full-resolution prediction.
    pub fn edge_pass(&self, tape: &mut Tape, bind: &Binding, image: NodeId) -> Result<EdgePassNodes> {
        let stack = self
            .edge
            .as_ref()
            .ok_or_else(|| Error::Config("edge pass requires edge modules".into()))?;
        let blocks = self.backbone.forward_partial(tape, bind, image, NUM_EDGE_MODULES)?;
        let mut features = Vec::with_capacity(NUM_EDGE_MODULES);
        let mut edge_maps = Vec::with_capacity(NUM_EDGE_MODULES);
        for (em, block) in stack.modules.iter().zip(&blocks) {
            let f = em.forward_features(tape, bind, block)?;
            edge_maps.push(em.forward_map(tape, bind, f)?);
            features.push(f);
        }
        let e_star = stack
            .merger
            .merge(tape, bind, &features, self.cfg.backbone.input_size)?;
        Ok(EdgePassNodes { edge_maps, e_star })
    }

    /// Assembles the scalar loss graph for one step: the weighted encoder
    /// total over every head plus the decoder deep-supervision total.
    /// `edge` and `edge_gts` are absent when edge modules are disabled.
    pub fn build_loss_graph(
        &self,
        tape: &mut Tape,
        sal: &SaliencyPassNodes,
        edge: Option<&EdgePassNodes>,
        sal_gts: &GroundTruthBundle,
        edge_gts: Option<&GroundTruthBundle>,
    ) -> Result<LossNodes> {
        let w = &self.cfg.weights;
        let k = self.cfg.mlm.k as f64;

        // saliency heads: mean over students, weighted per block
        let mut s_terms = Vec::new();
        for (bi, nodes) in sal.mlm.iter().enumerate() {
            let target = sal_gts.encoder_target(&self.schedule, bi)?;
            for &pred in &nodes.student_predictions {
                let term = tape.bce(pred, target.clone())?;
                s_terms.push((term, w.r_s[bi] / k));
            }
        }
        let l_s = tape.combine(&s_terms)?;

        // pairwise mimicry over ordered student pairs
        let mut m_terms = Vec::new();
        for (bi, nodes) in sal.mlm.iter().enumerate() {
            let preds = &nodes.student_predictions;
            for n in 0..preds.len() {
                for m in 0..preds.len() {
                    if n != m {
                        let term = tape.pair_mse(preds[n], preds[m])?;
                        m_terms.push((term, 0.5 * w.r_mlm[bi]));
                    }
                }
            }
        }
        let l_mimicry = tape.combine(&m_terms)?;

        // edge heads
        let l_e = match (edge, edge_gts) {
            (Some(pass), Some(gts)) => {
                let pyr = gts
                    .e_pyramid
                    .as_ref()
                    .ok_or_else(|| Error::Config("edge ground truth missing pyramid".into()))?;
                let mut e_terms = Vec::new();
                for (i, &map) in pass.edge_maps.iter().enumerate() {
                    let term = tape.bce(map, pyr[i].clone())?;
                    e_terms.push((term, w.r_e[i]));
                }
                let star = tape.bce(pass.e_star, pyr[0].clone())?;
                e_terms.push((star, 1.0));
                Some(tape.combine(&e_terms)?)
            }
            (None, None) => None,
            _ => {
                return Err(Error::Config(
                    "edge pass and edge ground truth must be supplied together".into(),
                ))
            }
        };

        let l_enc = match l_e {
            Some(le) => tape.combine(&[(l_s, w.theta_s), (le, w.theta_e), (l_mimicry, w.theta_m)])?,
            None => tape.combine(&[(l_s, w.theta_s), (l_mimicry, w.theta_m)])?,
        };

        // decoder deep supervision
        let mut d_terms = Vec::new();
        for (i, &pred) in sal.decoder.predictions.iter().enumerate() {
            let target = sal_gts.decoder_target(&self.schedule, i)?;
            let term = tape.bce(pred, target.clone())?;
            d_terms.push((term, w.r_dec[i]));
            if self.schedule.decoder_extra_fc[i] {
                let extra = tape.bce(pred, sal_gts.decoder_extra_fc_target(i).clone())?;
                d_terms.push((extra, w.r_dec[i]));
            }
        }
        let l_dec = tape.combine(&d_terms)?;
        let total = tape.combine(&[(l_enc, 1.0), (l_dec, 1.0)])?;
        Ok(LossNodes {
            l_s,
            l_e,
            l_mimicry,
            l_enc,
            l_dec,
            total,
        })
    }

    /// Reads the loss nodes back as plain numbers.
    pub fn breakdown(&self, tape: &Tape, nodes: &LossNodes) -> LossBreakdown {
        let enc = EncoderLosses {
            l_s: tape.value(nodes.l_s).item(),
            l_e: nodes.l_e.map_or(0.0, |id| tape.value(id).item()),
            l_mimicry: tape.value(nodes.l_mimicry).item(),
            l_enc: tape.value(nodes.l_enc).item(),
        };
        LossBreakdown::compose(enc, tape.value(nodes.l_dec).item())
    }

    /// Mean pairwise L2 distance between student predictions at each block
    /// (unordered pairs, averaged), on one image. Zero everywhere when K = 1.
    pub fn student_disagreement(&self, image: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bind = Binding::bind(&self.store, &mut tape);
        let img = tape.leaf(image.clone());
        let sal = self.saliency_pass(&mut tape, &bind, img, 0)?;
        let mut out = Vec::with_capacity(NUM_BLOCKS);
        for nodes in &sal.mlm {
            let preds: Vec<&Tensor> = nodes
                .student_predictions
                .iter()
                .map(|&id| tape.value(id))
                .collect();
            let k = preds.len();
            if k < 2 {
                out.push(0.0);
                continue;
            }
            let mut acc = 0.0;
            let mut pairs = 0.0;
            for n in 0..k {
                for m in (n + 1)..k {
                    acc += crate::losses::mse_mean(preds[n], preds[m])?;
                    pairs += 1.0;
                }
            }
            out.push(acc / pairs);
        }
        Ok(out)
    }

    /// Inference: resizes `image` to the network input, runs the saliency pass
    /// (and the edge pass when edge modules exist), and resizes the outputs
    /// back to the original dimensions.
    pub fn predict(&self, image: &Tensor, policy: BranchPolicy) -> Result<Prediction> {
        if !image.is_chw() || image.c() != 3 {
            return Err(Error::Shape(format!(
                "predict expects a [3, h, w] image, got {:?}",
                image.shape()
            )));
        }
        let branch = match policy {
            BranchPolicy::Fixed(i) => {
                if i >= self.cfg.mlm.k {
                    return Err(Error::Config(format!(
                        "branch index {i} out of range for K={}",
                        self.cfg.mlm.k
                    )));
                }
                i
            }
            BranchPolicy::SeededRandom(seed) => {
                use rand::Rng;
                derive_rng(seed, "test-branch", 0).gen_range(0..self.cfg.mlm.k)
            }
        };
        let (oh, ow) = (image.h(), image.w());
        let s = self.cfg.backbone.input_size;
        let resized = crate::kernels::bilinear_forward(image, s, s);
        let mut tape = Tape::new();
        let bind = Binding::bind(&self.store, &mut tape);
        let img = tape.leaf(resized);
        let sal = self.saliency_pass(&mut tape, &bind, img, branch)?;
        let saliency =
            crate::kernels::bilinear_forward(tape.value(sal.decoder.final_map), oh, ow);
        let edge = if self.edge.is_some() {
            let pass = self.edge_pass(&mut tape, &bind, img)?;
            Some(crate::kernels::bilinear_forward(
                tape.value(pass.e_star),
                oh,
                ow,
            ))
        } else {
            None
        };
        Ok(Prediction { saliency, edge })
    }
}

/// Inference output resized to the source image dimensions, values in (0, 1).
#[derive(Debug, Clone)]
pub struct Prediction {
    pub saliency: Tensor,
    pub edge: Option<Tensor>,
}

/// Splits all parameters into the two optimizer groups, preserving
/// registration order.
pub fn group_partition(store: &ParamStore) -> (Vec<crate::nn::ParamId>, Vec<crate::nn::ParamId>) {
    let mut encoder = Vec::new();
    let mut decoder = Vec::new();
    for (id, p) in store.iter() {
        match p.group {
            ParamGroup::Encoder => encoder.push(id),
            ParamGroup::Decoder => decoder.push(id),
        }
    }
    (encoder, decoder)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::supervision::{
        block_scales, build_pyramids, extract_foreground_contour, CONTOUR_HIGH, CONTOUR_LOW,
    };

    fn test_image(seed: f64) -> Tensor {
        Tensor::from_vec(
            &[3, 64, 64],
            (0..3 * 64 * 64)
                .map(|i| ((i as f64 * 0.113 + seed).sin() * 0.5 + 0.5).clamp(0.0, 1.0))
                .collect(),
        )
        .unwrap()
    }

    fn square_bundle(with_edges: bool) -> GroundTruthBundle {
        let mut mask = Tensor::zeros(&[1, 64, 64]);
        for y in 18..46 {
            for x in 14..50 {
                mask.data_mut()[y * 64 + x] = 1.0;
            }
        }
        let contour = extract_foreground_contour(&mask, CONTOUR_LOW, CONTOUR_HIGH).unwrap();
        let edges = with_edges.then(|| contour.clone());
        build_pyramids(&mask, &contour, edges.as_ref(), &block_scales(64)).unwrap()
    }

    #[test]
    fn parameter_partition_covers_everything_once() {
        let net = SaliencyNet::new(&ModelConfig::tiny(), 1).unwrap();
        let (enc, dec) = group_partition(&net.store);
        assert_eq!(enc.len() + dec.len(), net.store.len());
        assert!(!enc.is_empty() && !dec.is_empty());
        for id in &enc {
            assert!(net.store.get(*id).name.starts_with("backbone.")
                || net.store.get(*id).name.starts_with("mlm")
                || net.store.get(*id).name.starts_with("em"));
        }
        for id in &dec {
            assert!(net.store.get(*id).name.starts_with("decoder."));
        }
    }

    #[test]
    fn saliency_pass_shapes_and_edge_map_isolation() {
        let net = SaliencyNet::new(&ModelConfig::tiny(), 2).unwrap();
        let mut tape = Tape::new();
        let bind = Binding::bind(&net.store, &mut tape);
        let img = tape.leaf(test_image(0.0));
        let sal = net.saliency_pass(&mut tape, &bind, img, 0).unwrap();
        assert_eq!(sal.mlm.len(), 6);
        for (bi, nodes) in sal.mlm.iter().enumerate() {
            assert_eq!(nodes.student_predictions.len(), 3);
            let expect = 64 >> bi.min(5);
            for &p in &nodes.student_predictions {
                assert_eq!(tape.value(p).shape(), &[1, expect, expect]);
            }
        }
        let dec_sizes: Vec<usize> = sal
            .decoder
            .predictions
            .iter()
            .map(|&p| tape.value(p).h())
            .collect();
        assert_eq!(dec_sizes, vec![4, 8, 16, 32, 64]);

        // the saliency pass must not compute any edge maps
        for em in net.edge_modules().unwrap() {
            assert_eq!(em.map_evals.get(), 0);
            assert_eq!(em.feature_evals.get(), 1);
        }

        // the edge pass computes exactly one map per module plus the merger
        let edge = net.edge_pass(&mut tape, &bind, img).unwrap();
        assert_eq!(edge.edge_maps.len(), 3);
        assert_eq!(tape.value(edge.e_star).shape(), &[1, 64, 64]);
        for em in net.edge_modules().unwrap() {
            assert_eq!(em.map_evals.get(), 1);
            assert_eq!(em.feature_evals.get(), 2);
        }
    }

    #[test]
    fn disabled_edge_modules_reject_edge_pass() {
        let mut cfg = ModelConfig::tiny();
        cfg.use_edge_modules = false;
        let net = SaliencyNet::new(&cfg, 2).unwrap();
        let mut tape = Tape::new();
        let bind = Binding::bind(&net.store, &mut tape);
        let img = tape.leaf(test_image(0.0));
        assert!(net.saliency_pass(&mut tape, &bind, img, 0).is_ok());
        assert!(matches!(
            net.edge_pass(&mut tape, &bind, img),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn loss_graph_matches_value_level_losses() {
        let net = SaliencyNet::new(&ModelConfig::tiny(), 3).unwrap();
        let sal_gts = square_bundle(false);
        let edge_gts = square_bundle(true);
        let mut tape = Tape::new();
        let bind = Binding::bind(&net.store, &mut tape);
        let img_s = tape.leaf(test_image(0.0));
        let img_e = tape.leaf(test_image(5.0));
        let sal = net.saliency_pass(&mut tape, &bind, img_s, 0).unwrap();
        let edge = net.edge_pass(&mut tape, &bind, img_e).unwrap();
        let nodes = net
            .build_loss_graph(&mut tape, &sal, Some(&edge), &sal_gts, Some(&edge_gts))
            .unwrap();
        let breakdown = net.breakdown(&tape, &nodes);
        assert!(breakdown.is_finite());
        // the encoder identity holds to machine precision
        let expect = 0.7 * breakdown.l_s + 0.2 * breakdown.l_e + 0.1 * breakdown.l_mimicry;
        assert!((breakdown.l_enc - expect).abs() < 1e-12);
        assert_eq!(breakdown.total, breakdown.l_enc + breakdown.l_dec);

        // cross-check against the value-level loss functions
        let mlm_preds: Vec<Vec<Tensor>> = sal
            .mlm
            .iter()
            .map(|m| {
                m.student_predictions
                    .iter()
                    .map(|&id| tape.value(id).clone())
                    .collect()
            })
            .collect();
        let em_preds: Vec<Tensor> = edge
            .edge_maps
            .iter()
            .map(|&id| tape.value(id).clone())
            .collect();
        let e_star = tape.value(edge.e_star).clone();
        let enc = crate::losses::encoder_loss(
            &mlm_preds,
            &em_preds,
            Some(&e_star),
            &sal_gts,
            Some(&edge_gts),
            net.schedule(),
            &net.config().weights,
        )
        .unwrap();
        assert!((enc.l_enc - breakdown.l_enc).abs() < 1e-12);
        let dec_preds: Vec<Tensor> = sal
            .decoder
            .predictions
            .iter()
            .map(|&id| tape.value(id).clone())
            .collect();
        let l_dec = crate::losses::decoder_loss(
            &dec_preds,
            &sal_gts,
            net.schedule(),
            &net.config().weights.r_dec,
        )
        .unwrap();
        assert!((l_dec - breakdown.l_dec).abs() < 1e-12);
    }

    #[test]
    fn predict_returns_source_dimensions_and_unit_range() {
        let net = SaliencyNet::new(&ModelConfig::tiny(), 4).unwrap();
        let image = Tensor::from_vec(
            &[3, 48, 80],
            (0..3 * 48 * 80)
                .map(|i| ((i as f64 * 0.07).cos() * 0.5 + 0.5).clamp(0.0, 1.0))
                .collect(),
        )
        .unwrap();
        let out = net.predict(&image, BranchPolicy::Fixed(0)).unwrap();
        assert_eq!(out.saliency.shape(), &[1, 48, 80]);
        assert!(out.saliency.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let edge = out.edge.unwrap();
        assert_eq!(edge.shape(), &[1, 48, 80]);
        // same checkpoint and image, fixed branch: identical outputs
        let again = net.predict(&image, BranchPolicy::Fixed(0)).unwrap();
        assert_eq!(out.saliency.data(), again.saliency.data());
        // out-of-range fixed branch
        assert!(net.predict(&image, BranchPolicy::Fixed(7)).is_err());
    }
}
