//! Mutual Learning Module: K parallel student sub-networks per encoder block.
//!
//! Each student is a three-convolution branch (the first with the block's
//! kernel/dilation schedule) plus a one-channel sigmoid head. Students share
//! nothing in the forward pass; they interact only through the pairwise L2
//! mimicry loss at training time. Branch 0 is the designated branch whose
//! pre-head features feed the decoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::BlockFeatureNodes;
use crate::config::MlmConfig;
use crate::error::{Error, Result};
use crate::nn::{Binding, Conv2dLayer, Init, ParamGroup, ParamStore};
use crate::tape::{NodeId, Tape};
use crate::tensor::{ProbabilityMap, Tensor};

struct Student {
    conv0: Conv2dLayer,
    conv1: Conv2dLayer,
    conv2: Conv2dLayer,
    head: Conv2dLayer,
}

pub struct Mlm {
    pub block_index: usize,
    input_channels: usize,
    students: Vec<Student>,
}

/// Tape-level outputs of one module.
pub struct MlmNodes {
    pub student_features: Vec<NodeId>,
    pub student_predictions: Vec<NodeId>,
    /// The designated branch's pre-head features, consumed by the decoder.
    pub decoder_features: NodeId,
}

/// Value-level outputs for inspection and branch selection.
#[derive(Debug, Clone)]
pub struct MlmOutput {
    pub student_features: Vec<Tensor>,
    pub student_predictions: Vec<ProbabilityMap>,
    pub decoder_features: Tensor,
}

/// How a prediction branch is picked at test time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchPolicy {
    /// Always the same branch; index 0 is the reproducible default.
    Fixed(usize),
    /// Uniform draw over branches from a recorded seed.
    SeededRandom(u64),
}

impl Default for BranchPolicy {
    fn default() -> Self {
        BranchPolicy::Fixed(0)
    }
}

/// Picks one student's prediction map per the policy.
pub fn select_test_branch(output: &MlmOutput, policy: BranchPolicy) -> Result<ProbabilityMap> {
    let k = output.student_predictions.len();
    let idx = match policy {
        BranchPolicy::Fixed(i) => {
            if i >= k {
                return Err(Error::Config(format!(
                    "branch index {i} out of range for K={k}"
                )));
            }
            i
        }
        BranchPolicy::SeededRandom(seed) => ChaCha8Rng::seed_from_u64(seed).gen_range(0..k),
    };
    Ok(output.student_predictions[idx].clone())
}

impl Mlm {
    pub fn build(
        cfg: &MlmConfig,
        block_index: usize,
        input_channels: usize,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        if block_index > 5 {
            return Err(Error::Config(format!("block index {block_index} > 5")));
        }
        let k = cfg.kernel_size_per_block[block_index];
        let dil = cfg.dilation_per_block[block_index];
        let hidden = cfg.hidden_channels;
        let mut students = Vec::with_capacity(cfg.k);
        for s in 0..cfg.k {
            let prefix = format!("mlm{block_index}.student{s}");
            students.push(Student {
                conv0: Conv2dLayer::new(
                    store,
                    rng,
                    &format!("{prefix}.conv0"),
                    ParamGroup::Encoder,
                    input_channels,
                    hidden,
                    k,
                    dil,
                    Init::HeNormal,
                )?,
                conv1: Conv2dLayer::new(
                    store,
                    rng,
                    &format!("{prefix}.conv1"),
                    ParamGroup::Encoder,
                    hidden,
                    hidden,
                    3,
                    1,
                    Init::HeNormal,
                )?,
                conv2: Conv2dLayer::new(
                    store,
                    rng,
                    &format!("{prefix}.conv2"),
                    ParamGroup::Encoder,
                    hidden,
                    hidden,
                    3,
                    1,
                    Init::HeNormal,
                )?,
                head: Conv2dLayer::new(
                    store,
                    rng,
                    &format!("{prefix}.head"),
                    ParamGroup::Encoder,
                    hidden,
                    1,
                    1,
                    1,
                    Init::HeNormal,
                )?,
            });
        }
        Ok(Mlm {
            block_index,
            input_channels,
            students,
        })
    }

    pub fn student_count(&self) -> usize {
        self.students.len()
    }

    /// Runs every student on the block's designated layer, or on `injected`
    /// (the edge-residual-combined feature) when present.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        block: &BlockFeatureNodes,
        injected: Option<NodeId>,
    ) -> Result<MlmNodes> {
        if block.block_index != self.block_index {
            return Err(Error::Config(format!(
                "module for block {} fed block {}",
                self.block_index, block.block_index
            )));
        }
        let base = block.mlm_layer();
        let input = match injected {
            Some(node) => {
                let (bh, bw) = (tape.value(base).h(), tape.value(base).w());
                let v = tape.value(node);
                if v.h() != bh || v.w() != bw {
                    return Err(Error::Shape(format!(
                        "injected features {}x{} do not match block size {}x{}",
                        v.h(),
                        v.w(),
                        bh,
                        bw
                    )));
                }
                if v.c() != self.input_channels {
                    return Err(Error::Shape(format!(
                        "injected features have {} channels, expected {}",
                        v.c(),
                        self.input_channels
                    )));
                }
                node
            }
            None => base,
        };
        let mut student_features = Vec::with_capacity(self.students.len());
        let mut student_predictions = Vec::with_capacity(self.students.len());
        for s in &self.students {
            let x = s.conv0.forward(tape, bind, input)?;
            let x = tape.relu(x);
            let x = s.conv1.forward(tape, bind, x)?;
            let x = tape.relu(x);
            let feat = s.conv2.forward(tape, bind, x)?;
            let logits = s.head.forward(tape, bind, feat)?;
            let pred = tape.sigmoid(logits);
            student_features.push(feat);
            student_predictions.push(pred);
        }
        Ok(MlmNodes {
            decoder_features: student_features[0],
            student_features,
            student_predictions,
        })
    }

    /// Value-level forward on a throwaway tape (no injection), for inspection.
    pub fn forward_values(
        &self,
        store: &ParamStore,
        block_input: &Tensor,
    ) -> Result<MlmOutput> {
        let mut tape = Tape::new();
        let bind = Binding::bind(store, &mut tape);
        let x = tape.leaf(block_input.clone());
        // wrap the raw tensor as a single-layer block so indexing stays uniform
        let block = BlockFeatureNodes {
            block_index: self.block_index,
            layers: vec![x; 3],
            spatial_scale: 1 << self.block_index.min(5),
        };
        let nodes = self.forward(&mut tape, &bind, &block, None)?;
        Ok(MlmOutput {
            student_features: nodes
                .student_features
                .iter()
                .map(|&id| tape.value(id).clone())
                .collect(),
            student_predictions: nodes
                .student_predictions
                .iter()
                .map(|&id| tape.value(id).clone())
                .collect(),
            decoder_features: tape.value(nodes.decoder_features).clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn build_block2(k: usize) -> (Mlm, ParamStore) {
        let mut cfg = ModelConfig::tiny().mlm;
        cfg.k = k;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mlm = Mlm::build(&cfg, 2, 32, &mut store, &mut rng).unwrap();
        (mlm, store)
    }

    fn input_16() -> Tensor {
        Tensor::from_vec(
            &[32, 16, 16],
            (0..32 * 256).map(|i| (i as f64 * 0.031).sin() * 0.4).collect(),
        )
        .unwrap()
    }

    #[test]
    fn predictions_have_block_shape_and_open_unit_range() {
        let (mlm, store) = build_block2(3);
        let out = mlm.forward_values(&store, &input_16()).unwrap();
        assert_eq!(out.student_predictions.len(), 3);
        for p in &out.student_predictions {
            assert_eq!(p.shape(), &[1, 16, 16]);
            assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
        assert_eq!(out.decoder_features.data(), out.student_features[0].data());
    }

    #[test]
    fn identical_students_produce_identical_predictions() {
        let (mlm, mut store) = build_block2(2);
        // copy student 0's parameters onto student 1
        for layer in ["conv0", "conv1", "conv2", "head"] {
            for suffix in ["weight", "bias"] {
                let src = store
                    .by_name(&format!("mlm2.student0.{layer}.{suffix}"))
                    .unwrap()
                    .1
                    .value
                    .clone();
                let (dst, _) = store
                    .by_name(&format!("mlm2.student1.{layer}.{suffix}"))
                    .unwrap();
                *store.value_mut(dst) = src;
            }
        }
        let out = mlm.forward_values(&store, &input_16()).unwrap();
        assert_eq!(
            out.student_predictions[0].data(),
            out.student_predictions[1].data()
        );
    }

    #[test]
    fn permuting_students_permutes_outputs() {
        let (mlm, mut store) = build_block2(2);
        let out_before = mlm.forward_values(&store, &input_16()).unwrap();
        // swap the two students' parameters
        for layer in ["conv0", "conv1", "conv2", "head"] {
            for suffix in ["weight", "bias"] {
                let a = store
                    .by_name(&format!("mlm2.student0.{layer}.{suffix}"))
                    .unwrap()
                    .0;
                let b = store
                    .by_name(&format!("mlm2.student1.{layer}.{suffix}"))
                    .unwrap()
                    .0;
                let tmp = store.get(a).value.clone();
                *store.value_mut(a) = store.get(b).value.clone();
                *store.value_mut(b) = tmp;
            }
        }
        let out_after = mlm.forward_values(&store, &input_16()).unwrap();
        assert_eq!(
            out_before.student_predictions[0].data(),
            out_after.student_predictions[1].data()
        );
        assert_eq!(
            out_before.student_predictions[1].data(),
            out_after.student_predictions[0].data()
        );
    }

    #[test]
    fn injected_shape_mismatch_is_shape_error() {
        let (mlm, store) = build_block2(1);
        let mut tape = Tape::new();
        let bind = Binding::bind(&store, &mut tape);
        let x = tape.leaf(input_16());
        let block = BlockFeatureNodes {
            block_index: 2,
            layers: vec![x; 3],
            spatial_scale: 4,
        };
        let bad = tape.leaf(Tensor::zeros(&[32, 8, 8]));
        assert!(matches!(
            mlm.forward(&mut tape, &bind, &block, Some(bad)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn branch_selection_policies() {
        let (mlm, store) = build_block2(3);
        let out = mlm.forward_values(&store, &input_16()).unwrap();
        let fixed = select_test_branch(&out, BranchPolicy::Fixed(1)).unwrap();
        assert_eq!(fixed.data(), out.student_predictions[1].data());
        let a = select_test_branch(&out, BranchPolicy::SeededRandom(42)).unwrap();
        let b = select_test_branch(&out, BranchPolicy::SeededRandom(42)).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(matches!(
            select_test_branch(&out, BranchPolicy::Fixed(5)),
            Err(Error::Config(_))
        ));
    }
}
