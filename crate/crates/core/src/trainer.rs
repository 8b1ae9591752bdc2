//! Optimization harness: Adam with split encoder/decoder learning rates and
//! loss-coupled weight decay, the two-input training step, checkpointing with
//! bitwise resume, and the ablation presets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::config::{ModelConfig, ScheduleVariant};
use crate::data::{PairedBatches, SampleKind, SampleRecord};
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::mlm::BranchPolicy;
use crate::model::{Prediction, SaliencyNet};
use crate::nn::{Binding, ParamGroup, ParamStore};
use crate::supervision::{
    block_scales, build_pyramids, extract_foreground_contour, GroundTruthBundle, CONTOUR_HIGH,
    CONTOUR_LOW,
};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Ablation presets. The baseline strips the method down to a plain
/// mask-supervised encoder-decoder; the second adds the student branches; the
/// third is the full method with edge modules and intertwined supervision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Mask supervision only, one student per module, no edge modules.
    Allsup,
    /// Mask supervision, three students per module, no edge modules.
    AllsupMlm,
    /// Full method: three students, edge modules, intertwined supervision.
    #[default]
    AllsupEdMlm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_encoder: f64,
    pub lr_decoder: f64,
    pub weight_decay: f64,
    pub max_steps: u64,
    pub seed: u64,
    pub preset: Preset,
    /// Steps between periodic checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub model: ModelConfig,
}

impl TrainConfig {
    pub fn tiny(preset: Preset) -> Self {
        TrainConfig {
            lr_encoder: 4e-4,
            lr_decoder: 1e-4,
            weight_decay: 0.005,
            max_steps: 500,
            seed: 0,
            preset,
            checkpoint_every: 0,
            model: ModelConfig::tiny(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr_encoder <= 0.0 || self.lr_decoder <= 0.0 {
            return Err(Error::Config(format!(
                "learning rates must be positive, got {} / {}",
                self.lr_encoder, self.lr_decoder
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be >= 0".into()));
        }
        self.resolved_model().validate()
    }

    /// The model configuration with the preset's forced settings applied:
    /// the baseline runs one student, no edge modules and mask-only
    /// supervision; `+MLM` restores the three students; the full preset adds
    /// edge modules and keeps the configured (default intertwined) schedule.
    pub fn resolved_model(&self) -> ModelConfig {
        let mut m = self.model.clone();
        match self.preset {
            Preset::Allsup => {
                m.mlm.k = 1;
                m.use_edge_modules = false;
                m.schedule = ScheduleVariant::AllMask;
            }
            Preset::AllsupMlm => {
                m.mlm.k = 3;
                m.use_edge_modules = false;
                m.schedule = ScheduleVariant::AllMask;
            }
            Preset::AllsupEdMlm => {
                m.mlm.k = 3;
                m.use_edge_modules = true;
                if m.schedule == ScheduleVariant::AllMask {
                    m.schedule = ScheduleVariant::Intertwined;
                }
            }
        }
        m
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adam with two parameter groups (encoder and decoder learning rates) and
/// loss-coupled L2 weight decay (`g <- g + wd * p` before the moments).
pub struct Adam {
    lr_encoder: f64,
    lr_decoder: f64,
    weight_decay: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Result<Self> {
        if cfg.lr_encoder <= 0.0 || cfg.lr_decoder <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        let mut has = (false, false);
        for (_, p) in store.iter() {
            match p.group {
                ParamGroup::Encoder => has.0 = true,
                ParamGroup::Decoder => has.1 = true,
            }
        }
        if !has.0 || !has.1 {
            return Err(Error::Config("an optimizer group is empty".into()));
        }
        Ok(Adam {
            lr_encoder: cfg.lr_encoder,
            lr_decoder: cfg.lr_decoder,
            weight_decay: cfg.weight_decay,
            m: store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect(),
            v: store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect(),
            t: 0,
        })
    }

    /// One update over all parameters; `grads` is indexed like the store.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let ids: Vec<(crate::nn::ParamId, ParamGroup)> =
            store.iter().map(|(id, p)| (id, p.group)).collect();
        for (i, (id, group)) in ids.iter().enumerate() {
            let lr = match group {
                ParamGroup::Encoder => self.lr_encoder,
                ParamGroup::Decoder => self.lr_decoder,
            };
            let value = store.value_mut(*id);
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for ((p, g0), (mi, vi)) in value
                .data_mut()
                .iter_mut()
                .zip(grads[i].data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                let g = g0 + self.weight_decay * *p;
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * g;
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

pub struct Trainer {
    pub net: SaliencyNet,
    opt: Adam,
    cfg: TrainConfig,
    step: u64,
}

const CHECKPOINT_VERSION: &str = "1";

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    version: String,
    step: u64,
    adam_t: u64,
    config: TrainConfig,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model_cfg = cfg.resolved_model();
        let net = SaliencyNet::new(&model_cfg, cfg.seed)?;
        let opt = Adam::new(&net.store, cfg)?;
        Ok(Trainer {
            net,
            opt,
            cfg: cfg.clone(),
            step: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    fn saliency_bundle(&self, sample: &SampleRecord) -> Result<GroundTruthBundle> {
        let contour = extract_foreground_contour(&sample.target, CONTOUR_LOW, CONTOUR_HIGH)?;
        build_pyramids(
            &sample.target,
            &contour,
            None,
            &block_scales(self.net.config().backbone.input_size),
        )
    }

    fn edge_bundle(&self, sample: &SampleRecord) -> Result<GroundTruthBundle> {
        let size = self.net.config().backbone.input_size;
        let zeros = Tensor::zeros(&[1, size, size]);
        build_pyramids(
            &zeros,
            &zeros,
            Some(&sample.target),
            &block_scales(size),
        )
    }

    /// One optimization step on a saliency/edge sample pair. The edge sample
    /// participates only when edge modules are enabled; its loss terms are
    /// exactly zero otherwise.
    pub fn train_step(
        &mut self,
        sal: &SampleRecord,
        edge: &SampleRecord,
    ) -> Result<LossBreakdown> {
        if sal.kind != SampleKind::Saliency {
            return Err(Error::Validation(format!(
                "expected a saliency sample, got {:?}",
                sal.kind
            )));
        }
        if edge.kind != SampleKind::Edge {
            return Err(Error::Validation(format!(
                "expected an edge sample, got {:?}",
                edge.kind
            )));
        }
        let sal_gts = self.saliency_bundle(sal)?;
        let mut tape = Tape::new();
        let bind = Binding::bind(&self.net.store, &mut tape);
        let sal_img = tape.leaf(sal.image.clone());
        let sal_pass = self.net.saliency_pass(&mut tape, &bind, sal_img, 0)?;
        let (edge_pass, edge_gts) = if self.net.has_edge_modules() {
            let edge_img = tape.leaf(edge.image.clone());
            (
                Some(self.net.edge_pass(&mut tape, &bind, edge_img)?),
                Some(self.edge_bundle(edge)?),
            )
        } else {
            (None, None)
        };
        let nodes = self.net.build_loss_graph(
            &mut tape,
            &sal_pass,
            edge_pass.as_ref(),
            &sal_gts,
            edge_gts.as_ref(),
        )?;
        let breakdown = self.net.breakdown(&tape, &nodes);
        if !breakdown.is_finite() {
            return Err(Error::Divergence {
                step: self.step,
                detail: format!("non-finite loss {breakdown:?}"),
            });
        }
        tape.backward(nodes.total)?;
        let grads: Vec<Tensor> = self
            .net
            .store
            .iter()
            .map(|(id, p)| {
                tape.grad(bind.node(id))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape()))
            })
            .collect();
        self.opt.step(&mut self.net.store, &grads);
        self.step += 1;
        Ok(breakdown)
    }

    /// Runs from the current step to `max_steps` over seed-deterministic
    /// sample pairs, invoking `on_step` after every update. Periodic and
    /// final checkpoints go to `checkpoint_dir` when provided. Returns the
    /// loss log of the executed steps.
    pub fn fit(
        &mut self,
        sal_data: &[SampleRecord],
        edge_data: &[SampleRecord],
        checkpoint_dir: Option<&Path>,
        mut on_step: impl FnMut(u64, &LossBreakdown),
    ) -> Result<Vec<LossBreakdown>> {
        if sal_data.is_empty() || edge_data.is_empty() {
            return Err(Error::Config("training needs nonempty datasets".into()));
        }
        let pairing = PairedBatches::new(sal_data.len(), edge_data.len(), self.cfg.seed)?;
        let mut log = Vec::new();
        while self.step < self.cfg.max_steps {
            let (si, ei) = pairing.pair_at(self.step);
            let breakdown = self.train_step(&sal_data[si], &edge_data[ei])?;
            on_step(self.step - 1, &breakdown);
            log.push(breakdown);
            if let Some(dir) = checkpoint_dir {
                if self.cfg.checkpoint_every > 0
                    && self.step < self.cfg.max_steps
                    && self.step % self.cfg.checkpoint_every == 0
                {
                    self.save_checkpoint(&dir.join(format!("checkpoint_step{}.bin", self.step)))?;
                }
            }
        }
        if let Some(dir) = checkpoint_dir {
            self.save_checkpoint(&dir.join("checkpoint.bin"))?;
        }
        Ok(log)
    }

    /// Serializes parameters, optimizer moments, the step counter and the
    /// config snapshot. Round-trips are bitwise.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            version: CHECKPOINT_VERSION.into(),
            step: self.step,
            adam_t: self.opt.t,
            config: self.cfg.clone(),
        };
        let mut entries = Vec::new();
        for (i, (_, p)) in self.net.store.iter().enumerate() {
            entries.push((format!("param.{}", p.name), p.value.clone()));
            entries.push((format!("adam.m.{}", p.name), self.opt.m[i].clone()));
            entries.push((format!("adam.v.{}", p.name), self.opt.v[i].clone()));
        }
        Archive {
            meta: toml::to_string(&meta)
                .map_err(|e| Error::Config(format!("checkpoint meta: {e}")))?,
            entries,
        }
        .write_to(path)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let archive = Archive::read_from(path)?;
        let meta: CheckpointMeta = toml::from_str(&archive.meta)
            .map_err(|e| Error::Load(format!("checkpoint metadata: {e}")))?;
        if meta.version != CHECKPOINT_VERSION {
            return Err(Error::Load(format!(
                "checkpoint version {} not supported",
                meta.version
            )));
        }
        let mut trainer = Trainer::new(&meta.config)?;
        trainer.step = meta.step;
        trainer.opt.t = meta.adam_t;
        let ids: Vec<(crate::nn::ParamId, String)> = trainer
            .net
            .store
            .iter()
            .map(|(id, p)| (id, p.name.clone()))
            .collect();
        for (i, (id, name)) in ids.iter().enumerate() {
            let value = archive
                .get(&format!("param.{name}"))
                .ok_or_else(|| Error::Load(format!("checkpoint missing parameter {name}")))?;
            if value.shape() != trainer.net.store.get(*id).value.shape() {
                return Err(Error::Load(format!(
                    "checkpoint parameter {name} has shape {:?}, model expects {:?}",
                    value.shape(),
                    trainer.net.store.get(*id).value.shape()
                )));
            }
            *trainer.net.store.value_mut(*id) = value.clone();
            trainer.opt.m[i] = archive
                .get(&format!("adam.m.{name}"))
                .ok_or_else(|| Error::Load(format!("checkpoint missing moment for {name}")))?
                .clone();
            trainer.opt.v[i] = archive
                .get(&format!("adam.v.{name}"))
                .ok_or_else(|| Error::Load(format!("checkpoint missing moment for {name}")))?
                .clone();
        }
        Ok(trainer)
    }

    pub fn predict(&self, image: &Tensor, policy: BranchPolicy) -> Result<Prediction> {
        self.net.predict(image, policy)
    }
}
