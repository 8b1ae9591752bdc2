//! Loss terms: binary cross-entropy for every supervised head, the pairwise
//! L2 mimicry loss between student branches, and the weighted encoder/decoder
//! totals. These value-level functions are the single source of truth for the
//! forward math; the autodiff tape delegates to them.

use crate::config::LossWeights;
use crate::error::{Error, Result};
use crate::supervision::{GroundTruthBundle, SupervisionSchedule};
use crate::tape::BCE_EPS;
use crate::tensor::{ProbabilityMap, Tensor};

/// Mean binary cross-entropy with predictions clamped to `[eps, 1 - eps]`.
pub fn bce(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    if !pred.same_shape(gt) {
        return Err(Error::Shape(format!(
            "bce: prediction {:?} vs target {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let mut acc = 0.0;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        acc -= g * pc.ln() + (1.0 - g) * (1.0 - pc).ln();
    }
    Ok(acc / pred.numel() as f64)
}

/// Per-pixel mean of the squared difference.
pub fn mse_mean(a: &Tensor, b: &Tensor) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "mse: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let acc: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(acc / a.numel() as f64)
}

/// Total mimicry loss over six modules:
/// `(1/2) * sum_i r_mlm[i] * sum_{n != m} mse(A[i][n], A[i][m])`
/// (ordered pairs). Modules with one student contribute zero.
pub fn mimicry_loss(all_students: &[Vec<ProbabilityMap>], r_mlm: &[f64; 6]) -> Result<f64> {
    if all_students.len() != 6 {
        return Err(Error::Arity(format!(
            "mimicry loss takes 6 blocks of student maps, got {}",
            all_students.len()
        )));
    }
    let mut total = 0.0;
    for (block, students) in all_students.iter().enumerate() {
        for pair in students.windows(2) {
            if !pair[0].same_shape(&pair[1]) {
                return Err(Error::Shape(format!(
                    "block {block}: ragged student maps {:?} vs {:?}",
                    pair[0].shape(),
                    pair[1].shape()
                )));
            }
        }
        let mut block_sum = 0.0;
        for n in 0..students.len() {
            for m in 0..students.len() {
                if n != m {
                    block_sum += mse_mean(&students[n], &students[m])?;
                }
            }
        }
        total += 0.5 * r_mlm[block] * block_sum;
    }
    Ok(total)
}

/// Encoder-side loss components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderLosses {
    pub l_s: f64,
    pub l_e: f64,
    pub l_mimicry: f64,
    pub l_enc: f64,
}

/// Saliency-head loss: the scheduled pyramid level against every student of
/// every block, averaged over students within a block.
fn saliency_loss(
    mlm_preds: &[Vec<ProbabilityMap>],
    gts: &GroundTruthBundle,
    schedule: &SupervisionSchedule,
    r_s: &[f64; 6],
) -> Result<f64> {
    if mlm_preds.len() != 6 {
        return Err(Error::Arity(format!(
            "expected 6 blocks of student predictions, got {}",
            mlm_preds.len()
        )));
    }
    if gts.s_pyramid.len() != 6 || gts.fc_pyramid.len() != 6 {
        return Err(Error::Config("ground-truth pyramid missing levels".into()));
    }
    let mut total = 0.0;
    for (block, students) in mlm_preds.iter().enumerate() {
        if students.is_empty() {
            return Err(Error::Arity(format!("block {block} has no students")));
        }
        let target = gts.encoder_target(schedule, block)?;
        let mut mean = 0.0;
        for pred in students {
            mean += bce(pred, target)?;
        }
        total += r_s[block] * mean / students.len() as f64;
    }
    Ok(total)
}

/// Edge-head loss: per-block maps against the matching edge pyramid level,
/// plus the merged full-resolution prediction against the full-size level.
fn edge_loss(
    em_preds: &[ProbabilityMap],
    e_star: &ProbabilityMap,
    gts: &GroundTruthBundle,
    r_e: &[f64; 3],
) -> Result<f64> {
    if em_preds.len() != 3 {
        return Err(Error::Arity(format!(
            "expected 3 edge maps, got {}",
            em_preds.len()
        )));
    }
    let pyr = gts
        .e_pyramid
        .as_ref()
        .ok_or_else(|| Error::Config("edge ground truth missing".into()))?;
    let mut total = 0.0;
    for (i, pred) in em_preds.iter().enumerate() {
        total += r_e[i] * bce(pred, &pyr[i])?;
    }
    total += bce(e_star, &pyr[0])?;
    Ok(total)
}

/// The weighted encoder total:
/// `l_enc = theta_s * l_s + theta_e * l_e + theta_m * l_mimicry`.
/// The saliency-image pass supplies `mlm_preds` against `sal_gts`; the
/// edge-image pass supplies `em_preds`/`e_star` against `edge_gts`. Pass an
/// empty `em_preds` and `None` for the edge arguments when edge modules are
/// disabled; the edge term is then zero.
#[allow(clippy::too_many_arguments)]
pub fn encoder_loss(
    mlm_preds: &[Vec<ProbabilityMap>],
    em_preds: &[ProbabilityMap],
    e_star: Option<&ProbabilityMap>,
    sal_gts: &GroundTruthBundle,
    edge_gts: Option<&GroundTruthBundle>,
    schedule: &SupervisionSchedule,
    weights: &LossWeights,
) -> Result<EncoderLosses> {
    let l_s = saliency_loss(mlm_preds, sal_gts, schedule, &weights.r_s)?;
    let l_e = match (em_preds.is_empty(), e_star, edge_gts) {
        (true, None, _) => 0.0,
        (false, Some(star), Some(gts)) => edge_loss(em_preds, star, gts, &weights.r_e)?,
        _ => {
            return Err(Error::Config(
                "edge predictions and edge ground truth must be supplied together".into(),
            ))
        }
    };
    let students: Vec<Vec<ProbabilityMap>> = mlm_preds.to_vec();
    let l_mimicry = mimicry_loss(&students, &weights.r_mlm)?;
    let l_enc = weights.theta_s * l_s + weights.theta_e * l_e + weights.theta_m * l_mimicry;
    Ok(EncoderLosses {
        l_s,
        l_e,
        l_mimicry,
        l_enc,
    })
}

/// Decoder deep-supervision loss: head `i` predicts at pyramid level `4 - i`
/// against its scheduled ground-truth kind, with an extra contour term where
/// the schedule requests one.
pub fn decoder_loss(
    dec_preds: &[ProbabilityMap],
    gts: &GroundTruthBundle,
    schedule: &SupervisionSchedule,
    r_dec: &[f64; 5],
) -> Result<f64> {
    if dec_preds.len() != 5 {
        return Err(Error::Arity(format!(
            "expected 5 decoder predictions, got {}",
            dec_preds.len()
        )));
    }
    let mut total = 0.0;
    for (i, pred) in dec_preds.iter().enumerate() {
        let target = gts.decoder_target(schedule, i)?;
        total += r_dec[i] * bce(pred, target)?;
        if schedule.decoder_extra_fc[i] {
            total += r_dec[i] * bce(pred, gts.decoder_extra_fc_target(i))?;
        }
    }
    Ok(total)
}

/// One training step's loss record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_enc: f64,
    pub l_s: f64,
    pub l_e: f64,
    pub l_mimicry: f64,
    pub l_dec: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(enc: EncoderLosses, l_dec: f64) -> Self {
        LossBreakdown {
            l_enc: enc.l_enc,
            l_s: enc.l_s,
            l_e: enc.l_e,
            l_mimicry: enc.l_mimicry,
            l_dec,
            total: enc.l_enc + l_dec,
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.l_enc,
            self.l_s,
            self.l_e,
            self.l_mimicry,
            self.l_dec,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}
