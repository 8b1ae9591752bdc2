//! Ground-truth pipeline: foreground-contour extraction from saliency masks,
//! multi-resolution ground-truth pyramids, and the supervision schedule that
//! maps each prediction head to a ground-truth kind.

use serde::{Deserialize, Serialize};

use crate::config::ScheduleVariant;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The three supervision signals, each with a pyramid matching the encoder
/// block scales (level `i` has side `input_size / 2^i`).
#[derive(Debug, Clone)]
pub struct GroundTruthBundle {
    /// Binary saliency mask `[1, H, W]`.
    pub s_gt: Tensor,
    /// Binary foreground-contour map `[1, H, W]`.
    pub fc_gt: Tensor,
    /// Edge map `[1, H, W]` in `[0, 1]`; present only for edge-image samples.
    pub e_gt: Option<Tensor>,
    pub s_pyramid: Vec<Tensor>,
    pub fc_pyramid: Vec<Tensor>,
    pub e_pyramid: Option<Vec<Tensor>>,
}

fn check_single_channel(map: &Tensor, what: &str) -> Result<()> {
    if !map.is_chw() || map.c() != 1 {
        return Err(Error::Shape(format!(
            "{what} must be [1, h, w], got {:?}",
            map.shape()
        )));
    }
    Ok(())
}

fn check_binary(map: &Tensor, what: &str) -> Result<()> {
    check_single_channel(map, what)?;
    if map.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Validation(format!("{what} is not binary")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Canny foreground-contour extraction
// ---------------------------------------------------------------------------

const CANNY_SIGMA: f64 = 1.0;

fn gaussian_blur(map: &Tensor) -> Tensor {
    let (h, w) = (map.h(), map.w());
    let radius = (3.0 * CANNY_SIGMA).ceil() as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for i in -radius..=radius {
        kernel.push((-(i * i) as f64 / (2.0 * CANNY_SIGMA * CANNY_SIGMA)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= norm;
    }
    let src = map.data();
    // horizontal pass, replicate border
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for (ki, &kv) in kernel.iter().enumerate() {
                let sx = (x + ki as isize - radius).clamp(0, w as isize - 1) as usize;
                acc += src[y * w + sx] * kv;
            }
            tmp[y * w + x as usize] = acc;
        }
    }
    let mut out = Tensor::zeros(&[1, h, w]);
    let dst = out.data_mut();
    for y in 0..h as isize {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, &kv) in kernel.iter().enumerate() {
                let sy = (y + ki as isize - radius).clamp(0, h as isize - 1) as usize;
                acc += tmp[sy * w + x] * kv;
            }
            dst[y as usize * w + x] = acc;
        }
    }
    out
}

fn sobel(map: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = (map.h(), map.w());
    let src = map.data();
    let at = |y: isize, x: isize| -> f64 {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        src[yy * w + xx]
    };
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            gx[y as usize * w + x as usize] = (at(y - 1, x + 1) + 2.0 * at(y, x + 1)
                + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            gy[y as usize * w + x as usize] = (at(y + 1, x - 1) + 2.0 * at(y + 1, x)
                + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
        }
    }
    (gx, gy)
}

/// Canny on a binary mask: Gaussian smoothing (sigma 1.0), Sobel gradients,
/// four-direction non-maximum suppression, then double-threshold hysteresis.
/// `low` and `high` are fractions of the maximum gradient magnitude. Returns
/// a thin binary contour map; the one-pixel image border never fires.
pub fn extract_foreground_contour(s_gt: &Tensor, low: f64, high: f64) -> Result<Tensor> {
    check_binary(s_gt, "saliency mask")?;
    if !(0.0..=1.0).contains(&low) || !(0.0..=1.0).contains(&high) || low > high {
        return Err(Error::Config(format!(
            "thresholds must satisfy 0 <= low <= high <= 1, got {low}, {high}"
        )));
    }
    let (h, w) = (s_gt.h(), s_gt.w());
    let blurred = gaussian_blur(s_gt);
    let (gx, gy) = sobel(&blurred);
    let mag: Vec<f64> = gx
        .iter()
        .zip(&gy)
        .map(|(&a, &b)| a.hypot(b))
        .collect();
    let max_mag = mag.iter().cloned().fold(0.0_f64, f64::max);
    let mut out = Tensor::zeros(&[1, h, w]);
    if max_mag <= 0.0 {
        return Ok(out);
    }

    // non-maximum suppression along the quantized gradient direction
    let mut thin = vec![0.0; h * w];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let i = y * w + x;
            if mag[i] == 0.0 {
                continue;
            }
            let mut angle = gy[i].atan2(gx[i]).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            let (n1, n2) = if !(22.5..157.5).contains(&angle) {
                (mag[i - 1], mag[i + 1])
            } else if angle < 67.5 {
                (mag[i - w - 1], mag[i + w + 1])
            } else if angle < 112.5 {
                (mag[i - w], mag[i + w])
            } else {
                (mag[i - w + 1], mag[i + w - 1])
            };
            if mag[i] >= n1 && mag[i] >= n2 {
                thin[i] = mag[i];
            }
        }
    }

    // hysteresis: strong pixels seed an 8-connected flood over weak ones
    let t_low = low * max_mag;
    let t_high = high * max_mag;
    let dst = out.data_mut();
    let mut stack = Vec::new();
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let i = y * w + x;
            if thin[i] >= t_high && dst[i] == 0.0 {
                dst[i] = 1.0;
                stack.push((y, x));
                while let Some((cy, cx)) = stack.pop() {
                    for dy in -1_isize..=1 {
                        for dx in -1_isize..=1 {
                            let (ny, nx) = (cy as isize + dy, cx as isize + dx);
                            if ny < 1 || ny >= h as isize - 1 || nx < 1 || nx >= w as isize - 1 {
                                continue;
                            }
                            let j = ny as usize * w + nx as usize;
                            if thin[j] >= t_low && dst[j] == 0.0 {
                                dst[j] = 1.0;
                                stack.push((ny as usize, nx as usize));
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Default Canny threshold fractions for binary masks.
pub const CONTOUR_LOW: f64 = 0.1;
pub const CONTOUR_HIGH: f64 = 0.3;

// ---------------------------------------------------------------------------
// Pyramids
// ---------------------------------------------------------------------------

fn check_scale(src: usize, dst: usize) -> Result<usize> {
    if dst == 0 || src % dst != 0 {
        return Err(Error::Config(format!(
            "pyramid scale {dst} does not divide source size {src}"
        )));
    }
    Ok(src / dst)
}

/// Downsamples by averaging each `f x f` cell (masks, before re-binarization).
pub fn area_downsample(map: &Tensor, size: usize) -> Result<Tensor> {
    check_single_channel(map, "map")?;
    let (h, w) = (map.h(), map.w());
    debug_assert_eq!(h, w, "maps are square");
    let f = check_scale(h, size)?;
    if f == 1 {
        return Ok(map.clone());
    }
    let mut out = Tensor::zeros(&[1, size, size]);
    let src = map.data();
    let dst = out.data_mut();
    let inv = 1.0 / (f * f) as f64;
    for oy in 0..size {
        for ox in 0..size {
            let mut acc = 0.0;
            for dy in 0..f {
                for dx in 0..f {
                    acc += src[(oy * f + dy) * w + ox * f + dx];
                }
            }
            dst[oy * size + ox] = acc * inv;
        }
    }
    Ok(out)
}

/// Downsamples by taking each `f x f` cell's maximum (contours and edge maps;
/// plain interpolation would erase one-pixel curves).
pub fn max_downsample(map: &Tensor, size: usize) -> Result<Tensor> {
    check_single_channel(map, "map")?;
    let (h, w) = (map.h(), map.w());
    let f = check_scale(h, size)?;
    if f == 1 {
        return Ok(map.clone());
    }
    let mut out = Tensor::zeros(&[1, size, size]);
    let src = map.data();
    let dst = out.data_mut();
    for oy in 0..size {
        for ox in 0..size {
            let mut best = f64::NEG_INFINITY;
            for dy in 0..f {
                for dx in 0..f {
                    best = best.max(src[(oy * f + dy) * w + ox * f + dx]);
                }
            }
            dst[oy * size + ox] = best;
        }
    }
    Ok(out)
}

fn binarize_half(map: &Tensor) -> Tensor {
    map.map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
}

/// Builds the multi-resolution ground-truth bundle. Masks are area-averaged
/// then re-binarized at 0.5; contours and edge maps are max-pooled. `scales`
/// must be monotone decreasing and divide the input size.
pub fn build_pyramids(
    s_gt: &Tensor,
    fc_gt: &Tensor,
    e_gt: Option<&Tensor>,
    scales: &[usize],
) -> Result<GroundTruthBundle> {
    check_binary(s_gt, "saliency mask")?;
    check_binary(fc_gt, "contour map")?;
    if let Some(e) = e_gt {
        check_single_channel(e, "edge map")?;
        if e.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Validation("edge map values outside [0, 1]".into()));
        }
    }
    if scales.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Config(format!(
            "pyramid scales must be monotone decreasing, got {scales:?}"
        )));
    }
    let mut s_pyramid = Vec::with_capacity(scales.len());
    let mut fc_pyramid = Vec::with_capacity(scales.len());
    let mut e_pyramid = e_gt.map(|_| Vec::with_capacity(scales.len()));
    for &size in scales {
        s_pyramid.push(binarize_half(&area_downsample(s_gt, size)?));
        fc_pyramid.push(max_downsample(fc_gt, size)?);
        if let (Some(pyr), Some(e)) = (e_pyramid.as_mut(), e_gt) {
            pyr.push(max_downsample(e, size)?);
        }
    }
    Ok(GroundTruthBundle {
        s_gt: s_gt.clone(),
        fc_gt: fc_gt.clone(),
        e_gt: e_gt.cloned(),
        s_pyramid,
        fc_pyramid,
        e_pyramid,
    })
}

/// The six block scales for a given input size: `input, input/2, ..., input/32`.
pub fn block_scales(input_size: usize) -> Vec<usize> {
    (0..6).map(|i| input_size >> i).collect()
}

// ---------------------------------------------------------------------------
// Supervision schedule
// ---------------------------------------------------------------------------

/// Which ground-truth kind supervises a head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SupervisionKind {
    /// Saliency mask.
    S,
    /// Foreground contour.
    Fc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadStage {
    Encoder,
    Decoder,
}

/// Resolved head-to-ground-truth assignment for one schedule variant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupervisionSchedule {
    pub variant: ScheduleVariant,
    pub encoder_kinds: [SupervisionKind; 6],
    pub decoder_kinds: [SupervisionKind; 5],
    /// Decoder heads that receive an additional contour loss on top of their
    /// mask loss (used by the revised variant on D0 and D1).
    pub decoder_extra_fc: [bool; 5],
}

impl SupervisionSchedule {
    pub fn new(variant: ScheduleVariant) -> Self {
        use SupervisionKind::{Fc, S};
        match variant {
            ScheduleVariant::Intertwined => SupervisionSchedule {
                variant,
                encoder_kinds: [Fc, Fc, Fc, S, S, S],
                decoder_kinds: [S, Fc, S, Fc, S],
                decoder_extra_fc: [false; 5],
            },
            ScheduleVariant::Revised => SupervisionSchedule {
                variant,
                encoder_kinds: [Fc, Fc, Fc, S, S, S],
                decoder_kinds: [S; 5],
                decoder_extra_fc: [true, true, false, false, false],
            },
            ScheduleVariant::AllMask => SupervisionSchedule {
                variant,
                encoder_kinds: [S; 6],
                decoder_kinds: [S; 5],
                decoder_extra_fc: [false; 5],
            },
        }
    }
}

/// Ground-truth kind for one head.
pub fn assign_supervision(
    schedule: &SupervisionSchedule,
    stage: HeadStage,
    index: usize,
) -> Result<SupervisionKind> {
    match stage {
        HeadStage::Encoder => schedule
            .encoder_kinds
            .get(index)
            .copied()
            .ok_or_else(|| Error::Config(format!("encoder head index {index} out of range"))),
        HeadStage::Decoder => schedule
            .decoder_kinds
            .get(index)
            .copied()
            .ok_or_else(|| Error::Config(format!("decoder head index {index} out of range"))),
    }
}

impl GroundTruthBundle {
    /// The pyramid level supervising an encoder head at block `i`.
    pub fn encoder_target(&self, schedule: &SupervisionSchedule, block: usize) -> Result<&Tensor> {
        let kind = assign_supervision(schedule, HeadStage::Encoder, block)?;
        Ok(match kind {
            SupervisionKind::S => &self.s_pyramid[block],
            SupervisionKind::Fc => &self.fc_pyramid[block],
        })
    }

    /// The pyramid level supervising decoder head `i` (which predicts at
    /// pyramid level `4 - i`).
    pub fn decoder_target(&self, schedule: &SupervisionSchedule, index: usize) -> Result<&Tensor> {
        let kind = assign_supervision(schedule, HeadStage::Decoder, index)?;
        let level = 4 - index;
        Ok(match kind {
            SupervisionKind::S => &self.s_pyramid[level],
            SupervisionKind::Fc => &self.fc_pyramid[level],
        })
    }

    /// Contour pyramid level for a decoder head's extra contour loss.
    pub fn decoder_extra_fc_target(&self, index: usize) -> &Tensor {
        &self.fc_pyramid[4 - index]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_with_square(size: usize, top: usize, left: usize, side: usize) -> Tensor {
        let mut m = Tensor::zeros(&[1, size, size]);
        for y in top..top + side {
            for x in left..left + side {
                m.data_mut()[y * size + x] = 1.0;
            }
        }
        m
    }

    /// Foreground pixels with at least one background 8-neighbor.
    fn morphological_boundary(mask: &Tensor) -> Vec<(usize, usize)> {
        let (h, w) = (mask.h(), mask.w());
        let d = mask.data();
        let mut out = Vec::new();
        for y in 0..h as isize {
            for x in 0..w as isize {
                if d[y as usize * w + x as usize] != 1.0 {
                    continue;
                }
                let mut edge = false;
                for dy in -1..=1_isize {
                    for dx in -1..=1_isize {
                        let (ny, nx) = (y + dy, x + dx);
                        if ny < 0 || ny >= h as isize || nx < 0 || nx >= w as isize {
                            continue;
                        }
                        if d[ny as usize * w + nx as usize] == 0.0 {
                            edge = true;
                        }
                    }
                }
                if edge {
                    out.push((y as usize, x as usize));
                }
            }
        }
        out
    }

    #[test]
    fn all_zero_and_all_one_masks_give_empty_contours() {
        for m in [Tensor::zeros(&[1, 32, 32]), Tensor::full(&[1, 32, 32], 1.0)] {
            let c = extract_foreground_contour(&m, CONTOUR_LOW, CONTOUR_HIGH).unwrap();
            assert_eq!(c.data().iter().sum::<f64>(), 0.0);
        }
    }

    #[test]
    fn non_binary_mask_is_validation_error() {
        let m = Tensor::full(&[1, 16, 16], 0.5);
        assert!(matches!(
            extract_foreground_contour(&m, CONTOUR_LOW, CONTOUR_HIGH),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn square_contour_hugs_the_morphological_boundary() {
        let mask = mask_with_square(32, 11, 11, 10);
        let contour = extract_foreground_contour(&mask, CONTOUR_LOW, CONTOUR_HIGH).unwrap();
        let boundary = morphological_boundary(&mask);
        assert!(!boundary.is_empty());
        let near_boundary = |y: usize, x: usize| {
            boundary.iter().any(|&(by, bx)| {
                (by as isize - y as isize).abs() <= 1 && (bx as isize - x as isize).abs() <= 1
            })
        };
        let mut total = 0usize;
        let mut close = 0usize;
        for y in 0..32 {
            for x in 0..32 {
                if contour.data()[y * 32 + x] == 1.0 {
                    total += 1;
                    if near_boundary(y, x) {
                        close += 1;
                    }
                }
            }
        }
        assert!(total > 0, "contour is empty");
        assert!(
            close as f64 >= 0.95 * total as f64,
            "{close}/{total} contour pixels near boundary"
        );
        // and the reverse direction: boundary pixels near some contour pixel
        let contour_px: Vec<(usize, usize)> = (0..32 * 32)
            .filter(|i| contour.data()[*i] == 1.0)
            .map(|i| (i / 32, i % 32))
            .collect();
        let covered = boundary
            .iter()
            .filter(|&&(by, bx)| {
                contour_px.iter().any(|&(cy, cx)| {
                    (by as isize - cy as isize).abs() <= 1 && (bx as isize - cx as isize).abs() <= 1
                })
            })
            .count();
        assert!(covered as f64 >= 0.95 * boundary.len() as f64);
    }

    #[test]
    fn contour_commutes_with_translation() {
        let a = mask_with_square(40, 8, 8, 9);
        let b = mask_with_square(40, 13, 11, 9);
        let ca = extract_foreground_contour(&a, CONTOUR_LOW, CONTOUR_HIGH).unwrap();
        let cb = extract_foreground_contour(&b, CONTOUR_LOW, CONTOUR_HIGH).unwrap();
        // shift ca by (+5, +3) and compare
        for y in 0..40usize {
            for x in 0..40usize {
                let shifted = if y >= 5 && x >= 3 {
                    ca.data()[(y - 5) * 40 + (x - 3)]
                } else {
                    0.0
                };
                assert_eq!(shifted, cb.data()[y * 40 + x], "at ({y}, {x})");
            }
        }
    }

    #[test]
    fn pyramid_masks_stay_binary_and_contours_survive() {
        let mask = mask_with_square(64, 20, 20, 17);
        let contour = extract_foreground_contour(&mask, CONTOUR_LOW, CONTOUR_HIGH).unwrap();
        let bundle = build_pyramids(&mask, &contour, None, &block_scales(64)).unwrap();
        assert_eq!(bundle.s_pyramid.len(), 6);
        for (i, level) in bundle.s_pyramid.iter().enumerate() {
            assert_eq!(level.h(), 64 >> i);
            assert!(level.data().iter().all(|&v| v == 0.0 || v == 1.0));
        }
        for level in &bundle.fc_pyramid {
            assert!(level.data().iter().sum::<f64>() > 0.0, "contour vanished");
        }
        // full-size level is the original
        assert_eq!(bundle.s_pyramid[0].data(), mask.data());
        assert_eq!(bundle.fc_pyramid[0].data(), contour.data());
    }

    #[test]
    fn half_covered_mask_downsamples_exactly() {
        let mut mask = Tensor::zeros(&[1, 64, 64]);
        for y in 0..64 {
            for x in 0..32 {
                mask.data_mut()[y * 64 + x] = 1.0;
            }
        }
        for size in [32usize, 16, 8, 4, 2] {
            let level = binarize_half(&area_downsample(&mask, size).unwrap());
            for y in 0..size {
                for x in 0..size {
                    let expect = if x < size / 2 { 1.0 } else { 0.0 };
                    assert_eq!(level.data()[y * size + x], expect, "size {size} at ({y},{x})");
                }
            }
        }
    }

    #[test]
    fn invalid_scale_is_config_error() {
        let mask = mask_with_square(64, 10, 10, 5);
        let contour = extract_foreground_contour(&mask, CONTOUR_LOW, CONTOUR_HIGH).unwrap();
        assert!(matches!(
            build_pyramids(&mask, &contour, None, &[64, 48]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            build_pyramids(&mask, &contour, None, &[32, 32]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn intertwined_schedule_matches_published_assignment() {
        use SupervisionKind::{Fc, S};
        let sched = SupervisionSchedule::new(ScheduleVariant::Intertwined);
        assert_eq!(sched.encoder_kinds, [Fc, Fc, Fc, S, S, S]);
        assert_eq!(sched.decoder_kinds, [S, Fc, S, Fc, S]);
        assert_eq!(
            assign_supervision(&sched, HeadStage::Decoder, 2).unwrap(),
            S
        );
        assert_eq!(
            assign_supervision(&sched, HeadStage::Encoder, 1).unwrap(),
            Fc
        );
        assert_eq!(
            assign_supervision(&sched, HeadStage::Decoder, 3).unwrap(),
            Fc
        );
        assert!(assign_supervision(&sched, HeadStage::Decoder, 5).is_err());
    }

    #[test]
    fn revised_and_all_mask_variants() {
        let revised = SupervisionSchedule::new(ScheduleVariant::Revised);
        assert!(revised.decoder_kinds.iter().all(|&k| k == SupervisionKind::S));
        assert_eq!(revised.decoder_extra_fc, [true, true, false, false, false]);
        let all = SupervisionSchedule::new(ScheduleVariant::AllMask);
        assert!(all.encoder_kinds.iter().all(|&k| k == SupervisionKind::S));
        assert_eq!(all.decoder_extra_fc, [false; 5]);
    }
}
