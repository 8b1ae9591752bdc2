//! Dataset plumbing: a seeded synthetic shape generator (saliency pairs plus
//! a derived edge dataset), PNG ingestion for image/target corpora, and the
//! two-stream batcher that feeds one saliency and one edge sample per step.

use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derive_rng;
use crate::supervision::{
    area_downsample, extract_foreground_contour, max_downsample, CONTOUR_HIGH, CONTOUR_LOW,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleKind {
    Saliency,
    Edge,
}

/// One ingested training/evaluation sample.
#[derive(Debug, Clone)]
pub struct SampleRecord {
    pub id: String,
    /// `[3, s, s]` image in `[0, 1]`.
    pub image: Tensor,
    /// `[1, s, s]` target: binary mask for saliency, `[0, 1]` map for edges.
    pub target: Tensor,
    pub kind: SampleKind,
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
    Triangle,
    Annulus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub count: usize,
    pub canvas_size: usize,
    pub shapes: Vec<ShapeKind>,
    /// Foreground intensity range; must clear `bg_range` by at least 0.2.
    pub fg_range: (f64, f64),
    pub bg_range: (f64, f64),
    /// Uniform per-pixel texture noise amplitude.
    pub noise_amplitude: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            count: 8,
            canvas_size: 64,
            shapes: vec![
                ShapeKind::Rectangle,
                ShapeKind::Ellipse,
                ShapeKind::Triangle,
                ShapeKind::Annulus,
            ],
            fg_range: (0.65, 0.9),
            bg_range: (0.1, 0.35),
            noise_amplitude: 0.05,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("sample count must be positive".into()));
        }
        if self.canvas_size < 16 {
            return Err(Error::Config("canvas size must be at least 16".into()));
        }
        if self.shapes.is_empty() {
            return Err(Error::Config("shape set must be nonempty".into()));
        }
        for (name, (lo, hi)) in [("fg", self.fg_range), ("bg", self.bg_range)] {
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                return Err(Error::Config(format!(
                    "{name} intensity range [{lo}, {hi}] is invalid"
                )));
            }
        }
        let gap = if self.bg_range.1 <= self.fg_range.0 {
            self.fg_range.0 - self.bg_range.1
        } else if self.fg_range.1 <= self.bg_range.0 {
            self.bg_range.0 - self.fg_range.1
        } else {
            0.0
        };
        if gap < 0.2 {
            return Err(Error::Config(format!(
                "foreground and background intensity ranges must be disjoint by >= 0.2, gap is {gap}"
            )));
        }
        if !(0.0..=0.5).contains(&self.noise_amplitude) {
            return Err(Error::Config("noise amplitude must be in [0, 0.5]".into()));
        }
        Ok(())
    }
}

/// One generated sample: the saliency pair and its derived edge pair.
#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub id: String,
    pub image: Tensor,
    pub mask: Tensor,
    pub edge_image: Tensor,
    pub edge_map: Tensor,
}

fn rasterize(shape: ShapeKind, rng: &mut ChaCha8Rng, size: usize) -> Tensor {
    let s = size as f64;
    let mut mask = Tensor::zeros(&[1, size, size]);
    let d = mask.data_mut();
    match shape {
        ShapeKind::Rectangle => {
            let w = rng.gen_range(0.2..0.75) * s;
            let h = rng.gen_range(0.2..0.75) * s;
            let x0 = rng.gen_range(0.0..(s - w));
            let y0 = rng.gen_range(0.0..(s - h));
            for y in 0..size {
                for x in 0..size {
                    if (x as f64) >= x0 && (x as f64) < x0 + w && (y as f64) >= y0 && (y as f64) < y0 + h
                    {
                        d[y * size + x] = 1.0;
                    }
                }
            }
        }
        ShapeKind::Ellipse => {
            let cx = rng.gen_range(0.3..0.7) * s;
            let cy = rng.gen_range(0.3..0.7) * s;
            let rx = rng.gen_range(0.12..0.4) * s;
            let ry = rng.gen_range(0.12..0.4) * s;
            for y in 0..size {
                for x in 0..size {
                    let dx = (x as f64 + 0.5 - cx) / rx;
                    let dy = (y as f64 + 0.5 - cy) / ry;
                    if dx * dx + dy * dy <= 1.0 {
                        d[y * size + x] = 1.0;
                    }
                }
            }
        }
        ShapeKind::Triangle => {
            let pt = |rng: &mut ChaCha8Rng| {
                (
                    rng.gen_range(0.08..0.92) * s,
                    rng.gen_range(0.08..0.92) * s,
                )
            };
            let (ax, ay) = pt(rng);
            let (bx, by) = pt(rng);
            let (cx, cy) = pt(rng);
            let sign = |px: f64, py: f64, qx: f64, qy: f64, rx: f64, ry: f64| {
                (px - rx) * (qy - ry) - (qx - rx) * (py - ry)
            };
            for y in 0..size {
                for x in 0..size {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let d1 = sign(px, py, ax, ay, bx, by);
                    let d2 = sign(px, py, bx, by, cx, cy);
                    let d3 = sign(px, py, cx, cy, ax, ay);
                    let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                    let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                    if !(has_neg && has_pos) {
                        d[y * size + x] = 1.0;
                    }
                }
            }
        }
        ShapeKind::Annulus => {
            let cx = rng.gen_range(0.35..0.65) * s;
            let cy = rng.gen_range(0.35..0.65) * s;
            let ro = rng.gen_range(0.2..0.42) * s;
            let ri = ro * rng.gen_range(0.3..0.55);
            for y in 0..size {
                for x in 0..size {
                    let dx = x as f64 + 0.5 - cx;
                    let dy = y as f64 + 0.5 - cy;
                    let r2 = dx * dx + dy * dy;
                    if r2 <= ro * ro && r2 >= ri * ri {
                        d[y * size + x] = 1.0;
                    }
                }
            }
        }
    }
    mask
}

fn draw_line(map: &mut Tensor, x0: f64, y0: f64, x1: f64, y1: f64) {
    let size = map.w();
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    let d = map.data_mut();
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let x = (x0 + (x1 - x0) * t).round() as isize;
        let y = (y0 + (y1 - y0) * t).round() as isize;
        if x >= 0 && (x as usize) < size && y >= 0 && (y as usize) < size {
            d[y as usize * size + x as usize] = 1.0;
        }
    }
}

/// Generates `spec.count` saliency samples (one textured shape per canvas)
/// and their derived edge samples (line clutter added to the image; the edge
/// target is the mask contour united with the clutter). Fully
/// seed-deterministic.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<SyntheticSample>> {
    spec.validate()?;
    let size = spec.canvas_size;
    let mut out = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let mut rng = derive_rng(spec.seed, "synthetic", i as u64);
        let shape = spec.shapes[rng.gen_range(0..spec.shapes.len())];

        // keep foreground between 5% and 60% of the canvas
        let mut mask = rasterize(shape, &mut rng, size);
        let mut tries = 0;
        loop {
            let frac = mask.data().iter().sum::<f64>() / (size * size) as f64;
            if (0.05..=0.60).contains(&frac) {
                break;
            }
            tries += 1;
            if tries > 1000 {
                return Err(Error::Config(
                    "could not sample a shape with 5-60% coverage; check canvas size".into(),
                ));
            }
            mask = rasterize(shape, &mut rng, size);
        }

        let bg = rng.gen_range(spec.bg_range.0..=spec.bg_range.1);
        let fg = rng.gen_range(spec.fg_range.0..=spec.fg_range.1);
        let channel_jitter: [f64; 3] = [
            rng.gen_range(-0.03..0.03),
            rng.gen_range(-0.03..0.03),
            rng.gen_range(-0.03..0.03),
        ];
        let mut image = Tensor::zeros(&[3, size, size]);
        for c in 0..3 {
            for p in 0..size * size {
                let base = if mask.data()[p] == 1.0 { fg } else { bg };
                let noise = rng.gen_range(-spec.noise_amplitude..=spec.noise_amplitude);
                image.data_mut()[c * size * size + p] =
                    (base + channel_jitter[c] + noise).clamp(0.0, 1.0);
            }
        }

        // derived edge sample: clutter lines over a copy of the image
        let mut edge_image = image.clone();
        let mut clutter = Tensor::zeros(&[1, size, size]);
        let n_lines = rng.gen_range(1..=3);
        for _ in 0..n_lines {
            let (x0, y0, x1, y1) = (
                rng.gen_range(0.0..size as f64),
                rng.gen_range(0.0..size as f64),
                rng.gen_range(0.0..size as f64),
                rng.gen_range(0.0..size as f64),
            );
            draw_line(&mut clutter, x0, y0, x1, y1);
        }
        let line_intensity = (bg + rng.gen_range(0.25..0.4)).clamp(0.0, 1.0);
        for c in 0..3 {
            for p in 0..size * size {
                if clutter.data()[p] == 1.0 {
                    edge_image.data_mut()[c * size * size + p] = line_intensity;
                }
            }
        }
        let contour = extract_foreground_contour(&mask, CONTOUR_LOW, CONTOUR_HIGH)?;
        let mut edge_map = contour.clone();
        for p in 0..size * size {
            if clutter.data()[p] == 1.0 {
                edge_map.data_mut()[p] = 1.0;
            }
        }

        out.push(SyntheticSample {
            id: format!("synth{i:04}"),
            image,
            mask,
            edge_image,
            edge_map,
        });
    }
    Ok(out)
}

/// Lays the generated samples out as two dataset roots:
/// `<sal_root>/{images,targets}/*.png` and `<edge_root>/{images,targets}/*.png`.
pub fn write_synthetic(samples: &[SyntheticSample], sal_root: &Path, edge_root: &Path) -> Result<()> {
    for (root, images, targets) in [
        (
            sal_root,
            samples.iter().map(|s| (&s.id, &s.image)).collect::<Vec<_>>(),
            samples.iter().map(|s| (&s.id, &s.mask)).collect::<Vec<_>>(),
        ),
        (
            edge_root,
            samples.iter().map(|s| (&s.id, &s.edge_image)).collect(),
            samples.iter().map(|s| (&s.id, &s.edge_map)).collect(),
        ),
    ] {
        std::fs::create_dir_all(root.join("images"))?;
        std::fs::create_dir_all(root.join("targets"))?;
        for (id, image) in images {
            save_rgb_png(&root.join("images").join(format!("{id}.png")), image)?;
        }
        for (id, target) in targets {
            save_gray_png(&root.join("targets").join(format!("{id}.png")), target)?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// PNG helpers
// ---------------------------------------------------------------------------

/// Writes a `[3, h, w]` tensor in `[0, 1]` as an 8-bit RGB PNG.
pub fn save_rgb_png(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w) = (image.h(), image.w());
    let mut buf = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|c| {
                (image.data()[(c * h + y) * w + x].clamp(0.0, 1.0) * 255.0).round() as u8
            });
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path)
        .map_err(|e| Error::Io(std::io::Error::other(format!("{}: {e}", path.display()))))
}

/// Writes a `[1, h, w]` tensor in `[0, 1]` as an 8-bit grayscale PNG
/// (`round(255 * p)`).
pub fn save_gray_png(path: &Path, map: &Tensor) -> Result<()> {
    let (h, w) = (map.h(), map.w());
    let mut buf = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = (map.data()[y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
            buf.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    buf.save(path)
        .map_err(|e| Error::Io(std::io::Error::other(format!("{}: {e}", path.display()))))
}

/// Reads any PNG as an RGB `[3, h, w]` tensor in `[0, 1]`.
pub fn load_rgb_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                out.data_mut()[(c * h + y) * w + x] = px[c] as f64 / 255.0;
            }
        }
    }
    Ok(out)
}

/// Reads any PNG as a grayscale `[1, h, w]` tensor in `[0, 1]`.
pub fn load_gray_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Tensor::zeros(&[1, h, w]);
    for y in 0..h {
        for x in 0..w {
            out.data_mut()[y * w + x] = img.get_pixel(x as u32, y as u32)[0] as f64 / 255.0;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Dataset loading
// ---------------------------------------------------------------------------

fn png_stems(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().map(|e| e == "png").unwrap_or(false) {
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::Ingestion(format!("unusable filename {}", path.display())))?
                .to_string();
            out.push((stem, path));
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

fn resize_image(image: &Tensor, size: usize) -> Tensor {
    if image.h() == size && image.w() == size {
        image.clone()
    } else {
        crate::kernels::bilinear_forward(image, size, size)
    }
}

fn resize_target(target: &Tensor, size: usize, kind: SampleKind) -> Result<Tensor> {
    let same = target.h() == size && target.w() == size;
    let integer_factor = !same && target.h() % size == 0 && target.w() % size == 0;
    Ok(match (kind, same, integer_factor) {
        (_, true, _) => target.clone(),
        // masks: area average then re-binarize; edges: keep thin structures
        (SampleKind::Saliency, false, true) => {
            area_downsample(target, size)?.map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
        }
        (SampleKind::Edge, false, true) => max_downsample(target, size)?,
        (SampleKind::Saliency, false, false) => {
            crate::kernels::bilinear_forward(target, size, size)
                .map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
        }
        (SampleKind::Edge, false, false) => {
            crate::kernels::bilinear_forward(target, size, size)
        }
    })
}

/// Loads `root/images/*.png` with matching `root/targets/*.png`, sorted by
/// basename. Saliency targets are binarized at 128; multi-annotator edge maps
/// should be averaged into one grayscale PNG beforehand and load as `[0, 1]`.
pub fn load_dataset(root: &Path, kind: SampleKind, input_size: usize) -> Result<Vec<SampleRecord>> {
    let images = png_stems(&root.join("images"))?;
    let targets = png_stems(&root.join("targets"))?;
    let target_ids: Vec<&String> = targets.iter().map(|(s, _)| s).collect();
    let image_ids: Vec<&String> = images.iter().map(|(s, _)| s).collect();
    for (stem, _) in &images {
        if !target_ids.contains(&stem) {
            return Err(Error::Ingestion(format!(
                "image '{stem}' has no matching target"
            )));
        }
    }
    for (stem, _) in &targets {
        if !image_ids.contains(&stem) {
            return Err(Error::Ingestion(format!(
                "target '{stem}' has no matching image"
            )));
        }
    }
    let mut records = Vec::with_capacity(images.len());
    for ((stem, img_path), (_, tgt_path)) in images.iter().zip(&targets) {
        let image = resize_image(&load_rgb_png(img_path)?, input_size);
        let raw = load_gray_png(tgt_path)?;
        let target = match kind {
            SampleKind::Saliency => {
                // threshold at 128/255 before any resizing
                let binary = raw.map(|v| if v >= 128.0 / 255.0 { 1.0 } else { 0.0 });
                resize_target(&binary, input_size, kind)?
            }
            SampleKind::Edge => resize_target(&raw, input_size, kind)?,
        };
        records.push(SampleRecord {
            id: stem.clone(),
            image,
            target,
            kind,
        });
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// Paired two-stream batching
// ---------------------------------------------------------------------------

/// Deterministic two-stream sampler: each step pairs one saliency sample with
/// one edge sample. Every stream reshuffles independently per epoch with a
/// permutation derived from `(seed, stream, epoch)`, so the sequence is a pure
/// function of the step index and resuming needs no sampler state.
pub struct PairedBatches {
    sal_len: usize,
    edge_len: usize,
    seed: u64,
}

impl PairedBatches {
    pub fn new(sal_len: usize, edge_len: usize, seed: u64) -> Result<Self> {
        if sal_len == 0 || edge_len == 0 {
            return Err(Error::Config(
                "paired batching needs nonempty saliency and edge collections".into(),
            ));
        }
        Ok(PairedBatches {
            sal_len,
            edge_len,
            seed,
        })
    }

    fn pick(&self, stream: &str, len: usize, step: u64) -> usize {
        let epoch = step / len as u64;
        let pos = (step % len as u64) as usize;
        let mut order: Vec<usize> = (0..len).collect();
        let mut rng = derive_rng(self.seed, stream, epoch);
        // Fisher-Yates
        for i in (1..len).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        order[pos]
    }

    /// Indices of the pair consumed at `step`.
    pub fn pair_at(&self, step: u64) -> (usize, usize) {
        (
            self.pick("pairing-saliency", self.sal_len, step),
            self.pick("pairing-edge", self.edge_len, step),
        )
    }

    /// Steps per epoch of the longer stream.
    pub fn epoch_len(&self) -> usize {
        self.sal_len.max(self.edge_len)
    }
}
