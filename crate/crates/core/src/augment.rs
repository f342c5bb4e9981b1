//! Time-coherent augmentation.
//!
//! One geometric transform (rotation, scale, translation) is drawn per
//! sequence and applied to every frame; appearance transforms (channel
//! noise, color jitter, color drop, Sobel) are drawn independently per frame.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GeometricParams {
    /// Degrees, counter-clockwise in the displayed image.
    pub rotation: f64,
    pub scale: f64,
    /// Pixels.
    pub translation: [f64; 2],
}

impl GeometricParams {
    pub const IDENTITY: GeometricParams = GeometricParams {
        rotation: 0.0,
        scale: 1.0,
        translation: [0.0, 0.0],
    };

    pub fn is_identity(&self) -> bool {
        self.rotation == 0.0 && self.scale == 1.0 && self.translation == [0.0, 0.0]
    }

    /// Linear part `A` of the forward map `p' = c + A (p - c) + t` in pixel
    /// coordinates (x right, y down).
    pub fn linear(&self) -> [[f64; 2]; 2] {
        let (s, c) = (-self.rotation.to_radians()).sin_cos();
        [[self.scale * c, -self.scale * s], [self.scale * s, self.scale * c]]
    }

    /// Maps a pixel coordinate of the source image into the warped image.
    pub fn apply_point(&self, p: [f64; 2], width: usize, height: usize) -> [f64; 2] {
        let cx = (width as f64 - 1.0) / 2.0;
        let cy = (height as f64 - 1.0) / 2.0;
        let a = self.linear();
        let (dx, dy) = (p[0] - cx, p[1] - cy);
        [
            cx + a[0][0] * dx + a[0][1] * dy + self.translation[0],
            cy + a[1][0] * dx + a[1][1] * dy + self.translation[1],
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AppearanceParams {
    pub channel_gains: [f32; 3],
    pub color_drop: bool,
    pub jitter: [f32; 3],
    pub sobel: bool,
}

impl Default for AppearanceParams {
    fn default() -> Self {
        Self {
            channel_gains: [1.0; 3],
            color_drop: false,
            jitter: [0.0; 3],
            sobel: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AppearanceOp {
    ChannelNoise,
    ColorJitter,
    ColorDrop,
    Sobel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    /// Degrees, symmetric interval `[lo, hi]`.
    pub rotation_range: [f64; 2],
    pub scale_range: [f64; 2],
    /// Fraction of the image size; translation is uniform in `±fraction·size`.
    pub translation_fraction: f64,
    pub gain_range: [f32; 2],
    pub jitter_range: [f32; 2],
    pub noise_probability: f64,
    pub jitter_probability: f64,
    pub drop_probability: f64,
    pub sobel_probability: f64,
    pub enabled: Vec<AppearanceOp>,
}

impl AugmentationPolicy {
    /// Contrastive pre-training: strong geometric and appearance changes.
    pub fn pretrain() -> Self {
        Self {
            rotation_range: [-45.0, 45.0],
            scale_range: [0.6, 2.0],
            translation_fraction: 0.3,
            gain_range: [0.6, 1.4],
            jitter_range: [-0.1, 0.1],
            noise_probability: 0.8,
            jitter_probability: 0.8,
            drop_probability: 0.2,
            sobel_probability: 0.2,
            enabled: vec![
                AppearanceOp::ChannelNoise,
                AppearanceOp::ColorJitter,
                AppearanceOp::ColorDrop,
                AppearanceOp::Sobel,
            ],
        }
    }

    /// Supervised fine-tuning: geometric transforms only.
    pub fn finetune() -> Self {
        Self {
            rotation_range: [-90.0, 90.0],
            scale_range: [0.7, 1.3],
            translation_fraction: 0.4,
            enabled: Vec::new(),
            ..Self::pretrain()
        }
    }

    /// No transform at all.
    pub fn identity() -> Self {
        Self {
            rotation_range: [0.0, 0.0],
            scale_range: [1.0, 1.0],
            translation_fraction: 0.0,
            enabled: Vec::new(),
            ..Self::pretrain()
        }
    }

    pub fn is_enabled(&self, op: AppearanceOp) -> bool {
        self.enabled.contains(&op)
    }

    pub fn validate(&self) -> Result<(), String> {
        let ordered = |r: [f64; 2]| r[0] <= r[1];
        if !ordered(self.rotation_range)
            || !ordered(self.scale_range)
            || self.scale_range[0] <= 0.0
            || self.gain_range[0] > self.gain_range[1]
            || self.jitter_range[0] > self.jitter_range[1]
            || self.translation_fraction < 0.0
        {
            return Err("augmentation ranges must be ordered and scale positive".into());
        }
        for p in [
            self.noise_probability,
            self.jitter_probability,
            self.drop_probability,
            self.sobel_probability,
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err("op probabilities must lie in [0, 1]".into());
            }
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

pub fn sample_geometric<R: Rng + ?Sized>(
    policy: &AugmentationPolicy,
    image_size: usize,
    rng: &mut R,
) -> GeometricParams {
    let t = policy.translation_fraction * image_size as f64;
    GeometricParams {
        rotation: uniform(rng, policy.rotation_range[0], policy.rotation_range[1]),
        scale: uniform(rng, policy.scale_range[0], policy.scale_range[1]),
        translation: [uniform(rng, -t, t), uniform(rng, -t, t)],
    }
}

/// Affine warp about the image center with bilinear sampling. Samples that
/// fall outside the source are treated as 0.
pub fn apply_geometric(img: &Image, p: &GeometricParams) -> Image {
    if p.is_identity() {
        return img.clone();
    }
    let (h, w) = (img.height, img.width);
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let a = p.linear();
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let inv = [[a[1][1] / det, -a[0][1] / det], [-a[1][0] / det, a[0][0] / det]];
    let mut out = Image::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - cx - p.translation[0];
            let dy = y as f64 - cy - p.translation[1];
            let sx = cx + inv[0][0] * dx + inv[0][1] * dy;
            let sy = cy + inv[1][0] * dx + inv[1][1] * dy;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = (sx - x0) as f32;
            let fy = (sy - y0) as f32;
            let (x0, y0) = (x0 as i64, y0 as i64);
            let mut acc = [0.0f32; 3];
            for (yy, wy) in [(y0, 1.0 - fy), (y0 + 1, fy)] {
                if wy == 0.0 || yy < 0 || yy >= h as i64 {
                    continue;
                }
                for (xx, wx) in [(x0, 1.0 - fx), (x0 + 1, fx)] {
                    if wx == 0.0 || xx < 0 || xx >= w as i64 {
                        continue;
                    }
                    let px = img.pixel(yy as usize, xx as usize);
                    for c in 0..3 {
                        acc[c] += wx * wy * px[c];
                    }
                }
            }
            out.set_pixel(y, x, acc.map(|v| v.clamp(0.0, 1.0)));
        }
    }
    out
}

pub fn sample_appearance<R: Rng + ?Sized>(
    policy: &AugmentationPolicy,
    rng: &mut R,
) -> AppearanceParams {
    let mut p = AppearanceParams::default();
    let [glo, ghi] = policy.gain_range.map(f64::from);
    let [jlo, jhi] = policy.jitter_range.map(f64::from);
    if policy.is_enabled(AppearanceOp::ChannelNoise) && rng.gen_bool(policy.noise_probability) {
        for g in p.channel_gains.iter_mut() {
            *g = uniform(rng, glo, ghi) as f32;
        }
    }
    if policy.is_enabled(AppearanceOp::ColorJitter) && rng.gen_bool(policy.jitter_probability) {
        for j in p.jitter.iter_mut() {
            *j = uniform(rng, jlo, jhi) as f32;
        }
    }
    if policy.is_enabled(AppearanceOp::ColorDrop) {
        p.color_drop = rng.gen_bool(policy.drop_probability);
    }
    if policy.is_enabled(AppearanceOp::Sobel) {
        p.sobel = rng.gen_bool(policy.sobel_probability);
    }
    p
}

/// Applies noise → jitter → drop → sobel, then clamps to `[0, 1]`.
pub fn apply_appearance(img: &Image, p: &AppearanceParams) -> Image {
    let mut out = img.clone();
    if p.channel_gains != [1.0; 3] || p.jitter != [0.0; 3] {
        for px in out.data.chunks_exact_mut(3) {
            for c in 0..3 {
                px[c] = px[c] * p.channel_gains[c] + p.jitter[c];
            }
        }
    }
    if p.color_drop {
        for px in out.data.chunks_exact_mut(3) {
            if px[0] == px[1] && px[1] == px[2] {
                continue;
            }
            let gray = (px[0] + px[1] + px[2]) / 3.0;
            px.fill(gray);
        }
    }
    out.clamp_unit();
    if p.sobel {
        out = sobel(&out);
    }
    out
}

/// 3×3 Sobel gradient magnitude of the luminance, replicated to all channels
/// and divided by its maximum (borders replicate the edge pixels).
pub fn sobel(img: &Image) -> Image {
    let (h, w) = (img.height, img.width);
    let lum: Vec<f32> = img.data.chunks_exact(3).map(|p| (p[0] + p[1] + p[2]) / 3.0).collect();
    let at = |y: i64, x: i64| {
        let y = y.clamp(0, h as i64 - 1) as usize;
        let x = x.clamp(0, w as i64 - 1) as usize;
        lum[y * w + x]
    };
    let mut mag = vec![0.0f32; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let right = at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1);
            let left = at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1);
            let below = at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1);
            let above = at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1);
            let (gx, gy) = (right - left, below - above);
            mag[y as usize * w + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    let max = mag.iter().cloned().fold(0.0f32, f32::max);
    let mut out = Image::zeros(h, w);
    if max > 1e-6 {
        for (px, m) in out.data.chunks_exact_mut(3).zip(&mag) {
            px.fill(m / max);
        }
    }
    out
}

/// Parameters drawn while augmenting one sequence, one entry per frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AugmentationLog {
    pub geometric: Vec<GeometricParams>,
    pub appearance: Vec<AppearanceParams>,
}

/// Augments every frame of a sequence. With `coherent = true` a single
/// geometric draw is shared by all frames; otherwise each frame gets its own
/// (the no-coherence ablation).
pub fn augment_frames<R: Rng + ?Sized>(
    frames: &[&Image],
    policy: &AugmentationPolicy,
    coherent: bool,
    rng: &mut R,
    mut log: Option<&mut AugmentationLog>,
) -> Vec<Image> {
    let size = frames.first().map_or(0, |f| f.width.max(f.height));
    let shared = sample_geometric(policy, size, rng);
    frames
        .iter()
        .enumerate()
        .map(|(t, img)| {
            let geo = if coherent || t == 0 {
                shared
            } else {
                sample_geometric(policy, size, rng)
            };
            let app = sample_appearance(policy, rng);
            if let Some(log) = log.as_deref_mut() {
                log.geometric.push(geo);
                log.appearance.push(app);
            }
            apply_appearance(&apply_geometric(img, &geo), &app)
        })
        .collect()
}

pub fn augment_sequence<R: Rng + ?Sized>(
    frames: &[Image],
    policy: &AugmentationPolicy,
    rng: &mut R,
    log: Option<&mut AugmentationLog>,
) -> Vec<Image> {
    let refs: Vec<&Image> = frames.iter().collect();
    augment_frames(&refs, policy, true, rng, log)
}
