use serde::{Deserialize, Serialize};

use crate::hand::{Keypoints2D, KinematicTemplate};
use crate::image::Image;

pub const MIN_IMAGE_SIZE: usize = 16;

/// Per-finger colors; index 0 is used for palm bones and the wrist.
pub const HAND_COLORS: [[f32; 3]; 6] = [
    [0.92, 0.92, 0.92],
    [1.00, 0.45, 0.30],
    [0.35, 1.00, 0.45],
    [0.40, 0.55, 1.00],
    [1.00, 0.90, 0.30],
    [0.90, 0.45, 1.00],
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Occluder {
    /// Inclusive-exclusive pixel bounds `[x0, y0, x1, y1]`.
    pub rect: [usize; 4],
    pub color: [f32; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderStyle {
    pub background: [f32; 3],
    pub occluder: Option<Occluder>,
}

fn color_of(joint: usize) -> [f32; 3] {
    if joint == 0 {
        HAND_COLORS[0]
    } else {
        HAND_COLORS[1 + (joint - 1) / 4]
    }
}

fn blend(img: &mut Image, y: usize, x: usize, color: [f32; 3], alpha: f32) {
    if alpha <= 0.0 {
        return;
    }
    let i = img.index(y, x, 0);
    for c in 0..3 {
        img.data[i + c] = img.data[i + c] * (1.0 - alpha) + color[c] * alpha;
    }
}

/// Pixel bounding box `[x0, x1) × [y0, y1)` of a region, clipped to the image.
fn clip_box(min: [f64; 2], max: [f64; 2], size: usize) -> Option<(usize, usize, usize, usize)> {
    let lo = |v: f64| v.floor().max(0.0);
    let hi = |v: f64| (v.ceil() + 1.0).min(size as f64);
    let (x0, y0, x1, y1) = (lo(min[0]), lo(min[1]), hi(max[0]), hi(max[1]));
    if !(x0 < x1 && y0 < y1) {
        return None;
    }
    Some((x0 as usize, y0 as usize, x1 as usize, y1 as usize))
}

fn draw_segment(img: &mut Image, a: [f64; 2], b: [f64; 2], half_width: f64, color: [f32; 3]) {
    let pad = half_width + 1.0;
    let Some((x0, y0, x1, y1)) = clip_box(
        [a[0].min(b[0]) - pad, a[1].min(b[1]) - pad],
        [a[0].max(b[0]) + pad, a[1].max(b[1]) + pad],
        img.width,
    ) else {
        return;
    };
    let d = [b[0] - a[0], b[1] - a[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    for y in y0..y1.min(img.height) {
        for x in x0..x1 {
            let p = [x as f64 - a[0], y as f64 - a[1]];
            let t = if len2 > 0.0 {
                ((p[0] * d[0] + p[1] * d[1]) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let q = [p[0] - t * d[0], p[1] - t * d[1]];
            let dist = (q[0] * q[0] + q[1] * q[1]).sqrt();
            let alpha = (half_width + 0.5 - dist).clamp(0.0, 1.0);
            blend(img, y, x, color, alpha as f32);
        }
    }
}

fn draw_blob(img: &mut Image, c: [f64; 2], sigma: f64, color: [f32; 3]) {
    let r = 3.0 * sigma;
    let Some((x0, y0, x1, y1)) = clip_box([c[0] - r, c[1] - r], [c[0] + r, c[1] + r], img.width)
    else {
        return;
    };
    for y in y0..y1.min(img.height) {
        for x in x0..x1 {
            let dx = x as f64 - c[0];
            let dy = y as f64 - c[1];
            let alpha = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            blend(img, y, x, color, alpha as f32);
        }
    }
}

/// Draws the hand skeleton over a flat background. Pixel `(x, y)` has its
/// center at coordinate `(x, y)`.
pub fn render_frame(
    j2d: &Keypoints2D,
    tmpl: &KinematicTemplate,
    style: &RenderStyle,
    size: usize,
) -> Image {
    let size = size.max(MIN_IMAGE_SIZE);
    let unit = size as f64 / 64.0;
    let mut img = Image::filled(size, size, style.background);
    for (j, p) in tmpl.parent.iter().enumerate() {
        if let Some(p) = p {
            draw_segment(&mut img, j2d.0[*p], j2d.0[j], 0.9 * unit, color_of(j));
        }
    }
    for (j, c) in j2d.0.iter().enumerate() {
        draw_blob(&mut img, *c, 1.3 * unit, color_of(j));
    }
    if let Some(occ) = &style.occluder {
        let [x0, y0, x1, y1] = occ.rect;
        for y in y0.min(size)..y1.min(size) {
            for x in x0.min(size)..x1.min(size) {
                img.set_pixel(y, x, occ.color);
            }
        }
    }
    img.clamp_unit();
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    fn style() -> RenderStyle {
        RenderStyle {
            background: [0.1, 0.15, 0.2],
            occluder: None,
        }
    }

    fn spread_keypoints() -> Keypoints2D {
        let mut k = [[0.0; 2]; 21];
        for (j, p) in k.iter_mut().enumerate() {
            *p = [8.0 + 2.3 * j as f64, 10.0 + 1.7 * ((j * 7) % 21) as f64];
        }
        Keypoints2D(k)
    }

    #[test]
    fn out_of_frame_is_pure_background() {
        let t = KinematicTemplate::standard();
        let k = Keypoints2D([[-500.0, 900.0]; 21]);
        let img = render_frame(&k, &t, &style(), 32);
        assert_eq!(img, Image::filled(32, 32, style().background));
    }

    #[test]
    fn deterministic() {
        let t = KinematicTemplate::standard();
        let k = spread_keypoints();
        assert_eq!(render_frame(&k, &t, &style(), 64), render_frame(&k, &t, &style(), 64));
    }

    #[test]
    fn blob_centers_brighter_than_background() {
        let t = KinematicTemplate::standard();
        let k = spread_keypoints();
        let img = render_frame(&k, &t, &style(), 64);
        let bg = style().background.iter().sum::<f32>() / 3.0;
        for p in k.0 {
            let (x, y) = (p[0].round() as usize, p[1].round() as usize);
            assert!(img.intensity(y, x) > bg);
        }
    }

    #[test]
    fn occluder_overwrites_region() {
        let t = KinematicTemplate::standard();
        let mut s = style();
        s.occluder = Some(Occluder {
            rect: [0, 0, 64, 64],
            color: [0.5, 0.5, 0.5],
        });
        let img = render_frame(&spread_keypoints(), &t, &s, 64);
        assert!(img.data.iter().all(|&v| v == 0.5));
    }
}
