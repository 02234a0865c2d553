//! Seeded synthetic class-conditional corpus and a rule-based classifier.
//!
//! Class `c` draws shape `c % 4` (circle, square, triangle, cross) in a warm
//! (`c < 4`) or cool (`c >= 4`) colour on a gray background.

use flexvar_tensor::{rng, Rng, Tensor};
use rand::Rng as _;

use crate::error::{invalid, Result};
use crate::quant;

pub const CLASSES: usize = 8;
pub const IMAGE_SIZE: usize = 64;
pub const BACKGROUND: f32 = 0.5;
/// Class returned when no foreground is found.
pub const FALLBACK_CLASS: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
}

pub const SHAPES: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross];

impl Shape {
    /// Indicator in shape coordinates (unit scale, y pointing down).
    pub fn contains(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Circle => u * u + v * v <= 1.0,
            Shape::Square => u.abs() <= 0.8 && v.abs() <= 0.8,
            Shape::Triangle => (-0.9..=0.8).contains(&v) && u.abs() <= (v + 0.9) * (0.9 / 1.7),
            Shape::Cross => (u.abs() <= 0.3 && v.abs() <= 0.9) || (v.abs() <= 0.3 && u.abs() <= 0.9),
        }
    }

    /// Bounding box `(u0, u1, v0, v1)` in shape coordinates.
    pub fn bbox(self) -> (f64, f64, f64, f64) {
        match self {
            Shape::Circle => (-1.0, 1.0, -1.0, 1.0),
            Shape::Square => (-0.8, 0.8, -0.8, 0.8),
            Shape::Triangle => (-0.9, 0.9, -0.9, 0.8),
            Shape::Cross => (-0.9, 0.9, -0.9, 0.9),
        }
    }
}

pub fn class_shape(class: usize) -> Shape {
    SHAPES[class % 4]
}

pub fn class_is_warm(class: usize) -> bool {
    class % CLASSES < 4
}

/// Jitter of one rendering.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderParams {
    pub center: (f64, f64),
    pub radius: f64,
    pub hue: f64,
}

impl RenderParams {
    pub fn sample(class: usize, rng: &mut Rng) -> Self {
        let c = IMAGE_SIZE as f64 / 2.0;
        let hue = if class_is_warm(class) {
            rng.gen_range(0.0..50.0)
        } else {
            rng.gen_range(190.0..250.0)
        };
        Self {
            center: (c + rng.gen_range(-5.0..5.0), c + rng.gen_range(-5.0..5.0)),
            radius: rng.gen_range(15.0..21.0),
            hue,
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Renders `class` with 4x4 supersampling for anti-aliased edges.
pub fn render(class: usize, params: &RenderParams) -> Tensor<f32> {
    let n = IMAGE_SIZE;
    let shape = class_shape(class);
    let color = hsv_to_rgb(params.hue, 0.85, 0.9);
    let mut out = vec![BACKGROUND; 3 * n * n];
    const SS: usize = 4;
    for y in 0..n {
        for x in 0..n {
            let mut hits = 0;
            for sy in 0..SS {
                for sx in 0..SS {
                    let py = y as f64 + (sy as f64 + 0.5) / SS as f64;
                    let px = x as f64 + (sx as f64 + 0.5) / SS as f64;
                    let u = (px - params.center.0) / params.radius;
                    let v = (py - params.center.1) / params.radius;
                    hits += shape.contains(u, v) as usize;
                }
            }
            let a = hits as f64 / (SS * SS) as f64;
            for (ch, &col) in color.iter().enumerate() {
                out[ch * n * n + y * n + x] = (BACKGROUND as f64 * (1.0 - a) + col * a) as f32;
            }
        }
    }
    Tensor::new(&[3, n, n], out).expect("consistent shape")
}

/// `n` images with round-robin labels; image `i` is drawn from its own
/// stream of `seed`.
pub fn synth_dataset(n: usize, seed: u64) -> Result<(Vec<Tensor<f32>>, Vec<usize>)> {
    if n == 0 {
        return Err(invalid("dataset size must be at least 1"));
    }
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % CLASSES;
        let mut r = rng::seeded_stream(seed, i as u64);
        images.push(render(class, &RenderParams::sample(class, &mut r)));
        labels.push(class);
    }
    Ok((images, labels))
}

const GRID: usize = 12;
const FG_THRESHOLD: f32 = 0.15;
const MIN_FOREGROUND: usize = 12;

fn template(shape: Shape) -> Vec<f64> {
    let (u0, u1, v0, v1) = shape.bbox();
    let ss = 6;
    let mut out = vec![0.0; GRID * GRID];
    for gy in 0..GRID {
        for gx in 0..GRID {
            let mut hits = 0;
            for sy in 0..ss {
                for sx in 0..ss {
                    let v = v0 + (v1 - v0) * (gy as f64 + (sy as f64 + 0.5) / ss as f64) / GRID as f64;
                    let u = u0 + (u1 - u0) * (gx as f64 + (sx as f64 + 0.5) / ss as f64) / GRID as f64;
                    hits += shape.contains(u, v) as usize;
                }
            }
            out[gy * GRID + gx] = hits as f64 / (ss * ss) as f64;
        }
    }
    out
}

fn quantile(sorted: &[usize], q: f64) -> usize {
    sorted[((sorted.len() - 1) as f64 * q).round() as usize]
}

/// Rule-based class: colour family from the foreground's red versus blue
/// mean, shape from the occupancy grid over the foreground's bounding box
/// compared against the four templates. Images of other sizes are resampled
/// to 64x64 first; images with no foreground map to [`FALLBACK_CLASS`].
pub fn oracle_classifier(image: &Tensor<f32>) -> Result<usize> {
    let (c, h, w) = image.chw()?;
    if c != 3 {
        return Err(invalid(format!("expected an RGB image, got {c} channels")));
    }
    let img = if (h, w) == (IMAGE_SIZE, IMAGE_SIZE) {
        image.clone()
    } else {
        quant::resize(image, (IMAGE_SIZE, IMAGE_SIZE))?
    };
    let n = IMAGE_SIZE;
    let d = img.data();
    let px = |ch: usize, y: usize, x: usize| d[ch * n * n + y * n + x];
    let mut bg = [0f32; 3];
    let mut count = 0.0;
    for i in 0..n {
        for &(y, x) in &[(0, i), (n - 1, i), (i, 0), (i, n - 1)] {
            for (ch, b) in bg.iter_mut().enumerate() {
                *b += px(ch, y, x);
            }
            count += 1.0;
        }
    }
    for b in &mut bg {
        *b /= count;
    }
    let mut ys = Vec::new();
    let mut xs = Vec::new();
    let mut fg = vec![false; n * n];
    let (mut red, mut blue) = (0.0f64, 0.0f64);
    for y in 0..n {
        for x in 0..n {
            let diff = (0..3).map(|ch| (px(ch, y, x) - bg[ch]).abs()).fold(0.0, f32::max);
            if diff > FG_THRESHOLD {
                fg[y * n + x] = true;
                ys.push(y);
                xs.push(x);
                red += px(0, y, x) as f64;
                blue += px(2, y, x) as f64;
            }
        }
    }
    if ys.len() < MIN_FOREGROUND {
        return Ok(FALLBACK_CLASS);
    }
    let family = if red >= blue { 0 } else { 4 };
    ys.sort_unstable();
    xs.sort_unstable();
    let (y0, y1) = (quantile(&ys, 0.01), quantile(&ys, 0.99) + 1);
    let (x0, x1) = (quantile(&xs, 0.01), quantile(&xs, 0.99) + 1);
    let mut occ = vec![0.0; GRID * GRID];
    let mut cells = vec![0.0; GRID * GRID];
    for y in y0..y1 {
        for x in x0..x1 {
            let gy = ((y - y0) * GRID / (y1 - y0)).min(GRID - 1);
            let gx = ((x - x0) * GRID / (x1 - x0)).min(GRID - 1);
            cells[gy * GRID + gx] += 1.0;
            if fg[y * n + x] {
                occ[gy * GRID + gx] += 1.0;
            }
        }
    }
    for (o, c) in occ.iter_mut().zip(&cells) {
        if *c > 0.0 {
            *o /= c;
        }
    }
    let mut best = (0, f64::INFINITY);
    for (s, shape) in SHAPES.iter().enumerate() {
        let t = template(*shape);
        let err: f64 = t.iter().zip(&occ).map(|(a, b)| (a - b) * (a - b)).sum();
        if err < best.1 {
            best = (s, err);
        }
    }
    Ok(family + best.0)
}


#[cfg(test)]
mod accuracy {
    use super::*;

    #[test]
    fn clean_renders_classify_to_their_label() {
        let (images, labels) = synth_dataset(400, 5).unwrap();
        let wrong: Vec<_> = images
            .iter()
            .zip(&labels)
            .enumerate()
            .filter(|(_, (im, &l))| oracle_classifier(im).unwrap() != l)
            .map(|(i, (im, &l))| (i, l, oracle_classifier(im).unwrap()))
            .collect();
        assert!(wrong.is_empty(), "{wrong:?}");
    }
}
