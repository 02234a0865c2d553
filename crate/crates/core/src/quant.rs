//! Nearest-code quantization and multi-scale pyramids over a shared codebook.

use flexvar_tensor::kernels::resize_forward;
use flexvar_tensor::{Float, Rng, Tensor};
use rand::seq::index;

use crate::error::{invalid, Result};
use crate::pyramid::{LatentPyramid, PredictionMode, TokenMap, TokenPyramid};
use crate::scheduler::ScaleSchedule;

/// Index of the nearest code (squared Euclidean distance) for each of the
/// `n` feature rows in `features` (`n x c`). Ties go to the lowest index.
pub fn nearest_codes<T: Float>(features: &[T], codebook: &[T], c: usize) -> Vec<usize> {
    features
        .chunks_exact(c)
        .map(|f| {
            let mut best = 0;
            let mut best_d = T::infinity();
            for (v, code) in codebook.chunks_exact(c).enumerate() {
                let mut d = T::zero();
                for (&a, &b) in code.iter().zip(f) {
                    let diff = a - b;
                    d += diff * diff;
                }
                if d < best_d {
                    best_d = d;
                    best = v;
                }
            }
            best
        })
        .collect()
}

fn codebook_dims<T: Float>(codebook: &Tensor<T>) -> Result<(usize, usize)> {
    let (v, c) = codebook.dims2()?;
    if v == 0 {
        return Err(invalid("empty codebook"));
    }
    Ok((v, c))
}

/// Quantizes a `C x h x w` level against `codebook` (`V x C`). Returns the
/// index map and the dequantized level.
pub fn quantize<T: Float>(level: &Tensor<T>, codebook: &Tensor<T>) -> Result<(TokenMap, Tensor<T>)> {
    let (c, h, w) = level.chw()?;
    let (_, cc) = codebook_dims(codebook)?;
    if c != cc {
        return Err(invalid(format!("level has {c} channels, codebook {cc}")));
    }
    let rows = level.chw_to_rows()?;
    let idx = nearest_codes(rows.data(), codebook.data(), c);
    let map = TokenMap::new(h, w, idx)?;
    let q = dequantize(&map, codebook)?;
    Ok((map, q))
}

/// Code vectors for every cell of `map`, as a `C x h x w` tensor.
pub fn dequantize<T: Float>(map: &TokenMap, codebook: &Tensor<T>) -> Result<Tensor<T>> {
    let (v, c) = codebook_dims(codebook)?;
    let hw = map.h * map.w;
    let mut out = vec![T::zero(); c * hw];
    let cb = codebook.data();
    for (p, &i) in map.indices.iter().enumerate() {
        if i >= v {
            return Err(invalid(format!("token {i} out of range {v}")));
        }
        for ch in 0..c {
            out[ch * hw + p] = cb[i * c + ch];
        }
    }
    Ok(Tensor::new(&[c, map.h, map.w], out)?)
}

/// Bilinear resize of a `C x h x w` tensor.
pub fn resize<T: Float>(x: &Tensor<T>, to: (usize, usize)) -> Result<Tensor<T>> {
    let (c, h, w) = x.chw()?;
    Ok(Tensor::new(&[c, to.0, to.1], resize_forward(x.data(), c, (h, w), to)?)?)
}

/// Grid sizes for a random `k`-level pyramid over `full`: `k - 1` distinct
/// heights from `1..h`, widths proportional (rounded, at least 1), sorted,
/// followed by `full` itself.
pub fn sample_pyramid_sizes(full: (usize, usize), k: usize, rng: &mut Rng) -> Result<Vec<(usize, usize)>> {
    if k < 2 {
        return Err(invalid(format!("pyramid needs at least 2 levels, got {k}")));
    }
    if full.0 < 2 || full.1 < 2 {
        return Err(invalid(format!("latent grid {full:?} too small for a pyramid")));
    }
    let available = full.0 - 1;
    if k - 1 > available {
        return Err(invalid(format!(
            "{k} levels need {} distinct smaller sizes, grid {full:?} has {available}",
            k - 1
        )));
    }
    let mut heights: Vec<usize> = index::sample(rng, available, k - 1)
        .into_iter()
        .map(|i| i + 1)
        .collect();
    heights.sort_unstable();
    let mut sizes: Vec<(usize, usize)> = heights
        .into_iter()
        .map(|h| {
            let w = (h as f64 * full.1 as f64 / full.0 as f64).round() as usize;
            (h, w.clamp(1, full.1))
        })
        .collect();
    sizes.push(full);
    Ok(sizes)
}

/// `k` random scales of `latent`; the last level is `latent` itself.
pub fn sample_scale_pyramid<T: Float>(latent: &Tensor<T>, k: usize, rng: &mut Rng) -> Result<LatentPyramid<T>> {
    let (_, h, w) = latent.chw()?;
    let sizes = sample_pyramid_sizes((h, w), k, rng)?;
    let mut levels = Vec::with_capacity(k);
    for &s in &sizes[..k - 1] {
        levels.push(resize(latent, s)?);
    }
    levels.push(latent.clone());
    Ok(LatentPyramid { levels })
}

fn check_schedule_fits<T: Float>(latent: &Tensor<T>, schedule: &ScaleSchedule) -> Result<()> {
    let (_, h, w) = latent.chw()?;
    if schedule.last() != (h, w) {
        return Err(invalid(format!(
            "schedule ends at {:?} but the latent grid is {h}x{w}",
            schedule.last()
        )));
    }
    Ok(())
}

/// Ground-truth pyramid: every scale quantizes the latent resized to that
/// scale, independently of the others.
pub fn gt_pyramid<T: Float>(latent: &Tensor<T>, schedule: &ScaleSchedule, codebook: &Tensor<T>) -> Result<TokenPyramid> {
    check_schedule_fits(latent, schedule)?;
    let mut out = TokenPyramid::new(PredictionMode::Gt);
    for &s in schedule.sizes() {
        let level = resize(latent, s)?;
        out.levels.push(quantize(&level, codebook)?.0);
    }
    Ok(out)
}

/// Residual pyramid plus the running full-grid reconstruction after every
/// level.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualPyramid<T> {
    pub tokens: TokenPyramid,
    /// `accumulated[i]`: sum of the upsampled dequantized levels `0..=i`.
    pub accumulated: Vec<Tensor<T>>,
}

impl<T: Float> ResidualPyramid<T> {
    pub fn final_accumulation(&self) -> &Tensor<T> {
        self.accumulated.last().expect("non-empty")
    }
}

/// Residual quantization: level `i` quantizes
/// `resize(latent, s_i) - resize(acc, s_i)`, then `acc += resize(deq, full)`.
/// The first level sees an empty accumulation, i.e. the downsampled latent.
pub fn residual_quantize_pyramid<T: Float>(
    latent: &Tensor<T>,
    schedule: &ScaleSchedule,
    codebook: &Tensor<T>,
) -> Result<ResidualPyramid<T>> {
    check_schedule_fits(latent, schedule)?;
    let (c, h, w) = latent.chw()?;
    let mut acc = Tensor::zeros(&[c, h, w]);
    let mut tokens = TokenPyramid::new(PredictionMode::Residual);
    let mut accumulated = Vec::with_capacity(schedule.steps());
    for &s in schedule.sizes() {
        let target = resize(latent, s)?;
        let base = resize(&acc, s)?;
        let residual = sub(&target, &base)?;
        let (map, deq) = quantize(&residual, codebook)?;
        acc = add(&acc, &resize(&deq, (h, w))?)?;
        tokens.levels.push(map);
        accumulated.push(acc.clone());
    }
    Ok(ResidualPyramid { tokens, accumulated })
}

/// Running reconstruction from residual tokens, as produced during
/// generation: `acc_i = acc_{i-1} + resize(deq(level_i), full)`.
pub fn accumulate_residuals<T: Float>(
    tokens: &TokenPyramid,
    codebook: &Tensor<T>,
    full: (usize, usize),
) -> Result<Vec<Tensor<T>>> {
    let (_, c) = codebook_dims(codebook)?;
    let mut acc = Tensor::zeros(&[c, full.0, full.1]);
    let mut out = Vec::with_capacity(tokens.len());
    for level in &tokens.levels {
        let deq = dequantize(level, codebook)?;
        acc = add(&acc, &resize(&deq, full)?)?;
        out.push(acc.clone());
    }
    Ok(out)
}

pub(crate) fn add<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip(a, b, |x, y| x + y)
}

pub(crate) fn sub<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip(a, b, |x, y| x - y)
}

fn zip<T: Float>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(invalid(format!("shape mismatch {:?} vs {:?}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Ok(Tensor::new(a.shape(), data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use flexvar_tensor::rng;

    fn codebook(rows: &[&[f64]]) -> Tensor<f64> {
        let c = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_f64(&[rows.len(), c], &flat).unwrap()
    }

    #[test]
    fn exact_match_selects_that_code() {
        let cb = codebook(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[0.3, -0.2]]);
        let level = Tensor::from_f64(&[2, 1, 1], &[0.3, -0.2]).unwrap();
        let (map, q) = quantize(&level, &cb).unwrap();
        assert_eq!(map.indices, vec![3]);
        assert_eq!(q.data(), &[0.3, -0.2]);
    }

    #[test]
    fn hand_computed_two_code_case() {
        // |(0.4,0.4)| = 0.566 < |(0.6,0.6)| = 0.849
        let cb = codebook(&[&[0.0, 0.0], &[1.0, 1.0]]);
        let level = Tensor::from_f64(&[2, 1, 1], &[0.4, 0.4]).unwrap();
        assert_eq!(quantize(&level, &cb).unwrap().0.indices, vec![0]);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let cb = codebook(&[&[1.0], &[-1.0], &[1.0]]);
        let level = Tensor::from_f64(&[1, 1, 3], &[0.0, 1.0, -1.0]).unwrap();
        assert_eq!(quantize(&level, &cb).unwrap().0.indices, vec![0, 0, 1]);
    }

    #[test]
    fn pyramid_rejects_degenerate_grids() {
        let mut r = rng::seeded(0);
        let one: Tensor<f32> = Tensor::zeros(&[4, 1, 1]);
        assert!(sample_scale_pyramid(&one, 2, &mut r).is_err());
        let four: Tensor<f32> = Tensor::zeros(&[4, 4, 4]);
        assert!(sample_scale_pyramid(&four, 5, &mut r).is_err());
        assert_eq!(sample_scale_pyramid(&four, 4, &mut r).unwrap().levels.len(), 4);
    }

    #[test]
    fn two_level_pyramid_keeps_full_latent() {
        let mut r = rng::seeded(9);
        let latent: Tensor<f32> = rng::normal(&mut r, &[3, 8, 8], 1.0);
        let p = sample_scale_pyramid(&latent, 2, &mut r).unwrap();
        assert_eq!(p.levels[1], latent);
        let (_, h, w) = p.levels[0].chw().unwrap();
        assert!(h < 8 && w < 8 && h == w);
    }

    #[test]
    fn seeded_pyramid_sizes_replay() {
        let a = sample_pyramid_sizes((8, 8), 5, &mut rng::seeded(77)).unwrap();
        let b = sample_pyramid_sizes((8, 8), 5, &mut rng::seeded(77)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        assert!(a.windows(2).all(|p| p[0].0 < p[1].0));
    }
}
