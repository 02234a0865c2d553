//! Desk-scale metrics: moment Fréchet distance, PSNR, codebook use and
//! per-scale teacher-forced token statistics.

use std::fmt;

use flexvar_tensor::{Float, Graph, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{invalid, Result};
use crate::model::{row_cross_entropy, targets_for, ArModel, SequenceLayout};
use crate::pyramid::TokenPyramid;
use crate::quant;
use crate::scheduler::ScaleSchedule;

/// Smallest set accepted by [`moment_frechet`].
pub const MIN_SET: usize = 64;
/// Cells per side of the moment-feature grid.
pub const FEATURE_CELLS: usize = 4;
/// Side of the image the features are computed on.
const FEATURE_SIZE: usize = 64;

/// Per-cell, per-channel mean and variance on a `4 x 4` grid over the image
/// resampled to 64x64: 96 values.
pub fn moment_features(image: &Tensor<f32>) -> Result<Vec<f64>> {
    let (c, h, w) = image.chw()?;
    if c != 3 {
        return Err(invalid(format!("expected an RGB image, got {c} channels")));
    }
    let img = if (h, w) == (FEATURE_SIZE, FEATURE_SIZE) {
        image.clone()
    } else {
        quant::resize(image, (FEATURE_SIZE, FEATURE_SIZE))?
    };
    let n = FEATURE_SIZE;
    let cell = n / FEATURE_CELLS;
    let d = img.data();
    let mut out = Vec::with_capacity(FEATURE_CELLS * FEATURE_CELLS * 3 * 2);
    for cy in 0..FEATURE_CELLS {
        for cx in 0..FEATURE_CELLS {
            for ch in 0..3 {
                let vals = (0..cell * cell).map(|i| {
                    let (y, x) = (cy * cell + i / cell, cx * cell + i % cell);
                    d[ch * n * n + y * n + x] as f64
                });
                let k = (cell * cell) as f64;
                let mean = vals.clone().sum::<f64>() / k;
                let var = vals.map(|v| (v - mean) * (v - mean)).sum::<f64>() / k;
                out.push(mean);
                out.push(var);
            }
        }
    }
    Ok(out)
}

/// Sample mean and (population) covariance of feature rows.
pub fn gaussian_fit(features: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = features.len();
    if n == 0 {
        return Err(invalid("no features"));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(invalid("feature rows differ in length"));
    }
    let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mu = DVector::from_fn(d, |j, _| x.column(j).sum() / n as f64);
    let mut centered = x;
    for j in 0..d {
        let m = mu[j];
        centered.column_mut(j).add_scalar_mut(-m);
    }
    let cov = centered.transpose() * &centered / n as f64;
    Ok((mu, cov))
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`. The cross term is
/// evaluated as `tr((A^(1/2) S_b A^(1/2))^(1/2))` with `A = S_a`, which has
/// the same eigenvalues and stays symmetric.
pub fn frechet_from_stats(mu_a: &DVector<f64>, cov_a: &DMatrix<f64>, mu_b: &DVector<f64>, cov_b: &DMatrix<f64>) -> Result<f64> {
    let d = mu_a.len();
    if mu_b.len() != d || cov_a.shape() != (d, d) || cov_b.shape() != (d, d) {
        return Err(invalid("Gaussian parameters disagree in dimension"));
    }
    let diff = mu_a - mu_b;
    let ra = psd_sqrt(cov_a);
    let cross = psd_sqrt(&(&ra * cov_b * &ra)).trace();
    let v = diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    if !v.is_finite() {
        return Err(crate::Error::NumericFailure("moment_frechet".into()));
    }
    Ok(v.max(0.0))
}

/// Fréchet distance between Gaussian fits of the moment features of two
/// image sets (each at least [`MIN_SET`] images).
pub fn moment_frechet(a: &[Tensor<f32>], b: &[Tensor<f32>]) -> Result<f64> {
    if a.len() < MIN_SET || b.len() < MIN_SET {
        return Err(invalid(format!(
            "sets of {} and {} images; at least {MIN_SET} each are needed",
            a.len(),
            b.len()
        )));
    }
    let fa = a.iter().map(moment_features).collect::<Result<Vec<_>>>()?;
    let fb = b.iter().map(moment_features).collect::<Result<Vec<_>>>()?;
    let (ma, ca) = gaussian_fit(&fa)?;
    let (mb, cb) = gaussian_fit(&fb)?;
    frechet_from_stats(&ma, &ca, &mb, &cb)
}

/// PSNR in dB for signals in `[0, 1]`; infinite for identical inputs.
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(invalid(format!("shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    let mse = mse(a.data(), b.data());
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

pub fn mse(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.len().max(1) as f64
}

/// Fraction of the `vocab` codes that occur anywhere in `pyramids`.
pub fn codebook_utilization(pyramids: &[TokenPyramid], vocab: usize) -> f64 {
    let mut seen = vec![false; vocab];
    for p in pyramids {
        for l in &p.levels {
            for &i in &l.indices {
                if i < vocab {
                    seen[i] = true;
                }
            }
        }
    }
    seen.iter().filter(|&&s| s).count() as f64 / vocab.max(1) as f64
}

/// Teacher-forced arg-max accuracy and mean cross-entropy per scale.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScaleStats {
    pub accuracy: Vec<f64>,
    pub cross_entropy: Vec<f64>,
}

/// Per-scale statistics of `model` on `pyramid` (one image), conditioned on
/// `class_id`.
pub fn scale_stats<T: Float>(
    model: &ArModel<T>,
    codebook: &Tensor<T>,
    class_id: usize,
    pyramid: &TokenPyramid,
    schedule: &ScaleSchedule,
) -> Result<ScaleStats> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, false);
    let (_, logits) = model.loss_var(&mut g, &p, class_id, pyramid, schedule, codebook)?;
    let v = model.config.vocab;
    let data = g.value(logits).data();
    let targets = targets_for(pyramid, model.config.mode)?;
    let ce = row_cross_entropy(data, v, &targets);
    let layout = SequenceLayout::new(schedule);
    let mut out = ScaleStats::default();
    for s in 0..schedule.steps() {
        let r = layout.range(s);
        let n = r.len() as f64;
        let hits = r
            .clone()
            .filter(|&t| {
                let row = &data[t * v..(t + 1) * v];
                let best = (0..v).fold(0, |b, i| if row[i] > row[b] { i } else { b });
                best == targets[t]
            })
            .count();
        out.accuracy.push(hits as f64 / n);
        out.cross_entropy.push(ce[r].iter().sum::<f64>() / n);
    }
    Ok(out)
}

/// Averages per-scale statistics over several images.
pub fn mean_stats(all: &[ScaleStats]) -> ScaleStats {
    let Some(first) = all.first() else { return ScaleStats::default() };
    let k = first.accuracy.len();
    let n = all.len() as f64;
    ScaleStats {
        accuracy: (0..k).map(|s| all.iter().map(|a| a.accuracy[s]).sum::<f64>() / n).collect(),
        cross_entropy: (0..k).map(|s| all.iter().map(|a| a.cross_entropy[s]).sum::<f64>() / n).collect(),
    }
}

/// Flat `key=value` report, one metric per line.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub entries: Vec<(String, f64)>,
}

impl MetricReport {
    pub fn push(&mut self, key: impl Into<String>, value: f64) {
        self.entries.push((key.into(), value));
    }

    pub fn push_scales(&mut self, stats: &ScaleStats) {
        for (i, (a, c)) in stats.accuracy.iter().zip(&stats.cross_entropy).enumerate() {
            self.push(format!("token_accuracy.scale{}", i + 1), *a);
            self.push(format!("cross_entropy.scale{}", i + 1), *c);
        }
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut out = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| invalid(format!("line {}: expected key=value", n + 1)))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| invalid(format!("line {}: bad number {v:?}", n + 1)))?;
            out.push(k.trim(), v);
        }
        Ok(out)
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_round_trips() {
        let mut r = MetricReport::default();
        r.push("psnr", 31.25);
        r.push("codebook_utilization", 0.5);
        let back = MetricReport::parse(&r.to_string()).unwrap();
        assert_eq!(back, r);
        assert!(MetricReport::parse("oops").is_err());
    }

    #[test]
    fn psnr_of_uniform_error() {
        let a = Tensor::full(&[3, 4, 4], 0.5f32);
        let b = Tensor::full(&[3, 4, 4], 0.6f32);
        let p = psnr(&a, &b).unwrap();
        assert!((p - 20.0).abs() < 1e-4, "{p}");
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    }

    #[test]
    fn one_dimensional_frechet() {
        // N(0, 1) vs N(3, 4): 9 + 1 + 4 - 2 * 2 = 10.
        let mu_a = DVector::from_vec(vec![0.0]);
        let mu_b = DVector::from_vec(vec![3.0]);
        let ca = DMatrix::from_vec(1, 1, vec![1.0]);
        let cb = DMatrix::from_vec(1, 1, vec![4.0]);
        let d = frechet_from_stats(&mu_a, &ca, &mu_b, &cb).unwrap();
        assert!((d - 10.0).abs() < 1e-12, "{d}");
    }
}
