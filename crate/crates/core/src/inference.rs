//! Scale-by-scale sampling with a KV cache, classifier-free guidance and
//! optional teacher forcing.

use flexvar_tensor::{rng, Float, Graph, Rng, Tensor, Var};
use rand::Rng as _;

use crate::error::{invalid, Result};
use crate::model::{pe_out_of_envelope, scale_sources, ArModel, KvCache, Pattern, SequenceLayout};
use crate::pyramid::{PredictionMode, TokenMap, TokenPyramid};
use crate::quant;
use crate::scheduler::ScaleSchedule;
use crate::tokenizer::Tokenizer;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    /// Softmax temperature; `0` selects the arg-max token.
    pub temperature: f64,
    /// Keep the `k` most likely tokens; `None` keeps all.
    pub top_k: Option<usize>,
    /// Guidance scale `s` in `cond + s * (cond - uncond)`.
    pub guidance: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_k: None,
            guidance: 1.5,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, vocab: usize) -> Result<()> {
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(invalid(format!("temperature {} must be non-negative", self.temperature)));
        }
        if let Some(k) = self.top_k {
            if k == 0 || k > vocab {
                return Err(invalid(format!("top_k {k} outside [1, {vocab}]")));
            }
        }
        if !(self.guidance >= 0.0) || !self.guidance.is_finite() {
            return Err(invalid(format!("guidance scale {} must be non-negative", self.guidance)));
        }
        Ok(())
    }
}

/// Tokens imposed at one scale after sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct ForcedScale {
    pub tokens: Vec<usize>,
    /// `true` where `tokens` overrides the sample.
    pub mask: Vec<bool>,
}

/// Teacher forcing per scale (`None` leaves a scale free).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Forcing {
    pub scales: Vec<Option<ForcedScale>>,
}

impl Forcing {
    fn at(&self, j: usize) -> Option<&ForcedScale> {
        self.scales.get(j).and_then(|s| s.as_ref())
    }
}

/// Draws one token from a row of logits. Exactly one uniform number is
/// consumed per call.
pub fn sample_row<T: Float>(row: &[T], cfg: &SamplerConfig, rng: &mut Rng) -> usize {
    let u: f64 = rng.gen();
    let v = row.len();
    let k = cfg.top_k.unwrap_or(v).min(v);
    let logits: Vec<f64> = row.iter().map(|x| x.as_f64()).collect();
    let mut keep = vec![true; v];
    if k < v {
        let mut order: Vec<usize> = (0..v).collect();
        order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
        keep.fill(false);
        for &i in &order[..k] {
            keep[i] = true;
        }
    }
    if cfg.temperature == 0.0 {
        let mut best = usize::MAX;
        for i in (0..v).filter(|&i| keep[i]) {
            if best == usize::MAX || logits[i] > logits[best] {
                best = i;
            }
        }
        return best;
    }
    let m = (0..v).filter(|&i| keep[i]).map(|i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = (0..v)
        .map(|i| if keep[i] { ((logits[i] - m) / cfg.temperature).exp() } else { 0.0 })
        .collect();
    let total: f64 = weights.iter().sum();
    let target = u * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last = i;
            if acc > target {
                return i;
            }
        }
    }
    last
}

/// `cond + s * (cond - uncond)`, element-wise.
pub fn guide<T: Float>(cond: &[T], uncond: &[T], s: f64) -> Vec<T> {
    let s = T::lit(s);
    cond.iter().zip(uncond).map(|(&c, &u)| c + s * (c - u)).collect()
}

/// Tokens and diagnostics of one sampling run.
#[derive(Clone, Debug, PartialEq)]
pub struct Sampled {
    pub pyramid: TokenPyramid,
    pub warnings: Vec<String>,
}

fn envelope_warnings<T: Float>(model: &ArModel<T>, schedule: &ScaleSchedule) -> Vec<String> {
    let stored = model.config.pe_extent;
    let last = schedule.last();
    if pe_out_of_envelope(stored, last) {
        let msg = format!(
            "grid {}x{} exceeds the stored positional extent {}x{}; expect degraded output",
            last.0, last.1, stored.0, stored.1
        );
        log::warn!("{msg}");
        vec![msg]
    } else {
        Vec::new()
    }
}

fn check_forcing(forcing: Option<&Forcing>, schedule: &ScaleSchedule, vocab: usize) -> Result<()> {
    let Some(f) = forcing else { return Ok(()) };
    if f.scales.len() > schedule.steps() {
        return Err(invalid("forcing has more scales than the schedule"));
    }
    for (j, s) in f.scales.iter().enumerate() {
        if let Some(s) = s {
            let (h, w) = schedule.sizes()[j];
            if s.tokens.len() != h * w || s.mask.len() != h * w {
                return Err(invalid(format!("forcing at scale {} does not match {h}x{w}", j + 1)));
            }
            if s.tokens.iter().any(|&t| t >= vocab) {
                return Err(invalid(format!("forced token out of range at scale {}", j + 1)));
            }
        }
    }
    Ok(())
}

/// Samples a token pyramid for `class_id` under `schedule`. With
/// `use_cache` false every step recomputes the whole prefix with the
/// block-causal pattern (the reference for cache correctness).
pub fn sample_pyramid<T: Float>(
    model: &ArModel<T>,
    codebook: &Tensor<T>,
    class_id: usize,
    schedule: &ScaleSchedule,
    sampler: &SamplerConfig,
    forcing: Option<&Forcing>,
    use_cache: bool,
) -> Result<Sampled> {
    let cfg = &model.config;
    sampler.validate(cfg.vocab)?;
    if class_id > cfg.classes {
        return Err(invalid(format!("class {class_id} out of range")));
    }
    check_forcing(forcing, schedule, cfg.vocab)?;
    let warnings = envelope_warnings(model, schedule);
    let guided = sampler.guidance != 0.0;
    let mut rng = rng::seeded(sampler.seed);
    let mut pyramid = TokenPyramid::new(cfg.mode);
    let mut g = Graph::new();
    let mut p = model.params.bind(&mut g, false);
    let mut cache_c = KvCache::new(cfg.depth, cfg.dim);
    let mut cache_u = KvCache::new(cfg.depth, cfg.dim);
    for (j, &size) in schedule.sizes().iter().enumerate() {
        let n = size.0 * size.1;
        let run = |g: &mut Graph<T>, class: usize, cache: &mut KvCache<T>| -> Result<Vec<T>> {
            if use_cache {
                let source = if j == 0 {
                    None
                } else {
                    scale_sources(&pyramid, schedule, codebook)?.pop()
                };
                let x = model.embed_scale(g, &p, class, size, source.as_ref())?;
                let logits = model.forward_cached(g, &p, x, cache)?;
                Ok(g.value(logits).data().to_vec())
            } else {
                let prefix = schedule.prefix(j + 1)?;
                // Residual sources accumulate on the full grid, not the prefix's.
                let sources = scale_sources(&pyramid, schedule, codebook)?;
                let x = model.embed_inputs(g, &p, class, &prefix, &sources)?;
                let layout = SequenceLayout::new(&prefix);
                let logits = model.forward(g, &p, x, Pattern::Blocks(&layout.ends()))?;
                let all = g.value(logits).data();
                Ok(all[(layout.total - n) * cfg.vocab..].to_vec())
            }
        };
        let cond = run(&mut g, class_id, &mut cache_c)?;
        let logits = if guided {
            let uncond = run(&mut g, cfg.null_class(), &mut cache_u)?;
            guide(&cond, &uncond, sampler.guidance)
        } else {
            cond
        };
        let mut tokens: Vec<usize> = logits
            .chunks_exact(cfg.vocab)
            .map(|row| sample_row(row, sampler, &mut rng))
            .collect();
        if let Some(f) = forcing.and_then(|f| f.at(j)) {
            for (t, (&forced, &m)) in tokens.iter_mut().zip(f.tokens.iter().zip(&f.mask)) {
                if m {
                    *t = forced;
                }
            }
        }
        pyramid.levels.push(TokenMap::new(size.0, size.1, tokens)?);
        if !use_cache {
            g = Graph::new();
            p = model.params.bind(&mut g, false);
        }
    }
    Ok(Sampled { pyramid, warnings })
}

/// Image decoded from the first `j` scales (1-based). GT mode decodes level
/// `j` alone; residual mode decodes the reconstruction accumulated through
/// level `j`.
pub fn decode_at_step<T: Float>(tok: &Tokenizer<T>, pyramid: &TokenPyramid, j: usize) -> Result<Tensor<T>> {
    if j == 0 || j > pyramid.len() {
        return Err(invalid(format!("step {j} outside 1..={}", pyramid.len())));
    }
    match pyramid.mode {
        PredictionMode::Gt => tok.decode(&quant::dequantize(&pyramid.levels[j - 1], tok.codebook())?),
        PredictionMode::Residual => {
            let full = pyramid.levels.last().expect("non-empty").size();
            let mut prefix = TokenPyramid::new(PredictionMode::Residual);
            prefix.levels.extend_from_slice(&pyramid.levels[..j]);
            let acc = quant::accumulate_residuals(&prefix, tok.codebook(), full)?;
            tok.decode(acc.last().expect("non-empty"))
        }
    }
}

/// Sampled pyramid plus its final decoded image.
#[derive(Clone, Debug, PartialEq)]
pub struct Generation<T> {
    pub pyramid: TokenPyramid,
    pub image: Tensor<T>,
    pub warnings: Vec<String>,
}

pub fn generate<T: Float>(
    model: &ArModel<T>,
    tok: &Tokenizer<T>,
    class_id: usize,
    schedule: &ScaleSchedule,
    sampler: &SamplerConfig,
) -> Result<Generation<T>> {
    generate_forced(model, tok, class_id, schedule, sampler, None)
}

pub fn generate_forced<T: Float>(
    model: &ArModel<T>,
    tok: &Tokenizer<T>,
    class_id: usize,
    schedule: &ScaleSchedule,
    sampler: &SamplerConfig,
    forcing: Option<&Forcing>,
) -> Result<Generation<T>> {
    let s = sample_pyramid(model, tok.codebook(), class_id, schedule, sampler, forcing, true)?;
    let image = decode_at_step(tok, &s.pyramid, s.pyramid.len())?;
    Ok(Generation {
        pyramid: s.pyramid,
        image,
        warnings: s.warnings,
    })
}

/// Outcome of comparing cached and cache-free sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct KvReport {
    pub equal: bool,
    /// `(scale, position, cached, recomputed)` for every differing token.
    pub diffs: Vec<(usize, usize, usize, usize)>,
}

impl std::fmt::Display for KvReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.equal {
            return write!(f, "cache and recompute agree");
        }
        writeln!(f, "{} tokens differ", self.diffs.len())?;
        for (s, p, a, b) in &self.diffs {
            writeln!(f, "scale {s} position {p}: cached {a}, recomputed {b}")?;
        }
        Ok(())
    }
}

pub fn kv_equivalence_check<T: Float>(
    model: &ArModel<T>,
    codebook: &Tensor<T>,
    class_id: usize,
    schedule: &ScaleSchedule,
    sampler: &SamplerConfig,
) -> Result<KvReport> {
    let a = sample_pyramid(model, codebook, class_id, schedule, sampler, None, true)?.pyramid;
    let b = sample_pyramid(model, codebook, class_id, schedule, sampler, None, false)?.pyramid;
    let mut diffs = Vec::new();
    for (s, (la, lb)) in a.levels.iter().zip(&b.levels).enumerate() {
        for (p, (&x, &y)) in la.indices.iter().zip(&lb.indices).enumerate() {
            if x != y {
                diffs.push((s + 1, p, x, y));
            }
        }
    }
    Ok(KvReport {
        equal: diffs.is_empty() && a.len() == b.len(),
        diffs,
    })
}

/// Logits of the first scale for `class_id` (a single row).
pub fn first_scale_logits<T: Float>(model: &ArModel<T>, class_id: usize) -> Result<Vec<T>> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, false);
    let x: Var = model.embed_scale(&mut g, &p, class_id, (1, 1), None)?;
    let l = model.forward(&mut g, &p, x, Pattern::Dense)?;
    Ok(g.value(l).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_top_k_matches_unrestricted() {
        let row = [0.3f32, -1.0, 2.0, 0.0, 0.5];
        let all = SamplerConfig {
            top_k: Some(5),
            ..SamplerConfig::default()
        };
        let none = SamplerConfig::default();
        let mut a = rng::seeded(4);
        let mut b = rng::seeded(4);
        for _ in 0..200 {
            assert_eq!(sample_row(&row, &all, &mut a), sample_row(&row, &none, &mut b));
        }
    }

    #[test]
    fn top_one_and_zero_temperature_pick_the_max() {
        let row = [0.3f32, -1.0, 2.0, 2.0, 0.5];
        let mut r = rng::seeded(1);
        let k1 = SamplerConfig {
            top_k: Some(1),
            ..SamplerConfig::default()
        };
        let greedy = SamplerConfig {
            temperature: 0.0,
            ..SamplerConfig::default()
        };
        for _ in 0..20 {
            assert_eq!(sample_row(&row, &k1, &mut r), 2);
            assert_eq!(sample_row(&row, &greedy, &mut r), 2);
        }
    }

    #[test]
    fn zero_guidance_is_the_conditional() {
        let c = [1.0f32, -2.0, 0.25];
        let u = [5.0f32, 3.0, -1.0];
        assert_eq!(guide(&c, &u, 0.0), c.to_vec());
        assert_eq!(guide(&c, &u, 1.0), vec![-3.0, -7.0, 1.5]);
    }

    #[test]
    fn sampler_validation() {
        let bad_k = SamplerConfig {
            top_k: Some(0),
            ..SamplerConfig::default()
        };
        assert!(bad_k.validate(8).is_err());
        let bad_t = SamplerConfig {
            temperature: -1.0,
            ..SamplerConfig::default()
        };
        assert!(bad_t.validate(8).is_err());
        assert!(SamplerConfig::default().validate(8).is_ok());
    }
}
