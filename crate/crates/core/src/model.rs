//! Block-causal scale-wise transformer with a resizable 2D positional grid.

use flexvar_tensor::kernels::AttnMask;
use flexvar_tensor::{rng, Bound, Float, Graph, ParamId, ParamSet, Rng, Tensor, Var};

use crate::error::{invalid, Error, Result};
use crate::layers::{Linear, Norm};
use crate::pyramid::{PredictionMode, TokenPyramid};
use crate::quant::{self, dequantize};
use crate::scheduler::ScaleSchedule;

#[derive(Clone, Debug, PartialEq)]
pub struct ArConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub vocab: usize,
    pub classes: usize,
    pub mode: PredictionMode,
    /// Stored positional grid extent, twice the largest training grid.
    pub pe_extent: (usize, usize),
    /// Channel width of the tokenizer codes.
    pub latent_channels: usize,
    pub mlp_ratio: usize,
    pub learn_pe: bool,
}

impl Default for ArConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            dim: 128,
            heads: 4,
            vocab: 512,
            classes: 8,
            mode: PredictionMode::Gt,
            pe_extent: (16, 16),
            latent_channels: 16,
            mlp_ratio: 4,
            learn_pe: true,
        }
    }
}

impl ArConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(invalid(format!("dim {} not divisible by heads {}", self.dim, self.heads)));
        }
        if !self.dim.is_multiple_of(4) {
            return Err(invalid(format!("dim {} must be divisible by 4", self.dim)));
        }
        if self.vocab == 0 || self.classes == 0 || self.latent_channels == 0 || self.mlp_ratio == 0 {
            return Err(invalid(format!("degenerate model config {self:?}")));
        }
        if self.pe_extent.0 == 0 || self.pe_extent.1 == 0 {
            return Err(invalid("empty positional grid"));
        }
        Ok(())
    }

    /// Index of the null (unconditional) class.
    pub fn null_class(&self) -> usize {
        self.classes
    }

    pub fn to_values(&self) -> Vec<f64> {
        vec![
            self.depth as f64,
            self.dim as f64,
            self.heads as f64,
            self.vocab as f64,
            self.classes as f64,
            match self.mode {
                PredictionMode::Gt => 0.0,
                PredictionMode::Residual => 1.0,
            },
            self.pe_extent.0 as f64,
            self.pe_extent.1 as f64,
            self.latent_channels as f64,
            self.mlp_ratio as f64,
            if self.learn_pe { 1.0 } else { 0.0 },
        ]
    }

    pub fn from_values(v: &[f64]) -> Result<Self> {
        if v.len() != 11 {
            return Err(invalid(format!("model config needs 11 values, got {}", v.len())));
        }
        let c = Self {
            depth: v[0] as usize,
            dim: v[1] as usize,
            heads: v[2] as usize,
            vocab: v[3] as usize,
            classes: v[4] as usize,
            mode: if v[5] == 0.0 { PredictionMode::Gt } else { PredictionMode::Residual },
            pe_extent: (v[6] as usize, v[7] as usize),
            latent_channels: v[8] as usize,
            mlp_ratio: v[9] as usize,
            learn_pe: v[10] != 0.0,
        };
        c.validate()?;
        Ok(c)
    }
}

/// 2D sin-cos table: channels `[0, d/2)` encode the row, `[d/2, d)` the
/// column, as interleaved `sin, cos` pairs at frequencies
/// `w_j = 10000^(-4j/d)`.
pub fn sincos_init<T: Float>(d: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    if d == 0 || !d.is_multiple_of(4) {
        return Err(invalid(format!("positional width {d} must be a positive multiple of 4")));
    }
    let quarter = d / 4;
    let mut out = vec![T::zero(); d * h * w];
    for j in 0..quarter {
        let omega = 10000f64.powf(-4.0 * j as f64 / d as f64);
        for r in 0..h {
            for c in 0..w {
                let p = r * w + c;
                let (rs, rc) = (r as f64 * omega).sin_cos();
                let (cs, cc) = (c as f64 * omega).sin_cos();
                out[(2 * j) * h * w + p] = T::lit(rs);
                out[(2 * j + 1) * h * w + p] = T::lit(rc);
                out[(d / 2 + 2 * j) * h * w + p] = T::lit(cs);
                out[(d / 2 + 2 * j + 1) * h * w + p] = T::lit(cc);
            }
        }
    }
    Ok(Tensor::new(&[d, h, w], out)?)
}

/// True when `target` exceeds the stored positional grid.
pub fn pe_out_of_envelope(stored: (usize, usize), target: (usize, usize)) -> bool {
    target.0 > stored.0 || target.1 > stored.1
}

/// Positional grid resized to `target`. Sizes beyond the stored extent are
/// still produced but logged.
pub fn pe_at_scale<T: Float>(pe: &Tensor<T>, target: (usize, usize)) -> Result<Tensor<T>> {
    let (_, h, w) = pe.chw()?;
    if pe_out_of_envelope((h, w), target) {
        log::warn!(
            "positional grid {h}x{w} extrapolated to {}x{} (out of envelope)",
            target.0,
            target.1
        );
    }
    quant::resize(pe, target)
}

/// Flattened token positions of a schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceLayout {
    pub schedule: ScaleSchedule,
    pub offsets: Vec<usize>,
    pub total: usize,
}

impl SequenceLayout {
    pub fn new(schedule: &ScaleSchedule) -> Self {
        let mut offsets = Vec::with_capacity(schedule.steps());
        let mut total = 0;
        for &(h, w) in schedule.sizes() {
            offsets.push(total);
            total += h * w;
        }
        Self {
            schedule: schedule.clone(),
            offsets,
            total,
        }
    }

    /// Exclusive end of every scale block.
    pub fn ends(&self) -> Vec<usize> {
        let mut e: Vec<usize> = self.offsets[1..].to_vec();
        e.push(self.total);
        e
    }

    pub fn scale_of(&self, t: usize) -> usize {
        self.offsets.partition_point(|&o| o <= t) - 1
    }

    pub fn range(&self, scale: usize) -> std::ops::Range<usize> {
        let (h, w) = self.schedule.sizes()[scale];
        self.offsets[scale]..self.offsets[scale] + h * w
    }
}

/// `allow[t, s]` iff `scale(s) <= scale(t)`.
pub fn build_block_causal_mask(layout: &SequenceLayout) -> AttnMask {
    let l = layout.total;
    let scale: Vec<usize> = (0..l).map(|t| layout.scale_of(t)).collect();
    let mut m = AttnMask::full(l, l);
    for t in 0..l {
        for s in 0..l {
            m.allow[t * l + s] = scale[s] <= scale[t];
        }
    }
    m
}

/// Continuous maps that seed scales `2..=prefix.len()+1` of `schedule`:
/// the previous level (GT mode) or the running reconstruction (residual
/// mode), resized to the next scale's grid.
pub fn scale_sources<T: Float>(
    prefix: &TokenPyramid,
    schedule: &ScaleSchedule,
    codebook: &Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    let sizes = schedule.sizes();
    if prefix.len() > sizes.len() {
        return Err(invalid(format!(
            "prefix of {} levels is longer than the {}-step schedule",
            prefix.len(),
            sizes.len()
        )));
    }
    for (i, level) in prefix.levels.iter().enumerate() {
        if level.size() != sizes[i] {
            return Err(invalid(format!(
                "prefix level {} is {:?}, schedule expects {:?}",
                i + 1,
                level.size(),
                sizes[i]
            )));
        }
    }
    let n = prefix.len().min(sizes.len() - 1);
    let mut out = Vec::with_capacity(n);
    match prefix.mode {
        PredictionMode::Gt => {
            for j in 0..n {
                let deq = dequantize(&prefix.levels[j], codebook)?;
                out.push(quant::resize(&deq, sizes[j + 1])?);
            }
        }
        PredictionMode::Residual => {
            let acc = quant::accumulate_residuals(prefix, codebook, schedule.last())?;
            for j in 0..n {
                out.push(quant::resize(&acc[j], sizes[j + 1])?);
            }
        }
    }
    Ok(out)
}

/// Per-position targets: the flattened pyramid, checked against `mode`.
pub fn targets_for(pyramid: &TokenPyramid, mode: PredictionMode) -> Result<Vec<usize>> {
    if pyramid.mode != mode {
        return Err(invalid(format!(
            "{} pyramid supplied to a {} model",
            pyramid.mode.as_str(),
            mode.as_str()
        )));
    }
    Ok(pyramid.flat())
}

#[derive(Clone, Debug)]
struct Block {
    norm1: Norm,
    qkv: Linear,
    proj: Linear,
    norm2: Norm,
    fc1: Linear,
    fc2: Linear,
}

/// Attention pattern of a full-sequence pass.
#[derive(Clone, Copy, Debug)]
pub enum Pattern<'a> {
    /// Block-causal over consecutive scale blocks with these exclusive ends.
    Blocks(&'a [usize]),
    /// Arbitrary boolean mask.
    Mask(&'a AttnMask),
    /// Unrestricted attention.
    Dense,
}

/// Per-layer keys and values of completed scales.
#[derive(Clone, Debug)]
pub struct KvCache<T: Float> {
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    dim: usize,
    cursor: usize,
}

impl<T: Float> KvCache<T> {
    pub fn new(depth: usize, dim: usize) -> Self {
        Self {
            keys: vec![Vec::new(); depth],
            values: vec![Vec::new(); depth],
            dim,
            cursor: 0,
        }
    }

    /// Number of cached positions.
    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn keys(&self, layer: usize) -> &[T] {
        &self.keys[layer]
    }
}

#[derive(Clone, Debug)]
pub struct ArModel<T: Float = f32> {
    pub config: ArConfig,
    pub params: ParamSet<T>,
    class_emb: ParamId,
    pe: ParamId,
    in_proj: Linear,
    blocks: Vec<Block>,
    norm: Norm,
    head: Linear,
}

impl<T: Float> ArModel<T> {
    pub fn new(config: ArConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamSet::new();
        let d = config.dim;
        let hidden = d * config.mlp_ratio;
        let class_emb = ps.add("ar.class_emb", rng::normal(rng, &[config.classes + 1, d], 1.0), false);
        let pe = ps.add("ar.pe", sincos_init(d, config.pe_extent.0, config.pe_extent.1)?, false);
        ps.set_trainable(pe, config.learn_pe);
        let in_proj = Linear::new(
            &mut ps,
            "ar.in_proj",
            config.latent_channels,
            d,
            (1.0 / config.latent_channels as f64).sqrt(),
            true,
            rng,
        );
        let out_std = 0.5 / ((2 * config.depth.max(1)) as f64).sqrt();
        let blocks = (0..config.depth)
            .map(|i| {
                let n = format!("ar.blocks.{i}");
                Block {
                    norm1: Norm::new(&mut ps, &format!("{n}.norm1"), d),
                    qkv: Linear::new(&mut ps, &format!("{n}.attn.qkv"), d, 3 * d, (1.0 / d as f64).sqrt(), true, rng),
                    proj: Linear::new(&mut ps, &format!("{n}.attn.proj"), d, d, out_std / (d as f64).sqrt(), true, rng),
                    norm2: Norm::new(&mut ps, &format!("{n}.norm2"), d),
                    fc1: Linear::new(&mut ps, &format!("{n}.mlp.fc1"), d, hidden, (1.0 / d as f64).sqrt(), true, rng),
                    fc2: Linear::new(
                        &mut ps,
                        &format!("{n}.mlp.fc2"),
                        hidden,
                        d,
                        out_std / (hidden as f64).sqrt(),
                        true,
                        rng,
                    ),
                }
            })
            .collect();
        let norm = Norm::new(&mut ps, "ar.norm", d);
        let head = Linear::new(&mut ps, "ar.head", d, config.vocab, 0.1 / (d as f64).sqrt(), true, rng);
        Ok(Self {
            config,
            params: ps,
            class_emb,
            pe,
            in_proj,
            blocks,
            norm,
            head,
        })
    }

    /// Rebuilds the layout for `config` and loads `params` into it.
    pub fn with_params(config: ArConfig, params: &ParamSet<T>) -> Result<Self> {
        let mut m = Self::new(config, &mut rng::seeded(0))?;
        m.params
            .load_from(params.entries().iter().map(|e| (e.name.as_str(), &e.value)))?;
        let learn = m.config.learn_pe;
        m.params.set_trainable(m.pe, learn);
        Ok(m)
    }

    pub fn cast<U: Float>(&self) -> Result<ArModel<U>> {
        ArModel::with_params(self.config.clone(), &self.params.cast())
    }

    pub fn pe_grid(&self) -> &Tensor<T> {
        self.params.get(self.pe)
    }

    pub fn pe_id(&self) -> ParamId {
        self.pe
    }

    pub fn head_id(&self) -> ParamId {
        self.head.w
    }

    fn pe_rows(&self, g: &mut Graph<T>, p: &Bound, size: (usize, usize)) -> Result<Var> {
        if pe_out_of_envelope(self.config.pe_extent, size) {
            log::warn!(
                "positional grid {:?} extrapolated to {size:?} (out of envelope)",
                self.config.pe_extent
            );
        }
        let grid = if size == self.config.pe_extent {
            p[self.pe]
        } else {
            g.resize(p[self.pe], size)?
        };
        Ok(g.chw_to_rows(grid)?)
    }

    /// Input rows of one scale: the class start unit for the first scale,
    /// otherwise the projected `source` map; positional rows are added.
    pub fn embed_scale(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        class_id: usize,
        size: (usize, usize),
        source: Option<&Tensor<T>>,
    ) -> Result<Var> {
        let pe = self.pe_rows(g, p, size)?;
        let x = match source {
            None => {
                if size != (1, 1) {
                    return Err(invalid(format!("the start unit is 1x1, got {size:?}")));
                }
                if class_id > self.config.classes {
                    return Err(invalid(format!(
                        "class {class_id} out of range (null class is {})",
                        self.config.classes
                    )));
                }
                g.embedding(p[self.class_emb], &[class_id])?
            }
            Some(src) => {
                let (c, h, w) = src.chw()?;
                if (h, w) != size || c != self.config.latent_channels {
                    return Err(invalid(format!(
                        "source map {:?} does not match scale {size:?} with {} channels",
                        src.shape(),
                        self.config.latent_channels
                    )));
                }
                let s = g.constant(src.clone());
                let rows = g.chw_to_rows(s)?;
                self.in_proj.forward(g, p, rows)?
            }
        };
        Ok(g.add(x, pe)?)
    }

    /// Inputs for the first `sources.len() + 1` scales of `schedule`.
    pub fn embed_inputs(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        class_id: usize,
        schedule: &ScaleSchedule,
        sources: &[Tensor<T>],
    ) -> Result<Var> {
        let sizes = schedule.sizes();
        if sources.len() >= sizes.len() {
            return Err(invalid(format!(
                "{} source maps for a {}-step schedule",
                sources.len(),
                sizes.len()
            )));
        }
        let mut parts = vec![self.embed_scale(g, p, class_id, sizes[0], None)?];
        for (j, src) in sources.iter().enumerate() {
            parts.push(self.embed_scale(g, p, class_id, sizes[j + 1], Some(src))?);
        }
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        Ok(g.concat(&parts)?)
    }

    fn block_forward(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        i: usize,
        x: Var,
        attend: &mut dyn FnMut(&mut Graph<T>, Var, Var, Var) -> Result<Var>,
    ) -> Result<Var> {
        let b = &self.blocks[i];
        let d = self.config.dim;
        let h = b.norm1.forward(g, p, x)?;
        let qkv = b.qkv.forward(g, p, h)?;
        let q = g.slice_cols(qkv, 0, d)?;
        let k = g.slice_cols(qkv, d, d)?;
        let v = g.slice_cols(qkv, 2 * d, d)?;
        let a = attend(g, q, k, v)?;
        let a = b.proj.forward(g, p, a)?;
        let x = g.add(x, a)?;
        let h = b.norm2.forward(g, p, x)?;
        let h = b.fc1.forward(g, p, h)?;
        let h = g.gelu(h)?;
        let h = b.fc2.forward(g, p, h)?;
        Ok(g.add(x, h)?)
    }

    fn output(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.norm.forward(g, p, x).map_err(|e| named(e, "ar.norm"))?;
        self.head.forward(g, p, h).map_err(|e| named(e, "ar.head"))
    }

    /// Full-sequence logits `[L, V]`.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, inputs: Var, pattern: Pattern<'_>) -> Result<Var> {
        let l = g.shape(inputs)[0];
        match pattern {
            Pattern::Blocks(ends) if ends.last() != Some(&l) => {
                return Err(invalid(format!("block ends {ends:?} for {l} inputs")));
            }
            Pattern::Mask(m) if m.rows != l || m.cols != l => {
                return Err(invalid(format!("{}x{} mask for {l} inputs", m.rows, m.cols)));
            }
            _ => {}
        }
        let heads = self.config.heads;
        let mut x = inputs;
        for i in 0..self.blocks.len() {
            let mut attend = |g: &mut Graph<T>, q: Var, k: Var, v: Var| -> Result<Var> {
                Ok(match pattern {
                    Pattern::Blocks(ends) => g.block_attention(q, k, v, heads, ends)?,
                    Pattern::Mask(m) => g.attention(q, k, v, heads, Some(m))?,
                    Pattern::Dense => g.attention(q, k, v, heads, None)?,
                })
            };
            x = self
                .block_forward(g, p, i, x, &mut attend)
                .map_err(|e| named(e, &format!("ar.blocks.{i}")))?;
        }
        self.output(g, p, x)
    }

    /// Logits for the rows of one new scale, attending to `cache` plus the
    /// new rows; the new keys and values are appended to `cache`.
    pub fn forward_cached(&self, g: &mut Graph<T>, p: &Bound, inputs: Var, cache: &mut KvCache<T>) -> Result<Var> {
        let n = g.shape(inputs)[0];
        let heads = self.config.heads;
        let d = self.config.dim;
        if cache.keys.len() != self.blocks.len() || cache.dim != d {
            return Err(invalid("cache does not match the model"));
        }
        let mut x = inputs;
        let mut new_kv = Vec::with_capacity(self.blocks.len());
        for i in 0..self.blocks.len() {
            let cursor = cache.cursor;
            let (ck, cv) = (&cache.keys[i], &cache.values[i]);
            let mut attend = |g: &mut Graph<T>, q: Var, k: Var, v: Var| -> Result<Var> {
                new_kv.push((g.value(k).data().to_vec(), g.value(v).data().to_vec()));
                let (k_all, v_all) = if cursor == 0 {
                    (k, v)
                } else {
                    let pk = g.constant(Tensor::new(&[cursor, d], ck.clone())?);
                    let pv = g.constant(Tensor::new(&[cursor, d], cv.clone())?);
                    (g.concat(&[pk, k])?, g.concat(&[pv, v])?)
                };
                Ok(g.attention(q, k_all, v_all, heads, None)?)
            };
            x = self
                .block_forward(g, p, i, x, &mut attend)
                .map_err(|e| named(e, &format!("ar.blocks.{i}")))?;
        }
        let logits = self.output(g, p, x)?;
        for (i, (k, v)) in new_kv.into_iter().enumerate() {
            cache.keys[i].extend_from_slice(&k);
            cache.values[i].extend_from_slice(&v);
        }
        cache.cursor += n;
        Ok(logits)
    }

    /// Teacher-forced mean cross-entropy of `pyramid` under `schedule`, plus
    /// the logits for metrics.
    pub fn loss_var(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        class_id: usize,
        pyramid: &TokenPyramid,
        schedule: &ScaleSchedule,
        codebook: &Tensor<T>,
    ) -> Result<(Var, Var)> {
        let targets = targets_for(pyramid, self.config.mode)?;
        if pyramid.sizes() != schedule.sizes() {
            return Err(invalid(format!(
                "pyramid sizes {:?} do not match schedule {schedule}",
                pyramid.sizes()
            )));
        }
        let sources = scale_sources(pyramid, schedule, codebook)?;
        let inputs = self.embed_inputs(g, p, class_id, schedule, &sources)?;
        let layout = SequenceLayout::new(schedule);
        let logits = self.forward(g, p, inputs, Pattern::Blocks(&layout.ends()))?;
        let loss = g.cross_entropy(logits, &targets)?;
        Ok((loss, logits))
    }
}

fn named(e: Error, layer: &str) -> Error {
    match e {
        Error::NumericFailure(op) => Error::NumericFailure(format!("{layer}: {op}")),
        other => other,
    }
}

/// Per-row cross-entropy of `[n, v]` logits against `targets`.
pub fn row_cross_entropy<T: Float>(logits: &[T], v: usize, targets: &[usize]) -> Vec<f64> {
    logits
        .chunks_exact(v)
        .zip(targets)
        .map(|(row, &t)| {
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &x| a.max(x.as_f64()));
            let z: f64 = row.iter().map(|&x| (x.as_f64() - m).exp()).sum();
            m + z.ln() - row[t].as_f64()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyramid::TokenMap;

    fn tiny() -> ArConfig {
        ArConfig {
            depth: 2,
            dim: 8,
            heads: 2,
            vocab: 6,
            classes: 3,
            mode: PredictionMode::Gt,
            pe_extent: (6, 6),
            latent_channels: 3,
            mlp_ratio: 2,
            learn_pe: true,
        }
    }

    #[test]
    fn sincos_origin_is_sin0_cos1() {
        let pe: Tensor<f64> = sincos_init(8, 3, 3).unwrap();
        for ch in 0..8 {
            let v = pe.data()[ch * 9];
            assert_eq!(v, if ch % 2 == 0 { 0.0 } else { 1.0 });
        }
        assert!(sincos_init::<f64>(6, 2, 2).is_err());
    }

    #[test]
    fn mask_examples() {
        let one = SequenceLayout::new(&ScaleSchedule::square(&[1]).unwrap());
        assert_eq!(build_block_causal_mask(&one).allow, vec![true]);
        let two = SequenceLayout::new(&ScaleSchedule::square(&[1, 2]).unwrap());
        let m = build_block_causal_mask(&two);
        assert_eq!(&m.allow[..5], &[true, false, false, false, false]);
        assert!(m.allow[5..].iter().all(|&a| a));
        assert_eq!(two.ends(), vec![1, 5]);
        assert_eq!(two.scale_of(0), 0);
        assert_eq!(two.scale_of(4), 1);
    }

    #[test]
    fn config_values_round_trip() {
        let c = ArConfig {
            mode: PredictionMode::Residual,
            learn_pe: false,
            ..tiny()
        };
        assert_eq!(ArConfig::from_values(&c.to_values()).unwrap(), c);
        let bad = ArConfig { heads: 3, ..tiny() };
        assert!(ArModel::<f32>::new(bad, &mut rng::seeded(0)).is_err());
    }

    #[test]
    fn start_unit_is_class_row_plus_pe() {
        let m = ArModel::<f64>::new(tiny(), &mut rng::seeded(3)).unwrap();
        let mut g = Graph::new();
        let p = m.params.bind(&mut g, false);
        let sched = ScaleSchedule::square(&[1]).unwrap();
        let x = m.embed_inputs(&mut g, &p, 2, &sched, &[]).unwrap();
        let pe = quant::resize(m.pe_grid(), (1, 1)).unwrap();
        let cls = &m.params.get(m.class_emb).data()[2 * 8..3 * 8];
        for ch in 0..8 {
            assert_eq!(g.value(x).data()[ch], cls[ch] + pe.data()[ch]);
        }
    }

    #[test]
    fn mode_mismatch_is_rejected() {
        let mut p = TokenPyramid::new(PredictionMode::Residual);
        p.levels.push(TokenMap::new(1, 1, vec![0]).unwrap());
        assert!(targets_for(&p, PredictionMode::Gt).is_err());
        assert_eq!(targets_for(&p, PredictionMode::Residual).unwrap(), vec![0]);
    }

    #[test]
    fn nan_input_names_the_layer() {
        let m = ArModel::<f64>::new(tiny(), &mut rng::seeded(3)).unwrap();
        let mut g = Graph::new();
        let p = m.params.bind(&mut g, false);
        let mut bad = Tensor::zeros(&[2, 8]);
        bad.data_mut()[3] = f64::NAN;
        let x = g.constant(bad);
        match m.forward(&mut g, &p, x, Pattern::Dense) {
            Err(Error::NumericFailure(msg)) => assert!(msg.starts_with("ar.blocks.0"), "{msg}"),
            other => panic!("expected a numeric failure, got {other:?}"),
        }
    }
}
