//! AdamW, the tokenizer and AR training loops, and the gradient-check harness.

use std::fmt;
use std::io::Write;

use flexvar_tensor::gradcheck::{check_gradients, run_op_suite, GradCheckReport, FD_STEP};
use flexvar_tensor::{rng, Bound, Float, Graph, ParamSet, Rng, Tensor, TensorError, Var};
use rand::seq::index;
use rand::Rng as _;

use crate::error::{invalid, Error, Result};
use crate::model::{ArConfig, ArModel};
use crate::pyramid::{PredictionMode, TokenMap, TokenPyramid};
use crate::quant;
use crate::scheduler::{sample_training_schedule, ScaleSchedule};
use crate::tokenizer::{Tokenizer, TokenizerConfig};

/// Losses above this abort training.
pub const DIVERGENCE_LIMIT: f64 = 1e4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Moment buffers and step count of an AdamW run.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub hyper: AdamWConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new<T: Float>(params: &ParamSet<T>, hyper: AdamWConfig) -> Self {
        let zeros = || params.entries().iter().map(|e| vec![0.0; e.value.numel()]).collect();
        Self {
            hyper,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected AdamW update with decoupled weight decay, applied to
    /// trainable parameters only. Decay applies to entries flagged for it.
    pub fn step<T: Float>(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(invalid(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (e, g) in params.entries().iter().zip(grads) {
            if e.value.shape() != g.shape() {
                return Err(invalid(format!("gradient shape mismatch for {}", e.name)));
            }
            if !g.is_finite() {
                return Err(Error::NumericFailure(format!("non-finite gradient for {}", e.name)));
            }
        }
        self.step += 1;
        let h = self.hyper;
        let t = self.step as i32;
        let bc1 = 1.0 - h.beta1.powi(t);
        let bc2 = 1.0 - h.beta2.powi(t);
        for (i, (e, g)) in params.entries_mut().iter_mut().zip(grads).enumerate() {
            if !e.trainable {
                continue;
            }
            let decay = if e.decay { h.lr * h.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (p, &gj)) in e.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gj = gj.as_f64();
                m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * gj;
                v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                let mut x = p.as_f64();
                x -= decay * x;
                x -= h.lr * mhat / (vhat.sqrt() + h.eps);
                *p = T::lit(x);
            }
        }
        Ok(())
    }
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Float>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub optim: AdamWConfig,
    /// Global gradient-norm cap (0 disables clipping).
    pub clip_norm: f64,
    /// Pyramid levels per image for the tokenizer.
    pub pyramid_levels: usize,
    /// Schedule sampler: longest schedule.
    pub max_steps: usize,
    pub drop_p: f64,
    pub max_drops: usize,
    /// Probability of replacing the class with the null class.
    pub class_drop: f64,
}

impl TrainConfig {
    pub fn tokenizer_default() -> Self {
        Self {
            batch_size: 32,
            iterations: 2000,
            seed: 0,
            optim: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
            clip_norm: 1.0,
            pyramid_levels: 5,
            max_steps: 7,
            drop_p: 0.05,
            max_drops: 2,
            class_drop: 0.0,
        }
    }

    pub fn ar_default() -> Self {
        Self {
            batch_size: 8,
            iterations: 2000,
            seed: 0,
            optim: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
            clip_norm: 1.0,
            pyramid_levels: 5,
            max_steps: 7,
            drop_p: 0.05,
            max_drops: 2,
            class_drop: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.iterations == 0 {
            return Err(invalid("batch size and iterations must be positive"));
        }
        if !(0.0..=1.0).contains(&self.drop_p) || !(0.0..=1.0).contains(&self.class_drop) {
            return Err(invalid("probabilities must lie in [0, 1]"));
        }
        if self.optim.lr < 0.0 || self.optim.weight_decay < 0.0 || self.optim.eps <= 0.0 {
            return Err(invalid("learning rate and decay must be non-negative, eps positive"));
        }
        if self.pyramid_levels < 2 || self.max_steps < 2 {
            return Err(invalid("pyramids and schedules need at least two levels"));
        }
        Ok(())
    }
}

/// Loss of every iteration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

fn log_line(sink: &mut Option<&mut dyn Write>, iter: usize, loss: f64, lr: f64) -> Result<()> {
    if let Some(w) = sink {
        writeln!(w, "{iter}\t{loss}\t{lr}")?;
    }
    Ok(())
}

fn check_loss(iter: usize, loss: f64) -> Result<()> {
    if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
        return Err(Error::NumericFailure(format!("training diverged at iteration {iter}: loss {loss}")));
    }
    Ok(())
}

fn pick_batch(rng: &mut Rng, n: usize, b: usize) -> Vec<usize> {
    if b >= n {
        (0..n).collect()
    } else {
        let mut v = index::sample(rng, n, b).into_vec();
        v.sort_unstable();
        v
    }
}

/// Multi-scale tokenizer training. The tokenizer should already carry its
/// initial codebook (see [`Tokenizer::init_codebook_from_data`]).
pub fn train_tokenizer(
    tok: &mut Tokenizer<f32>,
    images: &[Tensor<f32>],
    cfg: &TrainConfig,
    mut sink: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(invalid("empty dataset"));
    }
    let mut rng = rng::seeded_stream(cfg.seed, 1);
    let mut opt = OptimState::new(&tok.params, cfg.optim);
    let mut report = TrainReport::default();
    for iter in 0..cfg.iterations {
        let batch = pick_batch(&mut rng, images.len(), cfg.batch_size);
        let mut g = Graph::new();
        let p = tok.params.bind(&mut g, true);
        let mut terms = Vec::with_capacity(batch.len());
        for &i in &batch {
            let (_, h, w) = images[i].chw()?;
            let full = (h / tok.config.patch, w / tok.config.patch);
            let k = cfg.pyramid_levels.min(full.0.min(full.1));
            let sizes = if k >= 2 {
                quant::sample_pyramid_sizes(full, k, &mut rng)?
            } else {
                vec![full]
            };
            let (l, _) = tok.loss_var(&mut g, &p, &images[i], &sizes, None)?;
            terms.push(g.reshape(l, &[1])?);
        }
        let loss = batch_mean(&mut g, &terms)?;
        let value = g.value(loss).item().as_f64();
        check_loss(iter, value)?;
        g.backward(loss)?;
        let mut grads = tok.params.grads(&g, &p);
        clip_grad_norm(&mut grads, cfg.clip_norm);
        opt.step(&mut tok.params, &grads)?;
        log_line(&mut sink, iter, value, cfg.optim.lr)?;
        report.losses.push(value);
    }
    Ok(report)
}

fn batch_mean<T: Float>(g: &mut Graph<T>, terms: &[Var]) -> Result<Var> {
    let all = if terms.len() == 1 { terms[0] } else { g.concat(terms)? };
    Ok(g.mean(all)?)
}

/// Token pyramid of `latent` under `schedule` in the given mode.
pub fn pyramid_for<T: Float>(
    latent: &Tensor<T>,
    schedule: &ScaleSchedule,
    codebook: &Tensor<T>,
    mode: PredictionMode,
) -> Result<TokenPyramid> {
    match mode {
        PredictionMode::Gt => quant::gt_pyramid(latent, schedule, codebook),
        PredictionMode::Residual => Ok(quant::residual_quantize_pyramid(latent, schedule, codebook)?.tokens),
    }
}

/// Scale-wise AR training on a frozen tokenizer. One schedule is drawn per
/// batch; each image's class is replaced by the null class with
/// probability `class_drop`.
pub fn train_ar(
    model: &mut ArModel<f32>,
    tok: &Tokenizer<f32>,
    images: &[Tensor<f32>],
    labels: &[usize],
    cfg: &TrainConfig,
    mut sink: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if images.is_empty() || images.len() != labels.len() {
        return Err(invalid("dataset must be non-empty with one label per image"));
    }
    if tok.config.channels != model.config.latent_channels || tok.config.codebook_size != model.config.vocab {
        return Err(invalid("tokenizer and model disagree on code width or vocabulary"));
    }
    let latents = images.iter().map(|im| tok.encode(im)).collect::<Result<Vec<_>>>()?;
    let (_, h, w) = latents[0].chw()?;
    if latents.iter().any(|z| z.shape() != latents[0].shape()) {
        return Err(invalid("all training images must share one size"));
    }
    let codebook = tok.codebook();
    let mut rng = rng::seeded_stream(cfg.seed, 2);
    let mut opt = OptimState::new(&model.params, cfg.optim);
    let mut report = TrainReport::default();
    for iter in 0..cfg.iterations {
        let schedule = sample_training_schedule(&mut rng, cfg.max_steps, (h, w), cfg.drop_p, cfg.max_drops)?;
        let batch = pick_batch(&mut rng, images.len(), cfg.batch_size);
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, true);
        let mut terms = Vec::with_capacity(batch.len());
        for &i in &batch {
            let class = if rng.gen::<f64>() < cfg.class_drop {
                model.config.null_class()
            } else {
                labels[i]
            };
            let pyr = pyramid_for(&latents[i], &schedule, codebook, model.config.mode)?;
            let (l, _) = model.loss_var(&mut g, &p, class, &pyr, &schedule, codebook)?;
            terms.push(g.reshape(l, &[1])?);
        }
        let loss = batch_mean(&mut g, &terms)?;
        let value = g.value(loss).item().as_f64();
        check_loss(iter, value)?;
        g.backward(loss)?;
        let mut grads = model.params.grads(&g, &p);
        clip_grad_norm(&mut grads, cfg.clip_norm);
        opt.step(&mut model.params, &grads)?;
        log_line(&mut sink, iter, value, cfg.optim.lr)?;
        report.losses.push(value);
    }
    Ok(report)
}

/// Parts of the gradient-check harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradCheckModule {
    /// Every graph op on tiny random inputs.
    Ops,
    /// Composed multi-scale tokenizer loss with frozen code choices.
    Tokenizer,
    /// Composed AR cross-entropy on a two-scale schedule.
    Ar,
    /// Straight-through identity of the quantizer gradient.
    StraightThrough,
    All,
}

impl GradCheckModule {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "ops" => Self::Ops,
            "tokenizer" => Self::Tokenizer,
            "ar" => Self::Ar,
            "straight-through" => Self::StraightThrough,
            "all" => Self::All,
            other => return Err(invalid(format!("unknown grad-check module {other:?}"))),
        })
    }

    fn includes(self, m: Self) -> bool {
        self == Self::All || self == m
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckSummary {
    pub entries: Vec<(String, GradCheckReport)>,
}

impl GradCheckSummary {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|(_, r)| r.max_rel_err).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradCheckSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, r) in &self.entries {
            writeln!(f, "{name}\t{:.3e}\t{}", r.max_rel_err, r.entries)?;
        }
        Ok(())
    }
}

fn tiny_tokenizer(rng: &mut Rng) -> Result<Tokenizer<f64>> {
    Tokenizer::new(
        TokenizerConfig {
            patch: 2,
            channels: 3,
            codebook_size: 5,
            hidden: 4,
            blocks: 1,
            mlp_ratio: 2,
            beta: 0.25,
        },
        rng,
    )
}

fn tiny_ar(rng: &mut Rng) -> Result<ArModel<f64>> {
    let mut m = ArModel::new(
        ArConfig {
            depth: 1,
            dim: 8,
            heads: 2,
            vocab: 5,
            classes: 3,
            mode: PredictionMode::Gt,
            pe_extent: (4, 4),
            latent_channels: 3,
            mlp_ratio: 2,
            learn_pe: true,
        },
        rng,
    )?;
    // Non-trivial norm parameters so their gradients are exercised.
    for e in m.params.entries_mut() {
        if e.name.ends_with(".g") || e.name.ends_with(".b") {
            let t: Tensor<f64> = rng::normal(rng, e.value.shape(), 0.3);
            for (x, d) in e.value.data_mut().iter_mut().zip(t.data()) {
                *x += d;
            }
        }
    }
    Ok(m)
}

fn into_tensor_error(e: Error) -> TensorError {
    match e {
        Error::NumericFailure(m) => TensorError::NumericFailure(m),
        other => TensorError::InvalidArgument(other.to_string()),
    }
}

fn param_inputs(ps: &ParamSet<f64>) -> Vec<Tensor<f64>> {
    ps.entries().iter().map(|e| e.value.clone()).collect()
}

/// Finite-difference validation in 64-bit mode.
pub fn grad_check(module: GradCheckModule, seed: u64) -> Result<GradCheckSummary> {
    let mut rng = rng::seeded(seed);
    let mut out = GradCheckSummary::default();
    if module.includes(GradCheckModule::Ops) {
        for (name, r) in run_op_suite(10, &mut rng)? {
            out.entries.push((format!("op.{name}"), r));
        }
    }
    if module.includes(GradCheckModule::Tokenizer) {
        let tok = tiny_tokenizer(&mut rng)?;
        let image: Tensor<f64> = rng::uniform(&mut rng, &[3, 4, 4], 0.0, 1.0);
        let sizes = [(1, 1), (2, 2)];
        let frozen = tok.freeze_quant(&image, &sizes)?;
        let r = check_gradients(&param_inputs(&tok.params), FD_STEP, |g, vars| {
            let p = Bound::from_vars(vars.to_vec());
            tok.loss_var(g, &p, &image, &sizes, Some(&frozen)).map(|r| r.0).map_err(into_tensor_error)
        })?;
        out.entries.push(("loss.tokenizer".into(), r));
    }
    if module.includes(GradCheckModule::Ar) {
        let m = tiny_ar(&mut rng)?;
        let codebook: Tensor<f64> = rng::normal(&mut rng, &[5, 3], 1.0);
        let schedule = ScaleSchedule::square(&[1, 2])?;
        let mut pyr = TokenPyramid::new(PredictionMode::Gt);
        pyr.levels.push(TokenMap::new(1, 1, vec![3])?);
        pyr.levels.push(TokenMap::new(2, 2, vec![0, 4, 1, 1])?);
        let r = check_gradients(&param_inputs(&m.params), FD_STEP, |g, vars| {
            let p = Bound::from_vars(vars.to_vec());
            m.loss_var(g, &p, 1, &pyr, &schedule, &codebook).map(|r| r.0).map_err(into_tensor_error)
        })?;
        out.entries.push(("loss.ar".into(), r));
    }
    if module.includes(GradCheckModule::StraightThrough) {
        out.entries.push(("straight_through".into(), straight_through_check(&mut rng)?));
    }
    Ok(out)
}

/// Gradient reaching the latent through the quantizer equals the gradient
/// at the quantized values.
fn straight_through_check(rng: &mut Rng) -> Result<GradCheckReport> {
    let codebook: Tensor<f64> = rng::normal(rng, &[6, 3], 1.0);
    let latent: Tensor<f64> = rng::normal(rng, &[3, 2, 2], 1.0);
    let target: Tensor<f64> = rng::normal(rng, &[3, 2, 2], 1.0);
    let (_, q) = quant::quantize(&latent, &codebook)?;
    let loss = |g: &mut Graph<f64>, x: Var| -> Result<Var> {
        let t = g.constant(target.clone());
        let sq = g.mul(x, x)?;
        let y = g.add(sq, t)?;
        Ok(g.mse(y, t)?)
    };
    let mut g = Graph::new();
    let f = g.param(latent.clone());
    let st = g.straight_through(f, q.clone())?;
    let l = loss(&mut g, st)?;
    g.backward(l)?;
    let through = g.grad_tensor(f);
    let mut g2 = Graph::new();
    let qv = g2.param(q);
    let l2 = loss(&mut g2, qv)?;
    g2.backward(l2)?;
    let direct = g2.grad_tensor(qv);
    let mut r = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        entries: through.numel(),
    };
    for (&a, &b) in through.data().iter().zip(direct.data()) {
        r.max_rel_err = r.max_rel_err.max(flexvar_tensor::gradcheck::rel_err(a, b));
        r.max_abs_err = r.max_abs_err.max((a - b).abs());
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_zero_decay_leaves_params() {
        let mut ps = ParamSet::<f64>::new();
        ps.add("w", Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap(), true);
        let before = ps.get(ps.id("w").unwrap()).clone();
        let mut st = OptimState::new(
            &ps,
            AdamWConfig {
                lr: 0.1,
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
        );
        st.step(&mut ps, &[Tensor::zeros(&[3])]).unwrap();
        assert_eq!(ps.get(ps.id("w").unwrap()), &before);
    }

    #[test]
    fn hand_evaluated_single_step() {
        // m = 0.1, v = 0.05; mhat = 1, vhat = 1; step = 0.1 * 1 / (1 + 1e-8)
        let mut ps = ParamSet::<f64>::new();
        let id = ps.add("w", Tensor::scalar(0.7), false);
        let mut st = OptimState::new(
            &ps,
            AdamWConfig {
                lr: 0.1,
                beta1: 0.9,
                beta2: 0.95,
                eps: 1e-8,
                weight_decay: 0.0,
            },
        );
        st.step(&mut ps, &[Tensor::scalar(1.0)]).unwrap();
        let want = 0.7 - 0.1 / (1.0 + 1e-8);
        assert!((ps.get(id).item() - want).abs() < 1e-12);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn decay_only_scales_params() {
        let mut ps = ParamSet::<f64>::new();
        let id = ps.add("w", Tensor::scalar(2.0), true);
        let mut st = OptimState::new(
            &ps,
            AdamWConfig {
                lr: 0.1,
                weight_decay: 0.05,
                ..AdamWConfig::default()
            },
        );
        st.step(&mut ps, &[Tensor::scalar(0.0)]).unwrap();
        assert!((ps.get(id).item() - 2.0 * (1.0 - 0.1 * 0.05)).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut ps = ParamSet::<f32>::new();
        ps.add("w", Tensor::scalar(1.0), true);
        let mut st = OptimState::new(&ps, AdamWConfig::default());
        let r = st.step(&mut ps, &[Tensor::scalar(f32::NAN)]);
        assert!(matches!(r, Err(Error::NumericFailure(_))));
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = vec![Tensor::<f64>::from_f64(&[2], &[3.0, 4.0]).unwrap()];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn unknown_module_is_rejected() {
        assert!(GradCheckModule::parse("everything").is_err());
        assert_eq!(GradCheckModule::parse("ar").unwrap(), GradCheckModule::Ar);
    }

    #[test]
    fn straight_through_is_identity() {
        let r = grad_check(GradCheckModule::StraightThrough, 1).unwrap();
        assert_eq!(r.entries[0].1.max_rel_err, 0.0);
    }

    #[test]
    fn composed_losses_pass_finite_differences() {
        for m in [GradCheckModule::Tokenizer, GradCheckModule::Ar] {
            let r = grad_check(m, 5).unwrap();
            assert!(r.max_rel_err() < 1e-4, "{r}");
        }
    }
}
