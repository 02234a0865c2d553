//! Scalable VQ tokenizer: patch encoder, shared codebook, per-scale decoder.
//!
//! The encoder and decoder act on each patch independently (patch embedding
//! followed by residual MLP blocks), so a decoded patch depends only on the
//! code at its grid cell.

use std::rc::Rc;

use flexvar_tensor::{rng, Bound, Float, Graph, ParamId, ParamSet, Rng, Tensor, Var};
use rand::seq::index;
use rand::Rng as _;

use crate::error::{invalid, Result};
use crate::layers::{Linear, MlpBlock, Norm};
use crate::pyramid::TokenPyramid;
use crate::quant::{self, nearest_codes};
use crate::scheduler::ScaleSchedule;

pub const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct TokenizerConfig {
    /// Patch (downsampling) factor.
    pub patch: usize,
    /// Latent channel width `C`.
    pub channels: usize,
    /// Number of codes `V`.
    pub codebook_size: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
    /// Commitment weight.
    pub beta: f64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            patch: 8,
            channels: 16,
            codebook_size: 512,
            hidden: 256,
            blocks: 2,
            mlp_ratio: 2,
            beta: 0.25,
        }
    }
}

impl TokenizerConfig {
    fn patch_dim(&self) -> usize {
        IMAGE_CHANNELS * self.patch * self.patch
    }

    /// Numeric encoding stored alongside the weights in checkpoints.
    pub fn to_values(&self) -> Vec<f64> {
        vec![
            self.patch as f64,
            self.channels as f64,
            self.codebook_size as f64,
            self.hidden as f64,
            self.blocks as f64,
            self.mlp_ratio as f64,
            self.beta,
        ]
    }

    pub fn from_values(v: &[f64]) -> Result<Self> {
        if v.len() != 7 {
            return Err(invalid(format!("tokenizer config needs 7 values, got {}", v.len())));
        }
        Ok(Self {
            patch: v[0] as usize,
            channels: v[1] as usize,
            codebook_size: v[2] as usize,
            hidden: v[3] as usize,
            blocks: v[4] as usize,
            mlp_ratio: v[5] as usize,
            beta: v[6],
        })
    }
}

/// Quantizer decisions held fixed while the continuous inputs move.
#[derive(Clone, Debug)]
pub struct FrozenQuant<T> {
    pub indices: Vec<Vec<usize>>,
    /// `q - f` per level, standing in for the straight-through replacement.
    pub offsets: Vec<Tensor<T>>,
    /// Values standing in for the stop-gradient copies of `f` and `q`.
    pub latents: Vec<Tensor<T>>,
    pub quantized: Vec<Tensor<T>>,
}

/// Component terms of the multi-scale tokenizer loss.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct VaeLossParts {
    pub recon: f64,
    pub codebook: f64,
    pub commit: f64,
}

#[derive(Clone, Debug)]
pub struct Tokenizer<T: Float = f32> {
    pub config: TokenizerConfig,
    pub params: ParamSet<T>,
    embed: Linear,
    enc_blocks: Vec<MlpBlock>,
    enc_norm: Norm,
    enc_out: Linear,
    dec_in: Linear,
    dec_blocks: Vec<MlpBlock>,
    dec_norm: Norm,
    dec_out: Linear,
    codebook: ParamId,
}

impl<T: Float> Tokenizer<T> {
    pub fn new(config: TokenizerConfig, rng: &mut Rng) -> Result<Self> {
        if config.patch == 0 || config.channels == 0 || config.codebook_size == 0 || config.hidden == 0 {
            return Err(invalid(format!("degenerate tokenizer config {config:?}")));
        }
        let mut ps = ParamSet::new();
        let (pd, hd, c) = (config.patch_dim(), config.hidden, config.channels);
        let mlp = hd * config.mlp_ratio;
        let block_out_std = 0.5 / (mlp as f64).sqrt();
        let embed = Linear::new(&mut ps, "tok.enc.embed", pd, hd, (1.0 / pd as f64).sqrt(), true, rng);
        let enc_blocks = (0..config.blocks)
            .map(|i| MlpBlock::new(&mut ps, &format!("tok.enc.block{i}"), hd, mlp, block_out_std, rng))
            .collect();
        let enc_norm = Norm::new(&mut ps, "tok.enc.norm", hd);
        let enc_out = Linear::new(&mut ps, "tok.enc.out", hd, c, (1.0 / hd as f64).sqrt(), true, rng);
        let dec_in = Linear::new(&mut ps, "tok.dec.in", c, hd, (1.0 / c as f64).sqrt(), true, rng);
        let dec_blocks = (0..config.blocks)
            .map(|i| MlpBlock::new(&mut ps, &format!("tok.dec.block{i}"), hd, mlp, block_out_std, rng))
            .collect();
        let dec_norm = Norm::new(&mut ps, "tok.dec.norm", hd);
        let dec_out = Linear::new(&mut ps, "tok.dec.out", hd, pd, (1.0 / hd as f64).sqrt(), true, rng);
        let codebook = ps.add("tok.codebook", rng::normal(rng, &[config.codebook_size, c], 1.0), false);
        Ok(Self {
            config,
            params: ps,
            embed,
            enc_blocks,
            enc_norm,
            enc_out,
            dec_in,
            dec_blocks,
            dec_norm,
            dec_out,
            codebook,
        })
    }

    /// Rebuilds the layout for `config` and loads `params` into it.
    pub fn with_params(config: TokenizerConfig, params: &ParamSet<T>) -> Result<Self> {
        let mut tok = Self::new(config, &mut rng::seeded(0))?;
        tok.params
            .load_from(params.entries().iter().map(|e| (e.name.as_str(), &e.value)))?;
        Ok(tok)
    }

    pub fn cast<U: Float>(&self) -> Result<Tokenizer<U>> {
        Tokenizer::with_params(self.config.clone(), &self.params.cast())
    }

    pub fn codebook(&self) -> &Tensor<T> {
        self.params.get(self.codebook)
    }

    pub fn codebook_id(&self) -> ParamId {
        self.codebook
    }

    fn latent_grid(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let p = self.config.patch;
        if !h.is_multiple_of(p) || !w.is_multiple_of(p) || h == 0 || w == 0 {
            return Err(invalid(format!("image {h}x{w} is not divisible by patch factor {p}")));
        }
        Ok((h / p, w / p))
    }

    fn patchify_index(&self, h: usize, w: usize) -> Rc<[usize]> {
        let p = self.config.patch;
        let (gh, gw) = (h / p, w / p);
        let mut idx = Vec::with_capacity(IMAGE_CHANNELS * h * w);
        for i in 0..gh {
            for j in 0..gw {
                for c in 0..IMAGE_CHANNELS {
                    for di in 0..p {
                        for dj in 0..p {
                            idx.push(c * h * w + (i * p + di) * w + (j * p + dj));
                        }
                    }
                }
            }
        }
        idx.into()
    }

    fn unpatchify_index(&self, gh: usize, gw: usize) -> Rc<[usize]> {
        let p = self.config.patch;
        let pd = self.config.patch_dim();
        let (h, w) = (gh * p, gw * p);
        let mut idx = Vec::with_capacity(IMAGE_CHANNELS * h * w);
        for c in 0..IMAGE_CHANNELS {
            for y in 0..h {
                for x in 0..w {
                    let cell = (y / p) * gw + x / p;
                    idx.push(cell * pd + c * p * p + (y % p) * p + x % p);
                }
            }
        }
        idx.into()
    }

    /// `3 x H x W` image to a `C x H/p x W/p` latent.
    pub fn encode_var(&self, g: &mut Graph<T>, p: &Bound, image: Var) -> Result<Var> {
        let (ch, h, w) = g.value(image).chw()?;
        if ch != IMAGE_CHANNELS {
            return Err(invalid(format!("expected an RGB image, got {ch} channels")));
        }
        let (gh, gw) = self.latent_grid(h, w)?;
        let patches = g.gather(image, self.patchify_index(h, w), &[gh * gw, self.config.patch_dim()])?;
        let mut x = self.embed.forward(g, p, patches)?;
        for b in &self.enc_blocks {
            x = b.forward(g, p, x)?;
        }
        let x = self.enc_norm.forward(g, p, x)?;
        let z = self.enc_out.forward(g, p, x)?;
        g.rows_to_chw(z, gh, gw).map_err(Into::into)
    }

    /// `C x h x w` level to a `3 x hp x wp` image.
    pub fn decode_var(&self, g: &mut Graph<T>, p: &Bound, level: Var) -> Result<Var> {
        let (c, gh, gw) = g.value(level).chw()?;
        if c != self.config.channels {
            return Err(invalid(format!("level has {c} channels, tokenizer {}", self.config.channels)));
        }
        let rows = g.chw_to_rows(level)?;
        let mut x = self.dec_in.forward(g, p, rows)?;
        for b in &self.dec_blocks {
            x = b.forward(g, p, x)?;
        }
        let x = self.dec_norm.forward(g, p, x)?;
        let patches = self.dec_out.forward(g, p, x)?;
        let ps = self.config.patch;
        g.gather(patches, self.unpatchify_index(gh, gw), &[IMAGE_CHANNELS, gh * ps, gw * ps])
            .map_err(Into::into)
    }

    pub fn encode(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(image.clone());
        let z = self.encode_var(&mut g, &p, x)?;
        Ok(g.value(z).clone())
    }

    pub fn decode(&self, level: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(level.clone());
        let y = self.decode_var(&mut g, &p, x)?;
        Ok(g.value(y).clone())
    }

    /// Decoded image of a token map.
    pub fn decode_tokens(&self, map: &crate::pyramid::TokenMap) -> Result<Tensor<T>> {
        self.decode(&quant::dequantize(map, self.codebook())?)
    }

    /// Quantize-then-decode round trip at the full latent grid.
    pub fn reconstruct(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let z = self.encode(image)?;
        let (_, q) = quant::quantize(&z, self.codebook())?;
        self.decode(&q)
    }

    /// Ground-truth token pyramid of `image` under `schedule`.
    pub fn gt_tokens(&self, image: &Tensor<T>, schedule: &ScaleSchedule) -> Result<TokenPyramid> {
        let z = self.encode(image)?;
        quant::gt_pyramid(&z, schedule, self.codebook())
    }

    /// Records the multi-scale loss of one image at the given pyramid sizes
    /// (the last size must be the full latent grid). With `frozen`, code
    /// choices and straight-through offsets are taken from it instead of
    /// being recomputed, which makes the loss smooth for gradient checks.
    pub fn loss_var(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        image: &Tensor<T>,
        sizes: &[(usize, usize)],
        frozen: Option<&FrozenQuant<T>>,
    ) -> Result<(Var, VaeLossParts)> {
        let img = g.constant(image.clone());
        let latent = self.encode_var(g, p, img)?;
        let full = {
            let (_, h, w) = g.value(latent).chw()?;
            (h, w)
        };
        if sizes.last() != Some(&full) {
            return Err(invalid(format!("pyramid sizes {sizes:?} must end at {full:?}")));
        }
        if let Some(fz) = frozen {
            if fz.indices.len() != sizes.len() || fz.offsets.len() != sizes.len() {
                return Err(invalid("frozen quantizer does not match the pyramid"));
            }
        }
        let c = self.config.channels;
        let ps = self.config.patch;
        let (mut targets, mut recons, mut latents, mut quantized) = (vec![], vec![], vec![], vec![]);
        for (k, &s) in sizes.iter().enumerate() {
            let f = if s == full { latent } else { g.resize(latent, s)? };
            let idx = match frozen {
                Some(fz) => fz.indices[k].clone(),
                None => {
                    let rows = g.value(f).chw_to_rows()?;
                    nearest_codes(rows.data(), self.codebook().data(), c)
                }
            };
            let q_rows = g.embedding(p[self.codebook], &idx)?;
            let q = g.rows_to_chw(q_rows, s.0, s.1)?;
            let st = match frozen {
                Some(fz) => {
                    let off = g.constant(fz.offsets[k].clone());
                    g.add(f, off)?
                }
                None => g.straight_through(f, g.value(q).clone())?,
            };
            let recon = self.decode_var(g, p, st)?;
            let target = g.resize(img, (s.0 * ps, s.1 * ps))?;
            targets.push(target);
            recons.push(recon);
            latents.push(f);
            quantized.push(q);
        }
        let (sg_f, sg_q): (Vec<Var>, Vec<Var>) = match frozen {
            Some(fz) => (
                fz.latents.iter().map(|t| g.constant(t.clone())).collect(),
                fz.quantized.iter().map(|t| g.constant(t.clone())).collect(),
            ),
            None => (
                latents.iter().map(|&v| g.stop_grad(v)).collect(),
                quantized.iter().map(|&v| g.stop_grad(v)).collect(),
            ),
        };
        loss_terms(g, &targets, &recons, &latents, &quantized, &sg_f, &sg_q, self.config.beta)
    }

    /// Code choices and `q - f` offsets of every pyramid level at the
    /// current parameters.
    pub fn freeze_quant(&self, image: &Tensor<T>, sizes: &[(usize, usize)]) -> Result<FrozenQuant<T>> {
        let z = self.encode(image)?;
        let (_, h, w) = z.chw()?;
        let mut out = FrozenQuant {
            indices: Vec::new(),
            offsets: Vec::new(),
            latents: Vec::new(),
            quantized: Vec::new(),
        };
        for &s in sizes {
            let f = if s == (h, w) { z.clone() } else { quant::resize(&z, s)? };
            let (map, q) = quant::quantize(&f, self.codebook())?;
            out.indices.push(map.indices);
            out.offsets.push(quant::sub(&q, &f)?);
            out.latents.push(f);
            out.quantized.push(q);
        }
        Ok(out)
    }

    /// Replaces the codebook with latent vectors drawn from `images` (full
    /// grids and random coarser scales) plus a small perturbation, so every
    /// code starts inside the data distribution.
    pub fn init_codebook_from_data(&mut self, images: &[Tensor<T>], rng: &mut Rng) -> Result<()> {
        if images.is_empty() {
            return Err(invalid("codebook initialization needs at least one image"));
        }
        let c = self.config.channels;
        let mut pool: Vec<T> = Vec::new();
        for img in images {
            let z = self.encode(img)?;
            let (_, h, w) = z.chw()?;
            let levels = if h >= 2 && w >= 2 {
                let k = h.min(5);
                quant::sample_scale_pyramid(&z, k, rng)?.levels
            } else {
                vec![z]
            };
            for l in levels {
                pool.extend_from_slice(l.chw_to_rows()?.data());
            }
        }
        let n = pool.len() / c;
        let mean_sq = pool.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>() / pool.len() as f64;
        let jitter = 1e-2 * mean_sq.sqrt().max(1e-3);
        let v = self.config.codebook_size;
        let picks: Vec<usize> = if n >= v {
            index::sample(rng, n, v).into_vec()
        } else {
            (0..v).map(|i| if i < n { i } else { rng.gen_range(0..n) }).collect()
        };
        let noise: Tensor<T> = rng::normal(rng, &[v, c], jitter);
        let cb = self.params.get_mut(self.codebook).data_mut();
        for (row, &src) in picks.iter().enumerate() {
            for ch in 0..c {
                cb[row * c + ch] = pool[src * c + ch] + noise.data()[row * c + ch];
            }
        }
        Ok(())
    }
}

/// Multi-scale tokenizer loss:
/// `sum_k mse(I_k, Î_k) + mse(sg(f_k), q_k) + beta * mse(f_k, sg(q_k))`.
pub fn vae_loss<T: Float>(
    g: &mut Graph<T>,
    images: &[Var],
    recons: &[Var],
    latents: &[Var],
    quantized: &[Var],
    beta: f64,
) -> Result<(Var, VaeLossParts)> {
    let sg_f: Vec<Var> = latents.iter().map(|&v| g.stop_grad(v)).collect();
    let sg_q: Vec<Var> = quantized.iter().map(|&v| g.stop_grad(v)).collect();
    loss_terms(g, images, recons, latents, quantized, &sg_f, &sg_q, beta)
}

#[allow(clippy::too_many_arguments)]
fn loss_terms<T: Float>(
    g: &mut Graph<T>,
    images: &[Var],
    recons: &[Var],
    latents: &[Var],
    quantized: &[Var],
    sg_latents: &[Var],
    sg_quantized: &[Var],
    beta: f64,
) -> Result<(Var, VaeLossParts)> {
    let k = images.len();
    if k == 0 || recons.len() != k || latents.len() != k || quantized.len() != k {
        return Err(invalid(format!(
            "per-scale lists disagree: {k} images, {} recons, {} latents, {} quantized",
            recons.len(),
            latents.len(),
            quantized.len()
        )));
    }
    let mut parts = VaeLossParts::default();
    let mut terms = Vec::with_capacity(3 * k);
    for i in 0..k {
        let recon = g.mse(images[i], recons[i])?;
        let cb = g.mse(sg_latents[i], quantized[i])?;
        let commit = g.mse(latents[i], sg_quantized[i])?;
        let commit = g.scale(commit, T::lit(beta))?;
        parts.recon += g.value(recon).item().as_f64();
        parts.codebook += g.value(cb).item().as_f64();
        parts.commit += g.value(commit).item().as_f64();
        terms.extend([recon, cb, commit]);
    }
    let stacked: Vec<Var> = terms
        .iter()
        .map(|&t| g.reshape(t, &[1]))
        .collect::<std::result::Result<_, _>>()?;
    let all = g.concat(&stacked)?;
    Ok((g.sum(all)?, parts))
}
