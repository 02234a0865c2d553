//! Zero-shot editing by teacher forcing: refinement, in/out-painting and
//! horizontal expansion. Nothing here owns parameters; every task drives the
//! tokenizer and the sampler.

use flexvar_tensor::{Float, Tensor};

use crate::error::{invalid, Result};
use crate::inference::{decode_at_step, sample_pyramid, ForcedScale, Forcing, SamplerConfig};
use crate::model::ArModel;
use crate::pyramid::{PredictionMode, TokenPyramid};
use crate::quant;
use crate::scheduler::{aspect_schedule, ScaleSchedule, DEFAULT_STEPS_16};
use crate::tokenizer::Tokenizer;
use crate::training::pyramid_for;

/// Pixel mask; `true` marks pixels to generate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EditMask {
    pub h: usize,
    pub w: usize,
    pub cells: Vec<bool>,
}

impl EditMask {
    pub fn new(h: usize, w: usize, cells: Vec<bool>) -> Result<Self> {
        if h == 0 || w == 0 || cells.len() != h * w {
            return Err(invalid(format!("{} mask cells for a {h}x{w} grid", cells.len())));
        }
        Ok(Self { h, w, cells })
    }

    pub fn filled(h: usize, w: usize, generate: bool) -> Self {
        Self {
            h,
            w,
            cells: vec![generate; h * w],
        }
    }

    /// Generate inside the `hh x hw` rectangle centred in the image.
    pub fn center_hole(h: usize, w: usize, hh: usize, hw: usize) -> Result<Self> {
        if hh > h || hw > w {
            return Err(invalid("hole larger than the mask"));
        }
        let (y0, x0) = ((h - hh) / 2, (w - hw) / 2);
        let cells = (0..h * w)
            .map(|i| (y0..y0 + hh).contains(&(i / w)) && (x0..x0 + hw).contains(&(i % w)))
            .collect();
        Self::new(h, w, cells)
    }

    /// Generate everything within `margin` pixels of the border.
    pub fn border(h: usize, w: usize, margin: usize) -> Result<Self> {
        let mut m = Self::center_hole(h, w, h.saturating_sub(2 * margin), w.saturating_sub(2 * margin))?;
        for c in &mut m.cells {
            *c = !*c;
        }
        Ok(m)
    }

    /// From a single-channel image in `[0, 1]` (`[1, H, W]` or `[H, W]`);
    /// values of at least one half mean "generate".
    pub fn from_gray(t: &Tensor<f32>) -> Result<Self> {
        let (h, w) = match t.shape() {
            [1, h, w] | [h, w] => (*h, *w),
            s => return Err(invalid(format!("mask must be single-channel, got shape {s:?}"))),
        };
        Self::new(h, w, t.data().iter().map(|&v| v >= 0.5).collect())
    }

    /// Mean-pools onto an `h x w` token grid. A cell is generated only when
    /// strictly more than half of its pixels are; ties preserve.
    pub fn to_token_grid(&self, h: usize, w: usize) -> Vec<bool> {
        let mut out = Vec::with_capacity(h * w);
        for i in 0..h {
            let (y0, y1) = (i * self.h / h, ((i + 1) * self.h).div_ceil(h));
            for j in 0..w {
                let (x0, x1) = (j * self.w / w, ((j + 1) * self.w).div_ceil(w));
                let mut on = 0usize;
                for y in y0..y1 {
                    on += self.cells[y * self.w + x0..y * self.w + x1].iter().filter(|&&c| c).count();
                }
                let total = (y1 - y0) * (x1 - x0);
                out.push(2 * on > total);
            }
        }
        out
    }
}

/// Result of an editing task.
#[derive(Clone, Debug, PartialEq)]
pub struct EditOutput<T> {
    pub image: Tensor<T>,
    pub pyramid: TokenPyramid,
    /// Forced tokens per scale, for exactness checks.
    pub forcing: Forcing,
    pub warnings: Vec<String>,
}

fn run<T: Float>(
    model: &ArModel<T>,
    tok: &Tokenizer<T>,
    class_id: usize,
    schedule: &ScaleSchedule,
    sampler: &SamplerConfig,
    forcing: Forcing,
) -> Result<EditOutput<T>> {
    let s = sample_pyramid(model, tok.codebook(), class_id, schedule, sampler, Some(&forcing), true)?;
    let image = decode_at_step(tok, &s.pyramid, s.pyramid.len())?;
    Ok(EditOutput {
        image,
        pyramid: s.pyramid,
        forcing,
        warnings: s.warnings,
    })
}

fn require_gt<T: Float>(model: &ArModel<T>, task: &str) -> Result<()> {
    if model.config.mode != PredictionMode::Gt {
        return Err(invalid(format!("{task} forces tokens across grids and needs a GT-mode model")));
    }
    Ok(())
}

fn latent_grid<T: Float>(tok: &Tokenizer<T>, image: &Tensor<T>) -> Result<(Tensor<T>, (usize, usize))> {
    let z = tok.encode(image)?;
    let (_, h, w) = z.chw()?;
    Ok((z, (h, w)))
}

/// Upscales `image_low`: every scale of `target` up to the input's latent
/// grid is forced to the input's quantization, the rest is sampled.
pub fn refine<T: Float>(
    model: &ArModel<T>,
    tok: &Tokenizer<T>,
    image_low: &Tensor<T>,
    target: &ScaleSchedule,
    class_id: usize,
    sampler: &SamplerConfig,
) -> Result<EditOutput<T>> {
    require_gt(model, "refine")?;
    let (z, grid) = latent_grid(tok, image_low)?;
    let k = target
        .position(grid)
        .ok_or_else(|| invalid(format!("input grid {}x{} is not a scale of {target}", grid.0, grid.1)))?;
    let prefix = target.prefix(k + 1)?;
    let gt = quant::gt_pyramid(&z, &prefix, tok.codebook())?;
    let forcing = Forcing {
        scales: gt
            .levels
            .into_iter()
            .map(|l| {
                let n = l.indices.len();
                Some(ForcedScale {
                    tokens: l.indices,
                    mask: vec![true; n],
                })
            })
            .collect(),
    };
    run(model, tok, class_id, target, sampler, forcing)
}

/// Regenerates the masked region of `image` and keeps the rest; outpainting
/// is the same call with a border mask.
pub fn inpaint<T: Float>(
    model: &ArModel<T>,
    tok: &Tokenizer<T>,
    image: &Tensor<T>,
    mask: &EditMask,
    class_id: usize,
    schedule: &ScaleSchedule,
    sampler: &SamplerConfig,
) -> Result<EditOutput<T>> {
    let (_, h, w) = image.chw()?;
    if (mask.h, mask.w) != (h, w) {
        return Err(invalid(format!("mask {}x{} does not match image {h}x{w}", mask.h, mask.w)));
    }
    let (z, _) = latent_grid(tok, image)?;
    let gt = pyramid_for(&z, schedule, tok.codebook(), model.config.mode)?;
    let forcing = Forcing {
        scales: gt
            .levels
            .into_iter()
            .map(|l| {
                let generate = mask.to_token_grid(l.h, l.w);
                Some(ForcedScale {
                    tokens: l.indices,
                    mask: generate.into_iter().map(|g| !g).collect(),
                })
            })
            .collect(),
    };
    run(model, tok, class_id, schedule, sampler, forcing)
}

/// Column offset and width of the source inside a target scale.
pub fn expand_center(target: (usize, usize), src_latent: (usize, usize)) -> (usize, usize) {
    let (th, tw) = target;
    let (h, w) = src_latent;
    let ws = (w * th / h).clamp(1, tw);
    ((tw - ws) / 2, ws)
}

/// Widens `image` to a 1:2 aspect: the input's tokens are forced into the
/// centre columns of every scale and the flanks are sampled.
pub fn expand<T: Float>(
    model: &ArModel<T>,
    tok: &Tokenizer<T>,
    image: &Tensor<T>,
    class_id: usize,
    sampler: &SamplerConfig,
) -> Result<EditOutput<T>> {
    require_gt(model, "expand")?;
    let (z, (h, w)) = latent_grid(tok, image)?;
    if w > 2 * h {
        return Err(invalid(format!("input grid {h}x{w} is wider than the {h}x{} target", 2 * h)));
    }
    let schedule = aspect_schedule((h, 2 * h), DEFAULT_STEPS_16)?;
    let mut scales = Vec::with_capacity(schedule.steps());
    for &(sh, sw) in schedule.sizes() {
        let (x0, ws) = expand_center((sh, sw), (h, w));
        let level = quant::resize(&z, (sh, ws))?;
        let (map, _) = quant::quantize(&level, tok.codebook())?;
        let mut tokens = vec![0; sh * sw];
        let mut mask = vec![false; sh * sw];
        for y in 0..sh {
            for x in 0..ws {
                tokens[y * sw + x0 + x] = map.get(y, x);
                mask[y * sw + x0 + x] = true;
            }
        }
        scales.push(Some(ForcedScale { tokens, mask }));
    }
    run(model, tok, class_id, &schedule, sampler, Forcing { scales })
}
