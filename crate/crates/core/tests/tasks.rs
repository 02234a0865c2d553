use flexvar_core::data::synth_dataset;
use flexvar_core::inference::{generate, SamplerConfig};
use flexvar_core::model::{ArConfig, ArModel};
use flexvar_core::pyramid::PredictionMode;
use flexvar_core::quant::{gt_pyramid, quantize, resize};
use flexvar_core::scheduler::{aspect_schedule, inference_schedule, DEFAULT_STEPS_16};
use flexvar_core::tasks::{expand, expand_center, inpaint, refine, EditMask, EditOutput};
use flexvar_core::tokenizer::{Tokenizer, TokenizerConfig};
use flexvar_core::training::pyramid_for;
use flexvar_tensor::{rng, Tensor};

fn model(mode: PredictionMode) -> ArModel<f32> {
    let cfg = ArConfig {
        depth: 1,
        dim: 32,
        heads: 4,
        vocab: 32,
        classes: 8,
        mode,
        pe_extent: (16, 16),
        latent_channels: 4,
        mlp_ratio: 2,
        learn_pe: true,
    };
    ArModel::new(cfg, &mut rng::seeded(1)).unwrap()
}

fn tokenizer() -> Tokenizer<f32> {
    let cfg = TokenizerConfig {
        patch: 4,
        channels: 4,
        codebook_size: 32,
        hidden: 16,
        blocks: 1,
        mlp_ratio: 2,
        beta: 0.25,
    };
    let mut tok = Tokenizer::new(cfg, &mut rng::seeded(2)).unwrap();
    let imgs: Vec<Tensor<f32>> = images().into_iter().map(|(i, _)| i).collect();
    tok.init_codebook_from_data(&imgs, &mut rng::seeded(3)).unwrap();
    tok
}

/// 32x32 renders, an 8x8 latent under the patch-4 tokenizer.
fn images() -> Vec<(Tensor<f32>, usize)> {
    let (imgs, labels) = synth_dataset(8, 4).unwrap();
    imgs.iter().map(|i| resize(i, (32, 32)).unwrap()).zip(labels).collect()
}

fn sampler() -> SamplerConfig {
    SamplerConfig {
        seed: 9,
        ..SamplerConfig::default()
    }
}

fn assert_forced_exact(out: &EditOutput<f32>) {
    for (j, (level, f)) in out.pyramid.levels.iter().zip(&out.forcing.scales).enumerate() {
        let f = f.as_ref().unwrap();
        for (p, (&t, &m)) in level.indices.iter().zip(&f.mask).enumerate() {
            if m {
                assert_eq!(t, f.tokens[p], "scale {} position {p}", j + 1);
            }
        }
    }
}

fn region_mse(a: &Tensor<f32>, b: &Tensor<f32>, keep: &dyn Fn(usize, usize) -> bool) -> f64 {
    let (c, h, w) = a.chw().unwrap();
    let (mut s, mut n) = (0.0, 0usize);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                if keep(y, x) {
                    let i = ch * h * w + y * w + x;
                    s += ((a.data()[i] - b.data()[i]) as f64).powi(2);
                    n += 1;
                }
            }
        }
    }
    s / n as f64
}

#[test]
fn inpaint_forces_gt_and_preserves_pixels() {
    let m = model(PredictionMode::Gt);
    let tok = tokenizer();
    let s = inference_schedule("default", (8, 8)).unwrap();
    for (img, label) in images().into_iter().take(3) {
        let mask = EditMask::center_hole(32, 32, 16, 16).unwrap();
        let out = inpaint(&m, &tok, &img, &mask, label, &s, &sampler()).unwrap();
        assert_forced_exact(&out);
        let z = tok.encode(&img).unwrap();
        let gt = gt_pyramid(&z, &s, tok.codebook()).unwrap();
        for (j, f) in out.forcing.scales.iter().enumerate() {
            assert_eq!(f.as_ref().unwrap().tokens, gt.levels[j].indices);
        }
        let rec = tok.reconstruct(&img).unwrap();
        let keep = |y: usize, x: usize| !mask.cells[y * 32 + x];
        assert!(region_mse(&out.image, &img, &keep) <= region_mse(&rec, &img, &keep) + 1e-6);
    }
}

#[test]
fn outpaint_keeps_the_centre() {
    let m = model(PredictionMode::Gt);
    let tok = tokenizer();
    let s = inference_schedule("default", (8, 8)).unwrap();
    let (img, label) = images().remove(1);
    let mask = EditMask::border(32, 32, 8).unwrap();
    let out = inpaint(&m, &tok, &img, &mask, label, &s, &sampler()).unwrap();
    assert_forced_exact(&out);
    let rec = tok.reconstruct(&img).unwrap();
    let keep = |y: usize, x: usize| !mask.cells[y * 32 + x];
    assert!(region_mse(&out.image, &img, &keep) <= region_mse(&rec, &img, &keep) + 1e-6);
}

#[test]
fn all_preserve_mask_is_the_reconstruction() {
    for mode in [PredictionMode::Gt, PredictionMode::Residual] {
        let m = model(mode);
        let tok = tokenizer();
        let s = inference_schedule("default", (8, 8)).unwrap();
        let (img, label) = images().remove(2);
        let out = inpaint(&m, &tok, &img, &EditMask::filled(32, 32, false), label, &s, &sampler()).unwrap();
        let z = tok.encode(&img).unwrap();
        assert_eq!(out.pyramid, pyramid_for(&z, &s, tok.codebook(), mode).unwrap());
        if mode == PredictionMode::Gt {
            assert_eq!(out.image, tok.reconstruct(&img).unwrap());
        }
    }
}

#[test]
fn all_generate_mask_is_plain_generation() {
    let m = model(PredictionMode::Gt);
    let tok = tokenizer();
    let s = inference_schedule("default", (8, 8)).unwrap();
    let (img, label) = images().remove(3);
    let out = inpaint(&m, &tok, &img, &EditMask::filled(32, 32, true), label, &s, &sampler()).unwrap();
    let g = generate(&m, &tok, label, &s, &sampler()).unwrap();
    assert_eq!(out.pyramid, g.pyramid);
    assert_eq!(out.image, g.image);
}

#[test]
fn refine_forces_the_low_resolution_prefix() {
    let m = model(PredictionMode::Gt);
    let tok = tokenizer();
    let (img, label) = images().remove(4);
    let low = resize(&img, (16, 16)).unwrap();
    let target = inference_schedule("default", (8, 8)).unwrap();
    let out = refine(&m, &tok, &low, &target, label, &sampler()).unwrap();
    assert_eq!(out.image.shape(), [3, 32, 32]);
    assert_forced_exact(&out);
    let k = target.position((4, 4)).unwrap();
    let gt = gt_pyramid(&tok.encode(&low).unwrap(), &target.prefix(k + 1).unwrap(), tok.codebook()).unwrap();
    assert_eq!(out.pyramid.levels[..=k], gt.levels[..]);
    assert!(refine(&model(PredictionMode::Residual), &tok, &low, &target, label, &sampler()).is_err());
    let odd = resize(&img, (12, 12)).unwrap();
    assert!(refine(&m, &tok, &odd, &inference_schedule("7-step", (8, 8)).unwrap(), label, &sampler()).is_err());
}

#[test]
fn expand_places_the_source_in_the_centre_columns() {
    assert_eq!(expand_center((8, 16), (8, 8)), (4, 8));
    let m = model(PredictionMode::Gt);
    let tok = tokenizer();
    let (img, label) = images().remove(5);
    let out = expand(&m, &tok, &img, label, &sampler()).unwrap();
    assert_eq!(out.image.shape(), [3, 32, 64]);
    assert_forced_exact(&out);
    let z = tok.encode(&img).unwrap();
    let s = aspect_schedule((8, 16), DEFAULT_STEPS_16).unwrap();
    assert_eq!(out.pyramid.sizes(), s.sizes());
    let last = out.pyramid.levels.last().unwrap();
    let (gt, _) = quantize(&z, tok.codebook()).unwrap();
    for y in 0..8 {
        for x in 0..16 {
            let forced = out.forcing.scales.last().unwrap().as_ref().unwrap().mask[y * 16 + x];
            assert_eq!(forced, (4..12).contains(&x));
            if forced {
                assert_eq!(last.get(y, x), gt.get(y, x - 4));
            }
        }
    }
    assert!(expand(&model(PredictionMode::Residual), &tok, &img, label, &sampler()).is_err());
}

#[test]
fn mask_pooling_threshold() {
    // 3 of 4 pixels generate -> generate; 2 of 4 -> preserve.
    let m = EditMask::new(2, 4, vec![true, true, true, false, true, false, false, true]).unwrap();
    assert_eq!(m.to_token_grid(1, 2), vec![true, false]);
    let gray = Tensor::new(&[1, 1, 2], vec![0.0f32, 1.0]).unwrap();
    assert_eq!(EditMask::from_gray(&gray).unwrap().cells, vec![false, true]);
}
