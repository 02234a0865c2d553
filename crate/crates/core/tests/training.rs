use flexvar_core::data::synth_dataset;
use flexvar_core::model::{ArConfig, ArModel};
use flexvar_core::pyramid::PredictionMode;
use flexvar_core::quant::resize;
use flexvar_core::tokenizer::{Tokenizer, TokenizerConfig};
use flexvar_core::training::{train_ar, train_tokenizer, TrainConfig};
use flexvar_tensor::{rng, Tensor};

fn small_tok() -> Tokenizer<f32> {
    let cfg = TokenizerConfig {
        patch: 4,
        channels: 4,
        codebook_size: 32,
        hidden: 32,
        blocks: 1,
        mlp_ratio: 2,
        beta: 0.25,
    };
    Tokenizer::new(cfg, &mut rng::seeded(1)).unwrap()
}

fn small_ar(mode: PredictionMode) -> ArModel<f32> {
    let cfg = ArConfig {
        depth: 1,
        dim: 32,
        heads: 2,
        vocab: 32,
        classes: 8,
        mode,
        pe_extent: (16, 16),
        latent_channels: 4,
        mlp_ratio: 2,
        learn_pe: true,
    };
    ArModel::new(cfg, &mut rng::seeded(2)).unwrap()
}

fn data(n: usize) -> (Vec<Tensor<f32>>, Vec<usize>) {
    let (imgs, labels) = synth_dataset(n, 3).unwrap();
    (imgs.iter().map(|i| resize(i, (32, 32)).unwrap()).collect(), labels)
}

fn cfg(iterations: usize, lr: f64) -> TrainConfig {
    let mut c = TrainConfig::ar_default();
    c.iterations = iterations;
    c.batch_size = 4;
    c.optim.lr = lr;
    c
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let (imgs, labels) = data(8);
    let mut tok = small_tok();
    let before = tok.params.clone();
    train_tokenizer(&mut tok, &imgs, &cfg(2, 0.0), None).unwrap();
    for (a, b) in before.entries().iter().zip(tok.params.entries()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
    let mut m = small_ar(PredictionMode::Gt);
    let before = m.params.clone();
    train_ar(&mut m, &tok, &imgs, &labels, &cfg(2, 0.0), None).unwrap();
    for (a, b) in before.entries().iter().zip(m.params.entries()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
}

#[test]
fn twin_runs_are_bit_identical() {
    let (imgs, labels) = data(8);
    let run = || {
        let mut tok = small_tok();
        tok.init_codebook_from_data(&imgs, &mut rng::seeded(4)).unwrap();
        let rt = train_tokenizer(&mut tok, &imgs, &cfg(5, 1e-3), None).unwrap();
        let mut m = small_ar(PredictionMode::Residual);
        let ra = train_ar(&mut m, &tok, &imgs, &labels, &cfg(5, 1e-3), None).unwrap();
        (rt, ra, tok.params, m.params)
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    for (x, y) in a.2.entries().iter().zip(b.2.entries()).chain(a.3.entries().iter().zip(b.3.entries())) {
        let bx: Vec<u32> = x.value.data().iter().map(|v| v.to_bits()).collect();
        let by: Vec<u32> = y.value.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bx, by, "{}", x.name);
    }
}

#[test]
fn initial_ar_loss_is_near_uniform() {
    let (imgs, labels) = data(8);
    let tok = small_tok();
    for mode in [PredictionMode::Gt, PredictionMode::Residual] {
        let mut m = small_ar(mode);
        let r = train_ar(&mut m, &tok, &imgs, &labels, &cfg(1, 0.0), None).unwrap();
        let ln_v = (32f64).ln();
        assert!((r.losses[0] - ln_v).abs() < 0.05 * ln_v, "{}", r.losses[0]);
    }
}

#[test]
fn losses_fall_over_windows() {
    let (imgs, labels) = data(8);
    let mut tok = small_tok();
    tok.init_codebook_from_data(&imgs, &mut rng::seeded(4)).unwrap();
    let rt = train_tokenizer(&mut tok, &imgs, &cfg(150, 2e-3), None).unwrap();
    let mut m = small_ar(PredictionMode::Gt);
    let ra = train_ar(&mut m, &tok, &imgs, &labels, &cfg(150, 2e-3), None).unwrap();
    for losses in [&rt.losses, &ra.losses] {
        let w: Vec<f64> = losses.chunks(50).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
        assert!(w.windows(2).all(|p| p[1] <= p[0]), "{w:?}");
    }
}

#[test]
fn log_sink_gets_one_line_per_iteration() {
    let (imgs, _) = data(4);
    let mut tok = small_tok();
    let mut out = Vec::new();
    train_tokenizer(&mut tok, &imgs, &cfg(3, 1e-3), Some(&mut out)).unwrap();
    let text = String::from_utf8(out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[2].starts_with("2\t"));
}

#[test]
fn invalid_configs_are_rejected() {
    let (imgs, labels) = data(4);
    let mut m = small_ar(PredictionMode::Gt);
    let tok = small_tok();
    let mut c = cfg(1, 1e-3);
    c.batch_size = 0;
    assert!(train_ar(&mut m, &tok, &imgs, &labels, &c, None).is_err());
    let c = cfg(1, -1.0);
    assert!(train_ar(&mut m, &tok, &imgs, &labels, &c, None).is_err());
    assert!(train_ar(&mut m, &tok, &imgs, &labels[..2], &cfg(1, 1e-3), None).is_err());
}
