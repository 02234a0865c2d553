use flexvar_core::io::{
    ar_checkpoint, ar_from, decode_pgm, decode_ppm, encode_pgm, encode_ppm, read_ppm, tokenizer_checkpoint,
    tokenizer_from, write_ppm, Checkpoint,
};
use flexvar_core::model::{ArConfig, ArModel};
use flexvar_core::tokenizer::{Tokenizer, TokenizerConfig};
use flexvar_core::Error;
use flexvar_tensor::{rng, Tensor};
use proptest::prelude::*;

fn tensor_strategy() -> impl Strategy<Value = (String, Tensor<f32>)> {
    ("[a-z.0-9]{1,12}", prop::collection::vec(1usize..4, 0..4)).prop_flat_map(|(name, shape)| {
        let n: usize = shape.iter().product();
        prop::collection::vec(any::<u32>(), n).prop_map(move |bits| {
            // Arbitrary bit patterns, NaN payloads and signed zeros included.
            let data: Vec<f32> = bits.into_iter().map(f32::from_bits).collect();
            (name.clone(), Tensor::new(&shape, data).unwrap())
        })
    })
}

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

proptest! {
    #[test]
    fn checkpoint_bytes_round_trip(tensors in prop::collection::vec(tensor_strategy(), 0..6)) {
        let mut c = Checkpoint::default();
        for (n, t) in &tensors {
            c.push(n.clone(), t.clone());
        }
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        prop_assert_eq!(back.tensors.len(), tensors.len());
        for ((n, t), (bn, bt)) in tensors.iter().zip(&back.tensors) {
            prop_assert_eq!(n, bn);
            prop_assert_eq!(t.shape(), bt.shape());
            prop_assert_eq!(bits(t), bits(bt));
        }
    }

    #[test]
    fn any_flipped_byte_is_refused(pos in any::<prop::sample::Index>(), flip in 1u8..=255) {
        let mut c = Checkpoint::default();
        c.push("w", Tensor::new(&[2, 3], vec![1.0f32, -2.0, 3.5, 0.0, 1e-3, 7.0]).unwrap());
        let mut b = c.to_bytes();
        let i = pos.index(b.len());
        b[i] ^= flip;
        prop_assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::Format(_))));
    }

    #[test]
    fn ppm_round_trips_canonical_files(h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let mut r = rng::seeded(seed);
        let px: Vec<u8> = (0..3 * h * w).map(|_| rand::Rng::gen(&mut r)).collect();
        let mut file = format!("P6\n{w} {h}\n255\n").into_bytes();
        file.extend_from_slice(&px);
        let t = decode_ppm(&file).unwrap();
        prop_assert_eq!(encode_ppm(&t).unwrap(), file);
    }
}

#[test]
fn gradient_image_reads_exact_fractions() {
    let mut file = b"P6\n64 64\n255\n".to_vec();
    for y in 0..64u32 {
        for x in 0..64u32 {
            file.extend_from_slice(&[(x * 4) as u8, (y * 4) as u8, ((x + y) * 2) as u8]);
        }
    }
    let t = decode_ppm(&file).unwrap();
    assert_eq!(t.shape(), [3, 64, 64]);
    for y in 0..64 {
        for x in 0..64 {
            assert_eq!(t.data()[y * 64 + x], (x * 4) as f32 / 255.0);
            assert_eq!(t.data()[4096 + y * 64 + x], (y * 4) as f32 / 255.0);
            assert_eq!(t.data()[8192 + y * 64 + x], ((x + y) * 2) as f32 / 255.0);
        }
    }
}

#[test]
fn written_images_are_within_one_level() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.ppm");
    let t: Tensor<f32> = rng::uniform(&mut rng::seeded(3), &[3, 5, 7], 0.0, 1.0);
    write_ppm(&p, &t).unwrap();
    let back = read_ppm(&p).unwrap();
    assert!(t.max_abs_diff(&back) <= 0.5 / 255.0 + 1e-7);
}

#[test]
fn masks_round_trip_as_graymaps() {
    let t = Tensor::new(&[1, 2, 2], vec![0.0f32, 1.0, 1.0, 0.0]).unwrap();
    let b = encode_pgm(&t).unwrap();
    assert!(b.starts_with(b"P5"));
    assert_eq!(decode_pgm(&b).unwrap(), t);
    assert!(decode_ppm(&b).is_err());
}

#[test]
fn models_survive_checkpoints_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let tok = Tokenizer::<f32>::new(TokenizerConfig::default(), &mut rng::seeded(1)).unwrap();
    let p = dir.path().join("tok.ckpt");
    tokenizer_checkpoint(&tok).save(&p).unwrap();
    let back = tokenizer_from(&Checkpoint::load(&p).unwrap()).unwrap();
    assert_eq!(back.config, tok.config);
    let img: Tensor<f32> = rng::uniform(&mut rng::seeded(2), &[3, 64, 64], 0.0, 1.0);
    assert_eq!(bits(&back.reconstruct(&img).unwrap()), bits(&tok.reconstruct(&img).unwrap()));

    let m = ArModel::<f32>::new(ArConfig::default(), &mut rng::seeded(3)).unwrap();
    let p = dir.path().join("ar.ckpt");
    ar_checkpoint(&m).save(&p).unwrap();
    let mb = ar_from(&Checkpoint::load(&p).unwrap()).unwrap();
    assert_eq!(mb.config, m.config);
    for (a, b) in m.params.entries().iter().zip(mb.params.entries()) {
        assert_eq!(a.name, b.name);
        assert_eq!(bits(&a.value), bits(&b.value));
    }
    let la = flexvar_core::inference::first_scale_logits(&m, 2).unwrap();
    let lb = flexvar_core::inference::first_scale_logits(&mb, 2).unwrap();
    assert_eq!(la, lb);
}

#[test]
fn truncated_checkpoints_are_refused() {
    let mut c = Checkpoint::default();
    c.push("a", Tensor::full(&[4], 1.0f32));
    let b = c.to_bytes();
    for cut in [0, 3, 8, b.len() - 1] {
        assert!(Checkpoint::from_bytes(&b[..cut]).is_err());
    }
}
