use flexvar_tensor::gradcheck::{check_gradients, op_suite, FD_STEP};
use flexvar_tensor::kernels::{resize_forward, AttnMask};
use flexvar_tensor::rng::{self, RngExt};
use flexvar_tensor::{Graph, Tensor, TensorError};
use proptest::prelude::*;

/// Independent scalar bilinear sampler: half-pixel centers, clamped edges,
/// written without the separable tap tables.
fn bilinear_oracle(src: &[f64], h: usize, w: usize, h2: usize, w2: usize) -> Vec<f64> {
    let at = |r: isize, c: isize| {
        let r = r.clamp(0, h as isize - 1) as usize;
        let c = c.clamp(0, w as isize - 1) as usize;
        src[r * w + c]
    };
    let mut out = Vec::new();
    for i in 0..h2 {
        for j in 0..w2 {
            let y = ((i as f64 + 0.5) * h as f64 / h2 as f64 - 0.5).max(0.0);
            let x = ((j as f64 + 0.5) * w as f64 / w2 as f64 - 0.5).max(0.0);
            let (y0, x0) = (y.floor(), x.floor());
            let (fy, fx) = (y - y0, x - x0);
            let (y0, x0) = (y0 as isize, x0 as isize);
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
            let bot = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

#[test]
fn bilinear_matches_scalar_oracle_on_2x2() {
    let src = [1.0, 3.0, 5.0, 7.0];
    let got = resize_forward(&src, 1, (2, 2), (4, 4)).unwrap();
    let want = bilinear_oracle(&src, 2, 2, 4, 4);
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() < 1e-6, "{got:?} vs {want:?}");
    }
    // Half-pixel convention: first row is [1, 1.5, 2.5, 3].
    assert_eq!(&got[..4], &[1.0, 1.5, 2.5, 3.0]);
}

#[test]
fn bilinear_matches_oracle_on_random_maps() {
    let mut r = rng::seeded(11);
    for _ in 0..20 {
        let (h, w) = (r.gen_range(1..7), r.gen_range(1..7));
        let (h2, w2) = (r.gen_range(1..13), r.gen_range(1..13));
        let src: Vec<f64> = (0..h * w).map(|_| r.gen_range(-1.0..1.0)).collect();
        let got = resize_forward(&src, 1, (h, w), (h2, w2)).unwrap();
        let want = bilinear_oracle(&src, h, w, h2, w2);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn single_sample_extends_to_constant_map() {
    let got = resize_forward(&[0.37f32], 1, (1, 1), (4, 4)).unwrap();
    assert!(got.iter().all(|&v| v == 0.37));
}

#[test]
fn resize_to_same_size_is_identity() {
    let mut r = rng::seeded(3);
    let x: Tensor<f32> = rng::normal(&mut r, &[3, 5, 7], 1.0);
    let got = resize_forward(x.data(), 3, (5, 7), (5, 7)).unwrap();
    assert_eq!(got, x.data());
}

#[test]
fn resize_to_zero_extent_is_rejected() {
    let err = resize_forward(&[1.0f32; 4], 1, (2, 2), (0, 3)).unwrap_err();
    assert!(matches!(err, TensorError::InvalidArgument(_)));
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 2]));
    assert!(g.resize(x, (2, 0)).is_err());
}

/// QK^T / sqrt(d), masked softmax, times V, one head, plain loops.
fn dense_attention(q: &[f64], k: &[f64], v: &[f64], n: usize, d: usize, allow: &[bool]) -> Vec<f64> {
    let mut out = vec![0.0; n * d];
    for t in 0..n {
        let mut scores = vec![f64::NEG_INFINITY; n];
        for s in 0..n {
            if allow[t * n + s] {
                let dot: f64 = (0..d).map(|c| q[t * d + c] * k[s * d + c]).sum();
                scores[s] = dot / (d as f64).sqrt();
            }
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|&x| (x - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for s in 0..n {
            for c in 0..d {
                out[t * d + c] += exps[s] / z * v[s * d + c];
            }
        }
    }
    out
}

#[test]
fn masked_attention_matches_dense_oracle() {
    let mut r = rng::seeded(5);
    let (n, d) = (3, 4);
    let q: Tensor<f64> = rng::normal(&mut r, &[n, d], 1.0);
    let k: Tensor<f64> = rng::normal(&mut r, &[n, d], 1.0);
    let v: Tensor<f64> = rng::normal(&mut r, &[n, d], 1.0);
    let mut mask = AttnMask::full(n, n);
    for t in 0..n {
        for s in 0..n {
            mask.allow[t * n + s] = s <= t;
        }
    }
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let out = g.attention(qv, kv, vv, 1, Some(&mask)).unwrap();
    let want = dense_attention(q.data(), k.data(), v.data(), n, d, &mask.allow);
    for (a, b) in g.value(out).data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn permissive_mask_equals_no_mask() {
    let mut r = rng::seeded(6);
    let q: Tensor<f32> = rng::normal(&mut r, &[5, 8], 1.0);
    let k: Tensor<f32> = rng::normal(&mut r, &[7, 8], 1.0);
    let v: Tensor<f32> = rng::normal(&mut r, &[7, 8], 1.0);
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q), g.constant(k), g.constant(v));
    let a = g.attention(qv, kv, vv, 2, Some(&AttnMask::full(5, 7))).unwrap();
    let b = g.attention(qv, kv, vv, 2, None).unwrap();
    assert_eq!(g.value(a), g.value(b));
}

#[test]
fn every_op_passes_finite_difference_check() {
    let mut r = rng::seeded(2024);
    for case in op_suite() {
        let name = case.name;
        for trial in 0..10 {
            let inputs: Vec<Tensor<f64>> = case.shapes.iter().map(|s| rng::normal(&mut r, s, 1.0)).collect();
            let report = check_gradients(&inputs, FD_STEP, &*case.loss).unwrap();
            assert!(
                report.max_rel_err < 1e-4,
                "{name} trial {trial}: rel err {}",
                report.max_rel_err
            );
        }
    }
}

#[test]
fn composite_graph_passes_finite_difference_check() {
    let mut r = rng::seeded(99);
    let inputs: Vec<Tensor<f64>> = vec![
        rng::normal(&mut r, &[4, 6], 1.0),
        rng::normal(&mut r, &[6, 5], 0.5),
        rng::normal(&mut r, &[5], 0.1),
        rng::normal(&mut r, &[5], 1.0),
        rng::normal(&mut r, &[5], 0.1),
    ];
    let report = check_gradients(&inputs, FD_STEP, |g, x| {
        let h = g.linear(x[0], x[1], Some(x[2]))?;
        let n = g.layer_norm(h, Some(x[3]), Some(x[4]))?;
        let p = g.softmax(n)?;
        g.cross_entropy(p, &[0, 3, 4, 1])
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn identical_seeds_give_identical_outputs() {
    let run = || {
        let mut r = rng::seeded(8);
        let x: Tensor<f32> = rng::normal(&mut r, &[6, 16], 1.0);
        let w: Tensor<f32> = rng::normal(&mut r, &[16, 16], 0.2);
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x), g.constant(w));
        let h = g.matmul(xv, wv).unwrap();
        let a = g.attention(h, h, h, 4, None).unwrap();
        let y = g.gelu(a).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn constant_maps_survive_any_resize(v in -10.0f32..10.0, h in 1usize..9, w in 1usize..9, h2 in 1usize..17, w2 in 1usize..17) {
        let up = resize_forward(&vec![v; 2 * h * w], 2, (h, w), (h2, w2)).unwrap();
        prop_assert!(up.iter().all(|&x| x == v));
        let back = resize_forward(&up, 2, (h2, w2), (h, w)).unwrap();
        prop_assert!(back.iter().all(|&x| x == v));
    }
}

fn block_mask(ends: &[usize]) -> AttnMask {
    let l = *ends.last().unwrap();
    let block = |t: usize| ends.iter().position(|&e| t < e).unwrap();
    let mut m = AttnMask::full(l, l);
    for t in 0..l {
        for s in 0..l {
            m.allow[t * l + s] = block(s) <= block(t);
        }
    }
    m
}

#[test]
fn block_attention_matches_block_causal_mask() {
    let mut r = rng::seeded(31);
    let ends = [1, 5, 14];
    let x: Vec<Tensor<f64>> = (0..3).map(|_| rng::normal(&mut r, &[14, 8], 1.0)).collect();
    let mut g = Graph::new();
    let v: Vec<_> = x.iter().map(|t| g.constant(t.clone())).collect();
    let a = g.block_attention(v[0], v[1], v[2], 2, &ends).unwrap();
    let b = g.attention(v[0], v[1], v[2], 2, Some(&block_mask(&ends))).unwrap();
    assert!(g.value(a).max_abs_diff(g.value(b)) < 1e-12);
}

#[test]
fn block_attention_prefix_is_independent_of_later_blocks() {
    let mut r = rng::seeded(32);
    let x: Vec<Tensor<f32>> = (0..3).map(|_| rng::normal(&mut r, &[14, 8], 1.0)).collect();
    let mut g = Graph::new();
    let v: Vec<_> = x.iter().map(|t| g.constant(t.clone())).collect();
    let full = g.block_attention(v[0], v[1], v[2], 2, &[1, 5, 14]).unwrap();
    let short: Vec<_> = x
        .iter()
        .map(|t| g.constant(Tensor::new(&[5, 8], t.data()[..40].to_vec()).unwrap()))
        .collect();
    let part = g.block_attention(short[0], short[1], short[2], 2, &[1, 5]).unwrap();
    assert_eq!(&g.value(full).data()[..40], g.value(part).data());
}
