use glyphgen::glyph::{decode_pgm, encode_pgm, GlyphImage};
use glyphgen::losses::{content_adv_loss_g, kl_loss};
use glyphgen::metrics::{ssim, SsimConfig};
use glyphgen::model::StyleCode;
use glyphgen::tensor::ReduceOp;
use glyphgen::{Tape64, Tensor64};
use proptest::prelude::*;
use std::path::Path;

/// A shape and a broadcast-compatible partner with some axes collapsed to 1,
/// optionally with leading axes dropped.
fn shape_pair() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    prop::collection::vec(1usize..5, 1..5).prop_flat_map(|shape| {
        let rank = shape.len();
        (Just(shape), prop::collection::vec(any::<bool>(), rank), 0..rank).prop_map(|(shape, ones, drop)| {
            let other: Vec<usize> = shape.iter().zip(&ones).map(|(&d, &one)| if one { 1 } else { d }).skip(drop).collect();
            (shape, if other.is_empty() { vec![1] } else { other })
        })
    })
}

fn values(n: usize, salt: f64) -> Vec<f64> {
    (0..n).map(|i| ((i as f64 + salt) * 0.731).sin() + 1.5).collect()
}

/// Flat index into `small` (right-aligned, size-1 axes broadcast) for a
/// multi-index over `big`.
fn broadcast_index(idx: &[usize], small: &[usize]) -> usize {
    let pad = idx.len() - small.len();
    small.iter().enumerate().fold(0, |acc, (i, &d)| acc * d + if d == 1 { 0 } else { idx[i + pad] })
}

fn multi_index(mut flat: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for ax in (0..shape.len()).rev() {
        idx[ax] = flat % shape[ax];
        flat /= shape[ax];
    }
    idx
}

proptest! {
    #[test]
    fn broadcast_mul_and_its_gradients_match_naive_indexing((big, small) in shape_pair(), swap in any::<bool>()) {
        let n: usize = big.iter().product();
        let m: usize = small.iter().product();
        let (va, vb) = (values(n, 0.0), values(m, 3.0));
        let mut t = Tape64::new();
        let a = t.leaf(Tensor64::from_f64(big.clone(), &va).unwrap());
        let b = t.leaf(Tensor64::from_f64(small.clone(), &vb).unwrap());
        let y = if swap { t.mul(b, a).unwrap() } else { t.mul(a, b).unwrap() };
        prop_assert_eq!(t.shape(y), &big[..]);
        let loss = t.sum_all(y).unwrap();
        let grads = t.backward(loss).unwrap();
        let (ga, gb) = (grads.wrt(a).unwrap(), grads.wrt(b).unwrap());
        let mut want_gb = vec![0.0; m];
        for k in 0..n {
            let j = broadcast_index(&multi_index(k, &big), &small);
            prop_assert!((t.value(y).data()[k] - va[k] * vb[j]).abs() < 1e-12);
            prop_assert!((ga.data()[k] - vb[j]).abs() < 1e-12);
            want_gb[j] += va[k];
        }
        for j in 0..m {
            prop_assert!((gb.data()[j] - want_gb[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn reductions_match_naive_sums(shape in prop::collection::vec(1usize..5, 1..5), mask in prop::collection::vec(any::<bool>(), 4)) {
        let axes: Vec<usize> = (0..shape.len()).filter(|&i| mask[i]).collect();
        let n: usize = shape.iter().product();
        let v = values(n, 1.0);
        let mut t = Tape64::new();
        let x = t.leaf(Tensor64::from_f64(shape.clone(), &v).unwrap());
        let var = t.reduce(x, &axes, ReduceOp::Var).unwrap();
        let out_shape = t.shape(var).to_vec();
        let out_n: usize = out_shape.iter().product();
        let count = (n / out_n) as f64;
        let mut sum = vec![0.0; out_n];
        for k in 0..n {
            sum[broadcast_index(&multi_index(k, &shape), &out_shape)] += v[k];
        }
        let mut sq = vec![0.0; out_n];
        for k in 0..n {
            let o = broadcast_index(&multi_index(k, &shape), &out_shape);
            sq[o] += (v[k] - sum[o] / count).powi(2);
        }
        for o in 0..out_n {
            prop_assert!((t.value(var).data()[o] - sq[o] / count).abs() < 1e-12);
        }
        let loss = t.sum_all(var).unwrap();
        let g = t.backward(loss).unwrap().wrt(x).unwrap();
        for k in 0..n {
            let o = broadcast_index(&multi_index(k, &shape), &out_shape);
            prop_assert!((g.data()[k] - 2.0 * (v[k] - sum[o] / count) / count).abs() < 1e-12);
        }
    }

    #[test]
    fn pgm_round_trip_is_within_half_a_level(w in 1usize..24, h in 1usize..24, seed in any::<u64>()) {
        let pixels: Vec<f32> = (0..w * h).map(|i| ((seed.wrapping_add(i as u64) % 10_007) as f32) / 10_006.0).collect();
        let img = GlyphImage::new(w, h, pixels).unwrap();
        let back = decode_pgm(&encode_pgm(&img), Path::new("mem.pgm")).unwrap();
        prop_assert_eq!((back.width, back.height), (w, h));
        for (p, q) in img.pixels.iter().zip(&back.pixels) {
            prop_assert!((p - q).abs() <= 1.0 / 510.0 + 1e-7);
        }
    }

    #[test]
    fn ssim_stays_in_range(a in prop::collection::vec(0.0f32..=1.0, 144), b in prop::collection::vec(0.0f32..=1.0, 144)) {
        let (a, b) = (GlyphImage::new(12, 12, a).unwrap(), GlyphImage::new(12, 12, b).unwrap());
        let s = ssim(&a, &b, &SsimConfig::default()).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s), "ssim {}", s);
    }

    #[test]
    fn kl_is_non_negative(mu in prop::collection::vec(-4.0f64..4.0, 6), lv in prop::collection::vec(-4.0f64..4.0, 6)) {
        let mut t = Tape64::new();
        let code = StyleCode {
            mu: t.constant(Tensor64::from_f64([2, 3], &mu).unwrap()),
            log_var: t.constant(Tensor64::from_f64([2, 3], &lv).unwrap()),
        };
        let k = kl_loss(&mut t, &code).unwrap();
        prop_assert!(t.value(k).item() >= 0.0);
    }

    #[test]
    fn content_objective_is_symmetric_and_finite(p in prop::collection::vec(0.0f64..=1.0, 1..8)) {
        let n = p.len();
        let flipped: Vec<f64> = p.iter().map(|v| 1.0 - v).collect();
        let eval = |vals: &[f64]| {
            let mut t = Tape64::new();
            let a = t.constant(Tensor64::from_f64([n], vals).unwrap());
            let b = t.constant(Tensor64::from_f64([n], vals).unwrap());
            let l = content_adv_loss_g(&mut t, a, b).unwrap();
            t.value(l).item()
        };
        let (x, y) = (eval(&p), eval(&flipped));
        prop_assert!(x.is_finite());
        prop_assert!((x - y).abs() < 1e-9 * x.abs().max(1.0));
    }
}
