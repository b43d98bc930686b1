use hipa_tensor::{layer_norm, Tape, Tensor};
use proptest::prelude::*;

fn tensor_strategy(max_rank: usize) -> impl Strategy<Value = Tensor<f32>> {
    prop::collection::vec(1usize..5, 1..=max_rank).prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        prop::collection::vec(-10.0f32..10.0, n).prop_map(move |data| Tensor::new(shape.clone(), data).unwrap())
    })
}

fn sorted_bits(t: &Tensor<f32>) -> Vec<u32> {
    let mut v: Vec<u32> = t.data().iter().map(|x| x.to_bits()).collect();
    v.sort_unstable();
    v
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(t in tensor_strategy(3), axis_seed in 0usize..3) {
        let axis = axis_seed % t.ndim();
        let y = t.softmax(axis).unwrap();
        prop_assert!(y.data().iter().all(|&v| v >= 0.0));
        let shape = t.shape();
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        for o in 0..outer {
            for i in 0..inner {
                let s: f64 = (0..shape[axis])
                    .map(|j| y.data()[(o * shape[axis] + j) * inner + i] as f64)
                    .sum();
                prop_assert!((s - 1.0).abs() < 1e-6, "sum {}", s);
            }
        }
    }

    #[test]
    fn layer_norm_standardizes(tokens in 1usize..5, d in 2usize..16, seed in any::<u64>()) {
        // roughly unit-variance rows so eps/(var+eps) stays below 1e-4
        let mut state = seed;
        let x = Tensor::<f32>::from_fn([tokens, d], |_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f32 / (1u64 << 31) as f32) * 4.0 - 2.0
        });
        let y = layer_norm(&x, &Tensor::ones([d]), &Tensor::zeros([d]), 1e-5).unwrap();
        for (row, src) in y.data().chunks(d).zip(x.data().chunks(d)) {
            let src_mean = src.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let src_var = src.iter().map(|&v| (v as f64 - src_mean).powi(2)).sum::<f64>() / d as f64;
            prop_assume!(src_var > 0.25);
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            prop_assert!(mean.abs() < 1e-6, "mean {}", mean);
            prop_assert!((var - 1.0).abs() < 1e-4, "var {}", var);
        }
    }

    #[test]
    fn pixel_shuffle_is_a_bijection(n in 1usize..3, c in 1usize..3, r in 1usize..4, h in 1usize..4, w in 1usize..4) {
        let x = Tensor::<f32>::from_fn([n, c * r * r, h, w], |i| (i as f32).sqrt() - 3.0);
        let y = x.pixel_shuffle(r).unwrap();
        prop_assert_eq!(y.shape(), &[n, c, h * r, w * r]);
        let back = y.pixel_unshuffle(r).unwrap();
        prop_assert_eq!(back.data(), x.data());
    }

    #[test]
    fn rearrangements_preserve_values(t in tensor_strategy(4)) {
        let rank = t.ndim();
        let axes: Vec<usize> = (0..rank).rev().collect();
        let p = t.permute(&axes).unwrap();
        prop_assert_eq!(sorted_bits(&p), sorted_bits(&t));
        let r = t.reshape([t.numel()]).unwrap();
        let round_trip = r.reshape(t.shape().to_vec()).unwrap();
        prop_assert_eq!(round_trip.data(), t.data());
        let c = Tensor::concat(&[&t, &p.permute(&axes).unwrap()], 0).unwrap();
        let mut doubled = sorted_bits(&t);
        doubled.extend(sorted_bits(&t));
        doubled.sort_unstable();
        prop_assert_eq!(sorted_bits(&c), doubled);
        let head = c.narrow(0, 0, t.shape()[0]).unwrap();
        prop_assert_eq!(head.data(), t.data());
    }

    #[test]
    fn backward_is_deterministic(t in tensor_strategy(2)) {
        let run = || {
            let tape = Tape::<f32>::new();
            let x = tape.watch(&t);
            let y = x.mul(&x).unwrap().gelu().add(&x.sigmoid()).unwrap().sum();
            y.backward().unwrap().get(&x).unwrap().to_vec()
        };
        let (a, b) = (run(), run());
        prop_assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
