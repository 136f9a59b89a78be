use pestvl_core::autograd::Graph;
use pestvl_core::partition::{
    compose_sequence, energy_map, flatten_windows, gumbel_soft, gumbel_softmax, inverse_window_transform,
    local_scan_order, topk_select, upsample_mask, TokenSequence, WindowLayout, COARSE_WINDOWS,
};
use pestvl_core::spectral::Plane;
use pestvl_core::tensor::Tensor;
use proptest::prelude::*;

fn feature(side: usize, c: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-1.0f64..1.0, side * side * c).prop_map(move |d| Tensor::matrix(side * side, c, d).unwrap())
}

fn sized_feature() -> impl Strategy<Value = (usize, Tensor)> {
    (prop::sample::select(vec![2usize, 4, 8, 16]), 1usize..4).prop_flat_map(|(side, c)| (Just(side), feature(side, c)))
}

fn flatten_both(side: usize, f: &Tensor) -> (TokenSequence, TokenSequence) {
    let coarse = flatten_windows(f, &WindowLayout::coarse(side, side).unwrap()).unwrap();
    let fine = flatten_windows(f, &WindowLayout::fine(side, side).unwrap()).unwrap();
    (coarse, fine)
}

fn is_permutation(ids: &[usize]) -> bool {
    let mut seen = vec![false; ids.len()];
    ids.iter().all(|&i| i < seen.len() && !std::mem::replace(&mut seen[i], true))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn hard_compose_is_a_permutation((side, f) in sized_feature(), window_bits in 0u8..16) {
        let mask: Vec<f64> = (0..COARSE_WINDOWS).map(|w| ((window_bits >> w) & 1) as f64).collect();
        let (coarse, fine) = flatten_both(side, &f);
        let seq = compose_sequence(&coarse, &fine, &upsample_mask(&mask, side * side).unwrap()).unwrap();
        let ids = seq.ids().expect("hard mask keeps a permutation").to_vec();
        prop_assert!(is_permutation(&ids));
        // Every slot carries exactly the feature row it claims.
        for (slot, &id) in ids.iter().enumerate() {
            prop_assert_eq!(seq.tokens.row(slot), f.row(id));
        }
        prop_assert_eq!(inverse_window_transform(&seq).unwrap(), f);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn scan_orders_are_permutations(side in prop::sample::select(vec![2usize, 4, 6, 8, 12, 16])) {
        for layout in [WindowLayout::coarse(side, side), WindowLayout::fine(side, side)] {
            let Ok(layout) = layout else { continue };
            prop_assert!(is_permutation(&local_scan_order(&layout)));
        }
    }

    #[test]
    fn compose_is_linear_in_the_mask((side, f) in sized_feature(), a in prop::collection::vec(0.0f64..1.0, 4), b in prop::collection::vec(0.0f64..1.0, 4)) {
        let (coarse, fine) = flatten_both(side, &f);
        let t = side * side;
        let ma = upsample_mask(&a, t).unwrap();
        let mb = upsample_mask(&b, t).unwrap();
        let mid: Vec<f64> = ma.iter().zip(&mb).map(|(x, y)| (x + y) / 2.0).collect();
        let sa = compose_sequence(&coarse, &fine, &ma).unwrap();
        let sb = compose_sequence(&coarse, &fine, &mb).unwrap();
        let sm = compose_sequence(&coarse, &fine, &mid).unwrap();
        for i in 0..sm.tokens.len() {
            let avg = (sa.tokens.data()[i] + sb.tokens.data()[i]) / 2.0;
            prop_assert!((avg - sm.tokens.data()[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn soft_inverse_is_the_adjoint_of_compose((side, f) in sized_feature(), m in prop::collection::vec(0.0f64..1.0, 4), seed in any::<u64>()) {
        let (coarse, fine) = flatten_both(side, &f);
        let mask = upsample_mask(&m, side * side).unwrap();
        let seq = compose_sequence(&coarse, &fine, &mask).unwrap();
        let mut state = seed;
        let y = Tensor::from_fn(seq.tokens.rows(), seq.tokens.cols(), |_, _| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        });
        let back = inverse_window_transform(&TokenSequence { tokens: y.clone(), provenance: seq.provenance.clone() }).unwrap();
        let lhs: f64 = seq.tokens.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = f.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn energy_map_follows_quadrant_swaps(half in 1usize..5, data in prop::collection::vec(0.0f64..1.0, 64)) {
        let side = 2 * half;
        let p = Plane::from_fn(side, side, |y, x| data[(y * side + x) % data.len()]);
        let layout = WindowLayout::coarse(side, side).unwrap();
        let e = energy_map(&p, &layout).unwrap();
        // Swap top-left and bottom-right quadrants.
        let swapped = Plane::from_fn(side, side, |y, x| {
            let (qy, qx) = (y / half, x / half);
            if qy == qx {
                p.at((y + half) % side, (x + half) % side)
            } else {
                p.at(y, x)
            }
        });
        let s = energy_map(&swapped, &layout).unwrap();
        prop_assert_eq!(s[0], e[3]);
        prop_assert_eq!(s[3], e[0]);
        prop_assert_eq!(s[1], e[1]);
        prop_assert_eq!(s[2], e[2]);
    }

    #[test]
    fn topk_is_affine_invariant(s in prop::collection::vec(-10.0f64..10.0, 1..12), c in 0.01f64..100.0, d in -50.0f64..50.0, k in 1usize..4) {
        let k = k.min(s.len());
        let moved: Vec<f64> = s.iter().map(|v| c * v + d).collect();
        // Affine maps can merge scores that differ in the last bits; only
        // compare when the transform keeps the ordering strict.
        let mut sorted = s.clone();
        sorted.sort_by(f64::total_cmp);
        prop_assume!(sorted.windows(2).all(|w| w[1] - w[0] > 1e-9));
        prop_assert_eq!(topk_select(&moved, k).unwrap(), topk_select(&s, k).unwrap());
    }

    #[test]
    fn gumbel_masks_sum_to_one(s in prop::collection::vec(-5.0f64..5.0, 4), noise in prop::collection::vec(-3.0f64..3.0, 4), tau in 0.05f64..5.0) {
        let soft = gumbel_soft(&s, &noise, tau).unwrap();
        prop_assert!((soft.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let hard = gumbel_softmax(&s, tau, true, &noise).unwrap();
        prop_assert_eq!(hard.iter().filter(|&&v| v == 1.0).count(), 1);
        prop_assert_eq!(hard.iter().filter(|&&v| v == 0.0).count(), 3);
    }

    #[test]
    fn low_temperature_approaches_argmax(base in prop::collection::vec(0.0f64..1.0, 4), win in 0usize..4) {
        let mut s = base.clone();
        s[win] = base.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 0.1;
        let soft = gumbel_softmax(&s, 0.01, false, &[0.0; 4]).unwrap();
        for (i, v) in soft.iter().enumerate() {
            let target = if i == win { 1.0 } else { 0.0 };
            prop_assert!((v - target).abs() < 1e-3);
        }
    }

    #[test]
    fn straight_through_gradient_is_the_soft_gradient(s in prop::collection::vec(-2.0f64..2.0, 4), noise in prop::collection::vec(-1.0f64..1.0, 4), w in prop::collection::vec(-1.0f64..1.0, 4), tau in 0.2f64..3.0) {
        let grad = |hard: bool| {
            let mut g = Graph::new();
            let sv = g.leaf(Tensor::matrix(4, 1, s.clone()).unwrap());
            let m = g.gumbel_softmax(sv, &noise, tau, hard, 1).unwrap();
            let loss = g.dot(m, &w).unwrap();
            let value = g.value(m).data().to_vec();
            (value, g.backward(loss).unwrap().get(sv).unwrap().clone())
        };
        let (hv, hg) = grad(true);
        let (sv, sg) = grad(false);
        prop_assert!(hv.iter().all(|&v| v == 0.0 || v == 1.0));
        prop_assert_eq!(hv.iter().sum::<f64>(), 1.0);
        prop_assert!((sv.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert_eq!(hg, sg);
    }
}
