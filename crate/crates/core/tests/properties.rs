//! Randomized invariants of the public API.

use marginnce::avmap::{cosine_response_map, soft_threshold_pool, soft_threshold_pool_grad, PoolConfig, ResponseMap};
use marginnce::marginnce::{info_nce_loss, margin_nce_grad, margin_nce_loss, LossConfig, SimilarityMatrix};
use marginnce::metrics::{ciou_upsampled, ciou_with_rule, consensus_from_boxes, eval_curve, PredictionMap, Rect, ThresholdRule};
use marginnce::numerics::{Grid3, Mat2, Vec1};
use proptest::prelude::*;

fn sim(n: usize, v: Vec<f64>) -> SimilarityMatrix {
    SimilarityMatrix::new(Mat2::from_vec(n, n, v).unwrap()).unwrap()
}

fn square(max_n: usize, lo: f64, hi: f64) -> impl Strategy<Value = (usize, Vec<f64>)> {
    (1..=max_n).prop_flat_map(move |n| (Just(n), prop::collection::vec(lo..hi, n * n)))
}

fn loss_cfg(tau: f64, margin: f64) -> LossConfig {
    LossConfig {
        tau,
        margin,
        ..LossConfig::default()
    }
}

fn map(h: usize, w: usize, v: Vec<f64>) -> ResponseMap {
    ResponseMap::new(Mat2::from_vec(h, w, v).unwrap())
}

proptest! {
    #[test]
    fn response_map_is_bounded(c in 1usize..6, data in prop::collection::vec(-5.0f64..5.0, 6 * 9 + 6)) {
        let img = Grid3::from_vec(c, 3, 3, data[..c * 9].to_vec()).unwrap();
        let a = Vec1::new(data[54..54 + c].to_vec()).unwrap();
        let m = cosine_response_map(&img, &a).unwrap();
        for &v in m.values().as_slice() {
            prop_assert!((-1.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn pool_is_a_convex_combination(
        v in prop::collection::vec(-1.0f64..1.0, 16),
        eps in -1.0f64..1.0,
        beta in 0.01f64..2.0,
    ) {
        let m = map(4, 4, v);
        let s = soft_threshold_pool(&m, &PoolConfig { epsilon: eps, beta, detach_weights: false });
        prop_assert!(s >= m.values().min() - 1e-15 && s <= m.values().max() + 1e-15);
    }

    #[test]
    fn pool_of_constant_map_is_the_constant(c in -1.0f64..1.0, eps in -1.0f64..1.0, beta in 0.01f64..2.0) {
        let m = map(3, 5, vec![c; 15]);
        let cfg = PoolConfig { epsilon: eps, beta, detach_weights: false };
        prop_assert!((soft_threshold_pool(&m, &cfg) - c).abs() <= 1e-15);
        for &g in soft_threshold_pool_grad(&m, &cfg).as_slice() {
            prop_assert!((g - 1.0 / 15.0).abs() <= 1e-15);
        }
    }

    #[test]
    fn pool_bias_at_large_beta_shrinks_like_one_over_beta(v in prop::collection::vec(-1.0f64..1.0, 16)) {
        let m = map(4, 4, v);
        let mean = m.values().mean();
        let at = |beta: f64| soft_threshold_pool(&m, &PoolConfig { epsilon: 0.65, beta, detach_weights: false }) - mean;
        // first-order term: (1 − σ(−ε/β)) · var(α) / β ≤ var / β ≤ 1/β
        prop_assert!(at(1e4).abs() <= 1e-4);
        prop_assert!(at(1e7).abs() <= 1e-6);
    }

    #[test]
    fn zero_margin_is_infonce((n, v) in square(16, -1.0, 1.0), tau in 0.01f64..1.0) {
        let s = sim(n, v);
        prop_assert_eq!(margin_nce_loss(&s, &loss_cfg(tau, 0.0)), info_nce_loss(&s, tau));
    }

    #[test]
    fn loss_increases_with_margin((n, v) in square(12, -1.0, 1.0)) {
        let s = sim(n, v);
        let l = |m| margin_nce_loss(&s, &loss_cfg(0.07, m));
        if n >= 2 {
            prop_assert!(l(-0.2) < l(0.0) && l(0.0) < l(0.2));
        } else {
            prop_assert!(l(-0.2) == 0.0 && l(0.2) == 0.0);
        }
    }

    #[test]
    fn loss_is_row_shift_invariant((n, v) in square(8, -1.0, 1.0), row in 0usize..8, c in -5.0f64..5.0) {
        let row = row % n;
        let mut shifted = v.clone();
        for x in &mut shifted[row * n..(row + 1) * n] {
            *x += c;
        }
        let cfg = loss_cfg(0.07, -0.2);
        let a = margin_nce_loss(&sim(n, v), &cfg);
        let b = margin_nce_loss(&sim(n, shifted), &cfg);
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{} vs {}", a, b);
    }

    #[test]
    fn gradient_signs_and_row_sums((n, v) in square(10, -1.0, 1.0), m in -0.4f64..0.4) {
        prop_assume!(n >= 2);
        let g = margin_nce_grad(&sim(n, v), &loss_cfg(0.07, m));
        for i in 0..n {
            let row = g.row(i);
            prop_assert!(row[i] < 0.0);
            for (j, &x) in row.iter().enumerate() {
                if j != i {
                    prop_assert!(x >= 0.0);
                }
            }
            prop_assert!(row.iter().sum::<f64>().abs() <= 1e-12);
        }
    }

    #[test]
    fn loss_is_finite_for_large_scores((n, v) in square(8, -1e3, 1e3)) {
        let s = sim(n, v);
        let cfg = loss_cfg(0.07, -0.2);
        prop_assert!(margin_nce_loss(&s, &cfg).is_finite());
        prop_assert!(margin_nce_grad(&s, &cfg).as_slice().iter().all(|g| g.is_finite()));
    }

    #[test]
    fn ciou_bounds_and_pixel_moves(
        on in prop::collection::vec(any::<bool>(), 36),
        b in (0usize..5, 0usize..5, 1usize..=6, 1usize..=6),
        pick in 0usize..36,
    ) {
        let (x0, y0) = (b.0, b.1);
        let (x1, y1) = ((x0 + b.2).min(6).max(x0 + 1), (y0 + b.3).min(6).max(y0 + 1));
        let rect = Rect::new(x0 as f64 / 6.0, y0 as f64 / 6.0, x1 as f64 / 6.0, y1 as f64 / 6.0).unwrap();
        let gt = consensus_from_boxes(&[rect], (6, 6)).unwrap();
        let pred = |on: &[bool]| Mat2::from_fn(6, 6, |y, x| if on[y * 6 + x] { 1.0 } else { 0.0 });
        let c = ciou_upsampled(&pred(&on), &gt, 0.5).unwrap();
        prop_assert!((0.0..=1.0).contains(&c));

        // Adding a pixel outside the ground truth lowers a non-zero cIoU;
        // inside it always raises it.
        if !on[pick] {
            let mut more = on.clone();
            more[pick] = true;
            let c2 = ciou_upsampled(&pred(&more), &gt, 0.5).unwrap();
            if gt.weights().as_slice()[pick] > 0.0 {
                prop_assert!(c2 > c);
            } else if c > 0.0 {
                prop_assert!(c2 < c);
            } else {
                prop_assert_eq!(c2, 0.0);
            }
        }
    }

    #[test]
    fn ciou_is_scale_invariant(v in prop::collection::vec(-1.0f64..1.0, 16), e in -8i32..8) {
        // powers of two keep the rescaling exact through interpolation
        let k = 2f64.powi(e);
        let gt = consensus_from_boxes(&[Rect::new(0.25, 0.0, 1.0, 0.75).unwrap()], (8, 8)).unwrap();
        let scores = Mat2::from_vec(4, 4, v).unwrap();
        let at = |m: Mat2| ciou_with_rule(&PredictionMap::new(m, (8, 8)).unwrap(), &gt, ThresholdRule::Median).unwrap().0;
        prop_assert_eq!(at(scores.clone()), at(scores.map(|x| k * x)));
    }

    #[test]
    fn success_curve_is_monotone(cious in prop::collection::vec(0.0f64..=1.0, 1..40)) {
        let curve = eval_curve(&cious, 0.05).unwrap();
        prop_assert!(curve.success_rates.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!((0.0..=1.0).contains(&curve.auc));
    }
}
