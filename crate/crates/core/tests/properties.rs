use proptest::prelude::*;

use bcp_distill::analysis::{centered_moving_average, fit_inverse_eps};
use bcp_distill::nn::{ce_loss, init_params, softmax_into};
use bcp_distill::supervision::{dirichlet_target, mixture_target};
use bcp_distill::synth::entropy;
use bcp_distill::{Architecture, RngStream};

fn simplex(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, k).prop_map(|w| {
        let total: f64 = w.iter().sum();
        w.into_iter().map(|v| v / total).collect()
    })
}

fn on_simplex(t: &[f64]) -> bool {
    t.iter().all(|&v| (0.0..=1.0).contains(&v)) && (t.iter().sum::<f64>() - 1.0).abs() < 1e-12
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn backward_matches_central_differences(
        seed in any::<u64>(),
        hidden in prop::collection::vec(1usize..6, 0..3),
        d in 1usize..5,
        k in 2usize..5,
        temperature in 0.5f64..2.0,
    ) {
        let arch = Architecture::new(d, hidden, k).unwrap();
        let mut stream = RngStream::new(seed);
        let mut params = init_params(&arch, &mut stream);
        for v in params.as_mut_slice() {
            *v += 0.1 * stream.standard_normal();
        }
        let x: Vec<f64> = (0..d).map(|_| stream.standard_normal()).collect();
        let target = dirichlet_target(&vec![1.0 / k as f64; k], 2.0, &mut stream).unwrap();
        let grad = params.backward(&x, &target, temperature).unwrap();
        let loss = |p: &bcp_distill::NetworkParams| ce_loss(&p.forward(&x, temperature).unwrap(), &target);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        let mut scale: f64 = 1e-8;
        for (i, g) in grad.iter().enumerate() {
            let mut up = params.clone();
            up.as_mut_slice()[i] += h;
            let mut down = params.clone();
            down.as_mut_slice()[i] -= h;
            let fd = (loss(&up) - loss(&down)) / (2.0 * h);
            worst = worst.max((g - fd).abs());
            scale = scale.max(fd.abs());
        }
        prop_assert!(worst / scale < 1e-5, "relative error {}", worst / scale);
    }

    #[test]
    fn dirichlet_targets_lie_on_the_simplex(p in simplex(5), epsilon in 0.05f64..50.0, seed in any::<u64>()) {
        let t = dirichlet_target(&p, epsilon, &mut RngStream::new(seed)).unwrap();
        prop_assert!(on_simplex(&t), "{:?}", t);
    }

    #[test]
    fn mixtures_of_simplex_points_stay_on_it(p in simplex(4), label in 0usize..4, lambda in 0.0f64..=1.0) {
        let t = mixture_target(label, &p, lambda).unwrap();
        prop_assert!(on_simplex(&t));
        prop_assert!((t[label] - ((1.0 - lambda) + lambda * p[label])).abs() < 1e-15);
    }

    #[test]
    fn softmax_ignores_logit_shifts(logits in prop::collection::vec(-20.0f64..20.0, 2..8), shift in -100.0f64..100.0) {
        let mut a = vec![0.0; logits.len()];
        let mut b = vec![0.0; logits.len()];
        softmax_into(&logits, 1.0, &mut a);
        let shifted: Vec<f64> = logits.iter().map(|z| z + shift).collect();
        softmax_into(&shifted, 1.0, &mut b);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn higher_temperature_never_lowers_entropy(logits in prop::collection::vec(-5.0f64..5.0, 2..8), t in 0.1f64..5.0, dt in 0.0f64..5.0) {
        let mut cold = vec![0.0; logits.len()];
        let mut hot = vec![0.0; logits.len()];
        softmax_into(&logits, t, &mut cold);
        softmax_into(&logits, t + dt, &mut hot);
        prop_assert!(entropy(&hot) >= entropy(&cold) - 1e-12);
    }

    #[test]
    fn inverse_eps_residuals_are_orthogonal_to_the_regressor(
        points in prop::collection::vec((0.0f64..30.0, -1.0f64..1.0), 2..10),
    ) {
        prop_assume!(points.iter().any(|p| p.0 != points[0].0));
        let fit = fit_inverse_eps(&points).unwrap();
        let dot: f64 = points.iter().map(|&(e, m)| (m - fit.c / (1.0 + e)) / (1.0 + e)).sum();
        let norm: f64 = points.iter().map(|&(_, m)| m.abs()).sum::<f64>() + 1.0;
        prop_assert!(dot.abs() < 1e-12 * norm);
        prop_assert!(fit.r_squared <= 1.0 + 1e-12);
    }

    #[test]
    fn moving_average_preserves_constants(value in -10.0f64..10.0, n in 1usize..50, w in 1usize..20) {
        let smoothed = centered_moving_average(&vec![value; n], w);
        prop_assert_eq!(smoothed.len(), n);
        for s in smoothed {
            prop_assert!((s - value).abs() < 1e-12);
        }
    }
}
