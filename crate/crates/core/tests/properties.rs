use proptest::prelude::*;

use dgsm_core::dgsm::{dgsm_bound, nu_scalar};
use dgsm_core::io::fmt_f64;
use dgsm_core::kle::{kle_from_samples, ProcessEnsemble};
use dgsm_core::reduction::{kde_pdf, l1_pdf_distance};
use dgsm_core::{make_interval_grid, Marginal, ParameterSpace};

proptest! {
    #[test]
    fn written_floats_read_back_exactly(x in prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO) {
        let back: f64 = fmt_f64(x).parse().unwrap();
        prop_assert_eq!(back.to_bits(), x.to_bits());
    }

    #[test]
    fn kde_is_translation_equivariant(
        samples in prop::collection::vec(-5.0f64..5.0, 30..80),
        shift in -100.0f64..100.0,
    ) {
        prop_assume!(samples.iter().any(|s| (s - samples[0]).abs() > 1e-3));
        let xs: Vec<f64> = (0..25).map(|k| -6.0 + 0.5 * k as f64).collect();
        let moved: Vec<f64> = samples.iter().map(|s| s + shift).collect();
        let xs_moved: Vec<f64> = xs.iter().map(|x| x + shift).collect();
        let a = kde_pdf(&samples, &xs).unwrap();
        let b = kde_pdf(&moved, &xs_moved).unwrap();
        let peak = a.iter().fold(0.0f64, |m, v| m.max(*v));
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((p - q).abs() <= 1e-9 * peak.max(1.0));
        }
    }

    #[test]
    fn l1_distance_is_symmetric_and_bounded(
        a in prop::collection::vec(-3.0f64..3.0, 30..80),
        b in prop::collection::vec(-3.0f64..3.0, 30..80),
    ) {
        prop_assume!(a.iter().any(|s| (s - a[0]).abs() > 1e-3) && b.iter().any(|s| (s - b[0]).abs() > 1e-3));
        let d = l1_pdf_distance(&a, &b).unwrap();
        prop_assert!((d - l1_pdf_distance(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((0.0..=2.0 + 1e-6).contains(&d));
        prop_assert!(l1_pdf_distance(&a, &a).unwrap() == 0.0);
    }

    #[test]
    fn bounds_are_invariant_to_output_scaling(
        n in prop::collection::vec(0.0f64..10.0, 1..8),
        trace in 0.1f64..10.0,
        scale in 1e-3f64..1e3,
    ) {
        let alphas: Vec<f64> = (0..n.len()).map(|j| 0.1 + j as f64).collect();
        // f ↦ c f scales every 𝔑_j and the trace by c²
        let scaled: Vec<f64> = n.iter().map(|v| v * scale * scale).collect();
        let b0 = dgsm_bound(&n, trace, &alphas).unwrap();
        let b1 = dgsm_bound(&scaled, trace * scale * scale, &alphas).unwrap();
        for (x, y) in b0.iter().zip(&b1) {
            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1e-300));
        }
    }

    #[test]
    fn nu_is_mean_square_and_sign_blind(d in prop::collection::vec(-10.0f64..10.0, 1..50)) {
        let flipped: Vec<f64> = d.iter().map(|v| -v).collect();
        let nu = nu_scalar(&d).unwrap();
        prop_assert!(nu >= 0.0);
        prop_assert_eq!(nu, nu_scalar(&flipped).unwrap());
        let max = d.iter().fold(0.0f64, |m, v| m.max(v * v));
        prop_assert!(nu <= max);
    }

    #[test]
    fn uniform_samples_stay_in_range(a in -10.0f64..10.0, w in 0.01f64..10.0, seed in any::<u64>(), row in 0u64..1000) {
        let space = ParameterSpace::iid(Marginal::uniform(a, a + w).unwrap(), 3).unwrap();
        let r = space.sample_row(seed, row);
        prop_assert!(r.iter().all(|v| *v > a && *v < a + w));
        prop_assert_eq!(r, space.sample_row(seed, row));
    }

    #[test]
    fn output_kle_spectrum_is_sorted_and_within_trace(
        coeffs in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 4..12),
    ) {
        let grid = make_interval_grid(0.0, 1.0, 21).unwrap();
        let s = grid.abscissae();
        let rows: Vec<Vec<f64>> = coeffs
            .iter()
            .map(|c| s.iter().map(|x| c[0] + c[1] * x + c[2] * (3.0 * x).sin()).collect())
            .collect();
        let kle = kle_from_samples(&ProcessEnsemble::new(grid, rows).unwrap(), 3).unwrap();
        prop_assert!(kle.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(kle.eigenvalues.iter().all(|l| *l >= 0.0));
        prop_assert!(kle.retained_trace() <= kle.trace * (1.0 + 1e-10) + 1e-14);
    }
}
