use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use scoremix::metrics::{self, Moments, OracleReference};
use scoremix::synthetic::{Preset, SampleVec};

fn samples_strategy(d: usize) -> impl Strategy<Value = Vec<SampleVec>> {
    prop::collection::vec(prop::collection::vec(-5.0f64..5.0, d), (d + 3)..40)
}

fn spd2() -> impl Strategy<Value = DMatrix<f64>> {
    (prop::collection::vec(-1.5f64..1.5, 4), 0.05f64..1.0).prop_map(|(a, r)| {
        let a = DMatrix::from_row_slice(2, 2, &a);
        &a * a.transpose() + DMatrix::identity(2, 2) * r
    })
}

/// Trace of the principal root of a 2x2 matrix with positive eigenvalues.
fn trace_sqrt_2x2(m: &DMatrix<f64>) -> f64 {
    (m.trace() + 2.0 * m.determinant().sqrt()).sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn frechet_is_symmetric(a in samples_strategy(2), b in samples_strategy(2)) {
        let ab = metrics::frechet_gaussian(&a, &b).unwrap();
        let ba = metrics::frechet_gaussian(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-8 * ab.max(1.0));
        prop_assert!(ab >= 0.0);
    }

    #[test]
    fn frechet_is_translation_invariant(a in samples_strategy(3), b in samples_strategy(3), t in prop::collection::vec(-10.0f64..10.0, 3)) {
        let shift = |s: &[SampleVec]| -> Vec<SampleVec> {
            s.iter().map(|x| x.iter().zip(&t).map(|(v, d)| v + d).collect()).collect()
        };
        let base = metrics::frechet_gaussian(&a, &b).unwrap();
        let moved = metrics::frechet_gaussian(&shift(&a), &shift(&b)).unwrap();
        prop_assert!((base - moved).abs() <= 1e-7 * base.max(1.0));
    }

    #[test]
    fn frechet_matches_two_by_two_closed_form(sa in spd2(), sb in spd2(), m in prop::collection::vec(-3.0f64..3.0, 2)) {
        let a = Moments { mean: DVector::zeros(2), cov: sa.clone() };
        let b = Moments { mean: DVector::from_column_slice(&m), cov: sb.clone() };
        let got = metrics::frechet_from_moments(&a, &b).unwrap();
        // Tr (Sa Sb)^{1/2} equals the trace root of Sa Sb, which has positive eigenvalues.
        let expected = m[0] * m[0] + m[1] * m[1] + sa.trace() + sb.trace() - 2.0 * trace_sqrt_2x2(&(&sa * &sb));
        prop_assert!((got - expected.max(0.0)).abs() <= 1e-8 * expected.abs().max(1.0), "{} vs {}", got, expected);
    }

    #[test]
    fn coverage_ignores_sample_order(a in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 2), 1..60), seed in 0u64..1000) {
        let ring = Preset::Ring8.mixture();
        let c1 = metrics::mode_coverage(&a, &ring, 3.0).unwrap();
        let mut shuffled = a.clone();
        let mut r = scoremix::rng::seeded(seed);
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut r);
        let c2 = metrics::mode_coverage(&shuffled, &ring, 3.0).unwrap();
        prop_assert_eq!(c1, c2);
    }
}

#[test]
fn ring8_oracle_draws_score_as_expected() {
    let ring = Preset::Ring8.mixture();
    let reference = OracleReference::new(&ring).unwrap();
    let draws = scoremix::synthetic::sample_gmm(&ring, 4096, 42).unwrap();
    let report = metrics::MetricReport::evaluate(draws.samples(), &reference).unwrap();
    assert_eq!(report.mode_coverage, 1.0);
    assert!(report.frechet < 0.05, "{}", report.frechet);
    assert!((report.high_quality_fraction - 0.95).abs() < 0.02);
}
