use proptest::prelude::*;
use scoremix::augment::{self, MixConfig, ScoreField, Termination};
use scoremix::metrics;
use scoremix::schedule::{self, NoiseSchedule};
use scoremix::score_net::{ScaleTables, ScoreArch, ScoreNetwork};
use scoremix::synthetic::{self, GaussianMixture, Preset};

fn ring8() -> GaussianMixture {
    Preset::Ring8.mixture()
}

fn mode_pair() -> impl Strategy<Value = (usize, usize)> {
    (0usize..8, 1usize..8).prop_map(|(i, k)| (i, (i + k) % 8))
}

/// Linear network `S(x, sigma_i) = -(x - centre) * exp(g_i)`, one gain per scale.
fn linear_field(centre: &[f64], schedule: &NoiseSchedule, gain: impl Fn(f64) -> f64) -> ScoreNetwork {
    let d = centre.len();
    let arch = ScoreArch {
        hidden_widths: vec![],
        tables: ScaleTables::PerScale,
        output_gain: true,
        ..ScoreArch::default()
    };
    let mut net = ScoreNetwork::with_arch(d, arch, schedule.clone(), 0);
    let off = net.table_offset();
    let p = net.params_mut();
    for i in 0..d {
        for j in 0..d {
            p[i * d + j] = if i == j { -1.0 } else { 0.0 };
        }
        p[d * d + i] = centre[i];
    }
    for (t, s) in schedule.sigmas().iter().enumerate() {
        p[off + t] = gain(*s).ln();
    }
    net
}

fn random_net(d: usize, seed: u64) -> ScoreNetwork {
    let schedule = NoiseSchedule::from_endpoints(2.0, 0.05, 0.7).unwrap();
    let mut net = ScoreNetwork::with_arch(d, ScoreArch::with_widths(&[6, 6]), schedule, seed);
    let mut r = scoremix::rng::seeded(seed + 1);
    let jitter = scoremix::rng::standard_normal_vec(&mut r, net.num_params());
    for (p, j) in net.params_mut().iter_mut().zip(jitter) {
        *p += 0.1 * j;
    }
    net
}

#[test]
fn beta_moments_at_default_alpha() {
    let alpha = 0.2;
    let n = 100_000usize;
    let mut r = scoremix::rng::seeded(2024);
    let draws: Vec<f64> = (0..n).map(|_| augment::sample_lambda_with(alpha, &mut r).unwrap()).collect();
    assert!(draws.iter().all(|l| (0.0..=1.0).contains(l)));
    let mean = draws.iter().sum::<f64>() / n as f64;
    assert!((mean - 0.5).abs() <= 0.005, "mean {mean}");
    let var = draws.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    // Beta(a, a): variance a^2 / ((2a)^2 (2a + 1)); fourth central moment from the general formula
    let expected = alpha * alpha / ((2.0 * alpha).powi(2) * (2.0 * alpha + 1.0));
    let m4 = draws.iter().map(|l| (l - mean).powi(4)).sum::<f64>() / n as f64;
    let se = ((m4 - var * var) / n as f64).sqrt();
    assert!((var - expected).abs() <= 3.0 * se, "var {var} vs {expected} (se {se})");
    assert!((expected - 0.1786).abs() < 5e-5);
}

#[test]
fn mixup_endpoints_and_arithmetic() {
    let (a, b) = ([0.0, 0.0], [2.0, 4.0]);
    assert_eq!(augment::mixup(&a, &b, 1.0).unwrap(), a.to_vec());
    assert_eq!(augment::mixup(&a, &b, 0.0).unwrap(), b.to_vec());
    assert_eq!(augment::mixup(&a, &b, 0.25).unwrap(), vec![1.5, 3.0]);
    assert!(matches!(augment::mixup(&a, &[1.0], 0.5), Err(scoremix::Error::Schema(_))));
    assert!(matches!(augment::mixup(&a, &b, 1.5), Err(scoremix::Error::Precondition(_))));
}

#[test]
fn objective_closed_forms() {
    let g = Preset::Gauss1 { tau: 1.0, dim: 1 }.mixture();
    let (v, grad) = augment::score_norm_objective(ScoreField::Analytic(&g), &[3.0]).unwrap();
    assert!((v - 9.0).abs() < 1e-12 && (grad[0] - 6.0).abs() < 1e-12);
    let (v, grad) = augment::score_norm_objective(ScoreField::Analytic(&g), &[0.0]).unwrap();
    assert!(v.abs() < 1e-12 && grad[0].abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mixup_swap_symmetry(a in prop::collection::vec(-10.0f64..10.0, 3), b in prop::collection::vec(-10.0f64..10.0, 3), l in 0.0f64..=1.0) {
        let ab = augment::mixup(&a, &b, l).unwrap();
        let ba = augment::mixup(&b, &a, 1.0 - l).unwrap();
        for ((x, y), (p, q)) in ab.iter().zip(&ba).zip(a.iter().zip(&b)) {
            prop_assert!((x - y).abs() <= 1e-12 * (p.abs() + q.abs()).max(1.0));
            prop_assert!(*x >= p.min(*q) - 1e-12 && *x <= p.max(*q) + 1e-12);
        }
    }

    #[test]
    fn learned_objective_gradient_matches_finite_differences(d in 1usize..4, seed in 0u64..1000) {
        let net = random_net(d, seed);
        let mut r = scoremix::rng::seeded(seed + 7);
        let x = scoremix::rng::standard_normal_vec(&mut r, d);
        let field = ScoreField::Learned(&net);
        let (_, grad) = augment::score_norm_objective(field, &x).unwrap();
        let h = 1e-6;
        for k in 0..d {
            let (mut p, mut q) = (x.clone(), x.clone());
            p[k] += h;
            q[k] -= h;
            let fd = (augment::score_norm_objective(field, &p).unwrap().0 - augment::score_norm_objective(field, &q).unwrap().0) / (2.0 * h);
            let rel = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-3);
            prop_assert!(rel <= 1e-4, "coord {}: {} vs {}", k, fd, grad[k]);
        }
    }

    #[test]
    fn analytic_descent_is_safeguarded_and_stationary((i, k) in mode_pair(), seed in 0u64..10_000) {
        let gmm = ring8();
        let field = ScoreField::Analytic(&gmm);
        let m = |j: usize| gmm.components()[j].mean().to_vec();
        let config = MixConfig { seed, ..MixConfig::default() };
        let rec = augment::scoremix(&m(i), &m(k), field, &config).unwrap();
        let expected = augment::mixup(&m(i), &m(k), rec.lambda).unwrap();
        for (a, b) in rec.x_mixed.iter().zip(&expected) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        prop_assert!(rec.objective_trace.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(rec.final_score_norm <= rec.initial_score_norm + 1e-9);
        let (_, grad) = augment::score_norm_objective(field, &rec.x_star).unwrap();
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        match rec.termination {
            Termination::Converged => prop_assert!(gnorm <= config.grad_tol),
            Termination::StepsExhausted => prop_assert_eq!(rec.steps_run, config.steps),
            Termination::Stalled => prop_assert!(rec.steps_run <= config.steps),
        }
        let again = augment::scoremix(&m(i), &m(k), field, &config).unwrap();
        prop_assert_eq!(again, rec);
    }
}

#[test]
fn ring8_adjacent_modes_at_fixed_lambda() {
    let gmm = ring8();
    let m = |j: usize| gmm.components()[j].mean().to_vec();
    let config = MixConfig {
        lambda: Some(0.3),
        ..MixConfig::default()
    };
    let rec = augment::scoremix(&m(0), &m(1), ScoreField::Analytic(&gmm), &config).unwrap();
    assert!(rec.final_score_norm <= 0.01 * rec.initial_score_norm);
    assert!(gmm.log_density(&rec.x_star).unwrap() >= gmm.log_density(&rec.x_mixed).unwrap());
}

#[test]
fn identical_parents_at_a_mode_stay_put() {
    let gmm = ring8();
    let m = gmm.components()[3].mean().to_vec();
    let rec = augment::scoremix(&m, &m, ScoreField::Analytic(&gmm), &MixConfig::default()).unwrap();
    for (a, b) in rec.x_star.iter().zip(&m) {
        assert!((a - b).abs() <= 1e-9);
    }
}

#[test]
fn scoremix_pool_is_denser_than_mixup_pool() {
    let gmm = ring8();
    let data = synthetic::sample_gmm(&gmm, 64, 5).unwrap();
    let reference = metrics::OracleReference::new(&gmm).unwrap();
    let config = MixConfig::default();
    let smx = augment::augment_batch(&data, ScoreField::Analytic(&gmm), &config, 2.0, 9).unwrap();
    let mix = augment::mixup_batch(&data, config.alpha, 2.0, 9).unwrap();
    assert_eq!(smx.dataset.len(), 128);
    assert_eq!(mix.len(), 128);
    let (smx_mean, _) = metrics::density_stats_with(smx.dataset.samples(), &reference).unwrap();
    let (mix_mean, _) = metrics::density_stats_with(mix.samples(), &reference).unwrap();
    assert!(smx_mean > mix_mean, "{smx_mean} vs {mix_mean}");
}

#[test]
fn grid25_labels_are_inherited_from_both_parents() {
    let gmm = Preset::Grid25.mixture();
    let data = synthetic::sample_gmm(&gmm, 200, 8).unwrap();
    let config = MixConfig {
        clamp01: true,
        steps: 5,
        ..MixConfig::default()
    };
    let out = augment::augment_batch(&data, ScoreField::Analytic(&gmm), &config, 0.5, 3).unwrap();
    let labels = data.labels().unwrap();
    let out_labels = out.dataset.labels().unwrap();
    for (rec, l) in out.records.iter().zip(out_labels) {
        let (i, k) = rec.parents.unwrap();
        assert!(i != k);
        assert_eq!(labels[i], *l);
        assert_eq!(labels[k], *l);
        assert!(rec.x_star.iter().all(|v| (0.0..=1.0).contains(v)));
    }
    let none = augment::augment_batch(&data, ScoreField::Analytic(&gmm), &config, 0.0, 3).unwrap();
    assert!(none.dataset.is_empty());
}

/// Clean sample, its perturbation at the finetune scale, and the finetuned output.
fn finetune_trials(net_for: impl Fn(&[f64]) -> ScoreNetwork, trials: usize) -> (usize, f64, f64) {
    let gmm = Preset::Gauss1 { tau: 0.5, dim: 2 }.mixture();
    let data = synthetic::sample_gmm(&gmm, 2000, 3).unwrap();
    let sched = schedule::make_schedule(&data).unwrap();
    let i0 = sched.index_for_fraction(0.25).unwrap();
    let sigma = sched.sigma(i0);
    let mut r = scoremix::rng::seeded(17);
    let (mut closer, mut before, mut after) = (0, 0.0, 0.0);
    for x in &data.samples()[..trials] {
        let net = net_for(x);
        let z = scoremix::rng::standard_normal_vec(&mut r, 2);
        let noisy: Vec<f64> = x.iter().zip(&z).map(|(a, b)| a + sigma * b).collect();
        let out = augment::denoise_finetune(&noisy, &net, 0.25, false).unwrap();
        let d0: f64 = noisy.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum();
        let d1: f64 = out.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum();
        closer += usize::from(d1 < d0);
        before += d0;
        after += d1;
    }
    (closer, before / trials as f64, after / trials as f64)
}

#[test]
fn finetune_with_a_per_sample_oracle_always_moves_closer() {
    let data = synthetic::sample_gmm(&Preset::Gauss1 { tau: 0.5, dim: 2 }.mixture(), 2000, 3).unwrap();
    let sched = schedule::make_schedule(&data).unwrap();
    let (closer, _, after) = finetune_trials(|x| linear_field(x, &sched, |s| 1.0 / (s * s)), 200);
    assert_eq!(closer, 200);
    assert!(after < 1e-20);
}

#[test]
fn finetune_with_the_exact_perturbed_field_shrinks_mean_error() {
    // The exact field of the perturbed gauss1 density is -x / (tau^2 + sigma^2).
    // Its single Tweedie step lowers the mean squared error, but an individual
    // output is closer to its clean sample only about half of the time.
    let data = synthetic::sample_gmm(&Preset::Gauss1 { tau: 0.5, dim: 2 }.mixture(), 2000, 3).unwrap();
    let sched = schedule::make_schedule(&data).unwrap();
    let net = linear_field(&[0.0, 0.0], &sched, |s| 1.0 / (0.25 + s * s));
    let (closer, before, after) = finetune_trials(|_| net.clone(), 1000);
    assert!(after < before, "{after} vs {before}");
    assert!((350..=650).contains(&closer), "{closer}");
}
