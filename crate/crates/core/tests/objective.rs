use proptest::prelude::*;
use scrub_core::diffcore::{ms_ssim, AdamConfig, AdamState, Graph, MsSsimConfig, Parameterized};
use scrub_core::genmodels::{generate, latent_at, GeneratorArch, GeneratorParams, LATENT_DIM};
use scrub_core::latentfeat::{classify, identify_target, translate, TargetVector};
use scrub_core::synthdata::{sample_dataset, FeatureName};
use scrub_core::unlearner::{
    loss_percep, loss_recon, loss_total, loss_unlearn, oracle_dataset, unlearn, LossTerms,
    Objective, UnlearnConfig,
};

/// Target along the first axis with threshold 1.
fn axis_tv(dim: usize) -> TargetVector {
    let mut pos = vec![0.0; dim];
    pos[0] = 2.0;
    identify_target(&[pos], &[vec![0.0; dim]], FeatureName::Bar).unwrap()
}

fn models() -> (GeneratorParams, GeneratorParams) {
    let arch = GeneratorArch::default();
    (GeneratorParams::init(arch, 1), GeneratorParams::init(arch, 2))
}

fn with_first(mut z: Vec<f64>, v: f64) -> Vec<f64> {
    z[0] = v;
    z
}

fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]).abs();
    }
    s / a.len() as f64
}

#[test]
fn recon_recomputes_as_pixel_l1() {
    let (f, g) = models();
    let tv = axis_tv(LATENT_DIM);
    for i in 0..20 {
        let z = with_first(latent_at(3, i, LATENT_DIM), -0.5);
        assert_eq!(classify(&z, &tv).unwrap(), 0);
        let want = mean_abs_diff(generate(&g, &z).unwrap().data(), generate(&f, &z).unwrap().data());
        let got = loss_recon(&g, &f, &z, &tv).unwrap();
        assert!(want > 0.0);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        assert_eq!(loss_recon(&f, &f, &z, &tv).unwrap(), 0.0);

        let zp = with_first(z, 1.5);
        assert_eq!(loss_recon(&g, &f, &zp, &tv).unwrap(), 0.0);
    }
}

#[test]
fn unlearn_recomputes_against_translated_target() {
    let (f, g) = models();
    let tv = axis_tv(LATENT_DIM);
    for i in 0..20 {
        let z = with_first(latent_at(4, i, LATENT_DIM), 1.0 + 0.1 * i as f64);
        let zh = translate(&z, &tv).unwrap();
        let want = mean_abs_diff(generate(&g, &z).unwrap().data(), generate(&f, &zh).unwrap().data());
        let got = loss_unlearn(&g, &f, &z, &tv).unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");

        let zn = with_first(z, 0.2);
        assert_eq!(loss_unlearn(&g, &f, &zn, &tv).unwrap(), 0.0);
    }
    // On the threshold the translated latent is the latent itself.
    let z = with_first(latent_at(4, 99, LATENT_DIM), 1.0);
    assert_eq!(loss_unlearn(&f, &f, &z, &tv).unwrap(), 0.0);
    assert!(loss_percep(&f, &f, &z, &tv).unwrap().abs() < 1e-9);
}

#[test]
fn percep_is_one_minus_ms_ssim_and_in_open_unit_interval() {
    let (f, g) = models();
    let tv = axis_tv(LATENT_DIM);
    for i in 0..100 {
        let z = with_first(latent_at(6, i, LATENT_DIM), 1.2 + 0.02 * i as f64);
        let got = loss_percep(&g, &f, &z, &tv).unwrap();
        assert!(got > 0.0 && got < 1.0, "case {i}: {got}");
        if i < 5 {
            let zh = translate(&z, &tv).unwrap();
            let mut graph = Graph::new();
            let a = graph.constant(generate(&g, &z).unwrap()).unwrap();
            let b = graph.constant(generate(&f, &zh).unwrap()).unwrap();
            let s = ms_ssim(&mut graph, a, b, &MsSsimConfig::default()).unwrap();
            assert!((got - (1.0 - graph.value(s).item())).abs() < 1e-12);
        }
        assert_eq!(loss_percep(&g, &f, &with_first(z, -1.0), &tv).unwrap(), 0.0);
    }
}

#[test]
fn total_is_the_weighted_term_sum() {
    let (f, g) = models();
    let tv = axis_tv(LATENT_DIM);
    for i in 0..10 {
        let z = latent_at(8, i, LATENT_DIM);
        for z in [with_first(z.clone(), -0.3), with_first(z, 1.7)] {
            let alpha = 0.5 + i as f64;
            let want = alpha * (loss_unlearn(&g, &f, &z, &tv).unwrap() + loss_percep(&g, &f, &z, &tv).unwrap())
                + loss_recon(&g, &f, &z, &tv).unwrap();
            assert!((loss_total(&g, &f, &z, &tv, alpha).unwrap() - want).abs() < 1e-12);
            assert_eq!(
                loss_total(&g, &f, &z, &tv, 0.0).unwrap(),
                loss_recon(&g, &f, &z, &tv).unwrap()
            );
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn recon_and_unlearn_never_both_active(seed in any::<u64>(), shift in -3.0f64..3.0) {
        let (f, g) = models();
        let tv = axis_tv(LATENT_DIM);
        let z = with_first(latent_at(seed, 0, LATENT_DIM), shift);
        let r = loss_recon(&g, &f, &z, &tv).unwrap();
        let u = loss_unlearn(&g, &f, &z, &tv).unwrap();
        prop_assert_eq!(r * u, 0.0);
        prop_assert!(r + u > 0.0);
    }
}

#[test]
fn zero_fixed_point_gives_a_no_op_adam_step() {
    let (f, _) = models();
    let tv = axis_tv(LATENT_DIM);
    let batch: Vec<Vec<f64>> = (0..16)
        .map(|i| with_first(latent_at(9, i, LATENT_DIM), -0.5))
        .collect();
    let eval = Objective::new(&f, &tv, 3.0).unwrap().evaluate(&f, &batch).unwrap();
    assert_eq!(eval.loss.total, 0.0);
    assert!(eval.grads.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    let mut g = f.clone();
    let mut opt = AdamState::new(AdamConfig::with_lr(1e-4), &g).unwrap();
    opt.step(&mut g, &eval.grads).unwrap();
    assert_eq!(g, f);
}

/// Full objective on a tiny generator against central differences, skipping
/// components whose perturbation crosses a kink.
#[test]
fn miniature_objective_gradient_matches_finite_differences() {
    let arch = GeneratorArch {
        latent_dim: 4,
        hidden: 8,
        side: 8,
    };
    let f = GeneratorParams::init(arch, 11);
    let g = GeneratorParams::init(arch, 12);
    let tv = axis_tv(4);
    let latents: Vec<Vec<f64>> = (0..6)
        .map(|i| with_first(latent_at(13, i, 4), if i % 2 == 0 { 1.6 } else { -0.4 }))
        .collect();
    let obj = Objective::new(&f, &tv, 3.0)
        .unwrap()
        .with_ssim(MsSsimConfig::single_scale());
    let base = obj.evaluate(&g, &latents).unwrap();
    assert!(base.loss.recon > 0.0 && base.loss.unlearn > 0.0 && base.loss.percep > 0.0);

    let h = 1e-5;
    let (mut worst, mut checked) = (0.0f64, 0);
    let sizes: Vec<usize> = g.params().iter().map(|t| t.len()).collect();
    for (p, &len) in sizes.iter().enumerate() {
        for j in 0..len {
            let shifted = |d: f64| {
                let mut m = g.clone();
                m.params_mut()[p].data_mut()[j] += d;
                obj.evaluate(&m, &latents).unwrap()
            };
            let (plus, minus) = (shifted(h), shifted(-h));
            if plus.kinks != base.kinks || minus.kinks != base.kinks || plus.kink_margin < 1e-6 || minus.kink_margin < 1e-6 {
                continue;
            }
            let numeric = (plus.loss.total - minus.loss.total) / (2.0 * h);
            let analytic = base.grads[p].data()[j];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    assert!(checked > sizes.iter().sum::<usize>() / 2, "only {checked} components checked");
    assert!(worst < 1e-4, "max relative error {worst}");
}

#[test]
fn alpha_zero_is_pure_mimicry() {
    let (f, _) = models();
    let tv = axis_tv(LATENT_DIM);
    let cfg = UnlearnConfig {
        alpha: 0.0,
        epochs: 50,
        samples_per_epoch: 100,
        ..UnlearnConfig::default()
    };
    let (g, report) = unlearn(&f, &tv, &cfg).unwrap();
    assert_eq!(report.curves.len(), 100);
    let mut total = 0.0;
    for i in 0..1000 {
        let z = latent_at(4242, i, LATENT_DIM);
        total += mean_abs_diff(generate(&g, &z).unwrap().data(), generate(&f, &z).unwrap().data());
    }
    assert!(total / 1000.0 <= 1e-3);
}

#[test]
fn terms_switch_off_independently() {
    let (f, g) = models();
    let tv = axis_tv(LATENT_DIM);
    let batch: Vec<Vec<f64>> = (0..8)
        .map(|i| with_first(latent_at(1, i, LATENT_DIM), if i < 4 { 2.0 } else { 0.0 }))
        .collect();
    let full = Objective::new(&f, &tv, 2.0).unwrap().value(&g, &batch).unwrap();
    let only_u = Objective::new(&f, &tv, 2.0)
        .unwrap()
        .with_terms(LossTerms::UNLEARN_ONLY)
        .value(&g, &batch)
        .unwrap();
    assert_eq!(only_u.recon, 0.0);
    assert_eq!(only_u.percep, 0.0);
    assert_eq!(only_u.unlearn, full.unlearn);
    assert!((only_u.total - 2.0 * full.unlearn).abs() < 1e-12);
    assert!((full.total - (full.recon + 2.0 * (full.unlearn + full.percep))).abs() < 1e-12);
}

#[test]
fn oracle_set_sizes() {
    let data = sample_dataset(2000, 7, 0.1).unwrap();
    let kept = oracle_dataset(&data, FeatureName::Bar).len();
    assert!((1700..=1900).contains(&kept), "{kept}");

    let none = sample_dataset(300, 7, 0.0).unwrap();
    assert_eq!(oracle_dataset(&none, FeatureName::Bar), none);
}
