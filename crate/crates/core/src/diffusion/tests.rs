use super::*;
use crate::nn::Module;
use crate::numerics::{Rng, Tensor, TensorError};

fn small_cfg() -> DitConfig {
    DitConfig { dim: 16, heads: 2, layers: 3, target_layers: vec![1], lora_rank: 4, ..DitConfig::default() }
}

#[test]
fn dataset_is_deterministic_and_ranged() {
    for kind in [DatasetKind::Shapes, DatasetKind::Gaussians] {
        let a = make_dataset(kind, 40, 4, 1, 16, 16, 3).unwrap();
        let b = make_dataset(kind, 40, 4, 1, 16, 16, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.images.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(a.labels[..5], [0, 1, 2, 3, 0]);
        let c = make_dataset(kind, 40, 4, 1, 16, 16, 4).unwrap();
        assert_ne!(a.images, c.images);
    }
}

#[test]
fn class_means_differ_and_regenerate() {
    let data = make_dataset(DatasetKind::Shapes, 80, 8, 1, 16, 16, 1).unwrap();
    let means = data.class_means();
    for i in 0..8 {
        for j in i + 1..8 {
            let d: f64 = means[i].iter().zip(&means[j]).map(|(a, b)| (a - b).powi(2)).sum();
            assert!(d > 1.0, "classes {i} and {j}");
        }
    }
    // Each image depends only on its index: a longer set starts with the same images.
    let longer = make_dataset(DatasetKind::Shapes, 160, 8, 1, 16, 16, 1).unwrap();
    assert_eq!(&longer.images[..data.images.len()], &data.images[..]);
    let oracle: Vec<Vec<f64>> = (0..8)
        .map(|k| {
            let rows: Vec<&[f64]> = (0..80).filter(|i| i % 8 == k).map(|i| longer.image(i)).collect();
            (0..256).map(|p| rows.iter().map(|r| r[p]).sum::<f64>() / rows.len() as f64).collect()
        })
        .collect();
    assert_eq!(oracle, means);
}

#[test]
fn dataset_validation() {
    assert!(matches!(make_dataset(DatasetKind::Shapes, 4, 1, 1, 16, 16, 0), Err(TensorError::Config(_))));
    assert!(make_dataset(DatasetKind::Shapes, 4, 9, 1, 16, 16, 0).is_err());
    assert!(make_dataset(DatasetKind::Gaussians, 4, 12, 1, 16, 16, 0).is_ok());
    assert!(make_dataset(DatasetKind::Shapes, 4, 2, 1, 4, 16, 0).is_err());
    assert!("circles".parse::<DatasetKind>().is_err());
    assert_eq!("gaussians".parse::<DatasetKind>().unwrap().to_string(), "gaussians");
}

#[test]
fn patchify_layout_and_round_trip() {
    let img: Vec<f64> = (0..16).map(f64::from).collect();
    let p = patchify(&img, 1, 1, 4, 4, 2);
    assert_eq!(p, vec![0., 1., 4., 5., 2., 3., 6., 7., 8., 9., 12., 13., 10., 11., 14., 15.]);
    let mut rng = Rng::new(0);
    let x = rng.normals(2 * 3 * 8 * 8, 1.0);
    assert_eq!(unpatchify(&patchify(&x, 2, 3, 8, 8, 4), 2, 3, 8, 8, 4), x);
}

#[test]
fn schedule_is_monotone() {
    let s = DiffusionSchedule::linear(100).unwrap();
    assert_eq!(s.alpha_bar(0), 1.0);
    assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
    assert!(s.alpha_bar(100) < 1e-3);
    assert!(DiffusionSchedule::linear(1).is_err());
    let long = DiffusionSchedule::linear(1000).unwrap();
    assert!((long.betas[1] - 1e-4).abs() < 1e-15 && (long.betas[1000] - 0.02).abs() < 1e-15);
}

#[test]
fn noising_limits() {
    let x0 = vec![0.3, -0.7, 1.0];
    let eps = vec![1.5, 0.2, -0.4];
    assert_eq!(schedule::noised(&x0, &eps, 1.0), x0);
    assert_eq!(schedule::noised(&x0, &eps, 0.0), eps);
    let s = DiffusionSchedule::linear(100).unwrap();
    let mut rng = Rng::new(0);
    assert!(s.add_noise(&x0, 0, &mut rng).is_err());
    assert!(s.add_noise(&x0, 101, &mut rng).is_err());
}

#[test]
fn noised_variance_matches_moments() {
    let s = DiffusionSchedule::linear(100).unwrap();
    let mut rng = Rng::new(2);
    let x0: Vec<f64> = (0..10_000).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    for t in [5, 40, 90] {
        let (xt, _) = s.add_noise(&x0, t, &mut rng).unwrap();
        let mean = xt.iter().sum::<f64>() / xt.len() as f64;
        let var = xt.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / xt.len() as f64;
        let ab = s.alpha_bar(t);
        let want = ab * 1.0 + (1.0 - ab);
        assert!((var - want).abs() / want < 0.03, "t={t}: {var} vs {want}");
    }
}

#[test]
fn last_reverse_step_with_true_noise_recovers_the_image() {
    let s = DiffusionSchedule::linear(100).unwrap();
    let x0 = vec![0.25, -0.5, 0.9];
    let eps = vec![0.1, -1.2, 0.7];
    let xt = schedule::noised(&x0, &eps, s.alpha_bar(1));
    let back = s.reverse_step(&xt, &eps, 1, &[9.0; 3]).unwrap();
    for (a, b) in back.iter().zip(&x0) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn config_validation() {
    let ok = DitConfig::default();
    assert!(ok.validate().is_ok());
    assert_eq!(ok.tokens(), 16);
    for bad in [
        DitConfig { patch: 3, ..ok.clone() },
        DitConfig { heads: 3, ..ok.clone() },
        DitConfig { dim: 30, heads: 3, ..ok.clone() },
        DitConfig { target_layers: vec![6], ..ok.clone() },
        DitConfig { lora_rank: 0, ..ok.clone() },
    ] {
        assert!(matches!(bad.validate(), Err(TensorError::Config(_))), "{bad:?}");
    }
}

#[test]
fn untrained_head_predicts_zero() {
    let cfg = small_cfg();
    let model = DitModel::init(&cfg, 0).unwrap();
    let x = Tensor::new(Rng::new(1).normals(2 * 16 * 16, 1.0), &[2, 16, 16]).unwrap();
    let out = model.forward(&x, &[3, 50], &[0, 3], &mut Routing::Greedy, &ForwardOptions::default()).unwrap();
    assert_eq!(out.eps.shape(), &[2, 16, 16]);
    assert!(out.eps.data().iter().all(|&v| v == 0.0));
    assert_eq!(out.decisions.len(), 2);
    assert!(model.forward(&x, &[3, 50], &[0, 4], &mut Routing::Greedy, &ForwardOptions::default()).is_err());
}

fn perturb(model: &mut DitModel, seed: u64, experts_too: bool) {
    let mut rng = Rng::new(seed);
    model.visit_params("", &mut |name, t| {
        if experts_too || !name.contains(".bank.") {
            let data: Vec<f64> = t.data().iter().map(|v| v + 0.05 * rng.normal()).collect();
            *t = Tensor::param(data, t.shape()).unwrap();
        }
    });
}

#[test]
fn fresh_banks_match_the_base_model_bitwise() {
    let cfg = small_cfg();
    let mut model = DitModel::init(&cfg, 0).unwrap();
    perturb(&mut model, 1, false);
    let x = Tensor::new(Rng::new(1).normals(3 * 16 * 16, 1.0), &[3, 16, 16]).unwrap();
    let on = ForwardOptions::default();
    let off = ForwardOptions { recursion: false, ..on.clone() };
    let mut rng = Rng::new(2);
    let a = model.forward(&x, &[1, 40, 99], &[0, 1, 2], &mut Routing::Sample(&mut rng), &on).unwrap();
    let b = model.forward(&x, &[1, 40, 99], &[0, 1, 2], &mut Routing::Greedy, &off).unwrap();
    assert_eq!(a.eps.to_vec(), b.eps.to_vec());

    let sched = DiffusionSchedule::linear(10).unwrap();
    let labels = [0, 1, 2, 3];
    let s_on = sample(&model, &sched, &labels, &SampleOptions::new(4)).unwrap();
    let s_off = sample(&model, &sched, &labels, &SampleOptions { recursion: false, ..SampleOptions::new(4) }).unwrap();
    assert_eq!(s_on.images, s_off.images);

    perturb(&mut model, 3, true);
    let c = model.forward(&x, &[1, 40, 99], &[0, 1, 2], &mut Routing::Greedy, &on).unwrap();
    assert_ne!(
        c.eps.to_vec(),
        model.forward(&x, &[1, 40, 99], &[0, 1, 2], &mut Routing::Greedy, &off).unwrap().eps.to_vec()
    );
}

#[test]
fn sampling_is_deterministic_and_clamped() {
    let mut model = DitModel::init(&small_cfg(), 0).unwrap();
    perturb(&mut model, 5, true);
    let sched = DiffusionSchedule::linear(10).unwrap();
    let a = sample(&model, &sched, &[0, 1], &SampleOptions::new(7)).unwrap();
    let b = sample(&model, &sched, &[0, 1], &SampleOptions::new(7)).unwrap();
    let c = sample(&model, &sched, &[0, 1], &SampleOptions::new(8)).unwrap();
    assert_eq!(a.images, b.images);
    assert_ne!(a.images, c.images);
    assert!(a.images.iter().all(|v| (-1.0..=1.0).contains(v)));
    let traced = sample(&model, &sched, &[0, 1], &SampleOptions { trace: true, ..SampleOptions::new(7) }).unwrap();
    assert_eq!(traced.images, a.images);
    assert_eq!(traced.traces.len(), 10);
    assert_eq!(traced.traces[0].diffusion_t, vec![10, 10]);
    let longer =
        sample(&model, &sched, &[0, 1], &SampleOptions { latent_steps: Some(5), ..SampleOptions::new(7) }).unwrap();
    assert_ne!(longer.images, a.images);
}

#[test]
fn training_is_deterministic_and_logs_each_step() {
    let data = make_dataset(DatasetKind::Shapes, 16, 4, 1, 16, 16, 0).unwrap();
    let sched = DiffusionSchedule::linear(20).unwrap();
    let tc = TrainConfig { steps: 4, batch_size: 2, seed: 9, ..TrainConfig::default() };
    let run = || {
        let mut model = DitModel::init(&small_cfg(), 1).unwrap();
        let mut seen = 0;
        let log = train(&mut model, &data, &sched, &tc, &mut |r, _| {
            seen += 1;
            assert_eq!(r.step, seen);
            Ok(())
        })
        .unwrap();
        (log, model.named_params().into_iter().map(|(n, t)| (n, t.to_vec())).collect::<Vec<_>>())
    };
    let (la, pa) = run();
    let (lb, pb) = run();
    assert_eq!(la, lb);
    assert_eq!(pa, pb);
    assert_eq!(la.len(), 4);
    for r in &la {
        assert_eq!(r.expert_usage.len(), 2);
        assert!((r.expert_usage.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let wrong = make_dataset(DatasetKind::Shapes, 16, 3, 1, 16, 16, 0).unwrap();
    let mut model = DitModel::init(&small_cfg(), 1).unwrap();
    assert!(train(&mut model, &wrong, &sched, &tc, &mut |_, _| Ok(())).is_err());
}

#[test]
fn frechet_of_identical_sets_is_zero() {
    let data = make_dataset(DatasetKind::Shapes, 200, 4, 1, 16, 16, 0).unwrap();
    let pca = pixel_pca(&data, 32).unwrap();
    let m = eval_metrics(&data.images, &data.labels, &data, &pca).unwrap();
    assert!(m.frechet < 1e-6, "{}", m.frechet);
    assert!(!m.regularized);
    assert!(m.class_accuracy > 0.9);
}

#[test]
fn frechet_of_a_shift_is_the_squared_feature_shift() {
    let data = make_dataset(DatasetKind::Gaussians, 200, 4, 1, 16, 16, 0).unwrap();
    let pca = pixel_pca(&data, 16).unwrap();
    let delta: Vec<f64> = (0..256).map(|i| 0.01 * ((i % 7) as f64 - 3.0)).collect();
    let shifted: Vec<f64> = data.images.iter().enumerate().map(|(i, v)| v + delta[i % 256]).collect();
    let m = eval_metrics(&shifted, &data.labels, &data, &pca).unwrap();
    let feat: f64 = pca.components.iter().map(|c| c.iter().zip(&delta).map(|(a, b)| a * b).sum::<f64>().powi(2)).sum();
    assert!((m.frechet - feat).abs() < 1e-8 * feat.max(1.0), "{} vs {feat}", m.frechet);
}

#[test]
fn frechet_closed_form_cases() {
    // 1-D: (μa−μb)² + (σa−σb)² with unbiased variances 2 and 8.
    let (d, reg) = frechet_distance(&[0.0, 2.0], &[1.0, 5.0], 1).unwrap();
    assert!(!reg);
    assert!((d - 6.0).abs() < 1e-12, "{d}");
    // Uncorrelated 2-D coordinates (diagonal covariances) add.
    let a = [1.0, 1.0, 1.0, -1.0, -1.0, 1.0, -1.0, -1.0];
    let b = [3.0, 3.0, 3.0, -3.0, -1.0, 3.0, -1.0, -3.0];
    let col = |v: &[f64], j: usize| -> Vec<f64> { v.chunks(2).map(|r| r[j]).collect() };
    let d1 = frechet_distance(&col(&a, 0), &col(&b, 0), 1).unwrap().0;
    let d2 = frechet_distance(&col(&a, 1), &col(&b, 1), 1).unwrap().0;
    let full = frechet_distance(&a, &b, 2).unwrap().0;
    // Variances 4/3 vs 16/3 and 4/3 vs 12, mean shift (1, 0).
    let s = |v: f64| v.sqrt();
    let want = 1.0 + (s(4.0 / 3.0) - s(16.0 / 3.0)).powi(2) + (s(4.0 / 3.0) - s(12.0)).powi(2);
    assert!((d1 + d2 - want).abs() < 1e-12);
    assert!((full - want).abs() < 1e-10, "{full} vs {want}");
}

#[test]
fn degenerate_covariance_is_regularized() {
    let data = make_dataset(DatasetKind::Shapes, 40, 4, 1, 16, 16, 0).unwrap();
    let pca = pixel_pca(&data, 8).unwrap();
    let means = data.class_means();
    let samples: Vec<f64> = (0..8).flat_map(|i| means[i % 4].clone()).collect();
    let labels: Vec<usize> = (0..8).map(|i| i % 4).collect();
    let m = eval_metrics(&samples, &labels, &data, &pca).unwrap();
    assert!(m.regularized);
    assert_eq!(m.class_accuracy, 1.0);
    let same: Vec<f64> = (0..8).flat_map(|_| means[0].clone()).collect();
    let m = eval_metrics(&same, &labels, &data, &pca).unwrap();
    assert_eq!(m.diversity, 0.0);
    assert!(eval_metrics(&same[..256], &[0], &data, &pca).is_err());
}

#[test]
fn fresh_banks_leave_the_training_loss_unchanged() {
    let data = make_dataset(DatasetKind::Shapes, 8, 4, 1, 16, 16, 0).unwrap();
    let sched = DiffusionSchedule::linear(20).unwrap();
    let mut model = DitModel::init(&small_cfg(), 3).unwrap();
    perturb(&mut model, 4, false);
    let mut base = model.clone();
    for layer in base.layers.iter_mut() {
        layer.recursion = None;
    }
    let eps = Rng::new(5).normals(3 * 256, 1.0);
    let (idx, ts) = ([0, 3, 5], [1, 10, 20]);
    let (with, bal, _) =
        batch_loss(&model, &data, &sched, &idx, &ts, &eps, &mut Routing::Sample(&mut Rng::new(6))).unwrap();
    let (without, none, _) = batch_loss(&base, &data, &sched, &idx, &ts, &eps, &mut Routing::Greedy).unwrap();
    assert_eq!(with.item(), without.item());
    assert!(bal.is_some() && none.is_none());
}
