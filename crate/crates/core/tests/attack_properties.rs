mod common;

use common::*;
use hesslens::attacks::{
    adversarial_dataset, attack_batch, attack_sample, cg_solve, newton_direction, AttackKind, AttackSpec, CgParams,
};
use hesslens::data::{synth_blobs, BlobSpec, Provenance};
use hesslens::nn::{softmax_ce_grad, softmax_ce_hessian, softmax_ce_loss, Model, ModelConfig, ParamVector};
use hesslens::training::{sgd_train, MetricsConfig, TrainConfig};
use hesslens::{Rng, Tensor};
use proptest::prelude::*;

fn kind_strategy() -> impl Strategy<Value = AttackKind> {
    prop::sample::select(AttackKind::ALL.to_vec())
}

fn tiny() -> Model {
    Model::new(ModelConfig::mlp("tiny", [1, 3, 3], &[6], 3)).unwrap()
}

fn trained_toy() -> (Model, ParamVector, hesslens::data::Dataset) {
    let ds = synth_blobs(&BlobSpec::new(70, 3, [1, 4, 4], 1.0, 21)).unwrap();
    let mut model = Model::new(ModelConfig::mlp("toy", [1, 4, 4], &[12], 3)).unwrap();
    let config = TrainConfig {
        batch_size: 21,
        lr: 0.05,
        max_epochs: 15,
        seed: 4,
        metrics: MetricsConfig { spectrum_every: 0, grad_norm: false, ..Default::default() },
        ..Default::default()
    };
    let out = sgd_train(&mut model, &ds, None, &config).unwrap();
    (model, out.state.theta, ds)
}

fn logistic_loss(theta: &ParamVector, x: &[f64], y: usize, c: usize) -> f64 {
    softmax_ce_loss(&logistic_logits(theta, x, c), y).unwrap()
}

fn interior(rng: &mut Rng, d: usize) -> Tensor {
    Tensor::new(vec![1, 1, d], (0..d).map(|_| 0.2 + 0.6 * rng.uniform()).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn outputs_respect_norm_bound_and_domain(seed in any::<u64>(), kind in kind_strategy(), eps in 0.0f64..3.0) {
        let model = tiny();
        let mut rng = Rng::new(seed);
        let theta = model.init_params(&mut rng);
        let x = uniform_input(&mut rng, [1, 3, 3], 4);
        let y = [0, 1, 2, 1];
        let spec = AttackSpec::new(kind, eps);
        let batch = attack_batch(&model, &theta, &x, &y, &spec).unwrap();
        prop_assert!(batch.pre_clamp_max_norm <= eps);
        prop_assert!(batch.inputs.data().iter().all(|v| (0.0..=1.0).contains(v)));
        for i in 0..4 {
            let xi = x.slice_leading(i, i + 1).reshape(&[1, 3, 3]).unwrap();
            let out = attack_sample(&model, &theta, &xi, y[i], &spec).unwrap();
            prop_assert!(out.pre_clamp_norm <= eps);
            prop_assert!(out.x.data().iter().all(|v| (0.0..=1.0).contains(v)));
            // Clamping only moves points towards the clean input.
            let delta: Vec<f64> = out.x.data().iter().zip(xi.data()).map(|(a, b)| a - b).collect();
            let size = match kind.norm() {
                hesslens::attacks::Norm::Linf => delta.iter().fold(0.0f64, |a, v| a.max(v.abs())),
                hesslens::attacks::Norm::L2 => norm(&delta),
            };
            prop_assert!(size <= eps * (1.0 + 1e-12) + 1e-15);
        }
    }

    #[test]
    fn heavy_damping_gives_scaled_gradient(seed in any::<u64>(), n in 2usize..30) {
        let mut rng = Rng::new(seed);
        let b: Vec<f64> = (0..n * n).map(|_| rng.normal()).collect();
        // A = BᵀB is PSD.
        let a: Vec<f64> = (0..n * n)
            .map(|k| (0..n).map(|r| b[r * n + k / n] * b[r * n + k % n]).sum())
            .collect();
        let g = rng.normal_vec(n);
        let mu = 1e10;
        let out = cg_solve(
            |v| Ok((0..n).map(|i| (0..n).map(|j| a[i * n + j] * v[j]).sum()).collect()),
            &g,
            mu,
            1e-12,
            200,
        )
        .unwrap();
        let want: Vec<f64> = g.iter().map(|v| v / mu).collect();
        prop_assert!(rel_err(&out.z, &want) <= 1e-8);
    }
}

#[test]
fn fgsm_never_lowers_logistic_loss_at_small_budgets() {
    let model = logistic([1, 1, 6], 4);
    let mut rng = Rng::new(22);
    for _ in 0..100 {
        let theta = model.init_params(&mut rng);
        let x = interior(&mut rng, 6);
        let y = rng.below(4);
        let before = logistic_loss(&theta, x.data(), y, 4);
        for eps in [1e-6, 1e-5, 1e-4, 1e-3] {
            let out = attack_sample(&model, &theta, &x, y, &AttackSpec::new(AttackKind::Fgsm, eps)).unwrap();
            assert!(logistic_loss(&theta, out.x.data(), y, 4) >= before, "ε = {eps}");
        }
    }
}

#[test]
fn iterated_fgsm_is_at_least_as_strong_on_most_samples() {
    let (model, theta, ds) = trained_toy();
    let n = 200;
    let (x, y) = ds.batch(&(0..n).collect::<Vec<_>>());
    let one = attack_batch(&model, &theta, &x, &y, &AttackSpec::new(AttackKind::Fgsm, 0.1)).unwrap();
    let ten = attack_batch(&model, &theta, &x, &y, &AttackSpec::new(AttackKind::Fgsm10, 0.1)).unwrap();
    let (l1, _) = model.input_grad(&theta, &one.inputs, &y).unwrap();
    let (l10, _) = model.input_grad(&theta, &ten.inputs, &y).unwrap();
    let wins = l1.iter().zip(&l10).filter(|(a, b)| **b >= **a - 1e-9).count();
    assert!(wins as f64 >= 0.8 * n as f64, "{wins} of {n}");
}

#[test]
fn l2grad_gain_follows_second_order_taylor() {
    let c = 4;
    let d = 6;
    let model = logistic([1, 1, d], c);
    let mut rng = Rng::new(23);
    for _ in 0..50 {
        let theta = model.init_params(&mut rng);
        let x = interior(&mut rng, d);
        let y = rng.below(c);
        let s = logistic_logits(&theta, x.data(), c);
        // g = W (p − e_y), H = W H_s Wᵀ.
        let gs = softmax_ce_grad(&s, y).unwrap();
        let g: Vec<f64> = (0..d).map(|i| (0..c).map(|j| theta.0[i * c + j] * gs[j]).sum()).collect();
        let h = logistic_input_hessian(&theta, softmax_ce_hessian(&s).data(), d, c);
        let gn = norm(&g);
        let gh: Vec<f64> = g.iter().map(|v| v / gn).collect();
        let curv: f64 = (0..d).map(|a| (0..d).map(|b| gh[a] * h[a * d + b] * gh[b]).sum::<f64>()).sum();
        let eps = 0.02;
        let out = attack_sample(&model, &theta, &x, y, &AttackSpec::new(AttackKind::L2grad, eps)).unwrap();
        let gain = logistic_loss(&theta, out.x.data(), y, c) - logistic_loss(&theta, x.data(), y, c);
        let want = eps * gn + 0.5 * eps * eps * curv;
        assert!((gain - want).abs() <= 0.05 * want, "{gain} vs {want}");
    }
}

#[test]
fn heavy_damping_turns_newton_attacks_into_gradient_attacks() {
    let (model, theta, ds) = trained_toy();
    let cg = CgParams::fixed(1e9);
    for i in 0..20 {
        let (x, y) = ds.sample(i);
        let x = Tensor::new(vec![1, 4, 4], x.data().iter().map(|v| 0.25 + 0.5 * v).collect()).unwrap();
        for (newton, plain) in [(AttackKind::Fhsm, AttackKind::Fgsm), (AttackKind::L2hess, AttackKind::L2grad)] {
            let eps = 0.01;
            let a = attack_sample(&model, &theta, &x, y, &AttackSpec { cg, ..AttackSpec::new(newton, eps) }).unwrap();
            let b = attack_sample(&model, &theta, &x, y, &AttackSpec::new(plain, eps)).unwrap();
            let da: Vec<f64> = a.x.data().iter().zip(x.data()).map(|(p, q)| p - q).collect();
            let db: Vec<f64> = b.x.data().iter().zip(x.data()).map(|(p, q)| p - q).collect();
            let cos = dot(&da, &db) / (norm(&da) * norm(&db));
            assert!(1.0 - cos <= 1e-6, "{} vs {}: {cos}", newton.name(), plain.name());
        }
    }
}

#[test]
fn newton_solves_never_report_negative_curvature() {
    let model = Model::new(small_conv(4)).unwrap();
    let mut rng = Rng::new(24);
    for _ in 0..40 {
        let theta = model.init_params(&mut rng);
        let x = uniform_input(&mut rng, [1, 6, 6], 1).reshape(&[1, 6, 6]).unwrap();
        let y = rng.below(4);
        newton_direction(&model, &theta, &x, y, &CgParams::default()).unwrap();
    }
}

#[test]
fn adversarial_dataset_keeps_labels_and_records_provenance() {
    let (model, theta, ds) = trained_toy();
    let spec = AttackSpec::new(AttackKind::Fgsm, 0.1);
    let (adv, r) = adversarial_dataset(&model, &theta, &ds, &spec, "abc123", 9).unwrap();
    assert_eq!(adv.labels, ds.labels);
    assert_eq!(adv.inputs.shape(), ds.inputs.shape());
    assert_ne!(adv.inputs, ds.inputs);
    match &adv.provenance {
        Provenance::Adversarial(m) => {
            assert_eq!((m.attack.as_str(), m.epsilon, m.seed), ("fgsm", 0.1, 9));
            assert_eq!(m.source_checkpoint, "abc123");
            assert_eq!(m.pre_clamp_max_norm, r.pre_clamp_max_norm);
        }
        other => panic!("unexpected provenance {other:?}"),
    }
    let (_, acc_clean) = model.evaluate(&theta, &ds.inputs, &ds.labels).unwrap();
    let (_, acc_adv) = model.evaluate(&theta, &adv.inputs, &adv.labels).unwrap();
    assert!(acc_adv < acc_clean);
}
