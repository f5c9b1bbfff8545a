mod common;

use common::*;
use pouf_core::data::{generate_synthetic, SyntheticSpec};
use pouf_core::losses::mi_loss;
use pouf_core::model::{predict_raw, ModelParams, TuningMode};
use pouf_core::trainer::*;
use pouf_core::{Error, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_benchmark(seed: u64) -> (Tensor, Tensor, Vec<usize>) {
    let data =
        generate_synthetic(&SyntheticSpec { classes: 4, dim: 8, samples: 120, seed, ..Default::default() }).unwrap();
    (data.features, data.prototypes, data.labels)
}

fn quick(cfg: TrainConfig) -> TrainConfig {
    TrainConfig { iterations: 40, batch_size: 32, ..cfg }
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|x| x.to_bits()).collect()
}

#[test]
fn zero_iterations_return_initial_params() {
    let (f, w, _) = small_benchmark(0);
    let cfg = TrainConfig { iterations: 0, ..Default::default() };
    let (p, report) = train(&f, &w, &cfg, None).unwrap();
    assert_eq!(p, ModelParams::init(8, 4, cfg.temperature_init).unwrap());
    assert!(report.records.is_empty());
}

#[test]
fn zero_objective_is_a_bitwise_no_op() {
    let (f, w, _) = small_benchmark(1);
    let cfg = quick(TrainConfig { transport_kind: TransportKind::None, lambda_mi: 0.0, ..Default::default() });
    let (p, _) = train(&f, &w, &cfg, None).unwrap();
    let init = ModelParams::init(8, 4, cfg.temperature_init).unwrap();
    assert_eq!(bits(&p.adapter), bits(&init.adapter));
    assert_eq!(bits(&p.proto_offsets), bits(&init.proto_offsets));
    assert_eq!(p.log_temperature.to_bits(), init.log_temperature.to_bits());

    let tent = quick(TrainConfig { method: Method::Tent, entropy_only_weight: 0.0, ..Default::default() });
    assert_eq!(train(&f, &w, &tent, None).unwrap().0, init);
}

#[test]
fn prompt_tuning_leaves_adapter_untouched() {
    let (f, w, _) = small_benchmark(2);
    for method in [Method::Pouf, Method::Tent, Method::Upl] {
        let cfg =
            quick(TrainConfig { method, tuning_mode: TuningMode::PromptTuning, upl_topk: 4, ..Default::default() });
        let (p, _) = train(&f, &w, &cfg, None).unwrap();
        assert_eq!(bits(&p.adapter), bits(&Tensor::identity(8)), "{method:?}");
        assert!(p.proto_offsets.data().iter().any(|&x| x != 0.0), "{method:?}");
    }
    let cfg = quick(TrainConfig::default());
    let (p, _) = train(&f, &w, &cfg, None).unwrap();
    assert_ne!(p.adapter, Tensor::identity(8));
}

#[test]
fn runs_are_deterministic_per_seed() {
    let (f, w, y) = small_benchmark(3);
    for kind in [TransportKind::Ct, TransportKind::OtSinkhorn, TransportKind::OtExact] {
        let cfg = quick(TrainConfig {
            transport_kind: kind,
            prior_mode: PriorMode::Learned,
            eval_every: 10,
            ..Default::default()
        });
        let (p1, r1) = train(&f, &w, &cfg, Some(&y)).unwrap();
        let (p2, r2) = train(&f, &w, &cfg, Some(&y)).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(serde_json::to_string(&r1).unwrap(), serde_json::to_string(&r2).unwrap());
        let other = TrainConfig { seed: 1, ..cfg };
        assert_ne!(train(&f, &w, &other, None).unwrap().0, p1);
    }
}

#[test]
fn recorded_loss_decomposes() {
    let (f, w, _) = small_benchmark(4);
    let variants = [
        TrainConfig::default(),
        TrainConfig { transport_kind: TransportKind::OtSinkhorn, ..Default::default() },
        TrainConfig {
            transport_kind: TransportKind::OtExact,
            lambda_mi: 0.7,
            transport_weight: 0.5,
            ..Default::default()
        },
        TrainConfig { transport_kind: TransportKind::None, ..Default::default() },
        TrainConfig { lambda_mi: 0.0, ..Default::default() },
    ];
    for cfg in variants {
        let cfg = quick(cfg);
        let (tw, lambda, _) = cfg.effective_weights();
        let (_, report) = train(&f, &w, &cfg, None).unwrap();
        for r in &report.records {
            let expect = tw * r.loss_transport + lambda * r.loss_mi;
            assert!((r.loss_total - expect).abs() <= 1e-12, "{:?}: {} vs {expect}", cfg.transport_kind, r.loss_total);
        }
    }
    let tent = quick(TrainConfig { method: Method::Tent, ..Default::default() });
    let (_, report) = train(&f, &w, &tent, None).unwrap();
    for r in &report.records {
        assert!((r.loss_total - 0.3 * r.loss_entropy).abs() <= 1e-12);
    }
}

#[test]
fn lr_follows_schedule() {
    let (f, w, _) = small_benchmark(5);
    let cfg = quick(TrainConfig { gamma: 0.1, ..Default::default() });
    let (_, report) = train(&f, &w, &cfg, None).unwrap();
    for r in &report.records {
        let expect = cfg.eta0 * (1.0 + 0.1 * r.iter as f64).powf(-0.75);
        assert!((r.lr - expect).abs() <= 1e-15 * expect);
    }
}

/// All samples start out predicted as class 0: the worst case for the
/// marginal-entropy term. Some small step must lower the MI loss.
#[test]
fn first_step_lowers_mi_from_collapsed_start() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (m, k, d) = (24, 3, 6);
    let f = normal_tensor(&mut rng, m, d, 1.0);
    let w = normal_tensor(&mut rng, k, d, 1.0);
    let mut init = ModelParams::init(d, k, 0.1).unwrap();
    // Pull prototype 0 onto the batch mean so it wins nearly everywhere.
    for j in 0..d {
        let mean = (0..m).map(|i| f.at(i, j)).sum::<f64>() / m as f64;
        init.proto_offsets.set(0, j, 5.0 * mean - w.at(0, j));
    }
    let ids: Vec<usize> = (0..m).collect();
    let before = mi_loss(&predict_raw(&f, &w, &init).unwrap()).unwrap().total;
    let mut decreased = None;
    for e in 1..=8 {
        let lr = 10f64.powi(-e);
        let cfg = TrainConfig { transport_kind: TransportKind::None, lambda_mi: 1.0, eta0: lr, ..Default::default() };
        let ctx = StepContext { raw_prototypes: &w, config: &cfg };
        let mut state = StepState::new(init.clone(), &cfg);
        pouf_step(&f, &ids, &ctx, &mut state, None).unwrap();
        let after = mi_loss(&predict_raw(&f, &w, &state.params).unwrap()).unwrap().total;
        if after < before {
            decreased = Some(lr);
            break;
        }
    }
    assert!(decreased.is_some(), "no step size lowered the MI loss from {before}");
}

#[test]
fn one_small_step_descends_on_separable_toy() {
    let f = Tensor::from_rows(&[vec![1.0, 0.1], vec![0.9, -0.2], vec![-0.1, 1.0], vec![0.2, 0.8]]).unwrap();
    let w = Tensor::from_rows(&[vec![1.0, 0.3], vec![0.3, 1.0]]).unwrap();
    let cfg = TrainConfig { eta0: 1e-3, temperature_init: 0.1, ..Default::default() };
    let ctx = StepContext { raw_prototypes: &w, config: &cfg };
    let mut state = StepState::new(ModelParams::init(2, 2, 0.1).unwrap(), &cfg);
    let ids = [0, 1, 2, 3];
    let first = pouf_step(&f, &ids, &ctx, &mut state, None).unwrap().loss_total;
    let second = pouf_step(&f, &ids, &ctx, &mut state, None).unwrap().loss_total;
    assert!(second < first, "{second} !< {first}");
}

#[test]
fn small_dataset_wraps_around() {
    let (f, w, _) = small_benchmark(7);
    let tiny = f.select_rows(&[0, 1, 2, 3, 4]);
    let cfg = TrainConfig { iterations: 5, batch_size: 96, ..Default::default() };
    let (_, report) = train(&tiny, &w, &cfg, None).unwrap();
    assert_eq!(report.records.len(), 5);
}

#[test]
fn ot_exact_beyond_cap_is_an_error() {
    let (f, w, _) = small_benchmark(8);
    let cfg =
        TrainConfig { transport_kind: TransportKind::OtExact, batch_size: 65, iterations: 1, ..Default::default() };
    assert!(matches!(train(&f, &w, &cfg, None), Err(Error::Invalid(_))));
}

#[test]
fn blow_up_reports_batch_ids() {
    let (f, w, _) = small_benchmark(9);
    let cfg = TrainConfig { eta0: 1e250, momentum: 0.0, iterations: 50, batch_size: 8, ..Default::default() };
    match train(&f, &w, &cfg, None) {
        Err(Error::Diverged { batch_ids, .. }) => assert_eq!(batch_ids.len(), 8),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn best_eval_selection_uses_labels_only_for_choice() {
    let (f, w, y) = small_benchmark(10);
    let base = quick(TrainConfig { eval_every: 5, ..Default::default() });
    let best = TrainConfig { model_selection: ModelSelection::BestEval, ..base.clone() };
    let (_, r_final) = train(&f, &w, &base, Some(&y)).unwrap();
    let (_, r_best) = train(&f, &w, &best, Some(&y)).unwrap();
    let max_seen = r_final.records.iter().filter_map(|r| r.accuracy).fold(0.0, f64::max);
    assert_eq!(r_best.final_accuracy, Some(max_seen));
    assert_eq!(r_final.selected_iteration, 40);
    assert_eq!(
        r_final.records.iter().map(|r| r.loss_total).collect::<Vec<_>>(),
        r_best.records.iter().map(|r| r.loss_total).collect::<Vec<_>>()
    );
}

#[test]
fn learned_prior_tracks_imbalance() {
    let spec = SyntheticSpec {
        classes: 3,
        dim: 16,
        samples: 1500,
        class_proportions: Some(vec![0.6, 0.3, 0.1]),
        rotation_angle_scale: 0.0,
        bias_scale: 0.0,
        ..Default::default()
    };
    let data = generate_synthetic(&spec).unwrap();
    let cfg = TrainConfig { prior_mode: PriorMode::Learned, lambda_mi: 0.1, iterations: 200, ..Default::default() };
    let (_, report) = train(&data.features, &data.prototypes, &cfg, None).unwrap();
    let p = &report.final_prior;
    assert!(p[0] > p[1] && p[1] > p[2], "{p:?}");
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

fn sort_oracle(probs: &[Vec<f64>], topk: usize) -> Vec<(usize, usize)> {
    let k = probs[0].len();
    let argmax = |r: &Vec<f64>| (0..k).fold(0, |b, j| if r[j] > r[b] { j } else { b });
    let mut out = Vec::new();
    for c in 0..k {
        let mut cand: Vec<usize> = (0..probs.len()).filter(|&i| argmax(&probs[i]) == c).collect();
        // Stable sort keeps ascending index among equal confidences.
        cand.sort_by(|&a, &b| probs[b][c].partial_cmp(&probs[a][c]).unwrap());
        out.extend(cand.into_iter().take(topk).map(|i| (i, c)));
    }
    out
}

#[test]
fn pseudo_labels_match_sort_oracle() {
    let rows = vec![vec![0.9, 0.1], vec![0.6, 0.4], vec![0.2, 0.8], vec![0.45, 0.55], vec![0.9, 0.1], vec![0.05, 0.95]];
    let probs = Tensor::from_rows(&rows).unwrap();
    let got = upl_pseudo_label(&probs, 2).unwrap();
    let pairs: Vec<(usize, usize)> = got.indices.iter().copied().zip(got.labels.iter().copied()).collect();
    assert_eq!(pairs, sort_oracle(&rows, 2));
    assert_eq!(pairs, vec![(0, 0), (4, 0), (5, 1), (2, 1)]);
    assert!(got.short_classes.is_empty());

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..200 {
        let p = random_probs(&mut rng, 12, 3, 2.0);
        let got = upl_pseudo_label(&p, 3).unwrap();
        let pairs: Vec<(usize, usize)> = got.indices.iter().copied().zip(got.labels.iter().copied()).collect();
        assert_eq!(pairs, sort_oracle(&rows_of(&p), 3));
    }
}

#[test]
fn pseudo_label_edge_cases() {
    let onehot = Tensor::from_rows(&[vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
    let got = upl_pseudo_label(&onehot, 1).unwrap();
    assert_eq!(got.indices, vec![1, 0]);
    assert_eq!(got.labels, vec![0, 1]);
    assert_eq!(got.short_classes, vec![2]);

    let single = Tensor::from_rows(&[vec![1.0], vec![1.0], vec![1.0]]).unwrap();
    assert_eq!(upl_pseudo_label(&single, 2).unwrap().indices, vec![0, 1]);
    assert!(upl_pseudo_label(&single, 0).is_err());
    let cfg = TrainConfig { method: Method::Upl, upl_topk: 0, ..Default::default() };
    assert!(cfg.validate().is_err());
}

#[test]
fn upl_on_separated_data_does_not_hurt() {
    let spec = SyntheticSpec {
        classes: 4,
        dim: 16,
        samples: 400,
        cluster_spread: 0.05,
        rotation_angle_scale: 0.3,
        bias_scale: 0.1,
        ..Default::default()
    };
    let data = generate_synthetic(&spec).unwrap();
    let init = ModelParams::init(16, 4, 0.01).unwrap();
    let zero = predict_raw(&data.features, &data.prototypes, &init).unwrap();
    let pseudo = upl_pseudo_label(&zero, 16).unwrap();
    assert!(pseudo.indices.iter().zip(&pseudo.labels).all(|(&i, &c)| data.labels[i] == c));
    let cfg = TrainConfig { iterations: 100, eta0: 0.05, temperature_init: 0.1, ..Default::default() };
    let (p, report) = upl_train(&data.features, &data.prototypes, &cfg, Some(&data.labels)).unwrap();
    assert!(report.final_accuracy.unwrap() >= report.initial_accuracy.unwrap());
    assert_eq!(p.adapter, Tensor::identity(16));
    assert_eq!(report.method, Method::Upl);
}
