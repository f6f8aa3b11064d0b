use dex_core::backbone::NetworkConfig;
use dex_core::nn::{ParamId, ParamStore};
use dex_core::synth::ModalityMixture;
use dex_core::tensor::Tensor;
use dex_core::train::*;
use dex_core::DexError;
use proptest::prelude::*;

fn net(experts: usize, k: usize) -> NetworkConfig {
    NetworkConfig {
        image_size: 16,
        patch_size: 4,
        channels: 1,
        embed_dim: 8,
        depth: 2,
        heads: 2,
        num_experts: experts,
        top_k: k,
        decoder_dim: 8,
        decoder_depth: 1,
        decoder_heads: 2,
        mask_ratio: 0.75,
    }
}

fn train_cfg(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 8,
        base_lr: 3e-3,
        ..TrainConfig::default()
    }
}

fn mixture() -> ModalityMixture {
    ModalityMixture {
        image_size: 16,
        ..ModalityMixture::default()
    }
}

fn trainer(experts: usize, k: usize, cfg: TrainConfig) -> Trainer<f64> {
    Trainer::new(net(experts, k), cfg, mixture()).unwrap()
}

fn values(store: &ParamStore<f64>) -> Vec<f64> {
    store.iter().flat_map(|(_, p)| p.value.data().to_vec()).collect()
}

#[test]
fn first_adamw_step_matches_hand_computation() {
    let mut store = ParamStore::new();
    store.add("w", Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap(), true);
    store.add("frozen", Tensor::from_vec(&[1], vec![4.0]).unwrap(), false);
    let mut opt = AdamW::new(&store);
    let g = [0.3, -0.01, 0.0];
    let grads = [Tensor::from_vec(&[3], g.to_vec()).unwrap(), Tensor::from_vec(&[1], vec![9.0]).unwrap()];
    let (lr, wd) = (0.01, 0.1);
    opt.step(&mut store, &grads, lr, wd).unwrap();
    // after one step the bias-corrected moments are g and g²
    let want: Vec<f64> = [1.0, -2.0, 0.5]
        .iter()
        .zip(g)
        .map(|(&x, g): (&f64, f64)| x * (1.0 - lr * wd) - lr * g / (g.abs() + ADAM_EPS))
        .collect();
    let got = store.get(ParamId::from_index(0)).data();
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() < 1e-15, "{a} vs {b}");
    }
    assert_eq!(store.get(ParamId::from_index(1)).data(), &[4.0]);
    assert!(opt.moments[1].is_none());
}

#[test]
fn adamw_rejects_mismatched_gradients() {
    let mut store = ParamStore::new();
    store.add("w", Tensor::<f64>::zeros(&[2]), true);
    let mut opt = AdamW::new(&store);
    assert!(opt.step(&mut store, &[], 0.1, 0.0).is_err());
    assert!(opt.step(&mut store, &[Tensor::zeros(&[3])], 0.1, 0.0).is_err());
}

#[test]
fn trainer_rejects_mismatched_image_size() {
    let err = Trainer::<f64>::new(net(4, 2), train_cfg(10), ModalityMixture::default()).unwrap_err();
    assert!(matches!(err, DexError::Config(_)));
    let bad = TrainConfig {
        m_init: 1.0,
        m_final: 0.5,
        ..train_cfg(10)
    };
    assert!(Trainer::<f64>::new(net(4, 2), bad, mixture()).is_err());
}

#[test]
fn single_expert_model_learns() {
    let mut t = trainer(1, 1, train_cfg(40));
    let images = t.next_batch().unwrap();
    let mut first = None;
    let mut last = 0.0;
    while !t.is_done() {
        let m = t.train_step(&images).unwrap();
        // one expert, one slot: balance is exactly 1
        for b in &m.loss_bal_per_layer {
            assert!((b - 1.0).abs() < 1e-12);
        }
        first.get_or_insert(m.loss_self);
        last = m.loss_self;
    }
    assert!(last < 0.8 * first.unwrap(), "{} -> {}", first.unwrap(), last);
}

#[test]
fn full_momentum_freezes_the_director() {
    let cfg = TrainConfig {
        m_init: 1.0,
        m_final: 1.0,
        ..train_cfg(5)
    };
    let mut t = trainer(4, 2, cfg);
    let ids = t.model.director_params();
    let before: Vec<Tensor<f64>> = ids.iter().map(|&id| t.model.params.get(id).clone()).collect();
    let trainable_before = values(&t.model.params);
    while !t.is_done() {
        t.step_sampled().unwrap();
    }
    for (id, b) in ids.iter().zip(&before) {
        assert_eq!(t.model.params.get(*id), b);
    }
    assert_ne!(values(&t.model.params), trainable_before);
}

#[test]
fn director_moves_toward_experts_below_full_momentum() {
    let mut t = trainer(4, 2, train_cfg(5));
    let id = t.model.director_params()[0];
    let before = t.model.params.get(id).clone();
    for _ in 0..3 {
        t.step_sampled().unwrap();
    }
    assert_ne!(t.model.params.get(id), &before);
    for id in t.model.director_params() {
        assert!(t.optimizer.moments[id.index()].is_none());
    }
}

#[test]
fn runs_are_deterministic() {
    let run = || {
        let mut t = trainer(4, 2, train_cfg(6));
        let mut log = Vec::new();
        while !t.is_done() {
            log.push(t.step_sampled().unwrap());
        }
        (log, values(&t.model.params))
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
}

#[test]
fn resuming_from_parts_matches_an_uninterrupted_run() {
    let cfg = train_cfg(6);
    let mut straight = trainer(4, 2, cfg.clone());
    for _ in 0..6 {
        straight.step_sampled().unwrap();
    }
    let mut first = trainer(4, 2, cfg.clone());
    for _ in 0..3 {
        first.step_sampled().unwrap();
    }
    let (rng, data) = first.rng_states();
    let mut resumed = Trainer::from_parts(
        first.model.clone(),
        first.optimizer.clone(),
        cfg,
        mixture(),
        first.step,
        rng,
        data,
    )
    .unwrap();
    for _ in 0..3 {
        resumed.step_sampled().unwrap();
    }
    assert_eq!(values(&resumed.model.params), values(&straight.model.params));
    assert_eq!(resumed.model.blocks[0].gate.freq, straight.model.blocks[0].gate.freq);
}

#[test]
fn alignment_weight_does_not_change_the_first_forward() {
    let with = |lambda_co| {
        let mut t = trainer(4, 2, TrainConfig { lambda_co, ..train_cfg(4) });
        t.step_sampled().unwrap()
    };
    let (a, b) = (with(0.0), with(0.5));
    assert_eq!(a.loss_self, b.loss_self);
    assert_eq!(a.loss_co_per_layer, b.loss_co_per_layer);
    assert_ne!(a.loss_total, b.loss_total);
}

#[test]
fn director_trajectory_ignores_loss_weights_when_encoder_is_frozen() {
    let run = |lambda_co, lambda_bal| {
        let cfg = TrainConfig {
            lambda_co,
            lambda_bal_fixed: Some(lambda_bal),
            ..train_cfg(6)
        };
        let mut t = trainer(4, 2, cfg);
        let encoder: Vec<ParamId> = t
            .model
            .params
            .iter()
            .filter(|(_, p)| !p.name.starts_with("decoder"))
            .map(|(id, _)| id)
            .collect();
        for id in encoder {
            t.model.params.set_trainable(id, false);
        }
        t.optimizer = AdamW::new(&t.model.params);
        let mut totals = Vec::new();
        while !t.is_done() {
            totals.push(t.step_sampled().unwrap().loss_total);
        }
        let director: Vec<Tensor<f64>> = t
            .model
            .director_params()
            .iter()
            .map(|&id| t.model.params.get(id).clone())
            .collect();
        (director, totals)
    };
    let (a, ta) = run(0.0, 0.0);
    let (b, tb) = run(0.5, 0.05);
    assert_eq!(a, b);
    assert_ne!(ta, tb);
}

#[test]
fn metrics_follow_the_schedules() {
    let cfg = train_cfg(8);
    let mut t = trainer(4, 2, cfg.clone());
    for step in 0..8 {
        let m = t.step_sampled().unwrap();
        let s = schedules(step, &cfg);
        assert_eq!(m.step, step);
        assert_eq!((m.lr, m.m, m.sigma, m.lambda_bal), (s.lr, s.momentum, s.sigma, s.lambda_bal));
        assert_eq!(m.loss_co_per_layer.len(), 2);
    }
    assert!(t.is_done());
}

#[test]
fn non_finite_input_aborts_before_any_update() {
    let mut t = trainer(4, 2, train_cfg(4));
    let mut images = t.next_batch().unwrap();
    images.data_mut()[0] = f64::NAN;
    let before = values(&t.model.params);
    let err = t.train_step(&images).unwrap_err();
    assert!(matches!(err, DexError::NonFiniteLoss { step: 0, .. }));
    assert_eq!(t.step, 0);
    assert_eq!(t.optimizer.steps, 0);
    let after = values(&t.model.params);
    assert!(before.iter().zip(&after).all(|(a, b)| a == b));
}

#[test]
fn single_precision_runs() {
    let cfg = TrainConfig {
        precision: dex_core::Precision::F32,
        ..train_cfg(3)
    };
    let mut t = Trainer::<f32>::new(net(4, 2), cfg, mixture()).unwrap();
    while !t.is_done() {
        assert!(t.step_sampled().unwrap().loss_total.is_finite());
    }
}

proptest! {
    #[test]
    fn schedule_invariants(steps in 1usize..3000, warm in 0.01f64..0.9, m0 in 0.0f64..1.0) {
        let cfg = TrainConfig { steps, warmup_fraction: warm, m_init: m0, ..TrainConfig::default() };
        let mut prev_m = f64::NEG_INFINITY;
        let mut prev_sigma = f64::INFINITY;
        let stride = (steps / 200).max(1);
        for t in (0..=steps).step_by(stride) {
            let s = schedules(t, &cfg);
            prop_assert!(s.lr >= 0.0 && s.lr <= cfg.base_lr * (1.0 + 1e-12));
            prop_assert!(s.momentum >= prev_m && s.momentum <= 1.0 && s.momentum >= m0 - 1e-15);
            prop_assert!(s.sigma <= prev_sigma && s.sigma >= 0.0);
            prop_assert!(s.lambda_bal >= 0.0 && s.lambda_bal <= cfg.lambda_bal_init);
            prev_m = s.momentum;
            prev_sigma = s.sigma;
        }
        let w = cfg.warmup_steps();
        prop_assert!(w >= 1);
        if w <= steps {
            prop_assert!((schedules(w - 1, &cfg).lr - cfg.base_lr).abs() < 1e-15);
        }
    }
}
